use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deobstruct::evaluation::{evaluate, EvalItem, IdentityRestorer, Restorer};
use deobstruct::imaging::{
    load_dataset, read_image, read_mask, save_pair, synth_pair, write_image, write_mask, MaskKind, ObstructionKind,
    StoredPair, TransparencyClass,
};
use deobstruct::model::{ModelBundle, ModelConfig, Routing};
use deobstruct::pipeline::infer;
use deobstruct::prompting::{finetune_text_encoder, FinetuneConfig, Instruction, InstructionCorpus};
use deobstruct::training::{Checkpoint, TrainFile, TrainSample, Trainer};
use deobstruct::{Error, Result};

/// Default checkpoint directory when `--ckpt` is omitted.
const CKPT_DIR_ENV: &str = "DEOBSTRUCT_CKPT_DIR";
const FINAL_CKPT: &str = "final.ckpt";

#[derive(Parser)]
#[command(name = "deobstruct", version, about = "Instruction-guided obstruction removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic obstruction pairs.
    Synth(SynthArgs),
    /// Train detector, adapter and removal network jointly.
    Train(TrainArgs),
    /// Contrastively fine-tune the text encoder on an instruction corpus.
    FinetuneText(FinetuneArgs),
    /// Predict an obstruction mask for one image.
    DetectMask(DetectArgs),
    /// Remove the obstruction named by an instruction.
    Remove(RemoveArgs),
    /// Score a checkpoint on a directory of pairs.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// fence, raindrop, flare, snow or rain_streak.
    #[arg(long)]
    kind: ObstructionKind,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the square images.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with `[train]` and `[model]` tables; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the step log.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint carrying training state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Initialize model weights (e.g. a fine-tuned text encoder) from a checkpoint.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Comma-separated `step:size` entries, e.g. `0:64,1000:96`.
    #[arg(long)]
    patch_schedule: Option<String>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    bce_weight: Option<f64>,
    #[arg(long)]
    grad_accumulation: Option<usize>,
    #[arg(long)]
    train_text_projection: Option<bool>,
    /// switch, force_hard or force_soft.
    #[arg(long)]
    routing: Option<String>,
    /// Seed for model initialization.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Instruction corpus used when pairs carry no instruction.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Defaults to the bundled corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint instead of a freshly initialized model.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RemoveArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Use this grayscale mask instead of the detector output.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Include wall-clock timings in the trace sidecar.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report_path: PathBuf,
    /// Score the unprocessed composites instead of restorations.
    #[arg(long)]
    identity: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            report_error("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

/// One JSON object on a single stderr line.
fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::FinetuneText(a) => finetune(a),
        Command::DetectMask(a) => detect(a),
        Command::Remove(a) => remove(a),
        Command::Eval(a) => eval(a),
    }
}

fn checkpoint_path(explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    match std::env::var_os(CKPT_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(FINAL_CKPT)),
        None => Err(Error::Parameter(format!("no --ckpt given and {CKPT_DIR_ENV} is not set"))),
    }
}

fn load_model(explicit: Option<PathBuf>) -> Result<ModelBundle> {
    Ok(Checkpoint::load(&checkpoint_path(explicit)?)?.model)
}

fn load_corpus(path: Option<&Path>) -> Result<InstructionCorpus> {
    match path {
        Some(p) => InstructionCorpus::load(p),
        None => Ok(InstructionCorpus::bundled()),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Parameter("--count must be at least 1".into()));
    }
    let corpus = InstructionCorpus::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut written = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let pair = synth_pair(a.kind, a.size, a.size, rng.random())?;
        let pool = corpus.category(pair.transparency());
        let instruction = &pool[rng.random_range(0..pool.len())];
        let dir = a.out.join(format!("{}_{i:04}", a.kind));
        save_pair(&dir, &pair, Some(instruction))?;
        written.push(dir.display().to_string());
    }
    print_json(&serde_json::json!({ "pairs": written }));
    Ok(())
}

fn parse_schedule(text: &str) -> Result<Vec<(u64, usize)>> {
    text.split(',')
        .map(|entry| {
            let bad = || Error::Parameter(format!("bad patch schedule entry {entry:?} (expected step:size)"));
            let (s, p) = entry.trim().split_once(':').ok_or_else(bad)?;
            Ok((s.trim().parse().map_err(|_| bad())?, p.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn parse_routing(text: &str) -> Result<Routing> {
    match text {
        "switch" => Ok(Routing::Switch),
        "force_hard" => Ok(Routing::ForceHard),
        "force_soft" => Ok(Routing::ForceSoft),
        other => Err(Error::Parameter(format!(
            "unknown routing {other:?} (expected switch, force_hard or force_soft)"
        ))),
    }
}

fn samples(pairs: Vec<StoredPair>) -> Result<Vec<TrainSample>> {
    pairs
        .into_iter()
        .map(|p| {
            Ok(match p.meta.instruction {
                Some(text) => TrainSample::with_instruction(p.pair, Instruction::new(text)?),
                None => TrainSample::new(p.pair),
            })
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => TrainFile::load(p)?,
        None => TrainFile::default(),
    };
    let t = &mut file.train;
    if let Some(v) = a.steps {
        t.total_steps = v;
    }
    if let Some(v) = a.lr {
        t.optimizer.lr = v;
    }
    if let Some(v) = a.beta1 {
        t.optimizer.beta1 = v;
    }
    if let Some(v) = a.beta2 {
        t.optimizer.beta2 = v;
    }
    if let Some(v) = a.weight_decay {
        t.optimizer.weight_decay = v;
    }
    if let Some(v) = &a.patch_schedule {
        t.patch_schedule = parse_schedule(v)?;
    }
    if let Some(v) = a.flip_prob {
        t.flip_prob = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.warmup_steps {
        t.detector_warmup_steps = v;
    }
    if let Some(v) = a.bce_weight {
        t.detector_bce_weight = v;
    }
    if let Some(v) = a.grad_accumulation {
        t.grad_accumulation = v;
    }
    if let Some(v) = a.train_text_projection {
        t.train_text_projection = v;
    }
    if let Some(v) = &a.routing {
        file.model.routing = parse_routing(v)?;
    }

    let corpus = load_corpus(a.corpus.as_deref())?;
    let data = samples(load_dataset(&a.data)?)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::resume(Checkpoint::load(p)?, data, &corpus)?;
            if let Some(steps) = a.steps {
                t.set_total_steps(steps)?;
            }
            t
        }
        None => {
            let model = match &a.init {
                Some(p) => {
                    let mut m = Checkpoint::load(p)?.model;
                    m.config.routing = file.model.routing;
                    m
                }
                None => ModelBundle::new(file.model.clone(), a.init_seed)?,
            };
            Trainer::new(model, file.train.clone(), data, &corpus)?
        }
    };

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_error = None;
    let total = trainer.config().total_steps;
    trainer.run(
        &mut |s| {
            let line = serde_json::to_string(s).expect("trace serializes");
            if let Err(e) = writeln!(log, "{line}") {
                io_error.get_or_insert(e);
            }
            if (s.step + 1) % 50 == 0 || s.step + 1 == total {
                eprintln!("step {}/{total} loss {:.5}", s.step + 1, s.loss);
            }
        },
        Some(&a.out),
    )?;
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e));
    }
    let final_path = a.out.join(FINAL_CKPT);
    trainer.checkpoint().save(&final_path)?;
    print_json(&serde_json::json!({
        "checkpoint": final_path.display().to_string(),
        "steps": trainer.steps_done(),
        "log": log_path.display().to_string(),
    }));
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let corpus = load_corpus(a.corpus.as_deref())?;
    let mut model = match a.ckpt {
        Some(p) => Checkpoint::load(&p)?.model,
        None => ModelBundle::new(ModelConfig::default(), 0)?,
    };
    let mut cfg = FinetuneConfig::default();
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let report = finetune_text_encoder(&mut model.encoders.text, &corpus, &cfg)?;
    Checkpoint::from_model(model).save(&a.out)?;
    print_json(&serde_json::json!({
        "checkpoint": a.out.display().to_string(),
        "first_loss": report.losses.first(),
        "last_loss": report.losses.last(),
    }));
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let image = read_image(&a.image)?;
    let model = load_model(a.ckpt)?;
    let mask = model.detector.detect_mask(&image)?;
    write_mask(&a.out, &mask)?;
    print_json(&serde_json::json!({
        "mask": a.out.display().to_string(),
        "mean": mask.mean(),
        "coverage": mask.coverage(model.config.tau),
    }));
    Ok(())
}

/// Sidecar path next to an output image: `name.png` becomes `name.trace.json`.
fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.json")
}

fn remove(a: RemoveArgs) -> Result<()> {
    let image = read_image(&a.image)?;
    let instruction = Instruction::new(a.instruction)?;
    let mask = match &a.mask {
        Some(p) => Some(read_mask(p, MaskKind::Soft)?),
        None => None,
    };
    let model = load_model(a.ckpt)?;
    let out = infer(&model, &image, &instruction, mask.as_ref())?;
    write_image(&a.out, &out.image)?;
    let sidecar = trace_path(&a.out);
    fs::write(&sidecar, out.trace.to_json(a.timings) + "\n").map_err(|e| Error::io(&sidecar, e))?;
    print_json(&serde_json::json!({
        "image": a.out.display().to_string(),
        "trace": sidecar.display().to_string(),
        "class": out.trace.class,
        "adapter_ran": out.trace.adapter_ran,
    }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pairs = load_dataset(&a.data)?;
    let corpus = InstructionCorpus::bundled();
    let items = pairs
        .into_iter()
        .map(|p| {
            let instruction = match p.meta.instruction {
                Some(text) => Instruction::new(text)?,
                None => default_instruction(&corpus, p.pair.transparency()),
            };
            Ok(EvalItem {
                name: p.name,
                pair: p.pair,
                instruction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model;
    let restorer: &dyn Restorer = if a.identity {
        &IdentityRestorer
    } else {
        model = load_model(a.ckpt)?;
        &model
    };
    let report = evaluate(restorer, &items)?;
    if let Some(dir) = a.report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&a.report_path, report.to_json() + "\n").map_err(|e| Error::io(&a.report_path, e))?;
    print!("{}", report.table());
    Ok(())
}

fn default_instruction(corpus: &InstructionCorpus, class: TransparencyClass) -> Instruction {
    Instruction::labeled(corpus.category(class)[0].clone(), class).expect("bundled corpus entries are non-empty")
}

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ObstructionKind, SceneImage, ScenePair};
use crate::prompting::Instruction;

use super::metrics::{psnr, ssim};

/// Metrics for one evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub kind: ObstructionKind,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the unprocessed composite against the background.
    pub input_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
}

impl Summary {
    fn of<'a>(items: impl Iterator<Item = &'a ImageMetrics>) -> Self {
        let (mut n, mut p, mut s, mut i) = (0usize, 0.0, 0.0, 0.0);
        for m in items {
            n += 1;
            p += m.psnr;
            s += m.ssim;
            i += m.input_psnr;
        }
        let d = n.max(1) as f64;
        Self {
            count: n,
            mean_psnr: p / d,
            mean_ssim: s / d,
            mean_input_psnr: i / d,
        }
    }
}

/// Per-image metrics with overall and per-kind means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub overall: Summary,
    pub per_kind: BTreeMap<ObstructionKind, Summary>,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let overall = Summary::of(images.iter());
        let mut kinds: Vec<ObstructionKind> = images.iter().map(|m| m.kind).collect();
        kinds.sort();
        kinds.dedup();
        let per_kind = kinds
            .into_iter()
            .map(|k| (k, Summary::of(images.iter().filter(|m| m.kind == k))))
            .collect();
        Self {
            images,
            overall,
            per_kind,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Load(format!("metric report: {e}")))
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:<12} {:>9} {:>8} {:>10}", "image", "kind", "PSNR", "SSIM", "input PSNR");
        for m in &self.images {
            let _ = writeln!(
                s,
                "{:<24} {:<12} {:>9.3} {:>8.4} {:>10.3}",
                m.name, m.kind, m.psnr, m.ssim, m.input_psnr
            );
        }
        for (k, sum) in &self.per_kind {
            let _ = writeln!(
                s,
                "{:<24} {:<12} {:>9.3} {:>8.4} {:>10.3}",
                format!("mean ({} images)", sum.count),
                k.as_str(),
                sum.mean_psnr,
                sum.mean_ssim,
                sum.mean_input_psnr
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:<12} {:>9.3} {:>8.4} {:>10.3}",
            format!("mean ({} images)", self.overall.count),
            "all",
            self.overall.mean_psnr,
            self.overall.mean_ssim,
            self.overall.mean_input_psnr
        );
        s
    }
}

/// Anything that maps an obstructed image plus instruction to a restored image.
pub trait Restorer {
    fn restore(&self, image: &SceneImage, instruction: &Instruction) -> Result<SceneImage>;
}

/// Returns the composite unchanged.
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, image: &SceneImage, _: &Instruction) -> Result<SceneImage> {
        Ok(image.clone())
    }
}

/// A named pair to evaluate.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub name: String,
    pub pair: ScenePair,
    pub instruction: Instruction,
}

/// Restore every item, score it against its background and aggregate.
pub fn evaluate(model: &dyn Restorer, testset: &[EvalItem]) -> Result<MetricReport> {
    if testset.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let images = testset
        .iter()
        .map(|item| {
            let out = model.restore(item.pair.composite(), &item.instruction)?;
            let bg = item.pair.background();
            Ok(ImageMetrics {
                name: item.name.clone(),
                kind: item.pair.kind(),
                psnr: psnr(bg, &out)?,
                ssim: ssim(bg, &out)?,
                input_psnr: psnr(bg, item.pair.composite())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(images))
}

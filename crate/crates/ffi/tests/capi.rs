use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use deobstruct::imaging::{synth_pair, ObstructionKind, SceneImage};
use deobstruct::model::ModelBundle;
use deobstruct::pipeline::infer;
use deobstruct::prompting::Instruction;
use deobstruct::training::Checkpoint;
use deobstruct_ffi::*;

fn interleaved(img: &SceneImage) -> Vec<f64> {
    let (w, h) = img.dims();
    (0..h).flat_map(|y| (0..w).flat_map(move |x| img.pixel(x, y))).collect()
}

fn last_error() -> String {
    let n = unsafe { dobs_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n + 1];
    unsafe { dobs_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    path: PathBuf,
    model: ModelBundle,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = ModelBundle::new(Default::default(), 11).unwrap();
    Checkpoint::from_model(model.clone()).save(&path).unwrap();
    Fixture { _dir: dir, path, model }
}

fn load(path: &Path) -> *mut DobsModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dobs_model_load(c.as_ptr(), &mut handle) }, DobsStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

#[test]
fn remove_through_the_c_abi_matches_the_library() {
    let fx = fixture();
    let handle = load(&fx.path);
    let pair = synth_pair(ObstructionKind::Raindrop, 32, 24, 3).unwrap();
    let input = interleaved(pair.composite());
    let text = "remove the semi-transparent raindrops";
    let instr = CString::new(text).unwrap();
    let mut out = vec![0.0; input.len()];
    let mut trace = DobsTrace::default();
    let status = unsafe {
        dobs_remove(handle, input.as_ptr(), 32, 24, instr.as_ptr(), ptr::null(), out.as_mut_ptr(), &mut trace)
    };
    assert_eq!(status, DobsStatus::Ok, "{}", last_error());

    let expected = infer(&fx.model, pair.composite(), &Instruction::new(text).unwrap(), None).unwrap();
    assert_eq!(out, interleaved(&expected.image));
    assert_eq!(trace.adapter_ran, 1);
    assert_eq!(trace.decision.semi_transparent, 1);
    assert!((trace.mask_mean - expected.trace.mask_mean).abs() < 1e-15);

    let mut mask = vec![0.0; 32 * 24];
    assert_eq!(unsafe { dobs_detect_mask(handle, input.as_ptr(), 32, 24, mask.as_mut_ptr()) }, DobsStatus::Ok);
    assert_eq!(mask, fx.model.detector.detect_mask(pair.composite()).unwrap().data());

    let fence = CString::new("remove the opaque fence").unwrap();
    let mut d = DobsSwitch::default();
    assert_eq!(unsafe { dobs_classify(handle, fence.as_ptr(), &mut d) }, DobsStatus::Ok);
    assert_eq!(d.semi_transparent, 0);
    assert!((d.p_opaque + d.p_semi_transparent - 1.0).abs() < 1e-12);
    unsafe { dobs_model_free(handle) };
}

#[test]
fn errors_map_to_status_codes_with_messages() {
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dobs_model_load(missing.as_ptr(), &mut handle) }, DobsStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));

    assert_eq!(unsafe { dobs_model_load(ptr::null(), &mut handle) }, DobsStatus::NullPointer);
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { dobs_model_load(bad.as_ptr().cast(), &mut handle) }, DobsStatus::InvalidUtf8);

    let fx = fixture();
    let handle = load(&fx.path);
    let img = vec![2.0; 8 * 8 * 3];
    let instr = CString::new("remove it").unwrap();
    let mut out = vec![0.0; img.len()];
    let status = unsafe {
        dobs_remove(handle, img.as_ptr(), 8, 8, instr.as_ptr(), ptr::null(), out.as_mut_ptr(), ptr::null_mut())
    };
    assert_eq!(status, DobsStatus::Validation, "{}", last_error());
    assert_eq!(unsafe { dobs_classify(ptr::null(), instr.as_ptr(), &mut DobsSwitch::default()) }, DobsStatus::NullPointer);
    unsafe { dobs_model_free(handle) };
    unsafe { dobs_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_follow_the_library() {
    let a = vec![0.5; 16 * 16 * 3];
    let b = vec![0.4; 16 * 16 * 3];
    let mut v = 0.0;
    assert_eq!(unsafe { dobs_psnr(a.as_ptr(), b.as_ptr(), 16, 16, &mut v) }, DobsStatus::Ok);
    assert!((v - 20.0).abs() < 1e-9);
    assert_eq!(unsafe { dobs_psnr(a.as_ptr(), a.as_ptr(), 16, 16, &mut v) }, DobsStatus::Ok);
    assert_eq!(v, 100.0);
    assert_eq!(unsafe { dobs_ssim(a.as_ptr(), a.as_ptr(), 16, 16, &mut v) }, DobsStatus::Ok);
    assert!((v - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { dobs_ssim(a.as_ptr(), a.as_ptr(), 8, 8, &mut v) }, DobsStatus::Parameter);
    assert!(!last_error().is_empty());
}

#[test]
fn last_error_reports_needed_length() {
    let mut handle = ptr::null_mut();
    unsafe { dobs_model_load(ptr::null(), &mut handle) };
    let n = unsafe { dobs_last_error_message(ptr::null_mut(), 0) };
    let mut tiny = [7 as c_char; 2];
    assert_eq!(unsafe { dobs_last_error_message(tiny.as_mut_ptr(), 2) }, n);
    assert_eq!(tiny, [7, 7], "short buffers are left untouched");
    assert_eq!(last_error().len(), n);
    let v = unsafe { CStr::from_ptr(dobs_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/deobstruct.h")
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "dobs_model_load",
        "dobs_model_free",
        "dobs_remove",
        "dobs_detect_mask",
        "dobs_classify",
        "dobs_psnr",
        "dobs_ssim",
        "dobs_last_error_message",
        "typedef struct DobsModel DobsModel;",
        "DOBS_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

/// Compile and run a small C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = exe_dir.join("libdeobstruct_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "deobstruct.h"
int main(void) {
    double a[8 * 8 * 3], b[8 * 8 * 3], v = 0.0;
    for (int i = 0; i < 8 * 8 * 3; i++) { a[i] = 0.5; b[i] = 0.4; }
    if (dobs_psnr(a, b, 8, 8, &v) != DOBS_STATUS_OK) return 2;
    DobsModel *m = NULL;
    if (dobs_model_load("/nonexistent.ckpt", &m) != DOBS_STATUS_IO || m != NULL) return 3;
    char msg[256];
    size_t n = dobs_last_error_message(msg, sizeof msg);
    printf("%.6f %zu %s\n", v, n, dobs_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("probe");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "probe exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("20.000000 "), "{text}");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_owned());
        }
    }
    Err(())
}

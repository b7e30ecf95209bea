use std::ffi::{CStr, CString};
use std::ptr;

use ript_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ript_last_error()) }.to_string_lossy().into_owned()
}

fn sphere(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::new();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let t = golden * i as f64;
        // Squash one axis so the shape has distinct principal directions.
        p.extend_from_slice(&[r * t.cos(), 0.5 * y, r * t.sin()]);
    }
    let o = p.chunks(3).flat_map(|c| {
        let v = [c[0], 4.0 * c[1], c[2]];
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / l, v[1] / l, v[2] / l]
    });
    let o = o.collect();
    (p, o)
}

#[test]
fn encoder_lifecycle_and_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[tokenizer]\ntoken_count = 16\nfeature_width = 16\n[transformer]\nlatent_width = 8\n[distill]\nglobal_points = 64\nlocal_points = 32\n",
    )
    .unwrap();
    let cfg_c = CString::new(cfg.to_str().unwrap()).unwrap();
    let mut enc = ptr::null_mut();
    assert_eq!(unsafe { ript_encoder_open(cfg_c.as_ptr(), ptr::null(), &mut enc) }, RiptStatus::Ok);
    assert_eq!(unsafe { ript_encoder_latent_dim(enc) }, 8);

    let (p, o) = sphere(64);
    let mut a = vec![0.0; 8];
    assert_eq!(unsafe { ript_encoder_embed(enc, p.as_ptr(), o.as_ptr(), 64, a.as_mut_ptr(), 8) }, RiptStatus::Ok);
    assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);

    // A quarter turn about z maps (x, y, z) to (-y, x, z).
    let rot = |v: &[f64]| v.chunks(3).flat_map(|c| [-c[1], c[0], c[2]]).collect::<Vec<_>>();
    let mut b = vec![0.0; 8];
    assert_eq!(
        unsafe { ript_encoder_embed(enc, rot(&p).as_ptr(), rot(&o).as_ptr(), 64, b.as_mut_ptr(), 8) },
        RiptStatus::Ok
    );
    let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    assert!(cos > 1.0 - 1e-9, "{cos}");

    let mut small = vec![0.0; 4];
    assert_eq!(
        unsafe { ript_encoder_embed(enc, p.as_ptr(), o.as_ptr(), 64, small.as_mut_ptr(), 4) },
        RiptStatus::Argument
    );
    assert!(last_error().contains("latent"));
    assert_eq!(
        unsafe { ript_encoder_embed(enc, ptr::null(), o.as_ptr(), 64, a.as_mut_ptr(), 8) },
        RiptStatus::NullOrInvalid
    );
    unsafe { ript_encoder_free(enc) };
    unsafe { ript_encoder_free(ptr::null_mut()) };
}

#[test]
fn open_reports_errors() {
    let mut enc = ptr::null_mut();
    let missing = CString::new("/nonexistent/run.toml").unwrap();
    assert_eq!(unsafe { ript_encoder_open(missing.as_ptr(), ptr::null(), &mut enc) }, RiptStatus::Io);
    assert!(last_error().contains("/nonexistent/run.toml"));
    assert!(enc.is_null());
    assert_eq!(unsafe { ript_encoder_open(ptr::null(), ptr::null(), &mut enc) }, RiptStatus::NullOrInvalid);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distill]\nteacher_temp = 0.0\n").unwrap();
    let cfg_c = CString::new(cfg.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ript_encoder_open(cfg_c.as_ptr(), ptr::null(), &mut enc) }, RiptStatus::Config);
    assert!(last_error().contains("distill.teacher_temp"));
}

#[test]
fn metrics_through_the_abi() {
    let f = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let labels = [0u32, 1, 0, 1];
    let mut out = 0.0;
    assert_eq!(unsafe { ript_macro_map(f.as_ptr(), 4, 2, labels.as_ptr(), &mut out) }, RiptStatus::Ok);
    assert!((out - 100.0).abs() < 1e-12);
    assert_eq!(unsafe { ript_macro_map(f.as_ptr(), 4, 0, labels.as_ptr(), &mut out) }, RiptStatus::Argument);

    let pred = [1u32, 1, 0, 0];
    assert_eq!(unsafe { ript_nmi(pred.as_ptr(), labels.as_ptr(), 4, &mut out) }, RiptStatus::Ok);
    assert!(out.abs() < 1e-12);
    let pred = [5u32, 7, 5, 7];
    assert_eq!(unsafe { ript_nmi(pred.as_ptr(), labels.as_ptr(), 4, &mut out) }, RiptStatus::Ok);
    assert!((out - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { ript_nmi(pred.as_ptr(), labels.as_ptr(), 4, ptr::null_mut()) }, RiptStatus::NullOrInvalid);
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ript.h")).unwrap();
    for name in [
        "ript_encoder_open",
        "ript_encoder_free",
        "ript_encoder_latent_dim",
        "ript_encoder_embed",
        "ript_macro_map",
        "ript_nmi",
        "ript_last_error",
        "typedef struct RiptEncoder RiptEncoder",
        "RIPT_STATUS_OK",
    ] {
        assert!(header.contains(name), "{name}");
    }

    // The header must also be valid C on its own.
    if let Ok(o) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/ript.h")])
        .output()
    {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}

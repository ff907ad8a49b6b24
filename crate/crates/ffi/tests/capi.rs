use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use cbf_minnorm_ffi::*;

const EXAMPLE2: &str = include_str!("../../core/specs/example2.json");

fn model(text: &str) -> *mut CbfModel {
    let json = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cbf_model_from_json(json.as_ptr(), &mut m) }, CbfStatus::Ok);
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cbf_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn handle_lifecycle_and_dims() {
    let m = model(EXAMPLE2);
    let (mut n, mut k) = (0, 0);
    assert_eq!(unsafe { cbf_model_dims(m, &mut n, &mut k) }, CbfStatus::Ok);
    assert_eq!((n, k), (2, 1));
    unsafe { cbf_model_free(m) };
    unsafe { cbf_model_free(ptr::null_mut()) };
}

#[test]
fn evaluate_matches_closed_form() {
    let m = model(EXAMPLE2);
    let x = [1.0, 0.1];
    let (mut u, mut h, mut nv, mut region) = (0.0, 0.0, 0.0, CbfRegion::DPlus);
    let st = unsafe { cbf_evaluate(m, x.as_ptr(), 2, &mut u, 1, &mut h, &mut nv, &mut region) };
    assert_eq!(st, CbfStatus::Ok);
    let t: f64 = 0.1;
    assert!((u.abs() - (2.0 * t + t * t) / (2.0 * t.powi(3))).abs() < 1e-9);
    assert_eq!(region, CbfRegion::Exterior);
    unsafe { cbf_model_free(m) };
}

#[test]
fn zset_and_verdicts() {
    let m = model(EXAMPLE2);
    let mut count = 0;
    let st = unsafe { cbf_locate_zset(m, 64, 1e-10, ptr::null_mut(), 0, &mut count) };
    assert_eq!(st, CbfStatus::BufferTooSmall);
    assert_eq!(count, 2);
    let mut pts = [0.0; 4];
    assert_eq!(unsafe { cbf_locate_zset(m, 64, 1e-10, pts.as_mut_ptr(), 2, &mut count) }, CbfStatus::Ok);
    assert!((pts[0] + 1.0).abs() < 1e-6 && (pts[2] - 1.0).abs() < 1e-6);

    let (mut kind, mut cert, mut inev) = (CbfVerdictKind::Bounded, [0.0; 2], 0);
    let x = [1.0, 0.0];
    let st = unsafe { cbf_test_point(m, x.as_ptr(), 2, &mut kind, cert.as_mut_ptr(), &mut inev) };
    assert_eq!(st, CbfStatus::Ok);
    assert_eq!(kind, CbfVerdictKind::Unbounded);
    assert_eq!(cert, [0.0, 1.0]);
    assert_eq!(inev, 1);

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { cbf_test_point_json(m, x.as_ptr(), 2, &mut s) }, CbfStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(s) }.to_str().unwrap()).unwrap();
    assert_eq!(v["kind"], "Unbounded");
    unsafe { cbf_string_free(s) };

    let dir = [0.0, 1.0];
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { cbf_ray_probe_json(m, x.as_ptr(), dir.as_ptr(), 2, 0.01, 12, &mut s) }, CbfStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(s) }.to_str().unwrap()).unwrap();
    assert!((v["exponent"].as_f64().unwrap() + 2.0).abs() < 0.1);
    unsafe { cbf_string_free(s) };
    unsafe { cbf_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let bad = CString::new("{\"n\": 2}").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cbf_model_from_json(bad.as_ptr(), &mut m) }, CbfStatus::Schema);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    let unparsable = EXAMPLE2.replace("x2^2", "x2^^2");
    let text = CString::new(unparsable).unwrap();
    assert_eq!(unsafe { cbf_model_from_json(text.as_ptr(), &mut m) }, CbfStatus::Parse);

    let m = model(EXAMPLE2);
    let mut kind = CbfVerdictKind::Bounded;
    let x = [0.0, 0.0];
    let st = unsafe { cbf_test_point(m, x.as_ptr(), 2, &mut kind, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, CbfStatus::NotAZPoint);
    assert!(last_error().contains("not a discontinuity point"));
    let st = unsafe { cbf_test_point(m, x.as_ptr(), 3, &mut kind, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, CbfStatus::DimensionMismatch);
    let st = unsafe { cbf_test_point(m, ptr::null(), 2, &mut kind, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, CbfStatus::NullPointer);
    unsafe { cbf_model_free(m) };
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "cbf_minnorm.h"

int main(int argc, char **argv) {
    static const char *spec =
        "{\"n\": 2, \"m\": 1, \"f\": [\"x2\", \"0\"], \"G\": [[\"0\", \"x2^2\"]],"
        " \"h\": \"1 - x1^2 - x2^2\", \"alpha\": {\"family\": \"linear\", \"k1\": 1.0},"
        " \"domain_box\": [[-1.2, 1.2], [-1.2, 1.2]]}";
    CbfModel *model = NULL;
    if (cbf_model_from_json(spec, &model) != CBF_STATUS_OK) {
        fprintf(stderr, "%s\n", cbf_last_error_message());
        return 1;
    }
    double x[2] = {1.0, 0.0}, v[2] = {0.0, 0.0};
    CbfVerdictKind kind;
    int inevitable = 0;
    if (cbf_test_point(model, x, 2, &kind, v, &inevitable) != CBF_STATUS_OK) return 2;
    if (kind != CBF_VERDICT_KIND_UNBOUNDED || fabs(v[0]) > 1e-9 || !inevitable) return 3;
    double bad[2] = {0.0, 0.0};
    if (cbf_test_point(model, bad, 2, &kind, NULL, NULL) != CBF_STATUS_NOT_AZ_POINT) return 4;
    cbf_model_free(model);
    printf("%s\n", cbf_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/capi-<hash> -> target/<profile>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libcbf_minnorm_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).contains("spec schema 1"));
}

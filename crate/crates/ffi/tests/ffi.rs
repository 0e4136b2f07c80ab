use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use emseg_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(emseg_last_error()) }.to_str().unwrap().to_string()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn field_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("f.emb"));
    let values: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.25 - 1.0).collect();
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(emseg_field_new(2, 3, 4, values.as_ptr(), &mut f), EmsegStatus::Ok);
        assert_eq!(emseg_field_write(f, path.as_ptr(), EmsegDtype::F64), EmsegStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(emseg_field_read(path.as_ptr(), &mut g), EmsegStatus::Ok);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(emseg_field_shape(g, &mut h, &mut w, &mut c), EmsegStatus::Ok);
        assert_eq!((h, w, c), (2, 3, 4));
        let mut back = vec![0.0; 24];
        assert_eq!(emseg_field_copy_data(g, back.as_mut_ptr(), 24), EmsegStatus::Ok);
        assert_eq!(back, values);
        assert_eq!(emseg_field_copy_data(g, back.as_mut_ptr(), 23), EmsegStatus::ShapeMismatch);
        emseg_field_free(f);
        emseg_field_free(g);
        emseg_field_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.lbl");
    std::fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let bad = cstr(&bad);
    unsafe {
        let mut l = ptr::null_mut();
        assert_eq!(emseg_labels_read(bad.as_ptr(), &mut l), EmsegStatus::BadMagic);
        assert!(last_error().starts_with("BAD_MAGIC"));
        assert!(l.is_null());
        assert_eq!(emseg_labels_read(ptr::null(), &mut l), EmsegStatus::InvalidArgument);
        let vals = [1.0, f64::NAN];
        let mut f = ptr::null_mut();
        assert_eq!(emseg_field_new(1, 2, 1, vals.as_ptr(), &mut f), EmsegStatus::NonFiniteValue);
        assert_eq!(emseg_field_new(1, 2, 1, ptr::null(), &mut f), EmsegStatus::InvalidArgument);
        let mut cfg = ptr::null_mut();
        let toml = CString::new("kernel_t = 0.99").unwrap();
        assert_eq!(emseg_config_from_toml(toml.as_ptr(), &mut cfg), EmsegStatus::InvalidConfig);
        let toml = CString::new("nonsense = 1").unwrap();
        assert_eq!(emseg_config_from_toml(toml.as_ptr(), &mut cfg), EmsegStatus::InvalidConfig);
        assert_eq!(
            emseg_generate_disks(8, 8, 10, 3.0, 4.0, 2.0, 0, &mut l),
            EmsegStatus::InfeasibleSpec
        );
    }
}

#[test]
fn small_pipeline_through_handles() {
    unsafe {
        let mut gt = ptr::null_mut();
        assert_eq!(emseg_generate_disks(24, 24, 2, 3.0, 4.0, 2.0, 5, &mut gt), EmsegStatus::Ok);
        let toml = CString::new(
            "steps = 300\nchannels = 4\noffsets = [3, 9]\nmin_size = 5\nfill_noise = true\nlargest_is_background = true\n",
        )
        .unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(emseg_config_from_toml(toml.as_ptr(), &mut cfg), EmsegStatus::Ok);
        let (mut f, mut g) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(emseg_optimize(cfg, gt, EmsegMode::Full, &mut f, &mut g), EmsegStatus::Ok);
        assert!(!g.is_null());
        let mut pred = ptr::null_mut();
        assert_eq!(emseg_cluster(cfg, f, ptr::null(), &mut pred), EmsegStatus::Ok, "{}", last_error());
        let mut m = EmsegMetrics::default();
        assert_eq!(emseg_evaluate(cfg, pred, gt, &mut m), EmsegStatus::Ok);
        assert_eq!(m.abs_dic, 0.0);
        assert!(m.arand < 0.05 && m.sbd > 0.95, "{m:?}");
        let mut n = 0;
        assert_eq!(emseg_labels_num_instances(pred, &mut n), EmsegStatus::Ok);
        assert_eq!(n, 2);
        for h in [f, g] {
            emseg_field_free(h);
        }
        emseg_labels_free(pred);
        emseg_labels_free(gt);
        emseg_config_free(cfg);
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(crate_dir().join("include/emseg.h")).unwrap();
    let source = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 20);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("EMSEG_STATUS_BAD_MAGIC = 12"));
}

#[test]
fn c_program_links_against_static_library() {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libemseg_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("run cc");
    assert!(status.success());
    let out = Command::new(&bin).arg(dir.path().join("x.lbl")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.1.0"));
}

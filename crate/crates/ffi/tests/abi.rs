use std::ffi::{CStr, CString};
use std::ptr;

use logocaf_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lgcf_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn toy() -> *mut LgcfModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lgcf_model_create_toy(3, 1, 2, 4, &mut m) }, LgcfStatus::Ok);
    assert!(!m.is_null());
    m
}

fn forward(m: *const LgcfModel, side: usize) -> Vec<f64> {
    let hsi: Vec<f64> = (0..side * side * 3).map(|i| (i as f64 * 0.37).sin()).collect();
    let x: Vec<f64> = (0..side * side).map(|i| (i as f64 * 0.11).cos()).collect();
    let mut out = vec![0.0; side * side * 2];
    let s = unsafe { lgcf_model_forward(m, hsi.as_ptr(), x.as_ptr(), side, side, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, LgcfStatus::Ok, "{}", last_error());
    out
}

#[test]
fn info_and_forward() {
    let m = toy();
    let (mut params, mut hb, mut xb, mut k) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { lgcf_model_info(m, &mut params, &mut hb, &mut xb, &mut k) },
        LgcfStatus::Ok
    );
    assert_eq!((hb, xb, k), (3, 1, 2));
    assert!(params > 0);
    let y = forward(m, 16);
    assert!(y.iter().all(|v| v.is_finite()));
    unsafe { lgcf_model_free(m) };
}

#[test]
fn save_and_load_reproduce_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.lgcf").to_str().unwrap()).unwrap();
    let m = toy();
    assert_eq!(unsafe { lgcf_model_save(m, path.as_ptr(), false) }, LgcfStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { lgcf_model_load(path.as_ptr(), &mut loaded) }, LgcfStatus::Ok);
    assert_eq!(forward(m, 16), forward(loaded, 16));
    unsafe {
        lgcf_model_free(m);
        lgcf_model_free(loaded);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = toy();
    let mut small = vec![0.0; 4];
    let hsi = vec![0.0; 16 * 16 * 3];
    let x = vec![0.0; 16 * 16];
    let s = unsafe { lgcf_model_forward(m, hsi.as_ptr(), x.as_ptr(), 16, 16, small.as_mut_ptr(), small.len()) };
    assert_eq!(s, LgcfStatus::BufferTooSmall);
    assert!(last_error().contains("512"), "{}", last_error());

    let mut out = vec![0.0; 10 * 10 * 2];
    let s = unsafe { lgcf_model_forward(m, hsi.as_ptr(), x.as_ptr(), 10, 10, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, LgcfStatus::Divisibility, "{}", last_error());

    let s = unsafe { lgcf_model_forward(ptr::null(), hsi.as_ptr(), x.as_ptr(), 16, 16, out.as_mut_ptr(), 0) };
    assert_eq!(s, LgcfStatus::NullPointer);

    let missing = CString::new("/nonexistent/m.lgcf").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lgcf_model_load(missing.as_ptr(), &mut h) }, LgcfStatus::Io);
    assert!(last_error().contains("/nonexistent/m.lgcf"));
    assert!(h.is_null());

    let cfg = CString::new("layout = T-C-C-C\n").unwrap();
    assert_eq!(
        unsafe { lgcf_model_from_config(cfg.as_ptr(), &mut h) },
        LgcfStatus::Config
    );
    let cfg = CString::new("widgets = 3\n").unwrap();
    assert_eq!(
        unsafe { lgcf_model_from_config(cfg.as_ptr(), &mut h) },
        LgcfStatus::Config
    );
    assert!(last_error().contains("widgets"));

    // A success clears the message.
    forward(m, 16);
    assert_eq!(last_error(), "");
    unsafe { lgcf_model_free(m) };
}

#[test]
fn metrics_hand_case() {
    let pred = [0i64, 0, 0, 1, 1];
    let gt = [0i64, 0, 1, 1, -1];
    let mut out = LgcfMetrics::default();
    assert_eq!(
        unsafe { lgcf_metrics(pred.as_ptr(), gt.as_ptr(), 5, 2, -1, &mut out) },
        LgcfStatus::Ok
    );
    assert_eq!(out.oa, 0.75);
    assert_eq!(out.kappa, 0.5);
    assert_eq!(out.aa, 0.75);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(lgcf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

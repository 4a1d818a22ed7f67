use std::ffi::{CStr, CString};
use std::ptr;

use fqr_ffi::*;

fn data_path(name: &str) -> CString {
    CString::new(format!("{}/../core/data/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn last_error() -> String {
    let p = fqr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load_toy() -> *mut FqrDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { fqr_dataset_load_csv(data_path("toy.csv").as_ptr(), data_path("toy.json").as_ptr(), &mut ds) };
    assert_eq!(st, FqrStatus::Ok);
    ds
}

#[test]
fn toy_fit_roundtrip() {
    let ds = load_toy();
    assert_eq!(unsafe { fqr_dataset_len(ds) }, 240);
    let opts = fqr_fit_options_default(0.5);
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { fqr_fit(ds, &opts, &mut fit) }, FqrStatus::Ok);

    let mut converged = false;
    assert_eq!(unsafe { fqr_fit_converged(fit, &mut converged) }, FqrStatus::Ok);
    assert!(converged);

    let d = unsafe { fqr_fit_num_scalar(fit) };
    assert!(d >= 2);
    let mut alpha = vec![f64::NAN; d];
    assert_eq!(unsafe { fqr_fit_alpha(fit, alpha.as_mut_ptr(), d) }, FqrStatus::Ok);
    assert!(alpha.iter().all(|a| a.is_finite()));

    let t = [-0.5, 0.0, 0.5];
    let mut beta = [f64::NAN; 3];
    assert_eq!(unsafe { fqr_fit_beta(fit, 0, t.as_ptr(), 3, beta.as_mut_ptr()) }, FqrStatus::Ok);
    assert!(beta.iter().all(|b| b.is_finite()));
    assert_eq!(beta[2], 0.0, "known-zero half should be estimated null");

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { fqr_fit_to_json(fit, &mut json) }, FqrStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v.is_object());
    unsafe {
        fqr_string_free(json);
        fqr_fit_free(fit);
        fqr_dataset_free(ds);
    }
}

#[test]
fn in_memory_dataset_matches_shapes() {
    let (n, g) = (60usize, 11usize);
    let grid: Vec<f64> = (0..g).map(|j| j as f64 / (g - 1) as f64).collect();
    let mut z = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n * g);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        z.push(1.0);
        let a = ((i * 37 % 17) as f64 - 8.0) / 8.0;
        for t in &grid {
            x.push(a * (1.0 + t) + ((i * 13 + 5) % 7) as f64 * 0.01);
        }
        y.push(a + ((i * 29 % 11) as f64 - 5.0) * 0.05);
    }
    let mut ds = ptr::null_mut();
    let st = unsafe { fqr_dataset_new(y.as_ptr(), n, z.as_ptr(), 1, x.as_ptr(), 1, grid.as_ptr(), g, &mut ds) };
    assert_eq!(st, FqrStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { fqr_dataset_len(ds) }, n);

    let mut opts = fqr_fit_options_default(0.5);
    opts.num_subintervals = 4;
    opts.lambda = 0.0;
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { fqr_fit(ds, &opts, &mut fit) }, FqrStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { fqr_fit_num_scalar(fit) }, 1);
    unsafe {
        fqr_fit_free(fit);
        fqr_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported() {
    let mut fit = ptr::null_mut();
    let opts = fqr_fit_options_default(0.5);
    assert_eq!(unsafe { fqr_fit(ptr::null(), &opts, &mut fit) }, FqrStatus::NullPointer);
    assert!(last_error().contains("dataset"));
    assert!(fit.is_null());

    let mut ds = ptr::null_mut();
    let missing = CString::new("/nonexistent/fqr.csv").unwrap();
    let st = unsafe { fqr_dataset_load_csv(missing.as_ptr(), data_path("toy.json").as_ptr(), &mut ds) };
    assert_eq!(st, FqrStatus::Io);
    assert!(ds.is_null());

    let ds = load_toy();
    let bad = fqr_fit_options_default(1.5);
    assert_eq!(unsafe { fqr_fit(ds, &bad, &mut fit) }, FqrStatus::InvalidInput);
    assert!(!last_error().is_empty());

    let opts = fqr_fit_options_default(0.5);
    assert_eq!(unsafe { fqr_fit(ds, &opts, &mut fit) }, FqrStatus::Ok);
    let mut small = [0.0; 1];
    assert_eq!(unsafe { fqr_fit_alpha(fit, small.as_mut_ptr(), 1) }, FqrStatus::InvalidInput);
    let t = [0.0];
    let mut out = [0.0];
    assert_eq!(unsafe { fqr_fit_beta(fit, 7, t.as_ptr(), 1, out.as_mut_ptr()) }, FqrStatus::InvalidInput);
    unsafe {
        fqr_fit_free(fit);
        fqr_dataset_free(ds);
        fqr_fit_free(ptr::null_mut());
        fqr_dataset_free(ptr::null_mut());
        fqr_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_entry_points() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fqr.h")).unwrap();
    for sym in [
        "fqr_last_error",
        "fqr_fit_options_default",
        "fqr_dataset_new",
        "fqr_dataset_load_csv",
        "fqr_dataset_free",
        "fqr_fit(",
        "fqr_fit_alpha",
        "fqr_fit_beta",
        "fqr_fit_to_json",
        "fqr_string_free",
        "FQR_STATUS_PANIC",
        "typedef struct FqrFit FqrFit",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

use std::ffi::{CStr, CString};
use std::ptr;

use dpmm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dpmm_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn generate() -> *mut DpmmDataset {
    let mut ds = ptr::null_mut();
    let st = unsafe { dpmm_dataset_generate(3, 100, 150, 2, 1.0, 50.0, 7, &mut ds) };
    assert_eq!(st, DpmmStatus::Ok, "{}", last_error());
    ds
}

#[test]
fn generate_run_and_score() {
    let ds = generate();
    let n = unsafe { dpmm_dataset_len(ds) };
    assert!((300..=450).contains(&n));
    assert_eq!(unsafe { dpmm_dataset_dim(ds) }, 2);

    let mode = CString::new("sync-pooled").unwrap();
    let family = CString::new("gaussian:dim=2,sigma=1,sigma0=30").unwrap();
    let mut opts = dpmm_run_options_default();
    opts.iterations = 15;
    opts.workers = 3;
    let mut run = ptr::null_mut();
    let st = unsafe { dpmm_run(ds, mode.as_ptr(), family.as_ptr(), &opts, &mut run) };
    assert_eq!(st, DpmmStatus::Ok, "{}", last_error());
    assert_eq!(last_error(), "");
    // 2 per worker and iteration, plus setup and teardown
    assert_eq!(unsafe { dpmm_run_total_messages(run) }, 2 * 3 * 15 + 6 + 6);

    let mut len = 0usize;
    assert_eq!(
        unsafe { dpmm_run_labels(run, ptr::null_mut(), 0, &mut len) },
        DpmmStatus::Ok
    );
    assert_eq!(len, n);
    let mut small = vec![0u64; 3];
    assert_eq!(
        unsafe { dpmm_run_labels(run, small.as_mut_ptr(), 3, &mut len) },
        DpmmStatus::BufferTooSmall
    );
    assert!(last_error().contains("needed"));
    let mut labels = vec![0u64; n];
    assert_eq!(
        unsafe { dpmm_run_labels(run, labels.as_mut_ptr(), n, &mut len) },
        DpmmStatus::Ok
    );
    let mut truth = vec![0u64; n];
    assert_eq!(
        unsafe { dpmm_dataset_truth(ds, truth.as_mut_ptr(), n, &mut len) },
        DpmmStatus::Ok
    );

    let mut vi = f64::NAN;
    assert_eq!(
        unsafe { dpmm_variation_of_information(labels.as_ptr(), truth.as_ptr(), n, &mut vi) },
        DpmmStatus::Ok
    );
    assert!(vi < 0.2, "{vi}");
    let mut ll = f64::NAN;
    assert_eq!(unsafe { dpmm_run_loglik(run, ds, false, &mut ll) }, DpmmStatus::Ok);
    assert!(ll.is_finite() && ll < 0.0);
    assert_eq!(unsafe { dpmm_run_num_components(run) }, 3);

    unsafe {
        dpmm_run_free(run);
        dpmm_dataset_free(ds);
    }
}

#[test]
fn rows_round_trip_and_serial_run() {
    let values: Vec<f64> = (0..40)
        .map(|i| {
            if i < 20 {
                (i % 3) as f64 * 0.1
            } else {
                30.0 + (i % 4) as f64 * 0.1
            }
        })
        .collect();
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { dpmm_dataset_from_rows(values.as_ptr(), 40, 1, false, &mut ds) },
        DpmmStatus::Ok
    );
    let mode = CString::new("serial").unwrap();
    let family = CString::new("gaussian:dim=1,sigma=1,sigma0=30").unwrap();
    let mut run = ptr::null_mut();
    // null options select the defaults
    assert_eq!(
        unsafe { dpmm_run(ds, mode.as_ptr(), family.as_ptr(), ptr::null(), &mut run) },
        DpmmStatus::Ok
    );
    assert_eq!(unsafe { dpmm_run_num_components(run) }, 2);
    let mut len = 0;
    assert_eq!(
        unsafe { dpmm_dataset_truth(ds, ptr::null_mut(), 0, &mut len) },
        DpmmStatus::InvalidArgument
    );
    unsafe {
        dpmm_run_free(run);
        dpmm_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    let ds = generate();
    let mut run = ptr::null_mut();
    let family = CString::new("gaussian:dim=2").unwrap();
    let bad_mode = CString::new("sideways").unwrap();
    assert_eq!(
        unsafe { dpmm_run(ds, bad_mode.as_ptr(), family.as_ptr(), ptr::null(), &mut run) },
        DpmmStatus::InvalidArgument
    );
    assert!(last_error().contains("unknown mode"));
    let mode = CString::new("async").unwrap();
    let wrong_dim = CString::new("gaussian:dim=5").unwrap();
    assert_eq!(
        unsafe { dpmm_run(ds, mode.as_ptr(), wrong_dim.as_ptr(), ptr::null(), &mut run) },
        DpmmStatus::InvalidArgument
    );
    assert!(run.is_null());
    assert_eq!(
        unsafe { dpmm_run(ptr::null(), mode.as_ptr(), family.as_ptr(), ptr::null(), &mut run) },
        DpmmStatus::NullPointer
    );
    let missing = CString::new("/nonexistent/data.bin").unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { dpmm_dataset_load(missing.as_ptr(), &mut loaded) },
        DpmmStatus::DataError
    );
    assert_eq!(unsafe { dpmm_dataset_len(ptr::null()) }, 0);
    let mut vi = 0.0;
    let a = [1u64, 2];
    assert_eq!(
        unsafe { dpmm_variation_of_information(a.as_ptr(), ptr::null(), 2, &mut vi) },
        DpmmStatus::NullPointer
    );
    unsafe {
        dpmm_dataset_free(ds);
        dpmm_dataset_free(ptr::null_mut());
        dpmm_run_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dpmm.h")).unwrap();
    for name in [
        "dpmm_last_error",
        "dpmm_dataset_generate",
        "dpmm_dataset_from_rows",
        "dpmm_dataset_load",
        "dpmm_dataset_len",
        "dpmm_dataset_dim",
        "dpmm_dataset_truth",
        "dpmm_dataset_free",
        "dpmm_run_options_default",
        "dpmm_run",
        "dpmm_run_num_components",
        "dpmm_run_total_messages",
        "dpmm_run_labels",
        "dpmm_run_loglik",
        "dpmm_run_free",
        "dpmm_variation_of_information",
        "DPMM_STATUS_BUFFER_TOO_SMALL",
        "typedef struct DpmmRun DpmmRun",
    ] {
        assert!(header.contains(name), "{name} missing from dpmm.h");
    }
}

#[test]
fn c_example_compiles_against_the_header() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(format!("{dir}/include"))
        .arg(format!("{dir}/c/example.c"))
        .status();
    match status {
        Ok(s) => assert!(s.success(), "cc rejected the example"),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}

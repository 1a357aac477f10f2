use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use lpcc_ffi::*;

const SMALL: &str = "k = 2\nlatent = 4\nembed = 4\nhidden = 4\n";

fn new_model(cfg: &str) -> *mut LpccModel {
    let text = CString::new(cfg).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lpcc_model_new(text.as_ptr(), &mut m) }, LpccStatus::Ok);
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lpcc_last_error()) }.to_string_lossy().into_owned()
}

fn grid() -> Vec<f64> {
    (0..300).flat_map(|i| [(i % 10) as f64, ((i / 10) % 6) as f64 * 1.5, (i / 60) as f64]).collect()
}

#[test]
fn round_trip_through_handles() {
    let m = new_model(SMALL);
    let xyz = grid();
    let mut buf = ptr::null_mut();
    assert_eq!(unsafe { lpcc_compress(m, xyz.as_ptr(), xyz.len() / 3, 5, &mut buf) }, LpccStatus::Ok);
    let bytes = unsafe { std::slice::from_raw_parts(lpcc_buffer_data(buf), lpcc_buffer_len(buf)) }.to_vec();
    let mut cloud = ptr::null_mut();
    assert_eq!(unsafe { lpcc_decompress(m, bytes.as_ptr(), bytes.len(), &mut cloud) }, LpccStatus::Ok);
    assert_eq!(unsafe { lpcc_cloud_len(cloud) }, 300);
    assert!(!unsafe { lpcc_cloud_xyz(cloud) }.is_null());
    assert_eq!(last_error(), "");
    unsafe {
        lpcc_cloud_free(cloud);
        lpcc_buffer_free(buf);
        lpcc_model_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let m = new_model(SMALL);
    let xyz = grid();
    let mut buf = ptr::null_mut();
    assert_eq!(unsafe { lpcc_compress(ptr::null(), xyz.as_ptr(), 1, 5, &mut buf) }, LpccStatus::NullPointer);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { lpcc_compress(m, xyz.as_ptr(), 100, 1, &mut buf) }, LpccStatus::Invalid);
    assert_eq!(unsafe { lpcc_compress(m, xyz.as_ptr(), 0, 5, &mut buf) }, LpccStatus::Invalid);

    assert_eq!(unsafe { lpcc_compress(m, xyz.as_ptr(), 100, 5, &mut buf) }, LpccStatus::Ok);
    let mut bytes = unsafe { std::slice::from_raw_parts(lpcc_buffer_data(buf), lpcc_buffer_len(buf)) }.to_vec();
    let mut cloud = ptr::null_mut();
    assert_eq!(unsafe { lpcc_decompress(m, bytes.as_ptr(), 20, &mut cloud) }, LpccStatus::Corrupt);
    let other = new_model("k = 2\nlatent = 4\nembed = 4\nhidden = 4\nseed = 5\n");
    assert_eq!(unsafe { lpcc_decompress(other, bytes.as_ptr(), bytes.len(), &mut cloud) }, LpccStatus::ChecksumMismatch);
    bytes[0] ^= 1;
    assert_eq!(unsafe { lpcc_decompress(m, bytes.as_ptr(), bytes.len(), &mut cloud) }, LpccStatus::Corrupt);
    assert!(cloud.is_null());

    let bad = CString::new("k = \"x\"").unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { lpcc_model_new(bad.as_ptr(), &mut m2) }, LpccStatus::Invalid);
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { lpcc_model_load(missing.as_ptr(), &mut m2) }, LpccStatus::Io);
    unsafe {
        lpcc_buffer_free(buf);
        lpcc_model_free(m);
        lpcc_model_free(other);
        lpcc_model_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_save_and_load_keep_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model(SMALL);
    assert_eq!(unsafe { lpcc_model_save(m, path.as_ptr()) }, LpccStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { lpcc_model_load(path.as_ptr(), &mut loaded) }, LpccStatus::Ok);
    let (mut a, mut b) = (0u64, 1u64);
    unsafe {
        assert_eq!(lpcc_model_checksum(m, &mut a), LpccStatus::Ok);
        assert_eq!(lpcc_model_checksum(loaded, &mut b), LpccStatus::Ok);
        lpcc_model_free(m);
        lpcc_model_free(loaded);
    }
    assert_eq!(a, b);
}

/// Compiles and runs a C program against the generated header and the static library.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("liblpcc_ffi.a");
    if !lib.exists() {
        eprintln!("static library not built at {}, skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "lpcc.h"
int main(void) {
    LpccModel *m = NULL;
    if (lpcc_model_new("k = 1\nlatent = 2\nembed = 2\nhidden = 2\n", &m) != LPCC_STATUS_OK) return 10;
    double xyz[3 * 64];
    for (int i = 0; i < 64; i++) { xyz[3*i] = i % 4; xyz[3*i+1] = (i / 4) % 4; xyz[3*i+2] = i / 16; }
    LpccBuffer *buf = NULL;
    if (lpcc_compress(m, xyz, 64, 3, &buf) != LPCC_STATUS_OK) return 11;
    LpccCloud *c = NULL;
    if (lpcc_decompress(m, lpcc_buffer_data(buf), lpcc_buffer_len(buf), &c) != LPCC_STATUS_OK) return 12;
    if (lpcc_cloud_len(c) != 64) return 13;
    if (lpcc_decompress(m, lpcc_buffer_data(buf), 8, &c) != LPCC_STATUS_CORRUPT) return 14;
    printf("%zu\n", lpcc_cloud_len(c));
    lpcc_cloud_free(c);
    lpcc_buffer_free(buf);
    lpcc_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("prog");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "64");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}

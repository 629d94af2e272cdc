use std::ffi::{CStr, CString};
use std::ptr;

use anyhow::Result;
use bnn_core::arch::build_lenet;
use bnn_core::data::NormStats;
use bnn_core::layers::QKernel;
use bnn_core::model::Model;
use bnn_core::modelio::{self, Storage};
use bnn_ffi::*;
use proptest::prelude::*;

fn last_error() -> String {
    // SAFETY: the library always returns a valid NUL-terminated string.
    unsafe { CStr::from_ptr(bnn_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn lenet_model(seed: u64) -> Result<Model> {
    let norm = NormStats {
        mean: vec![33.0],
        std: vec![78.0],
    };
    Ok(Model::init(build_lenet(true, 10)?, norm, seed)?.deployed()?)
}

fn load_bytes(bytes: &[u8]) -> (BnnStatus, *mut BnnModel) {
    let mut h = ptr::null_mut();
    // SAFETY: `bytes` and `h` are live for the call.
    let s = unsafe { bnn_model_load_bytes(bytes.as_ptr(), bytes.len(), &mut h) };
    (s, h)
}

fn pixels(n: usize) -> Vec<u8> {
    (0..n * 784).map(|i| (i * 7919 % 256) as u8).collect()
}

#[test]
fn version_matches_crate() {
    // SAFETY: static NUL-terminated string.
    let v = unsafe { CStr::from_ptr(bnn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn file_and_bytes_loads_match_core_inference() -> Result<()> {
    let model = lenet_model(3)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("m.bnn");
    modelio::save(&model, &path)?;
    let (reference, _) = modelio::load(&path)?;

    let cpath = CString::new(path.to_str().unwrap())?;
    let mut h = ptr::null_mut();
    // SAFETY: valid string and out pointer.
    assert_eq!(
        unsafe { bnn_model_load(cpath.as_ptr(), &mut h) },
        BnnStatus::Ok
    );
    let (s2, h2) = load_bytes(&std::fs::read(&path)?);
    assert_eq!(s2, BnnStatus::Ok);

    let mut shape = [0usize; 3];
    // SAFETY: live handle, three writable slots.
    unsafe {
        assert_eq!(bnn_model_input_shape(h, shape.as_mut_ptr()), BnnStatus::Ok);
        assert_eq!(bnn_model_num_classes(h), 10);
        assert_eq!(bnn_model_is_packed(h), 1);
    }
    assert_eq!(shape, [1, 28, 28]);

    let n = 4;
    let px = pixels(n);
    let expected = reference.logits(
        &reference.norm.apply(&px, vec![n, 1, 28, 28])?,
        QKernel::Packed,
    )?;
    for handle in [h, h2] {
        let mut out = vec![0f32; n * 10];
        // SAFETY: buffers sized as documented.
        let s =
            unsafe { bnn_model_infer_pixels(handle, px.as_ptr(), n, out.as_mut_ptr(), out.len()) };
        assert_eq!(s, BnnStatus::Ok, "{}", last_error());
        assert_eq!(out, expected.values());
        assert!(last_error().is_empty());

        let normalized = reference.norm.apply(&px, vec![n, 1, 28, 28])?;
        let mut out2 = vec![0f32; n * 10];
        // SAFETY: buffers sized as documented.
        let s = unsafe {
            bnn_model_infer(
                handle,
                normalized.values().as_ptr(),
                n,
                out2.as_mut_ptr(),
                out2.len(),
            )
        };
        assert_eq!(s, BnnStatus::Ok);
        assert_eq!(out2, out);
    }
    // SAFETY: each handle is freed once.
    unsafe {
        bnn_model_free(h);
        bnn_model_free(h2);
        bnn_model_free(ptr::null_mut());
    }
    Ok(())
}

#[test]
fn float_export_reports_unpacked_storage() -> Result<()> {
    let bytes = modelio::encode(&lenet_model(1)?, Storage::Float32)?;
    let (s, h) = load_bytes(&bytes);
    assert_eq!(s, BnnStatus::Ok);
    // SAFETY: live handle, freed once.
    unsafe {
        assert_eq!(bnn_model_is_packed(h), 0);
        bnn_model_free(h);
    }
    Ok(())
}

#[test]
fn malformed_files_map_to_distinct_codes() -> Result<()> {
    let good = modelio::encode(&lenet_model(2)?, Storage::Packed)?;

    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[4] = 99;
    let mut crc = good.clone();
    let last = crc.len() - 1;
    crc[last] ^= 1;
    let cases = [
        (&good[..5], BnnStatus::Truncated),
        (&magic[..], BnnStatus::BadMagic),
        (&version[..], BnnStatus::VersionMismatch),
        (&crc[..], BnnStatus::Checksum),
    ];
    for (bytes, want) in cases {
        let (s, h) = load_bytes(bytes);
        assert_eq!(s, want);
        assert!(h.is_null());
        assert!(!last_error().is_empty());
    }

    let missing = CString::new("/nonexistent/model.bnn")?;
    let mut h = ptr::null_mut();
    // SAFETY: valid string and out pointer.
    assert_eq!(
        unsafe { bnn_model_load(missing.as_ptr(), &mut h) },
        BnnStatus::Io
    );
    Ok(())
}

#[test]
fn null_and_size_errors_are_reported() -> Result<()> {
    let mut h = ptr::null_mut();
    // SAFETY: null inputs are part of the checked contract.
    unsafe {
        assert_eq!(bnn_model_load(ptr::null(), &mut h), BnnStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(
            bnn_model_load_bytes(ptr::null(), 10, &mut h),
            BnnStatus::NullPointer
        );
        assert_eq!(bnn_model_num_classes(ptr::null()), 0);
        assert_eq!(bnn_model_is_packed(ptr::null()), -1);
        let mut out = [0f32; 10];
        assert_eq!(
            bnn_model_infer(ptr::null(), ptr::null(), 1, out.as_mut_ptr(), 10),
            BnnStatus::NullPointer
        );
    }

    let (s, h) = load_bytes(&modelio::encode(&lenet_model(4)?, Storage::Packed)?);
    assert_eq!(s, BnnStatus::Ok);
    let px = pixels(2);
    let mut out = vec![0f32; 20];
    // SAFETY: the wrong lengths are rejected before any access.
    unsafe {
        assert_eq!(
            bnn_model_infer_pixels(h, px.as_ptr(), 2, out.as_mut_ptr(), 19),
            BnnStatus::InvalidArgument
        );
        assert_eq!(
            bnn_model_infer_pixels(h, px.as_ptr(), 0, out.as_mut_ptr(), 0),
            BnnStatus::InvalidArgument
        );
        bnn_model_free(h);
    }
    Ok(())
}

#[test]
fn gemm_matches_float_product_of_signs() {
    let (m, k, n) = (5, 70, 3);
    let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 11) as f32) - 5.0).collect();
    let bt: Vec<f32> = (0..n * k).map(|i| ((i * 53 % 13) as f32) - 6.0).collect();
    let sign = |v: f32| if v >= 0.0 { 1.0 } else { -1.0 };
    let mut out = vec![0f32; m * n];
    // SAFETY: buffers sized m×k, n×k and m×n.
    let s = unsafe { bnn_binary_gemm(a.as_ptr(), bt.as_ptr(), m, k, n, out.as_mut_ptr()) };
    assert_eq!(s, BnnStatus::Ok);
    for i in 0..m {
        for j in 0..n {
            let d: f32 = (0..k)
                .map(|t| sign(a[i * k + t]) * sign(bt[j * k + t]))
                .sum();
            assert_eq!(out[i * n + j], d);
        }
    }
    // SAFETY: rejected before any access.
    let s = unsafe { bnn_binary_gemm(a.as_ptr(), bt.as_ptr(), 0, k, n, out.as_mut_ptr()) };
    assert_eq!(s, BnnStatus::InvalidArgument);
}

proptest! {
    #[test]
    fn dot_matches_float_dot(pairs in prop::collection::vec((-2.0f32..2.0, -2.0f32..2.0), 1..300)) {
        let (x, w): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let sign = |v: f32| if v >= 0.0 { 1i64 } else { -1 };
        let expected: i64 = x.iter().zip(&w).map(|(&a, &b)| sign(a) * sign(b)).sum();
        let mut d = 0i64;
        // SAFETY: both slices hold `x.len()` values.
        let s = unsafe { bnn_binary_dot(x.as_ptr(), w.as_ptr(), x.len(), &mut d) };
        prop_assert_eq!(s, BnnStatus::Ok);
        prop_assert_eq!(d, expected);
    }
}

#[test]
fn zero_counts_as_positive() {
    let x = [0.0f32, -0.0, 1.0];
    let w = [1.0f32, 1.0, 1.0];
    let mut d = 0;
    // SAFETY: three values each.
    assert_eq!(
        unsafe { bnn_binary_dot(x.as_ptr(), w.as_ptr(), 3, &mut d) },
        BnnStatus::Ok
    );
    assert_eq!(d, 3);
}

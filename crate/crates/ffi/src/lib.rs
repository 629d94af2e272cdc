//! C ABI over `bnn-core`: load a saved model, run inference, and call the
//! packed XNOR/popcount kernels.
//!
//! Every fallible function returns a [`BnnStatus`]. On failure the message is
//! kept per thread and read back with [`bnn_last_error_message`]. Panics never
//! cross the boundary; they surface as [`BnnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bnn_core::bittensor::{binary_dot, binary_gemm, BitTensor, RhsLayout};
use bnn_core::layers::QKernel;
use bnn_core::model::Model;
use bnn_core::modelio::{self, Storage};
use bnn_core::{BnnError, FloatTensor};

/// Result code of every fallible call. `Ok` is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    BadMagic = 6,
    VersionMismatch = 7,
    Checksum = 8,
    Truncated = 9,
    StorageMismatch = 10,
    Numeric = 11,
    Internal = 12,
    Panic = 13,
}

impl From<&BnnError> for BnnStatus {
    fn from(e: &BnnError) -> Self {
        match e {
            BnnError::InvalidArgument(_) => BnnStatus::InvalidArgument,
            BnnError::Shape(_) => BnnStatus::Shape,
            BnnError::Numeric(_) => BnnStatus::Numeric,
            BnnError::State(_) | BnnError::Internal(_) => BnnStatus::Internal,
            BnnError::Format { .. } => BnnStatus::Format,
            BnnError::BadMagic { .. } => BnnStatus::BadMagic,
            BnnError::VersionMismatch { .. } => BnnStatus::VersionMismatch,
            BnnError::Checksum { .. } => BnnStatus::Checksum,
            BnnError::Truncated { .. } => BnnStatus::Truncated,
            BnnError::StorageMismatch(_) => BnnStatus::StorageMismatch,
            BnnError::Io(_) => BnnStatus::Io,
        }
    }
}

/// Opaque handle to a loaded model. Create with [`bnn_model_load`] or
/// [`bnn_model_load_bytes`], release with [`bnn_model_free`].
pub struct BnnModel {
    model: Model,
    storage: Storage,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    // Interior NULs would truncate the C string; replace them.
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(BnnStatus, String);

impl From<BnnError> for Failure {
    fn from(e: BnnError) -> Self {
        Failure(BnnStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BnnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(BnnStatus::InvalidArgument, msg)
}

/// Runs `f`, records any failure or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(String::new());
            BnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            BnnStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for reads of `len` elements.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and valid for `len` reads per the caller contract.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// # Safety
/// `p` must be null or valid for writes of `len` elements.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and valid for `len` writes per the caller contract.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `bnn_*` call on the same thread.
#[no_mangle]
pub extern "C" fn bnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn boxed(out: *mut *mut BnnModel, model: Model, storage: Storage) {
    // SAFETY: `out` was checked non-null by the caller of this helper.
    unsafe { *out = Box::into_raw(Box::new(BnnModel { model, storage })) };
}

/// Loads a model file in either storage class. On success `*out` owns a new
/// handle; on failure it is set to null.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_load(path: *const c_char, out: *mut *mut BnnModel) -> BnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: `out` is non-null and writable per the contract.
        unsafe { *out = ptr::null_mut() };
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: `path` is a NUL-terminated string per the contract.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8".into()))?;
        let (model, storage) = modelio::load(path)?;
        boxed(out, model, storage);
        Ok(())
    })
}

/// Same as [`bnn_model_load`] from an in-memory copy of the file.
///
/// # Safety
/// `data` must be valid for `len` reads and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_load_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut BnnModel,
) -> BnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: `out` is non-null and writable per the contract.
        unsafe { *out = ptr::null_mut() };
        // SAFETY: forwarded caller contract.
        let bytes = unsafe { slice(data, len, "data")? };
        let (model, storage) = modelio::decode(bytes)?;
        boxed(out, model, storage);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_free(model: *mut BnnModel) {
    if !model.is_null() {
        // SAFETY: the handle came from `Box::into_raw` and is freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be null or a live handle.
unsafe fn handle<'a>(model: *const BnnModel) -> Result<&'a BnnModel, Failure> {
    // SAFETY: null or live per the caller contract.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

/// Writes the `C, H, W` shape of one input item to `shape[0..3]`.
///
/// # Safety
/// `model` must be a live handle and `shape` valid for 3 writes.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_input_shape(
    model: *const BnnModel,
    shape: *mut usize,
) -> BnnStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let m = unsafe { handle(model)? };
        let dst = unsafe { slice_mut(shape, 3, "shape")? };
        dst.copy_from_slice(m.model.input_shape());
        Ok(())
    })
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_num_classes(model: *const BnnModel) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.num_classes())
}

/// 1 when the file used packed (bit) storage for binary layers, 0 for the
/// float export, -1 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_is_packed(model: *const BnnModel) -> i32 {
    // SAFETY: forwarded caller contract.
    unsafe { model.as_ref() }.map_or(-1, |m| i32::from(m.storage.is_packed()))
}

fn infer(m: &BnnModel, images: FloatTensor, logits: &mut [f32]) -> Result<(), Failure> {
    let out = m.model.logits(&images, QKernel::Packed)?;
    logits.copy_from_slice(out.values());
    Ok(())
}

fn check_batch(
    m: &BnnModel,
    batch: usize,
    logits_len: usize,
) -> Result<(Vec<usize>, usize), Failure> {
    if batch == 0 {
        return Err(invalid("batch must be positive".into()));
    }
    let item: usize = m.model.input_shape().iter().product();
    let (need, len) = batch
        .checked_mul(m.model.num_classes())
        .zip(batch.checked_mul(item))
        .ok_or_else(|| invalid(format!("batch {batch} overflows the buffer size")))?;
    if logits_len != need {
        return Err(invalid(format!(
            "logits_len is {logits_len}, expected batch × classes = {need}"
        )));
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(m.model.input_shape());
    Ok((shape, len))
}

/// Logits for `batch` already-normalized items laid out `N×C×H×W`.
/// `logits_len` must equal `batch × num_classes`.
///
/// # Safety
/// `model` must be a live handle, `input` valid for `batch × C × H × W`
/// reads and `logits` valid for `logits_len` writes.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_infer(
    model: *const BnnModel,
    input: *const f32,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> BnnStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let m = unsafe { handle(model)? };
        let (shape, len) = check_batch(m, batch, logits_len)?;
        let input = unsafe { slice(input, len, "input")? };
        let logits = unsafe { slice_mut(logits, logits_len, "logits")? };
        infer(m, FloatTensor::new(shape, input.to_vec())?, logits)
    })
}

/// Logits for `batch` raw 8-bit images laid out `N×C×H×W`, normalized with
/// the statistics stored in the model.
///
/// # Safety
/// Same as [`bnn_model_infer`] with `pixels` in place of `input`.
#[no_mangle]
pub unsafe extern "C" fn bnn_model_infer_pixels(
    model: *const BnnModel,
    pixels: *const u8,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> BnnStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let m = unsafe { handle(model)? };
        let (shape, len) = check_batch(m, batch, logits_len)?;
        let pixels = unsafe { slice(pixels, len, "pixels")? };
        let logits = unsafe { slice_mut(logits, logits_len, "logits")? };
        infer(m, m.model.norm.apply(pixels, shape)?, logits)
    })
}

fn pack_rows(values: &[f32], rows: usize, cols: usize) -> Result<BitTensor, Failure> {
    Ok(BitTensor::pack(&FloatTensor::new(
        vec![rows, cols],
        values.to_vec(),
    )?)?)
}

/// Dot product of `sign(x)` and `sign(w)` over `n` entries, with
/// `sign(0) = +1`, computed on packed bits.
///
/// # Safety
/// `x` and `w` must be valid for `n` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn bnn_binary_dot(
    x: *const f32,
    w: *const f32,
    n: usize,
    out: *mut i64,
) -> BnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err(invalid("n must be positive".into()));
        }
        // SAFETY: forwarded caller contract.
        let (x, w) = unsafe { (slice(x, n, "x")?, slice(w, n, "w")?) };
        let (px, pw) = (pack_rows(x, 1, n)?, pack_rows(w, 1, n)?);
        let d = binary_dot(px.row(0), pw.row(0))?;
        // SAFETY: non-null and writable per the contract.
        unsafe { *out = d };
        Ok(())
    })
}

/// `out = sign(A) · sign(Bt)ᵀ` where `A` is `m×k` and `Bt` is `n×k`, both
/// row-major; `out` is `m×n` row-major.
///
/// # Safety
/// `a` must be valid for `m × k` reads, `bt` for `n × k` reads and `out`
/// for `m × n` writes.
#[no_mangle]
pub unsafe extern "C" fn bnn_binary_gemm(
    a: *const f32,
    bt: *const f32,
    m: usize,
    k: usize,
    n: usize,
    out: *mut f32,
) -> BnnStatus {
    guard(|| {
        if m == 0 || k == 0 || n == 0 {
            return Err(invalid(format!(
                "dimensions must be positive, got m={m} k={k} n={n}"
            )));
        }
        let len = |x: usize, y: usize| {
            x.checked_mul(y)
                .ok_or_else(|| invalid(format!("{x} × {y} overflows")))
        };
        let (mk, nk, mn) = (len(m, k)?, len(n, k)?, len(m, n)?);
        // SAFETY: forwarded caller contract.
        let (a, bt, out) = unsafe {
            (
                slice(a, mk, "a")?,
                slice(bt, nk, "bt")?,
                slice_mut(out, mn, "out")?,
            )
        };
        let c = binary_gemm(
            &pack_rows(a, m, k)?,
            &pack_rows(bt, n, k)?,
            RhsLayout::Transposed,
        )?;
        out.copy_from_slice(c.values());
        Ok(())
    })
}

//! C ABI over the codec. Objects cross the boundary as opaque handles that
//! the caller releases with the matching `*_free` function. Every call
//! returns an [`LpccStatus`]; on failure [`lpcc_last_error`] describes it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lpcc::model::{Model, ModelConfig};
use lpcc::pcio::PointCloud;
use lpcc::pipeline::{compress, decompress, CompressedFrame};
use lpcc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpccStatus {
    Ok = 0,
    NullPointer = 1,
    Invalid = 2,
    Corrupt = 3,
    ChecksumMismatch = 4,
    Io = 5,
    Numerical = 6,
    Format = 7,
    Panic = 8,
}

/// A loaded model.
pub struct LpccModel(Model);

/// An owned byte buffer, e.g. a compressed frame.
pub struct LpccBuffer(Vec<u8>);

/// Decoded points, stored as interleaved x, y, z.
pub struct LpccCloud(Vec<f64>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LpccStatus {
    match e {
        Error::Io(_) => LpccStatus::Io,
        Error::Format(_) => LpccStatus::Format,
        Error::Invalid(_) => LpccStatus::Invalid,
        Error::Corrupt(_) => LpccStatus::Corrupt,
        Error::ChecksumMismatch { .. } => LpccStatus::ChecksumMismatch,
        Error::Numerical(_) => LpccStatus::Numerical,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LpccStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LpccStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            LpccStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LpccStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Invalid(format!("{what} is not UTF-8"))))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lpcc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpcc_model_load(path: *const c_char, out: *mut *mut LpccModel) -> LpccStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        write_out(out, LpccModel(Model::load(path)?))
    })
}

/// Builds a freshly initialized model from a TOML configuration; an empty
/// string selects the defaults.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lpcc_model_new(config: *const c_char, out: *mut *mut LpccModel) -> LpccStatus {
    guard(|| {
        let text = c_str(config, "config")?;
        let cfg = ModelConfig::from_text(text)?;
        write_out(out, LpccModel(Model::new(cfg)?))
    })
}

/// Writes a model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lpcc_model_save(model: *const LpccModel, path: *const c_char) -> LpccStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let path = c_str(path, "path")?;
        m.0.save(path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn lpcc_model_checksum(model: *const LpccModel, out: *mut u64) -> LpccStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = m.0.checksum();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lpcc_model_free(model: *mut LpccModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Compresses `count` points given as interleaved x, y, z.
///
/// # Safety
/// `xyz` must point to `3 * count` doubles; `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lpcc_compress(
    model: *const LpccModel,
    xyz: *const f64,
    count: usize,
    depth: u32,
    out: *mut *mut LpccBuffer,
) -> LpccStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if xyz.is_null() {
            return Err(Fail::Null("xyz"));
        }
        let flat = std::slice::from_raw_parts(xyz, count.checked_mul(3).ok_or(Fail::Lib(Error::Invalid("count overflows".into())))?);
        let cloud = PointCloud::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
        cloud.validate()?;
        let frame = compress(&cloud, &m.0, depth)?;
        write_out(out, LpccBuffer(frame.to_bytes()))
    })
}

/// Decompresses a frame.
///
/// # Safety
/// `data` must point to `len` readable bytes; `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lpcc_decompress(
    model: *const LpccModel,
    data: *const u8,
    len: usize,
    out: *mut *mut LpccCloud,
) -> LpccStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let frame = CompressedFrame::from_bytes(std::slice::from_raw_parts(data, len))?;
        let cloud = decompress(&frame, &m.0)?;
        write_out(out, LpccCloud(cloud.points.iter().flatten().copied().collect()))
    })
}

/// Length in bytes, or 0 for null.
///
/// # Safety
/// `buf` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn lpcc_buffer_len(buf: *const LpccBuffer) -> usize {
    buf.as_ref().map_or(0, |b| b.0.len())
}

/// Pointer to the bytes, valid until the buffer is freed; null for null.
///
/// # Safety
/// `buf` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn lpcc_buffer_data(buf: *const LpccBuffer) -> *const u8 {
    buf.as_ref().map_or(ptr::null(), |b| b.0.as_ptr())
}

/// # Safety
/// `buf` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lpcc_buffer_free(buf: *mut LpccBuffer) {
    if !buf.is_null() {
        drop(Box::from_raw(buf));
    }
}

/// Number of points, or 0 for null.
///
/// # Safety
/// `cloud` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn lpcc_cloud_len(cloud: *const LpccCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len() / 3)
}

/// Interleaved x, y, z coordinates, valid until the cloud is freed.
///
/// # Safety
/// `cloud` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn lpcc_cloud_xyz(cloud: *const LpccCloud) -> *const f64 {
    cloud.as_ref().map_or(ptr::null(), |c| c.0.as_ptr())
}

/// # Safety
/// `cloud` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lpcc_cloud_free(cloud: *mut LpccCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

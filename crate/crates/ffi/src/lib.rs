//! C ABI over the core workbench: opaque model handles, integer error
//! codes, and a thread-local last-error message.
//!
//! Conventions:
//! - Functions returning a pointer yield null on failure.
//! - Functions returning `int32_t` yield 0 on success and a nonzero error
//!   class otherwise (see the `PSEG_ERR_*` constants).
//! - After any failure, `pseg_last_error` copies a human-readable message.
//! - Every handle must be released exactly once with its `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use promptseg::autograd::NdArray;
use promptseg::error::Error;
use promptseg::eval;
use promptseg::model::SegModel;
use promptseg::synth::Sample;
use promptseg::tuning;

/// Success.
pub const PSEG_OK: i32 = 0;
/// Null pointer, bad UTF-8, or a panic inside the library.
pub const PSEG_ERR_USAGE: i32 = 1;
/// Invalid configuration or contract violation.
pub const PSEG_ERR_CONFIG: i32 = 2;
/// Missing or malformed data (files, checkpoints, fingerprints).
pub const PSEG_ERR_DATA: i32 = 3;
/// Numerical failure or degenerate input.
pub const PSEG_ERR_NUMERIC: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn code_of(e: &Error) -> i32 {
    e.exit_code()
}

fn fail(e: Error) -> i32 {
    let code = code_of(&e);
    set_error(e.to_string());
    code
}

/// Opaque 32-bit segmentation model handle.
pub struct PsegModel {
    inner: SegModel<f32>,
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, i32> {
    if ptr.is_null() {
        set_error("null path");
        return Err(PSEG_ERR_USAGE);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(PSEG_ERR_USAGE)
        }
    }
}

fn guarded<T>(f: impl FnOnce() -> T, on_panic: T) -> T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(_) => {
            set_error("internal panic");
            on_panic
        }
    }
}

/// Copy the last error message (NUL-terminated, truncated to `len`) into
/// `buf`; returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn pseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a full checkpoint; returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn pseg_model_load_full(path: *const c_char) -> *mut PsegModel {
    guarded(
        || {
            let path = match unsafe { path_arg(path) } {
                Ok(p) => p,
                Err(_) => return std::ptr::null_mut(),
            };
            match tuning::load_full::<f32>(path) {
                Ok(inner) => Box::into_raw(Box::new(PsegModel { inner })),
                Err(e) => {
                    fail(e);
                    std::ptr::null_mut()
                }
            }
        },
        std::ptr::null_mut(),
    )
}

/// Load a delta checkpoint onto a backbone handle; returns a new handle,
/// null on failure. The backbone is not consumed.
#[no_mangle]
pub unsafe extern "C" fn pseg_model_load_delta(
    path: *const c_char,
    backbone: *const PsegModel,
) -> *mut PsegModel {
    guarded(
        || {
            if backbone.is_null() {
                set_error("null backbone handle");
                return std::ptr::null_mut();
            }
            let path = match unsafe { path_arg(path) } {
                Ok(p) => p,
                Err(_) => return std::ptr::null_mut(),
            };
            let backbone = unsafe { &(*backbone).inner };
            match tuning::load_delta(path, backbone) {
                Ok(inner) => Box::into_raw(Box::new(PsegModel { inner })),
                Err(e) => {
                    fail(e);
                    std::ptr::null_mut()
                }
            }
        },
        std::ptr::null_mut(),
    )
}

/// Release a model handle.
#[no_mangle]
pub unsafe extern "C" fn pseg_model_free(model: *mut PsegModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Input extents: channels, then the three spatial axes.
#[no_mangle]
pub unsafe extern "C" fn pseg_model_input_shape(
    model: *const PsegModel,
    out_shape: *mut usize,
) -> i32 {
    guarded(
        || {
            if model.is_null() || out_shape.is_null() {
                set_error("null argument");
                return PSEG_ERR_USAGE;
            }
            let cfg = unsafe { &(*model).inner.config };
            unsafe {
                *out_shape = cfg.in_channels;
                *out_shape.add(1) = cfg.spatial[0];
                *out_shape.add(2) = cfg.spatial[1];
                *out_shape.add(3) = cfg.spatial[2];
            }
            PSEG_OK
        },
        PSEG_ERR_USAGE,
    )
}

/// Number of segmentation classes (including background).
#[no_mangle]
pub unsafe extern "C" fn pseg_model_num_classes(model: *const PsegModel) -> i32 {
    if model.is_null() {
        set_error("null model handle");
        return -1;
    }
    unsafe { (*model).inner.config.num_classes as i32 }
}

/// Total scalar parameter count.
#[no_mangle]
pub unsafe extern "C" fn pseg_model_param_count(model: *const PsegModel) -> usize {
    if model.is_null() {
        set_error("null model handle");
        return 0;
    }
    unsafe { (*model).inner.total_scalar_count() }
}

/// Segment one volume.
///
/// `volume` holds `channels · H · W · D` floats in channel-major order;
/// `out_mask` receives `H · W · D` class labels.
#[no_mangle]
pub unsafe extern "C" fn pseg_model_predict(
    model: *const PsegModel,
    volume: *const f32,
    volume_len: usize,
    out_mask: *mut u8,
    mask_len: usize,
) -> i32 {
    guarded(
        || {
            if model.is_null() || volume.is_null() || out_mask.is_null() {
                set_error("null argument");
                return PSEG_ERR_USAGE;
            }
            let m = unsafe { &(*model).inner };
            let cfg = &m.config;
            let voxels: usize = cfg.spatial.iter().product();
            if volume_len != cfg.in_channels * voxels || mask_len != voxels {
                set_error(format!(
                    "expected volume length {} and mask length {voxels}, got {volume_len} and {mask_len}",
                    cfg.in_channels * voxels
                ));
                return PSEG_ERR_CONFIG;
            }
            let data = unsafe { std::slice::from_raw_parts(volume, volume_len) }.to_vec();
            let array = match NdArray::new(
                vec![cfg.in_channels, cfg.spatial[0], cfg.spatial[1], cfg.spatial[2]],
                data,
            ) {
                Ok(a) => a,
                Err(e) => return fail(e),
            };
            let sample = Sample {
                volume: array,
                mask: vec![0u8; voxels],
                center_id: String::new(),
                sample_id: String::new(),
            };
            match eval::predict(m, &sample) {
                Ok(mask) => {
                    unsafe {
                        std::ptr::copy_nonoverlapping(mask.as_ptr(), out_mask, voxels);
                    }
                    PSEG_OK
                }
                Err(e) => fail(e),
            }
        },
        PSEG_ERR_USAGE,
    )
}

/// Dice overlap of one class between two label masks; negative on error.
#[no_mangle]
pub unsafe extern "C" fn pseg_dice(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    class: u8,
) -> f64 {
    guarded(
        || {
            if pred.is_null() || truth.is_null() {
                set_error("null mask");
                return -1.0;
            }
            let p = unsafe { std::slice::from_raw_parts(pred, len) };
            let t = unsafe { std::slice::from_raw_parts(truth, len) };
            match eval::dice(p, t, class) {
                Ok(d) => d,
                Err(e) => {
                    fail(e);
                    -1.0
                }
            }
        },
        -1.0,
    )
}

#[cfg(test)]
mod tests {
    use std::ffi::CString;

    use promptseg::config::ExperimentConfig;
    use promptseg::model::{PromptConfig, SegModel};
    use promptseg::tuning::{save_delta, save_full, TuningStrategy};

    use super::*;

    fn tiny_model() -> SegModel<f32> {
        let cfg = ExperimentConfig::desk_default();
        SegModel::init(cfg.model, PromptConfig::shallow(4), 3).unwrap()
    }

    fn c_path(p: &Path) -> CString {
        CString::new(p.to_str().unwrap()).unwrap()
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(pseg_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn load_predict_free_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        let model = tiny_model();
        save_full(&model, &ckpt).unwrap();

        let handle = unsafe { pseg_model_load_full(c_path(&ckpt).as_ptr()) };
        assert!(!handle.is_null());

        let mut shape = [0usize; 4];
        assert_eq!(
            unsafe { pseg_model_input_shape(handle, shape.as_mut_ptr()) },
            PSEG_OK
        );
        assert_eq!(shape, [2, 16, 16, 16]);
        assert_eq!(unsafe { pseg_model_num_classes(handle) }, 3);
        assert!(unsafe { pseg_model_param_count(handle) } > 0);

        let voxels = 16 * 16 * 16;
        let volume = vec![0.25f32; 2 * voxels];
        let mut mask = vec![255u8; voxels];
        let rc = unsafe {
            pseg_model_predict(handle, volume.as_ptr(), volume.len(), mask.as_mut_ptr(), voxels)
        };
        assert_eq!(rc, PSEG_OK);
        assert!(mask.iter().all(|&m| m < 3));

        // wrong buffer length is a config error, not a crash
        let rc = unsafe {
            pseg_model_predict(handle, volume.as_ptr(), 7, mask.as_mut_ptr(), voxels)
        };
        assert_eq!(rc, PSEG_ERR_CONFIG);
        let mut buf = [0 as c_char; 256];
        let n = unsafe { pseg_last_error(buf.as_mut_ptr(), buf.len()) };
        assert!(n > 0);

        unsafe { pseg_model_free(handle) };
    }

    #[test]
    fn delta_loading_through_the_abi() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let full = dir.path().join("full.ckpt");
        let delta = dir.path().join("delta.ckpt");
        save_full(&model, &full).unwrap();

        let mut tuned = model.clone();
        for x in tuned.param_mut("prompt.1").value.data_mut() {
            *x += 1.0;
        }
        save_delta(&tuned, TuningStrategy::ShallowPrompt, &delta).unwrap();

        let backbone = unsafe { pseg_model_load_full(c_path(&full).as_ptr()) };
        assert!(!backbone.is_null());
        let restored = unsafe { pseg_model_load_delta(c_path(&delta).as_ptr(), backbone) };
        assert!(!restored.is_null());
        unsafe {
            assert_eq!(
                (*restored).inner.param("prompt.1").value.data(),
                tuned.param("prompt.1").value.data()
            );
            pseg_model_free(restored);
            pseg_model_free(backbone);
        }
    }

    #[test]
    fn missing_file_reports_data_error() {
        let bogus = CString::new("/nonexistent/x.ckpt").unwrap();
        let handle = unsafe { pseg_model_load_full(bogus.as_ptr()) };
        assert!(handle.is_null());
        let mut buf = [0 as c_char; 256];
        assert!(unsafe { pseg_last_error(buf.as_mut_ptr(), buf.len()) } > 0);
    }

    #[test]
    fn dice_through_the_abi() {
        let a = [0u8, 1, 1, 0];
        let b = [0u8, 1, 0, 0];
        let d = unsafe { pseg_dice(a.as_ptr(), b.as_ptr(), 4, 1) };
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(unsafe { pseg_dice(std::ptr::null(), b.as_ptr(), 4, 1) }, -1.0);
    }
}

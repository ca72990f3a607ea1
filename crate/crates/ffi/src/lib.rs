//! C ABI for the histossl toolkit.
//!
//! Conventions:
//! - Handles (`HistosslModel`) are opaque pointers created and destroyed by
//!   this library; never free them with `free()`.
//! - Fallible functions return a `HistosslStatus` code; on any non-OK code
//!   the thread-local message from `histossl_last_error_message` describes
//!   the failure.
//! - Buffers are caller-allocated; size requirements are documented per
//!   function and validated where the API carries enough information.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::slice;

use histossl::cluster::{minibatch_kmeans, Points};
use histossl::contrastive::{nt_xent_reference, ContrastiveBatch};
use histossl::data::percentage_quota;
use histossl::imaging::{foreground_ratio, is_foreground, HsvPixel, ImagePatch};
use histossl::model::{init_model, EncoderConfig, Model, ProjectionConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistosslStatus {
    /// Success.
    Ok = 0,
    /// A pointer argument was null.
    NullPointer = 1,
    /// An argument value was rejected (shape, range, or encoding).
    InvalidArgument = 2,
    /// The operation itself failed (I/O, numeric, or data error).
    RuntimeError = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(status: HistosslStatus, msg: &str) -> HistosslStatus {
    set_error(msg);
    status
}

/// Message for the most recent error on the calling thread. The pointer is
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn histossl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque encoder + projection-head handle.
pub struct HistosslModel {
    inner: Model,
}

unsafe fn path_from_c<'a>(path: *const c_char) -> Result<&'a Path, HistosslStatus> {
    if path.is_null() {
        return Err(fail(HistosslStatus::NullPointer, "path is null"));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(HistosslStatus::InvalidArgument, "path is not valid UTF-8")),
    }
}

/// Create a randomly initialized model.
///
/// `stage_channels` points at `n_stages` output-channel counts, one per
/// stride-2 encoder stage. `hidden_dim` 0 means "match the feature
/// dimension". On success `*out` owns the new handle.
///
/// # Safety
/// `stage_channels` must be readable for `n_stages` elements and `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn histossl_model_new(
    input_side: usize,
    stage_channels: *const usize,
    n_stages: usize,
    blocks_per_stage: usize,
    hidden_dim: usize,
    out_dim: usize,
    seed: u64,
    out: *mut *mut HistosslModel,
) -> HistosslStatus {
    if out.is_null() || stage_channels.is_null() {
        return fail(HistosslStatus::NullPointer, "stage_channels or out is null");
    }
    let channels = slice::from_raw_parts(stage_channels, n_stages).to_vec();
    let ec = EncoderConfig { input_side, stage_channels: channels, blocks_per_stage };
    let pc = ProjectionConfig { hidden_dim, out_dim };
    match init_model(&ec, &pc, seed) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(HistosslModel { inner }));
            HistosslStatus::Ok
        }
        Err(e) => fail(HistosslStatus::InvalidArgument, &e.to_string()),
    }
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a null-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn histossl_model_load(
    path: *const c_char,
    out: *mut *mut HistosslModel,
) -> HistosslStatus {
    if out.is_null() {
        return fail(HistosslStatus::NullPointer, "out is null");
    }
    let path = match path_from_c(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match Model::load(path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(HistosslModel { inner }));
            HistosslStatus::Ok
        }
        Err(e) => fail(HistosslStatus::RuntimeError, &e.to_string()),
    }
}

/// Save a model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle from this library; `path` a null-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn histossl_model_save(
    model: *const HistosslModel,
    path: *const c_char,
) -> HistosslStatus {
    let Some(model) = model.as_ref() else {
        return fail(HistosslStatus::NullPointer, "model is null");
    };
    let path = match path_from_c(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match model.inner.save(path) {
        Ok(()) => HistosslStatus::Ok,
        Err(e) => fail(HistosslStatus::RuntimeError, &e.to_string()),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn histossl_model_free(model: *mut HistosslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension of the frozen encoder (the width of `encode` rows).
///
/// # Safety
/// `model` must be a live handle; returns 0 on null.
#[no_mangle]
pub unsafe extern "C" fn histossl_model_feature_dim(model: *const HistosslModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.feature_dim())
}

/// Expected input side length in pixels (inputs are square RGB patches).
///
/// # Safety
/// `model` must be a live handle; returns 0 on null.
#[no_mangle]
pub unsafe extern "C" fn histossl_model_input_side(model: *const HistosslModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.encoder.input_side)
}

/// Encode a batch of images into frozen features.
///
/// `pixels` holds `n * 3 * side * side` floats in NCHW channel order scaled
/// to [0, 1]; `features_out` receives `n * feature_dim` floats.
///
/// # Safety
/// Both buffers must match the documented sizes for the given model and `n`.
#[no_mangle]
pub unsafe extern "C" fn histossl_model_encode(
    model: *const HistosslModel,
    pixels: *const f32,
    n: usize,
    features_out: *mut f32,
) -> HistosslStatus {
    let Some(model) = model.as_ref() else {
        return fail(HistosslStatus::NullPointer, "model is null");
    };
    if pixels.is_null() || features_out.is_null() {
        return fail(HistosslStatus::NullPointer, "pixels or features_out is null");
    }
    let side = model.inner.encoder.input_side;
    let input = slice::from_raw_parts(pixels, n * 3 * side * side);
    match model.inner.encode(input, n) {
        Ok(features) => {
            let out = slice::from_raw_parts_mut(features_out, n * model.inner.feature_dim());
            out.copy_from_slice(&features);
            HistosslStatus::Ok
        }
        Err(e) => fail(HistosslStatus::RuntimeError, &e.to_string()),
    }
}

/// Contrastive loss of a projection batch.
///
/// `z` holds `rows * dim` floats where consecutive row pairs (0,1), (2,3),
/// ... are the two views of one source image; `rows` must be even.
///
/// # Safety
/// `z` must be readable for `rows * dim` elements; `loss_out` valid.
#[no_mangle]
pub unsafe extern "C" fn histossl_nt_xent(
    z: *const f64,
    rows: usize,
    dim: usize,
    temperature: f64,
    loss_out: *mut f64,
) -> HistosslStatus {
    if z.is_null() || loss_out.is_null() {
        return fail(HistosslStatus::NullPointer, "z or loss_out is null");
    }
    let z = slice::from_raw_parts(z, rows * dim).to_vec();
    let batch = match ContrastiveBatch::new(z, rows, dim, temperature) {
        Ok(b) => b,
        Err(e) => return fail(HistosslStatus::InvalidArgument, &e.to_string()),
    };
    match nt_xent_reference(&batch) {
        Ok(loss) => {
            *loss_out = loss;
            HistosslStatus::Ok
        }
        Err(e) => fail(HistosslStatus::RuntimeError, &e.to_string()),
    }
}

/// 1 if an HSV pixel (all channels in [0, 1]) counts as tissue foreground,
/// else 0.
#[no_mangle]
pub extern "C" fn histossl_is_foreground(h: f64, s: f64, v: f64) -> i32 {
    i32::from(is_foreground(HsvPixel { h, s, v }))
}

/// Fraction of foreground pixels in an interleaved 8-bit RGB image.
///
/// # Safety
/// `rgb` must be readable for `width * height * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn histossl_foreground_ratio(
    rgb: *const u8,
    width: usize,
    height: usize,
    ratio_out: *mut f64,
) -> HistosslStatus {
    if rgb.is_null() || ratio_out.is_null() {
        return fail(HistosslStatus::NullPointer, "rgb or ratio_out is null");
    }
    if width == 0 || height == 0 {
        return fail(HistosslStatus::InvalidArgument, "width and height must be >= 1");
    }
    let mut patch = ImagePatch::filled(width, height, [0, 0, 0]);
    patch.pixels.copy_from_slice(slice::from_raw_parts(rgb, width * height * 3));
    *ratio_out = foreground_ratio(&patch);
    HistosslStatus::Ok
}

/// Dataset-quota rule: `percent` of `available`, banker's-rounded, clamped
/// to `[min, max]`, never more than `available`.
#[no_mangle]
pub extern "C" fn histossl_percentage_quota(
    available: usize,
    percent: f64,
    min: usize,
    max: usize,
) -> usize {
    percentage_quota(available, percent, min, max)
}

/// Mini-batch k-means over row-major `n x d` features.
///
/// `assignments_out` receives `n` cluster indices; `centroids_out` receives
/// `k * d` row-major centroid coordinates; `inertia_out` the within-cluster
/// sum of squared distances.
///
/// # Safety
/// All buffers must match the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn histossl_kmeans(
    data: *const f32,
    n: usize,
    d: usize,
    k: usize,
    batch: usize,
    iters: usize,
    seed: u64,
    assignments_out: *mut u32,
    centroids_out: *mut f64,
    inertia_out: *mut f64,
) -> HistosslStatus {
    if data.is_null() || assignments_out.is_null() || centroids_out.is_null() || inertia_out.is_null() {
        return fail(HistosslStatus::NullPointer, "a buffer argument is null");
    }
    let data = slice::from_raw_parts(data, n * d);
    let points = match Points::new(data, n, d) {
        Ok(p) => p,
        Err(e) => return fail(HistosslStatus::InvalidArgument, &e.to_string()),
    };
    match minibatch_kmeans(&points, k, batch, iters, seed) {
        Ok(model) => {
            let assignments = slice::from_raw_parts_mut(assignments_out, n);
            for (slot, &a) in assignments.iter_mut().zip(&model.assignments) {
                *slot = a as u32;
            }
            slice::from_raw_parts_mut(centroids_out, k * d).copy_from_slice(&model.centroids);
            *inertia_out = model.inertia;
            HistosslStatus::Ok
        }
        Err(e) => fail(HistosslStatus::InvalidArgument, &e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn model_roundtrip_through_the_c_surface() {
        let channels = [4usize, 8];
        let mut handle: *mut HistosslModel = ptr::null_mut();
        let status = unsafe {
            histossl_model_new(16, channels.as_ptr(), 2, 1, 0, 8, 7, &mut handle)
        };
        assert_eq!(status, HistosslStatus::Ok);
        assert_eq!(unsafe { histossl_model_feature_dim(handle) }, 8);
        assert_eq!(unsafe { histossl_model_input_side(handle) }, 16);

        let n = 3usize;
        let pixels = vec![0.25f32; n * 3 * 16 * 16];
        let mut features = vec![0.0f32; n * 8];
        let status =
            unsafe { histossl_model_encode(handle, pixels.as_ptr(), n, features.as_mut_ptr()) };
        assert_eq!(status, HistosslStatus::Ok);
        // identical inputs encode identically
        assert_eq!(features[..8], features[8..16]);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.sslh").to_str().unwrap()).unwrap();
        assert_eq!(unsafe { histossl_model_save(handle, path.as_ptr()) }, HistosslStatus::Ok);
        let mut reloaded: *mut HistosslModel = ptr::null_mut();
        assert_eq!(unsafe { histossl_model_load(path.as_ptr(), &mut reloaded) }, HistosslStatus::Ok);
        let mut features2 = vec![0.0f32; n * 8];
        unsafe { histossl_model_encode(reloaded, pixels.as_ptr(), n, features2.as_mut_ptr()) };
        assert_eq!(features, features2);
        unsafe {
            histossl_model_free(handle);
            histossl_model_free(reloaded);
        }
    }

    #[test]
    fn null_and_bad_arguments_set_the_thread_error() {
        let mut handle: *mut HistosslModel = ptr::null_mut();
        let status = unsafe { histossl_model_new(16, ptr::null(), 2, 1, 0, 8, 7, &mut handle) };
        assert_eq!(status, HistosslStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(histossl_last_error_message()) };
        assert!(!msg.to_bytes().is_empty());

        // a 16-pixel image cannot survive four stride-2 stages
        let channels = [4usize, 8, 16, 32, 64];
        let status = unsafe { histossl_model_new(4, channels.as_ptr(), 5, 1, 0, 8, 7, &mut handle) };
        assert_eq!(status, HistosslStatus::InvalidArgument);

        let missing = CString::new("/nonexistent/model.sslh").unwrap();
        let status = unsafe { histossl_model_load(missing.as_ptr(), &mut handle) };
        assert_eq!(status, HistosslStatus::RuntimeError);
    }

    #[test]
    fn loss_foreground_and_quota_match_the_core_crate() {
        let z = [0.6f64, -0.8, 0.0, 0.6, -0.8, 0.0, 0.6, -0.8, 0.0, 0.6, -0.8, 0.0];
        let mut loss = 0.0f64;
        let status = unsafe { histossl_nt_xent(z.as_ptr(), 4, 3, 0.1, &mut loss) };
        assert_eq!(status, HistosslStatus::Ok);
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);

        assert_eq!(histossl_is_foreground(0.6, 0.5, 0.7), 1);
        assert_eq!(histossl_is_foreground(0.4, 0.5, 0.7), 0);

        let rgb = [64u8, 120, 180, 255, 255, 255];
        let mut ratio = 0.0f64;
        let status = unsafe { histossl_foreground_ratio(rgb.as_ptr(), 2, 1, &mut ratio) };
        assert_eq!(status, HistosslStatus::Ok);
        assert_eq!(ratio, 0.5);

        assert_eq!(histossl_percentage_quota(50_000, 1.0, 10, 2000), 500);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut data = Vec::new();
        for c in [0.0f32, 100.0] {
            for i in 0..10 {
                data.push(c + i as f32 * 0.001);
                data.push(c);
            }
        }
        let mut assignments = vec![0u32; 20];
        let mut centroids = vec![0.0f64; 4];
        let mut inertia = f64::NAN;
        let status = unsafe {
            histossl_kmeans(
                data.as_ptr(),
                20,
                2,
                2,
                20,
                50,
                3,
                assignments.as_mut_ptr(),
                centroids.as_mut_ptr(),
                &mut inertia,
            )
        };
        assert_eq!(status, HistosslStatus::Ok);
        assert!(assignments[..10].iter().all(|&a| a == assignments[0]));
        assert!(assignments[10..].iter().all(|&a| a == assignments[10]));
        assert_ne!(assignments[0], assignments[10]);
        assert!(inertia < 1.0);
    }
}

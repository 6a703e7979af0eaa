//! C ABI over the versapants library.
//!
//! Every fallible function returns a [`VpStatus`]; on failure a message is
//! kept per thread and can be read with [`vp_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use versapants::kinematics::{default_template, rescale_to_tibia};
use versapants::models::{build, decode_pose, ArchitectureKind, ModelConfig, OUTPUT_DIM};
use versapants::rotations::{matrix_to_axis_angle, rot6d_to_matrix, Rot6D};
use versapants::simulator::{gen_dataset, ArtifactConfig, IMPLEMENTED_MOVEMENTS};
use versapants::tensor::{ModelGraph, Tensor};
use versapants::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    InsufficientData = 7,
    Numeric = 8,
    Panic = 9,
}

/// Model architecture selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VpArchitecture {
    Versapants = 0,
    CnnHybrid = 1,
    Bilstm = 2,
}

/// One decoded pose. Joint order for rotations is left hip, right hip, left
/// knee, right knee; for positions left knee, right knee, left ankle, right ankle.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct VpPose {
    pub rot6d: [f64; 24],
    /// Axis-angle per rotation joint, radians.
    pub axis_angle: [f64; 12],
    /// Joint positions relative to the pelvis, metres.
    pub positions: [f64; 12],
}

/// Opaque model handle.
pub struct VpModel {
    graph: ModelGraph<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nul removed"));
}

fn status_of(e: &Error) -> VpStatus {
    match e {
        Error::Io { .. } => VpStatus::Io,
        Error::Format { .. } => VpStatus::Format,
        Error::Shape(_) => VpStatus::Shape,
        Error::Config(_) => VpStatus::Config,
        Error::InsufficientData(_) => VpStatus::InsufficientData,
        Error::NonFinite(_) | Error::InvalidRot6d(_) | Error::NotARotation(_) => VpStatus::Numeric,
        Error::InvalidArgument(_) | Error::BackwardBeforeForward => VpStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (VpStatus, String)>) -> VpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VpStatus::Panic
        }
    }
}

fn lib<T>(r: versapants::Result<T>) -> Result<T, (VpStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (VpStatus, String) {
    (VpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (VpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (VpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message describing the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn vp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn kind_of(a: VpArchitecture) -> ArchitectureKind {
    match a {
        VpArchitecture::Versapants => ArchitectureKind::Versapants,
        VpArchitecture::CnnHybrid => ArchitectureKind::CnnHybrid,
        VpArchitecture::Bilstm => ArchitectureKind::Bilstm,
    }
}

fn store(out: *mut *mut VpModel, graph: ModelGraph<f32>) {
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(Box::new(VpModel { graph })) };
}

/// Builds an architecture with its default configuration and seeded random weights.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vp_model_new(arch: VpArchitecture, seed: u64, out: *mut *mut VpModel) -> VpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = lib(build(&ModelConfig::with_kind(kind_of(arch)), seed))?;
        store(out, g);
        Ok(())
    })
}

/// Builds a model from a JSON configuration string.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` as for [`vp_model_new`].
#[no_mangle]
pub unsafe extern "C" fn vp_model_from_json(config_json: *const c_char, seed: u64, out: *mut *mut VpModel) -> VpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = c_str(config_json, "config_json")?;
        let cfg = lib(ModelConfig::from_json(text))?;
        let g = lib(build(&cfg, seed))?;
        store(out, g);
        Ok(())
    })
}

/// Replaces the model's weights with those in a VPW1 file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vp_model_load_weights(model: *mut VpModel, path: *const c_char) -> VpStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let p = PathBuf::from(c_str(path, "path")?);
        lib(m.graph.load(&p))
    })
}

/// Writes the model's weights as a VPW1 file.
///
/// # Safety
/// As for [`vp_model_load_weights`].
#[no_mangle]
pub unsafe extern "C" fn vp_model_save_weights(model: *const VpModel, path: *const c_char) -> VpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = PathBuf::from(c_str(path, "path")?);
        lib(m.graph.save(&p))
    })
}

/// Releases a model. Null is accepted and ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vp_model_free(model: *mut VpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Stored parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn vp_model_param_count(model: *const VpModel) -> u64 {
    model.as_ref().map_or(0, |m| m.graph.count_params() as u64)
}

/// Forward-pass FLOPs for one window, or 0 for a null handle.
///
/// # Safety
/// As for [`vp_model_param_count`].
#[no_mangle]
pub unsafe extern "C" fn vp_model_flops(model: *const VpModel) -> u64 {
    model.as_ref().map_or(0, |m| m.graph.count_flops())
}

/// Number of floats in one input window, `N × K × 2`.
///
/// # Safety
/// As for [`vp_model_param_count`].
#[no_mangle]
pub unsafe extern "C" fn vp_model_input_len(model: *const VpModel) -> usize {
    model.as_ref().map_or(0, |m| m.graph.input_shape().iter().product())
}

/// Predicts the pose for one normalized `(N, K, 2)` window. Positions use
/// the default skeleton rescaled to `tibia_length_m`.
///
/// # Safety
/// `window` must point to `len` floats and `out` to one writable [`VpPose`].
#[no_mangle]
pub unsafe extern "C" fn vp_model_predict(
    model: *const VpModel,
    window: *const f32,
    len: usize,
    tibia_length_m: f64,
    out: *mut VpPose,
) -> VpStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if window.is_null() {
            return Err(null("window"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let want: usize = m.graph.input_shape().iter().product();
        if len != want {
            return Err((
                VpStatus::Shape,
                format!("window has {len} values, model expects {want}"),
            ));
        }
        let data = std::slice::from_raw_parts(window, len).to_vec();
        let template = lib(rescale_to_tibia(&default_template(), tibia_length_m))?;
        let mut shape = vec![1];
        shape.extend_from_slice(m.graph.input_shape());
        let y = lib(m.graph.infer(&lib(Tensor::new(shape, data))?))?;
        let raw: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        let pose = lib(decode_pose(&raw, &template, 0))?;
        let mut p = VpPose::default();
        p.rot6d[..OUTPUT_DIM].copy_from_slice(&raw);
        for (j, r) in pose.rotations.to_array().iter().enumerate() {
            let v = lib(matrix_to_axis_angle(r))?.0;
            p.axis_angle[3 * j..3 * j + 3].copy_from_slice(v.as_slice());
        }
        for (j, v) in pose.positions.to_array().iter().enumerate() {
            p.positions[3 * j..3 * j + 3].copy_from_slice(v.as_slice());
        }
        *out = p;
        Ok(())
    })
}

/// Gram–Schmidt reconstruction of a 6D rotation into a row-major 3×3 matrix.
///
/// # Safety
/// `rot6d` must point to 6 doubles and `out` to 9 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vp_rot6d_to_matrix(rot6d: *const f64, out: *mut f64) -> VpStatus {
    guard(|| {
        if rot6d.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let mut v = [0.0; 6];
        v.copy_from_slice(std::slice::from_raw_parts(rot6d, 6));
        let r = lib(rot6d_to_matrix(&Rot6D(v)))?;
        let dst = std::slice::from_raw_parts_mut(out, 9);
        for i in 0..3 {
            for k in 0..3 {
                dst[3 * i + k] = r.0[(i, k)];
            }
        }
        Ok(())
    })
}

/// Writes a synthetic dataset of `n_subjects` sessions covering every
/// implemented movement, with default artifacts.
///
/// # Safety
/// `out_dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn vp_simulate_dataset(out_dir: *const c_char, n_subjects: u32, seed: u64) -> VpStatus {
    guard(|| {
        let dir = PathBuf::from(c_str(out_dir, "out_dir")?);
        lib(gen_dataset(
            &dir,
            n_subjects as usize,
            &IMPLEMENTED_MOVEMENTS,
            &ArtifactConfig::default(),
            seed,
        ))
        .map(|_| ())
    })
}

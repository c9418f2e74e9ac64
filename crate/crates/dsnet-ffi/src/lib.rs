//! C ABI for the dsnet toolkit: opaque handles, integer status codes, and a
//! thread-local last-error message.
//!
//! Every function returns [`DsnetStatus`]; on anything but `DSNET_STATUS_OK`
//! the message behind [`dsnet_last_error`] describes the failure. Strings
//! returned through `char**` out-parameters are owned by the caller and must
//! be released with [`dsnet_string_free`]. Handles are freed with their
//! matching `_free` function. The header `include/dsnet.h` is generated by
//! cbindgen at build time.

use dsnet::backbone::{load_checkpoint, save_checkpoint, DSNetModel};
use dsnet::blocks::Phase;
use dsnet::config::{parse_schedule, ConvLayerSpec, ModelConfig};
use dsnet::error::DsnetError;
use dsnet::plan::{CostModel, Mode};
use dsnet::rf::{analyze, lint, receptive_field, padding_fraction};
use dsnet::tensor::Tensor;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsnetStatus {
    Ok = 0,
    InvalidArgument = 1,
    ParseError = 2,
    ValidationError = 3,
    ShapeError = 4,
    IoError = 5,
    RuntimeError = 6,
}

/// Opaque model-configuration handle.
pub struct DsnetConfig(ModelConfig);

/// Opaque built-model handle.
pub struct DsnetModel(DSNetModel);

/// Geometry of one convolution layer for receptive-field queries.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsnetConvSpec {
    pub kernel: u32,
    pub dilation: u32,
    pub stride: u32,
    pub in_channels: u32,
    pub out_channels: u32,
}

impl DsnetConvSpec {
    fn to_spec(self) -> ConvLayerSpec {
        ConvLayerSpec::new(
            self.kernel as usize,
            self.dilation as usize,
            self.in_channels as usize,
            self.out_channels as usize,
        )
        .with_stride(self.stride as usize)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let cleaned: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &DsnetError) -> DsnetStatus {
    match err {
        DsnetError::Parse(_) => DsnetStatus::ParseError,
        DsnetError::Validation(_) => DsnetStatus::ValidationError,
        DsnetError::Shape(_) => DsnetStatus::ShapeError,
        DsnetError::Data(_) | DsnetError::Io(_) | DsnetError::Image(_) => DsnetStatus::IoError,
        DsnetError::Runtime(_) => DsnetStatus::RuntimeError,
    }
}

/// Run a fallible body, translating errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<DsnetStatus, DsnetError>) -> DsnetStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(status)) => status,
        Ok(Err(err)) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".to_string());
            set_error(&msg);
            DsnetStatus::RuntimeError
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, DsnetError> {
    if ptr.is_null() {
        return Err(DsnetError::Validation(format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| DsnetError::Validation(format!("{what} is not valid utf-8")))
}

fn give_string(text: String, out: *mut *mut c_char) -> Result<DsnetStatus, DsnetError> {
    if out.is_null() {
        return Err(DsnetError::Validation("output pointer is null".into()));
    }
    let cleaned: String = text.chars().filter(|&c| c != '\0').collect();
    let cstring = CString::new(cleaned).unwrap_or_default();
    unsafe { *out = cstring.into_raw() };
    Ok(DsnetStatus::Ok)
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dsnet_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned through a `char**` out-parameter.
///
/// # Safety
/// `s` must be a pointer previously returned by this library and not yet
/// freed; null is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn dsnet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Config handles
// ---------------------------------------------------------------------------

/// Parse a TOML config document into a new handle.
///
/// # Safety
/// `toml_text` must be a valid NUL-terminated string and `out` a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn dsnet_config_parse(
    toml_text: *const c_char,
    out: *mut *mut DsnetConfig,
) -> DsnetStatus {
    guard(|| {
        let text = cstr_arg(toml_text, "toml_text")?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        let cfg = ModelConfig::from_toml(text)?;
        *out = Box::into_raw(Box::new(DsnetConfig(cfg)));
        Ok(DsnetStatus::Ok)
    })
}

/// Load a config file from disk.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_config_load(
    path: *const c_char,
    out: *mut *mut DsnetConfig,
) -> DsnetStatus {
    guard(|| {
        let path = cstr_arg(path, "path")?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        let cfg = ModelConfig::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(DsnetConfig(cfg)));
        Ok(DsnetStatus::Ok)
    })
}

/// Construct a named preset: "dsnet", "dsnet_base", or "toy".
///
/// # Safety
/// `name` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_config_preset(
    name: *const c_char,
    num_classes: u32,
    out: *mut *mut DsnetConfig,
) -> DsnetStatus {
    guard(|| {
        let name = cstr_arg(name, "name")?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        let cfg = match name {
            "dsnet" => ModelConfig::dsnet(num_classes as usize),
            "dsnet_base" => ModelConfig::dsnet_base(num_classes as usize),
            "toy" => ModelConfig::toy(num_classes as usize),
            other => {
                return Err(DsnetError::Validation(format!("unknown preset `{other}`")));
            }
        };
        *out = Box::into_raw(Box::new(DsnetConfig(cfg)));
        Ok(DsnetStatus::Ok)
    })
}

/// Serialize a config handle back to TOML (caller frees via
/// `dsnet_string_free`).
///
/// # Safety
/// `cfg` must be a live handle from this library; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_config_to_toml(
    cfg: *const DsnetConfig,
    out: *mut *mut c_char,
) -> DsnetStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| DsnetError::Validation("cfg is null".into()))?;
        give_string(cfg.0.to_toml(), out)
    })
}

/// Release a config handle.
///
/// # Safety
/// `cfg` must be a handle from this library, not yet freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dsnet_config_free(cfg: *mut DsnetConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// ---------------------------------------------------------------------------
// Static analysis
// ---------------------------------------------------------------------------

/// Canonicalize dilation-schedule notation (e.g. "d2×6+d3x6" ->
/// "d2x6+d3x6"); rejects malformed schedules.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_schedule_canonicalize(
    text: *const c_char,
    out: *mut *mut c_char,
) -> DsnetStatus {
    guard(|| {
        let text = cstr_arg(text, "text")?;
        let schedule = parse_schedule(text)?;
        give_string(schedule.to_string(), out)
    })
}

/// Total learnable parameters of the configured segmentation network.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_param_count(
    cfg: *const DsnetConfig,
    out: *mut u64,
) -> DsnetStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| DsnetError::Validation("cfg is null".into()))?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        *out = dsnet::plan::count_params(&cfg.0)?.total_params;
        Ok(DsnetStatus::Ok)
    })
}

/// Multiply-accumulate count of the segmentation network at `h x w` input.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_macs(
    cfg: *const DsnetConfig,
    h: u32,
    w: u32,
    out: *mut u64,
) -> DsnetStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| DsnetError::Validation("cfg is null".into()))?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        *out = CostModel::new(&cfg.0, Mode::Segmentation)?.macs_at(h as usize, w as usize);
        Ok(DsnetStatus::Ok)
    })
}

/// FLOPs (two per multiply-accumulate) at `h x w` input.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_flops(
    cfg: *const DsnetConfig,
    h: u32,
    w: u32,
    out: *mut u64,
) -> DsnetStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| DsnetError::Validation("cfg is null".into()))?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        *out = CostModel::new(&cfg.0, Mode::Segmentation)?.flops_at(h as usize, w as usize);
        Ok(DsnetStatus::Ok)
    })
}

/// Per-layer receptive fields of a serial conv chain; writes `len` values.
///
/// # Safety
/// `chain` must point to `len` readable specs and `rf_out` to `len`
/// writable u64 slots.
#[no_mangle]
pub unsafe extern "C" fn dsnet_receptive_field(
    chain: *const DsnetConvSpec,
    len: usize,
    rf_out: *mut u64,
) -> DsnetStatus {
    guard(|| {
        if chain.is_null() || rf_out.is_null() || len == 0 {
            return Err(DsnetError::Validation("chain/rf_out null or empty".into()));
        }
        let specs: Vec<ConvLayerSpec> = std::slice::from_raw_parts(chain, len)
            .iter()
            .map(|s| s.to_spec())
            .collect();
        for s in &specs {
            s.validate()?;
        }
        let profile = receptive_field(&specs);
        for (i, entry) in profile.per_layer.iter().enumerate() {
            *rf_out.add(i) = entry.rf as u64;
        }
        Ok(DsnetStatus::Ok)
    })
}

/// Average fraction of kernel taps landing in padding on a square
/// `feature_hw` map.
///
/// # Safety
/// `spec` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dsnet_padding_fraction(
    spec: *const DsnetConvSpec,
    feature_hw: u32,
    out: *mut f64,
) -> DsnetStatus {
    guard(|| {
        let spec = spec
            .as_ref()
            .ok_or_else(|| DsnetError::Validation("spec is null".into()))?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        *out = padding_fraction(&spec.to_spec(), feature_hw as usize)?;
        Ok(DsnetStatus::Ok)
    })
}

/// Run the dilation guidelines; returns the findings as a JSON document and
/// the number of disaster-severity findings.
///
/// # Safety
/// `cfg` must be a live handle; `json_out` and `disaster_count` valid
/// pointers.
#[no_mangle]
pub unsafe extern "C" fn dsnet_lint_json(
    cfg: *const DsnetConfig,
    pretrain_size: u32,
    json_out: *mut *mut c_char,
    disaster_count: *mut i32,
) -> DsnetStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| DsnetError::Validation("cfg is null".into()))?;
        if disaster_count.is_null() {
            return Err(DsnetError::Validation("disaster_count is null".into()));
        }
        let report = lint(&cfg.0, pretrain_size as usize)?;
        *disaster_count = report
            .findings
            .iter()
            .filter(|f| f.severity == dsnet::rf::Severity::Disaster)
            .count() as i32;
        give_string(report.to_json(), json_out)
    })
}

/// Receptive-field ledger plus parameter/MAC counts as a JSON document.
///
/// # Safety
/// `cfg` must be a live handle and `json_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_analyze_json(
    cfg: *const DsnetConfig,
    h: u32,
    w: u32,
    json_out: *mut *mut c_char,
) -> DsnetStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| DsnetError::Validation("cfg is null".into()))?;
        let report = analyze(&cfg.0, h as usize, w as usize)?;
        give_string(report.to_json(), json_out)
    })
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Build a model from a config. `classification` nonzero selects the
/// encoder + classification-head layout; zero the segmentation layout.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_build(
    cfg: *const DsnetConfig,
    classification: i32,
    seed: u64,
    out: *mut *mut DsnetModel,
) -> DsnetStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| DsnetError::Validation("cfg is null".into()))?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        let mode = if classification != 0 {
            Mode::Classification
        } else {
            Mode::Segmentation
        };
        let model = DSNetModel::build(&cfg.0, mode, seed)?;
        *out = Box::into_raw(Box::new(DsnetModel(model)));
        Ok(DsnetStatus::Ok)
    })
}

/// Load a checkpoint (the embedded config decides the layout).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_checkpoint_load(
    path: *const c_char,
    out: *mut *mut DsnetModel,
) -> DsnetStatus {
    guard(|| {
        let path = cstr_arg(path, "path")?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        let model = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(DsnetModel(model)));
        Ok(DsnetStatus::Ok)
    })
}

/// Write a checkpoint for the model.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dsnet_checkpoint_save(
    model: *const DsnetModel,
    path: *const c_char,
) -> DsnetStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| DsnetError::Validation("model is null".into()))?;
        let path = cstr_arg(path, "path")?;
        save_checkpoint(&model.0, Path::new(path))?;
        Ok(DsnetStatus::Ok)
    })
}

/// Number of f64 values `dsnet_model_forward` writes for an `n x 3 x h x w`
/// input batch.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_output_len(
    model: *const DsnetModel,
    n: u32,
    h: u32,
    w: u32,
    out: *mut usize,
) -> DsnetStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| DsnetError::Validation("model is null".into()))?;
        if out.is_null() {
            return Err(DsnetError::Validation("out is null".into()));
        }
        let classes = model.0.config().num_classes;
        *out = match model.0.mode() {
            Mode::Segmentation => n as usize * classes * h as usize * w as usize,
            Mode::Classification => n as usize * classes,
        };
        Ok(DsnetStatus::Ok)
    })
}

/// Inference on a row-major NCHW f64 batch (c must be 3). Writes logits:
/// `n x classes x h x w` for segmentation, `n x classes` for
/// classification.
///
/// # Safety
/// `input` must point to `n*c*h*w` readable f64 values and `output` to
/// `output_len` writable ones (query via `dsnet_model_output_len`).
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_forward(
    model: *const DsnetModel,
    input: *const f64,
    n: u32,
    c: u32,
    h: u32,
    w: u32,
    output: *mut f64,
    output_len: usize,
) -> DsnetStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| DsnetError::Validation("model is null".into()))?;
        if input.is_null() || output.is_null() {
            return Err(DsnetError::Validation("input/output is null".into()));
        }
        let dims = [n as usize, c as usize, h as usize, w as usize];
        let len: usize = dims.iter().product();
        let data = std::slice::from_raw_parts(input, len).to_vec();
        let tensor = Tensor::from_vec(&dims, data)
            .ok_or_else(|| DsnetError::Shape("input length does not match n*c*h*w".into()))?;
        let logits = model.0.forward(&tensor, Phase::Eval)?;
        let result = logits.to_array();
        if result.len() != output_len {
            return Err(DsnetError::Shape(format!(
                "output buffer holds {output_len} values, model produces {}",
                result.len()
            )));
        }
        for (i, v) in result.iter().enumerate() {
            *output.add(i) = *v;
        }
        Ok(DsnetStatus::Ok)
    })
}

/// Release a model handle.
///
/// # Safety
/// `model` must be a handle from this library, not yet freed; null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn dsnet_model_free(model: *mut DsnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

//! C ABI over `peftkit`.
//!
//! Objects cross the boundary as opaque handles (`PkConfig`, `PkModel`)
//! returned through out-pointers and released with the matching `*_free`. Every fallible call returns a [`PkStatus`]; on failure
//! the message is kept per thread and read with [`pk_last_error`].
//!
//! Status codes equal the CLI exit codes, plus two boundary-only codes for
//! bad arguments and caught panics. Nothing unwinds into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use peftkit::nn::{Checkpoint, Model};
use peftkit::quant::{quantize_linear, QuantConfig};
use peftkit::rng::SeedTree;
use peftkit::runner::{build_model, cmd_count_params, cmd_run, preset, ExperimentConfig};
use peftkit::tensor::Tensor;
use peftkit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Shape = 5,
    /// Null pointer, invalid UTF-8 or a buffer that is too small.
    InvalidArgument = 6,
    Panic = 7,
}

/// An experiment configuration.
pub struct PkConfig(ExperimentConfig);

/// A model in f32, ready for inference.
pub struct PkModel(Model<f32>);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PkParamCount {
    pub backbone: u64,
    pub head: u64,
    pub adapters: u64,
    pub trainable: u64,
    pub total: u64,
    pub fraction: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PkRunSummary {
    pub trainable_params: u64,
    pub trainable_fraction: f64,
    pub epochs_run: u64,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_weighted_f1: f64,
    pub val_test_gap_pp: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Lib(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn status_of(e: &Error) -> PkStatus {
    match e.exit_code() {
        2 => PkStatus::Config,
        3 => PkStatus::Data,
        4 => PkStatus::Numeric,
        5 => PkStatus::Shape,
        _ => PkStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Res<()>) -> PkStatus {
    let status = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PkStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Arg(m))) => {
            set_last_error(&m);
            PkStatus::InvalidArgument
        }
        Err(p) => {
            let m = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {m}"));
            PkStatus::Panic
        }
    };
    if status == PkStatus::Ok {
        set_last_error("");
    }
    status
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    p.as_ref().ok_or_else(|| Failure::Arg(format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().ok_or_else(|| Failure::Arg(format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Res<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Res<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the buffer size needed
/// for the whole message including its NUL. The message is empty after a
/// successful call.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pk_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = (bytes.len() - 1).min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Looks up a named preset (`"q4_toy"`, `"frozen"`, ...).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_config_preset(name: *const c_char, out: *mut *mut PkConfig) -> PkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = preset(str_arg(name, "name")?)?;
        *out = Box::into_raw(Box::new(PkConfig(cfg)));
        Ok(())
    })
}

/// Parses and validates an experiment config from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_config_from_toml(toml: *const c_char, out: *mut *mut PkConfig) -> PkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::from_toml(str_arg(toml, "toml")?)?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(PkConfig(cfg)));
        Ok(())
    })
}

/// Overrides the training seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pk_config_set_seed(cfg: *mut PkConfig, seed: u64) -> PkStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.train.seed = seed;
        Ok(())
    })
}

/// Overrides the number of training epochs.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pk_config_set_epochs(cfg: *mut PkConfig, epochs: u64) -> PkStatus {
    guard(|| {
        let c = out_arg(cfg, "cfg")?;
        let mut next = c.0.clone();
        next.train.epochs = epochs as usize;
        next.validate()?;
        c.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pk_config_free(cfg: *mut PkConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Closed-form parameter accounting; never builds weights.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_count_params(cfg: *const PkConfig, out: *mut PkParamCount) -> PkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let a = cmd_count_params(&ref_arg(cfg, "cfg")?.0)?;
        *out = PkParamCount {
            backbone: a.backbone,
            head: a.head,
            adapters: a.adapters,
            trainable: a.count.trainable,
            total: a.count.total,
            fraction: a.count.fraction,
        };
        Ok(())
    })
}

/// Runs the full experiment into `out_dir` (null: the config's default
/// directory) and fills `out` with the headline numbers.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` null or NUL-terminated; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pk_run(cfg: *const PkConfig, out_dir: *const c_char, out: *mut PkRunSummary) -> PkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ref_arg(cfg, "cfg")?;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(Path::new(str_arg(out_dir, "out_dir")?))
        };
        let r = cmd_run(&cfg.0, dir)?;
        let rep = r.report.expect("successful runs carry a report");
        *out = PkRunSummary {
            trainable_params: rep.trainable_params,
            trainable_fraction: rep.trainable_fraction,
            epochs_run: rep.epochs_run as u64,
            best_val_accuracy: rep.best_val_accuracy,
            test_accuracy: rep.test_accuracy,
            test_weighted_f1: rep.test_weighted_f1,
            val_test_gap_pp: rep.val_test_gap_pp,
        };
        Ok(())
    })
}

/// Builds the untrained model of `cfg` (quantized and adapted as
/// configured) from `seed`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_model_build(cfg: *const PkConfig, seed: u64, out: *mut *mut PkModel) -> PkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = build_model::<f32>(&ref_arg(cfg, "cfg")?.0, &SeedTree::new(seed))?;
        *out = Box::into_raw(Box::new(PkModel(m)));
        Ok(())
    })
}

/// Loads a `model.ckpt` written by a run.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_model_load(path: *const c_char, out: *mut *mut PkModel) -> PkStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PkModel(Model::from_checkpoint(&ck)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pk_model_save(model: *const PkModel, path: *const c_char) -> PkStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.0.to_checkpoint(Default::default())
            .save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Input geometry: images are `channels × size × size`, channels first.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pk_model_shape(
    model: *const PkModel,
    channels: *mut usize,
    image_size: *mut usize,
    num_classes: *mut usize,
) -> PkStatus {
    guard(|| {
        let a = &ref_arg(model, "model")?.0.arch;
        *out_arg(channels, "channels")? = a.in_channels;
        *out_arg(image_size, "image_size")? = a.image_size;
        *out_arg(num_classes, "num_classes")? = a.num_classes;
        Ok(())
    })
}

/// Eval-mode logits for `n` normalized images laid out `[n, C, H, W]`.
/// `logits` receives `n × num_classes` values, row-major.
///
/// # Safety
/// `pixels` must hold `pixels_len` floats and `logits` `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn pk_model_predict(
    model: *const PkModel,
    pixels: *const f32,
    pixels_len: usize,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> PkStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let (c, s, k) = (m.arch.in_channels, m.arch.image_size, m.arch.num_classes);
        if n == 0 || pixels_len != n * c * s * s {
            return Err(Failure::Arg(format!(
                "pixels_len {pixels_len} != {n}×{c}×{s}×{s} (n must be positive)"
            )));
        }
        if logits_len < n * k {
            return Err(Failure::Arg(format!("logits_len {logits_len} < {}", n * k)));
        }
        let x = Tensor::new([n, c, s, s], slice_arg(pixels, pixels_len, "pixels")?.to_vec())?;
        let y = m.predict(&x)?;
        slice_out(logits, logits_len, "logits")?[..n * k].copy_from_slice(y.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pk_model_free(model: *mut PkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// NF4 round trip of a flat weight vector with double-quantized absmax
/// (`block_size` values per absmax, `dq_block_size` absmaxes per group).
/// `out` receives the dequantized values.
///
/// # Safety
/// `values` and `out` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pk_nf4_roundtrip(
    values: *const f64,
    len: usize,
    block_size: usize,
    dq_block_size: usize,
    out: *mut f64,
) -> PkStatus {
    guard(|| {
        let v = slice_arg(values, len, "values")?;
        let dst = slice_out(out, len, "out")?;
        let w = Tensor::new([1, len], v.to_vec())?;
        let q = quantize_linear(
            &w,
            None,
            QuantConfig {
                block_size,
                dq_block_size,
            },
        )?;
        dst.copy_from_slice(q.dequantized());
        Ok(())
    })
}

#[cfg(test)]
mod tests;

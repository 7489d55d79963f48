//! C ABI over the fusion kit: opaque handles, integer statuses, and a
//! thread-local last-error message. Every entry point catches panics so a
//! bug in the kit can never unwind across the boundary; the header under
//! `include/` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ecfusion::check;
use ecfusion::cli::RunConfig;
use ecfusion::error::Error;
use ecfusion::pipeline::{
    evaluate, eval_scene_seeds, load_checkpoint, save_checkpoint, train, EvalThresholds,
    ModelParams,
};
use ecfusion::synth::{generate_scene, SynthKit};

/// Result code of every fallible call. `ECF_STATUS_OK` is zero so the usual
/// `if (ecf_...(...))` error idiom works.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcfStatus {
    Ok = 0,
    /// Bad config key/value, incompatible shapes, or a violated precondition.
    Usage = 1,
    /// Divergence, NaN, or a failed runtime numeric check.
    Numeric = 2,
    /// A required pointer argument was null.
    NullArg = 3,
    /// Filesystem failure.
    Io = 4,
}

/// Opaque run configuration (training, grid, conflict, eval settings).
pub struct EcfConfig {
    inner: RunConfig,
}

/// Opaque trained model handle.
pub struct EcfModel {
    params: ModelParams,
}

/// Plain-value evaluation summary. Empty buckets and unmatched center error
/// come back as NaN, never as a status code.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EcfMetrics {
    pub map: f64,
    pub recall_both: f64,
    pub recall_lidar_only: f64,
    pub recall_camera_only: f64,
    pub center_err: f64,
    pub n_scenes: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> =
        RefCell::new(CString::new("").expect("empty string"));
}

fn set_error(msg: &str) {
    // Interior NULs cannot reach C; spaces keep the message readable.
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(clean).expect("NULs stripped above");
    });
}

fn status_of(err: &Error) -> EcfStatus {
    match err {
        Error::Numerical(_) => EcfStatus::Numeric,
        Error::Io(_) => EcfStatus::Io,
        _ => EcfStatus::Usage,
    }
}

fn fail(err: &Error) -> EcfStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Runs `f` with a panic guard; a panic records a message and yields
/// `on_panic` instead of unwinding into the caller.
fn guarded<T>(on_panic: T, f: impl FnOnce() -> T) -> T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(cause) => {
            let msg = cause
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| cause.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            on_panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn arg_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, EcfStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(EcfStatus::NullArg);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        EcfStatus::Usage
    })
}

/// Static version string of the underlying kit; never freed by the caller.
#[no_mangle]
pub extern "C" fn ecf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error into `buf` (always NUL-terminated
/// when `cap > 0`, truncating if needed) and returns the full length of the
/// message including the NUL. `ecf_last_error(NULL, 0)` sizes the buffer.
///
/// # Safety
/// `buf` must be null or valid for writes of `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ecf_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Fresh configuration with every key at its default.
#[no_mangle]
pub extern "C" fn ecf_config_new() -> *mut EcfConfig {
    guarded(ptr::null_mut(), || {
        Box::into_raw(Box::new(EcfConfig { inner: RunConfig::default() }))
    })
}

/// Parses the same `key=value` text the CLI accepts. Returns null (with the
/// error retrievable) on unknown keys or bad values.
///
/// # Safety
/// `text` must be null or a NUL-terminated string valid for reads.
#[no_mangle]
pub unsafe extern "C" fn ecf_config_parse(text: *const c_char) -> *mut EcfConfig {
    guarded(ptr::null_mut(), || {
        let text = match arg_str(text, "config text") {
            Ok(t) => t,
            Err(_) => return ptr::null_mut(),
        };
        match RunConfig::parse_str(text) {
            Ok(inner) => Box::into_raw(Box::new(EcfConfig { inner })),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// Sets one `key=value` pair on an existing configuration.
///
/// # Safety
/// `cfg` must be a live handle from this library; `key`/`value` must be
/// NUL-terminated strings valid for reads.
#[no_mangle]
pub unsafe extern "C" fn ecf_config_set(
    cfg: *mut EcfConfig,
    key: *const c_char,
    value: *const c_char,
) -> EcfStatus {
    guarded(EcfStatus::Numeric, || {
        if cfg.is_null() {
            set_error("config handle is null");
            return EcfStatus::NullArg;
        }
        let (key, value) = match (arg_str(key, "key"), arg_str(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match (*cfg).inner.apply(key, value) {
            Ok(()) => EcfStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `cfg` must be null or a live handle from this library; the handle is dead
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ecf_config_free(cfg: *mut EcfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Two-stage training run under `cfg`; deterministic in the config's seed.
/// Returns null with a retrievable error on invalid configs or divergence.
///
/// # Safety
/// `cfg` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ecf_train(cfg: *const EcfConfig) -> *mut EcfModel {
    guarded(ptr::null_mut(), || {
        if cfg.is_null() {
            set_error("config handle is null");
            return ptr::null_mut();
        }
        match train(&(*cfg).inner.train) {
            Ok(r) => Box::into_raw(Box::new(EcfModel { params: r.params })),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ecf_model_save(
    model: *const EcfModel,
    path: *const c_char,
) -> EcfStatus {
    guarded(EcfStatus::Numeric, || {
        if model.is_null() {
            set_error("model handle is null");
            return EcfStatus::NullArg;
        }
        let path = match arg_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_checkpoint(Path::new(path), &(*model).params) {
            Ok(()) => EcfStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Loads a checkpoint written by `ecf_model_save` or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string valid for reads.
#[no_mangle]
pub unsafe extern "C" fn ecf_model_load(path: *const c_char) -> *mut EcfModel {
    guarded(ptr::null_mut(), || {
        let path = match arg_str(path, "path") {
            Ok(p) => p,
            Err(_) => return ptr::null_mut(),
        };
        match load_checkpoint(Path::new(path)) {
            Ok(params) => Box::into_raw(Box::new(EcfModel { params })),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    })
}

/// # Safety
/// `model` must be null or a live handle from this library; the handle is
/// dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn ecf_model_free(model: *mut EcfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Scores `model` on the deterministic eval pool described by `cfg` and
/// fills `out`. The config's model section must match the checkpoint.
///
/// # Safety
/// `model` and `cfg` must be live handles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ecf_evaluate(
    model: *const EcfModel,
    cfg: *const EcfConfig,
    out: *mut EcfMetrics,
) -> EcfStatus {
    guarded(EcfStatus::Numeric, || {
        if model.is_null() || cfg.is_null() || out.is_null() {
            set_error("model, config and out must all be non-null");
            return EcfStatus::NullArg;
        }
        let params = &(*model).params;
        let rc = &(*cfg).inner;
        if params.config != rc.train.model {
            set_error("checkpoint model section differs from the config");
            return EcfStatus::Usage;
        }
        let run = || -> Result<EcfMetrics, Error> {
            rc.train.validate()?;
            let kit = SynthKit::new(rc.train.grid, rc.train.model.channels, rc.train.seed)?;
            let scenes: Vec<_> = eval_scene_seeds(rc.train.seed, rc.eval_scenes)
                .into_iter()
                .map(|s| generate_scene(s, &rc.train.grid, &rc.train.conflict))
                .collect();
            let thresholds = EvalThresholds::default();
            let rep = evaluate(params, &kit, &scenes, &rc.train.conflict, &thresholds)?;
            let nan = f64::NAN;
            Ok(EcfMetrics {
                map: rep.map,
                recall_both: rep.buckets.both.recall().unwrap_or(nan),
                recall_lidar_only: rep.buckets.lidar_only.recall().unwrap_or(nan),
                recall_camera_only: rep.buckets.camera_only.recall().unwrap_or(nan),
                center_err: rep.center_err.unwrap_or(nan),
                n_scenes: rep.n_scenes as u64,
            })
        };
        match run() {
            Ok(m) => {
                *out = m;
                EcfStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Runs the built-in gradient and oracle suites (quiet). `ECF_STATUS_OK`
/// means every suite passed.
#[no_mangle]
pub extern "C" fn ecf_selftest(seed: u64) -> EcfStatus {
    guarded(EcfStatus::Numeric, || match check::run_all(seed, 20, 20) {
        Ok(reports) => match reports.iter().find(|r| !r.passed) {
            None => EcfStatus::Ok,
            Some(bad) => {
                set_error(&format!("suite {} failed, max err {:.3e}", bad.name, bad.max_err));
                EcfStatus::Numeric
            }
        },
        Err(e) => fail(&e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cstr(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn last_error_string() -> String {
        let mut buf = vec![0i8; 256];
        let n = unsafe { ecf_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
        assert!(n >= 1);
        let s = unsafe { CStr::from_ptr(buf.as_ptr() as *const c_char) };
        s.to_string_lossy().into_owned()
    }

    fn tiny_config() -> *mut EcfConfig {
        let cfg = ecf_config_new();
        assert!(!cfg.is_null());
        for (k, v) in [
            ("grid.x", "16"),
            ("grid.y", "16"),
            ("model.channels", "8"),
            ("model.q", "2"),
            ("model.flow_hidden", "8"),
            ("model.n_layers", "1"),
            ("model.n_heads", "2"),
            ("model.ffn_dim", "16"),
            ("model.k_fused", "3"),
            ("model.k_lidar", "2"),
            ("model.k_camera", "2"),
            ("train.stage1_steps", "3"),
            ("train.stage2_steps", "4"),
            ("train.n_scenes", "4"),
            ("train.seed", "9"),
            ("eval.n_scenes", "3"),
        ] {
            let (k, v) = (cstr(k), cstr(v));
            let s = unsafe { ecf_config_set(cfg, k.as_ptr(), v.as_ptr()) };
            assert_eq!(s, EcfStatus::Ok, "setting {k:?}");
        }
        cfg
    }

    #[test]
    fn version_is_static_nul_terminated() {
        let v = unsafe { CStr::from_ptr(ecf_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_are_rejected_not_crashed() {
        assert!(unsafe { ecf_config_parse(ptr::null()) }.is_null());
        assert!(last_error_string().contains("null"));
        assert!(unsafe { ecf_train(ptr::null()) }.is_null());
        let s = unsafe { ecf_config_set(ptr::null_mut(), ptr::null(), ptr::null()) };
        assert_eq!(s, EcfStatus::NullArg);
        assert_eq!(
            unsafe { ecf_model_save(ptr::null(), ptr::null()) },
            EcfStatus::NullArg
        );
        assert!(unsafe { ecf_model_load(ptr::null()) }.is_null());
        unsafe {
            ecf_config_free(ptr::null_mut());
            ecf_model_free(ptr::null_mut());
        }
    }

    #[test]
    fn unknown_key_reports_usage_with_message() {
        let cfg = ecf_config_new();
        let (k, v) = (cstr("model.bogus"), cstr("1"));
        let s = unsafe { ecf_config_set(cfg, k.as_ptr(), v.as_ptr()) };
        assert_eq!(s, EcfStatus::Usage);
        assert!(last_error_string().contains("model.bogus"));
        unsafe { ecf_config_free(cfg) };
    }

    #[test]
    fn parse_matches_the_cli_syntax() {
        let text = cstr("model.channels=8\nmodel.n_heads=2\n# comment\n");
        let cfg = unsafe { ecf_config_parse(text.as_ptr()) };
        assert!(!cfg.is_null());
        unsafe { ecf_config_free(cfg) };

        let bad = cstr("model.channels\n");
        assert!(unsafe { ecf_config_parse(bad.as_ptr()) }.is_null());
        assert!(last_error_string().contains("line 1"));
    }

    #[test]
    fn train_save_load_evaluate_roundtrip() {
        let cfg = tiny_config();
        let model = unsafe { ecf_train(cfg) };
        assert!(!model.is_null(), "{}", last_error_string());

        let dir = std::env::temp_dir().join(format!("ecfusion-ffi-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = cstr(dir.join("m.ckpt").to_str().unwrap());
        assert_eq!(unsafe { ecf_model_save(model, path.as_ptr()) }, EcfStatus::Ok);
        let loaded = unsafe { ecf_model_load(path.as_ptr()) };
        assert!(!loaded.is_null(), "{}", last_error_string());

        let mut direct = EcfMetrics {
            map: 0.0,
            recall_both: 0.0,
            recall_lidar_only: 0.0,
            recall_camera_only: 0.0,
            center_err: 0.0,
            n_scenes: 0,
        };
        let mut reloaded = direct;
        assert_eq!(unsafe { ecf_evaluate(model, cfg, &mut direct) }, EcfStatus::Ok);
        assert_eq!(unsafe { ecf_evaluate(loaded, cfg, &mut reloaded) }, EcfStatus::Ok);
        assert_eq!(direct.n_scenes, 3);
        assert!(direct.map.is_finite());
        // The checkpoint must reproduce the in-memory model exactly.
        assert_eq!(direct.map.to_bits(), reloaded.map.to_bits());

        // A mismatched model section is a usage error, not a crash.
        let (k, v) = (cstr("model.channels"), cstr("16"));
        assert_eq!(unsafe { ecf_config_set(cfg, k.as_ptr(), v.as_ptr()) }, EcfStatus::Ok);
        let s = unsafe { ecf_evaluate(model, cfg, &mut direct) };
        assert_eq!(s, EcfStatus::Usage);

        unsafe {
            ecf_model_free(model);
            ecf_model_free(loaded);
            ecf_config_free(cfg);
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn load_rejects_garbage_with_retrievable_error() {
        let dir = std::env::temp_dir().join(format!("ecfusion-ffi-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("junk.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        let path = cstr(p.to_str().unwrap());
        assert!(unsafe { ecf_model_load(path.as_ptr()) }.is_null());
        assert!(!last_error_string().is_empty());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn last_error_truncates_but_terminates() {
        set_error("0123456789");
        let mut buf = vec![0x7fi8; 4];
        let need = unsafe { ecf_last_error(buf.as_mut_ptr() as *mut c_char, 4) };
        assert_eq!(need, 11);
        assert_eq!(buf[3], 0);
        assert_eq!(unsafe { ecf_last_error(ptr::null_mut(), 0) }, 11);
    }
}

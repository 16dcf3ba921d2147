use std::ffi::CString;
use std::ptr;

use super::*;

fn last_error() -> String {
    let n = unsafe { pk_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n];
    unsafe { pk_last_error(buf.as_mut_ptr(), n) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn preset_handle(name: &str) -> *mut PkConfig {
    let name = CString::new(name).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pk_config_preset(name.as_ptr(), &mut cfg) }, PkStatus::Ok);
    cfg
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(pk_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn status_codes_match_the_cli_exit_codes() {
    for (e, s) in [
        (Error::Config("x".into()), PkStatus::Config),
        (Error::Data("x".into()), PkStatus::Data),
        (Error::Numeric("x".into()), PkStatus::Numeric),
        (Error::Index("x".into()), PkStatus::Shape),
        (Error::Contract("x".into()), PkStatus::Internal),
    ] {
        assert_eq!(status_of(&e) as i32, e.exit_code());
        assert_eq!(status_of(&e), s);
    }
}

#[test]
fn count_params_through_the_abi() {
    let cfg = preset_handle("q1");
    let mut out = PkParamCount::default();
    assert_eq!(unsafe { pk_count_params(cfg, &mut out) }, PkStatus::Ok);
    assert_eq!(out.adapters, 5_242_880);
    assert_eq!(out.trainable, out.adapters + out.head);
    assert!((out.fraction - out.trainable as f64 / out.total as f64).abs() < 1e-15);
    assert_eq!(last_error(), "");
    unsafe { pk_config_free(cfg) };
}

#[test]
fn errors_set_codes_and_messages() {
    let bad = CString::new("nope").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pk_config_preset(bad.as_ptr(), &mut cfg) }, PkStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("unknown preset"));

    assert_eq!(unsafe { pk_config_preset(ptr::null(), &mut cfg) }, PkStatus::InvalidArgument);
    assert_eq!(last_error(), "name is null");
    let mut out = PkParamCount::default();
    assert_eq!(unsafe { pk_count_params(ptr::null(), &mut out) }, PkStatus::InvalidArgument);

    let toml = CString::new("name = 3").unwrap();
    assert_eq!(unsafe { pk_config_from_toml(toml.as_ptr(), &mut cfg) }, PkStatus::Config);

    let cfg = preset_handle("q4");
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { pk_model_build(cfg, 0, &mut model) }, PkStatus::Config);
    assert!(model.is_null());
    assert_eq!(unsafe { pk_config_set_epochs(cfg, 0) }, PkStatus::Config);
    unsafe { pk_config_free(cfg) };

    // Null handles are accepted by the free functions.
    unsafe {
        pk_config_free(ptr::null_mut());
        pk_model_free(ptr::null_mut());
    }
}

#[test]
fn truncated_error_buffer_stays_terminated() {
    let bad = CString::new("nope").unwrap();
    let mut cfg = ptr::null_mut();
    unsafe { pk_config_preset(bad.as_ptr(), &mut cfg) };
    let full = last_error();
    let mut buf = [1 as c_char; 8];
    let need = unsafe { pk_last_error(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(need, full.len() + 1);
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(s, &full[..7]);
}

#[test]
fn model_predicts_and_round_trips() {
    let cfg = preset_handle("q2_toy");
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { pk_model_build(cfg, 3, &mut model) }, PkStatus::Ok);
    let (mut c, mut s, mut k) = (0, 0, 0);
    assert_eq!(unsafe { pk_model_shape(model, &mut c, &mut s, &mut k) }, PkStatus::Ok);
    assert_eq!((c, s, k), (3, 16, 9));

    let n = 2;
    let pixels: Vec<f32> = (0..n * c * s * s).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect();
    let mut logits = vec![0f32; n * k];
    let st = unsafe { pk_model_predict(model, pixels.as_ptr(), pixels.len(), n, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, PkStatus::Ok);
    assert!(logits.iter().all(|v| v.is_finite()));

    let st = unsafe { pk_model_predict(model, pixels.as_ptr(), pixels.len() - 1, n, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, PkStatus::InvalidArgument);
    let st = unsafe { pk_model_predict(model, pixels.as_ptr(), pixels.len(), n, logits.as_mut_ptr(), k) };
    assert_eq!(st, PkStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pk_model_save(model, path.as_ptr()) }, PkStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { pk_model_load(path.as_ptr(), &mut loaded) }, PkStatus::Ok);
    let mut again = vec![0f32; n * k];
    unsafe { pk_model_predict(loaded, pixels.as_ptr(), pixels.len(), n, again.as_mut_ptr(), again.len()) };
    assert_eq!(again, logits);

    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { pk_model_load(missing.as_ptr(), &mut m2) }, PkStatus::Data);
    unsafe {
        pk_model_free(model);
        pk_model_free(loaded);
        pk_config_free(cfg);
    }
}

#[test]
fn nf4_round_trip_is_exact_on_codebook_multiples() {
    let book = peftkit::quant::build_nf4_codebook();
    let values: Vec<f64> = (0..64).map(|i| 0.5 * book.values[i % 16]).collect();
    let mut out = vec![0.0; values.len()];
    let st = unsafe { pk_nf4_roundtrip(values.as_ptr(), values.len(), 64, 256, out.as_mut_ptr()) };
    assert_eq!(st, PkStatus::Ok);
    for (a, b) in values.iter().zip(&out) {
        assert!((a - b).abs() < 1e-12, "{a} {b}");
    }
    let st = unsafe { pk_nf4_roundtrip(values.as_ptr(), values.len(), 0, 256, out.as_mut_ptr()) };
    assert_eq!(st, PkStatus::Config);
}

#[test]
fn short_run_through_the_abi() {
    let toml = {
        let mut c = preset("frozen_toy").unwrap();
        c.train.epochs = 1;
        c.dataset = peftkit::runner::DatasetSource::Synthetic {
            seed: 0,
            spec: peftkit::data::SyntheticSpec {
                train_per_class: 2,
                val_per_class: 1,
                ..Default::default()
            }
            .scaled_test(1000),
        };
        CString::new(c.to_toml()).unwrap()
    };
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { pk_config_from_toml(toml.as_ptr(), &mut cfg) }, PkStatus::Ok);
    assert_eq!(unsafe { pk_config_set_seed(cfg, 5) }, PkStatus::Ok);
    let dir = tempfile::tempdir().unwrap();
    let out_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut summary = PkRunSummary::default();
    assert_eq!(unsafe { pk_run(cfg, out_dir.as_ptr(), &mut summary) }, PkStatus::Ok);
    assert_eq!(summary.epochs_run, 1);
    assert!(summary.trainable_fraction < 0.01);
    assert!((0.0..=1.0).contains(&summary.test_accuracy));
    assert!(dir.path().join("report.json").exists());
    unsafe { pk_config_free(cfg) };
}

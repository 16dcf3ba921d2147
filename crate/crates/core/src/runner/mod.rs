//! Experiment orchestration behind the command-line front end: config
//! files and presets, the build → quantize → adapt → train → evaluate
//! pipeline, experiment matrices and their comparison tables, parameter
//! accounting, quantization diagnostics and dataset export.
//!
//! A run directory holds:
//!
//! | file          | contents                                                  |
//! |---------------|-----------------------------------------------------------|
//! | `config.toml` | the resolved configuration                                |
//! | `history.csv` | one row per epoch                                         |
//! | `report.json` | accounting and metrics; byte-identical across reruns      |
//! | `timing.json` | wall-clock time and inference throughput                  |
//! | `model.ckpt`  | the trained model (best validation epoch)                 |
//! | `adapter.ckpt`| adapter factors and head only (adapter runs)              |
//! | `error.txt`   | present only when the run failed; other files are partial |

mod config;
mod table;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    preset, preset_names, toy_matrix, BackboneInit, DatasetSource, ExperimentConfig, Precision, MAX_BUILD_PARAMS,
};
pub use table::{format_params, Table};

use crate::data::{
    expand_training_set, export_split, load_directory_dataset, synthesize_dataset, SyntheticDataset, SyntheticSpec,
    TensorSet,
};
use crate::error::{Error, Result};
use crate::metrics::{measure_efficiency, val_test_gap, EfficiencyReport, EvalReport};
use crate::nn::{Checkpoint, Model};
use crate::peft::{accounting, adapter_checkpoint, attach_adapters, Accounting, Paradigm};
use crate::quant::{build_nf4_codebook, quantize_linear, QuantConfig};
use crate::rng::SeedTree;
use crate::tensor::{Scalar, Tensor};
use crate::train::{evaluate, train_loop, write_history_csv};

/// Batch size used for throughput measurement.
pub const EFFICIENCY_BATCH: usize = 32;

/// Deterministic outcome of one run; written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub method: String,
    pub setting: String,
    pub paradigm: Paradigm,
    pub quantized: bool,
    pub seed: u64,
    pub trainable_params: u64,
    pub total_params: u64,
    pub trainable_fraction: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_val_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_weighted_f1: f64,
    pub val_test_gap_pp: f64,
    pub test: EvalReport,
    pub artifacts: Vec<String>,
}

/// Hardware-dependent measurements; written as `timing.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub train_seconds: f64,
    pub efficiency: EfficiencyReport,
}

/// A finished or failed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub dir: PathBuf,
    pub report: Option<RunReport>,
    pub timing: Option<Timing>,
    pub error: Option<String>,
}

impl RunResult {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    /// Reads a run directory written by [`cmd_run`].
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |f: &str| -> Result<Option<String>> {
            let p = dir.join(f);
            match std::fs::read_to_string(&p) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(Error::io(p, e)),
            }
        };
        let parse_err = |f: &str, e: serde_json::Error| Error::Data(format!("{}: {e}", dir.join(f).display()));
        let report: Option<RunReport> = read("report.json")?
            .map(|s| serde_json::from_str(&s).map_err(|e| parse_err("report.json", e)))
            .transpose()?;
        let timing: Option<Timing> = read("timing.json")?
            .map(|s| serde_json::from_str(&s).map_err(|e| parse_err("timing.json", e)))
            .transpose()?;
        let error = read("error.txt")?.map(|s| s.trim().to_string());
        if report.is_none() && error.is_none() {
            return Err(Error::Data(format!("{} holds no run report", dir.display())));
        }
        let name = report.as_ref().map(|r| r.name.clone()).unwrap_or_else(|| {
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        });
        Ok(Self {
            name,
            dir: dir.to_path_buf(),
            report,
            timing,
            error,
        })
    }
}

/// Train/val/test splits named by the config.
pub fn load_dataset(source: &DatasetSource) -> Result<SyntheticDataset> {
    match source {
        DatasetSource::Synthetic { seed, spec } => synthesize_dataset(spec, *seed),
        DatasetSource::Directory { root, classes, source } => {
            let split = |s: &str| load_directory_dataset(&root.join(s), classes, source);
            Ok(SyntheticDataset {
                train: split("train")?,
                val: split("val")?,
                test: split("test")?,
            })
        }
    }
}

fn check_buildable(cfg: &ExperimentConfig) -> Result<()> {
    let n = cfg.arch.backbone_param_count();
    if n > MAX_BUILD_PARAMS {
        return Err(Error::Config(format!(
            "{}: a {n}-parameter backbone is for accounting only (limit {MAX_BUILD_PARAMS})",
            cfg.name
        )));
    }
    Ok(())
}

/// Builds the model of `cfg` ready for training: backbone initialised or
/// loaded, optionally quantized, adapters attached or backbone frozen.
pub fn build_model<T: Scalar>(cfg: &ExperimentConfig, seeds: &SeedTree) -> Result<Model<T>> {
    cfg.validate()?;
    check_buildable(cfg)?;
    let mut model = Model::<T>::build(cfg.arch.clone(), cfg.head.clone(), seeds)?;
    if let BackboneInit::Checkpoint { path } = &cfg.backbone {
        let src = Model::<T>::from_checkpoint(&Checkpoint::load(path)?)?;
        if src.arch != cfg.arch {
            return Err(Error::Config(format!("{}: backbone architecture differs from the config", path.display())));
        }
        for (name, t) in src.params() {
            if Model::<T>::is_head_param(name) {
                continue;
            }
            let dst = model.param_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::shape("backbone checkpoint", dst.shape(), t.shape()));
            }
            *dst = t.clone();
        }
    }
    if cfg.quantize_backbone {
        model.quantize_backbone(cfg.quant)?;
    }
    match cfg.paradigm {
        Paradigm::Scratch => {}
        Paradigm::FrozenBackbone => model.freeze_backbone(),
        Paradigm::Peft => {
            let p = cfg.peft.as_ref().expect("validated");
            attach_adapters(&mut model, p, seeds)?;
        }
    }
    Ok(model)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pipeline<T: Scalar>(cfg: &ExperimentConfig, out: &Path, start: Instant) -> Result<(RunReport, Timing)> {
    let seeds = SeedTree::new(cfg.train.seed);
    let data = load_dataset(&cfg.dataset)?;
    let expanded = expand_training_set(&data.train, &cfg.augment, cfg.augment_multiplier, &seeds)?;
    let (size, mean, std) = (cfg.arch.image_size, cfg.augment.mean, cfg.augment.std);
    let train = TensorSet::<T>::from_split(&expanded, size, mean, std)?;
    let val = TensorSet::<T>::from_split(&data.val, size, mean, std)?;
    let test = TensorSet::<T>::from_split(&data.test, size, mean, std)?;

    let mut model = build_model::<T>(cfg, &seeds)?;
    let counts = crate::peft::count_trainable(&model);
    let t_train = Instant::now();
    let outcome = train_loop(&mut model, &train, &val, &cfg.train)?;
    let train_seconds = t_train.elapsed().as_secs_f64();

    let (_, val_acc, _) = evaluate(&model, &val, 0.0)?;
    let (_, test_acc, preds) = evaluate(&model, &test, 0.0)?;
    let test_report = EvalReport::new(&preds, &test.labels, &test.sources, &test.class_names)?;
    let efficiency = measure_efficiency(&model, &test, EFFICIENCY_BATCH)?;

    let mut artifacts = vec!["config.toml", "history.csv", "model.ckpt"];
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    model
        .to_checkpoint(json!({ "experiment": cfg.name, "seed": cfg.train.seed }))
        .save(&out.join("model.ckpt"))?;
    if let Some(p) = &cfg.peft {
        adapter_checkpoint(&model, p).save(&out.join("adapter.ckpt"))?;
        artifacts.push("adapter.ckpt");
    }
    artifacts.extend(["report.json", "timing.json"]);

    let (method, setting) = cfg.describe();
    let report = RunReport {
        name: cfg.name.clone(),
        method,
        setting,
        paradigm: cfg.paradigm,
        quantized: cfg.quantize_backbone,
        seed: cfg.train.seed,
        trainable_params: counts.trainable,
        total_params: counts.total,
        trainable_fraction: counts.fraction,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        best_val_accuracy: outcome.best_val_accuracy,
        val_accuracy: val_acc,
        test_accuracy: test_acc,
        test_weighted_f1: test_report.weighted_f1,
        val_test_gap_pp: val_test_gap(val_acc, test_acc),
        test: test_report,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join("report.json"), &report)?;
    let timing = Timing {
        wall_seconds: start.elapsed().as_secs_f64(),
        train_seconds,
        efficiency,
    };
    write_json(&out.join("timing.json"), &timing)?;
    Ok((report, timing))
}

/// Runs one experiment into `out` (default: the config's output directory).
///
/// Configuration problems are returned as errors before anything is
/// written. Failures after the directory exists are also recorded in
/// `error.txt`, flagging the other files as partial.
pub fn cmd_run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    check_buildable(cfg)?;
    let start = Instant::now();
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let err_path = dir.join("error.txt");
    if err_path.exists() {
        std::fs::remove_file(&err_path).map_err(|e| Error::io(&err_path, e))?;
    }
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let result = match cfg.precision {
        Precision::F32 => pipeline::<f32>(cfg, &dir, start),
        Precision::F64 => pipeline::<f64>(cfg, &dir, start),
    };
    match result {
        Ok((report, timing)) => Ok(RunResult {
            name: cfg.name.clone(),
            dir,
            report: Some(report),
            timing: Some(timing),
            error: None,
        }),
        Err(e) => {
            // The original error matters more than a failure to record it.
            let _ = std::fs::write(&err_path, format!("{e}\n"));
            Err(e)
        }
    }
}

/// A list of experiments run one after another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    /// Preset names or paths to experiment TOML files.
    pub runs: Vec<String>,
    /// Overrides every run's training seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl MatrixConfig {
    pub fn toy() -> Self {
        Self {
            runs: toy_matrix(),
            seed: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.runs.is_empty() {
            return Err(Error::Config(format!("{}: matrix lists no runs", path.display())));
        }
        Ok(m)
    }
}

/// Runs every entry sequentially into `out/<name>`. A failing entry is
/// recorded and the matrix continues.
pub fn cmd_matrix(matrix: &MatrixConfig, out: &Path, seed: Option<u64>) -> Result<Vec<RunResult>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut results = Vec::with_capacity(matrix.runs.len());
    for entry in &matrix.runs {
        let resolved = ExperimentConfig::resolve(entry).map(|mut cfg| {
            if let Some(s) = seed.or(matrix.seed) {
                cfg.train.seed = s;
            }
            cfg
        });
        let dir = out.join(resolved.as_ref().map(|c| c.name.as_str()).unwrap_or(entry.as_str()));
        let result = resolved.and_then(|cfg| cmd_run(&cfg, Some(&dir)));
        results.push(match result {
            Ok(r) => r,
            Err(e) => RunResult {
                name: entry.clone(),
                dir,
                report: None,
                timing: None,
                error: Some(e.to_string()),
            },
        });
    }
    let table = Table::comparison(&results);
    let gaps = Table::gaps(&results);
    let md = format!("{}\n{}", table.to_markdown(), gaps.to_markdown());
    let path = out.join("matrix.md");
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    table.write_csv(&out.join("matrix.csv"))?;
    gaps.write_csv(&out.join("gaps.csv"))?;
    Ok(results)
}

/// Reloads every run directory directly under `dir`, in name order.
pub fn load_results(dir: &Path) -> Result<Vec<RunResult>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && (p.join("report.json").exists() || p.join("error.txt").exists()))
        .collect();
    if dir.join("report.json").exists() {
        dirs.push(dir.to_path_buf());
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no run directories under {}", dir.display())));
    }
    dirs.iter().map(|d| RunResult::load(d)).collect()
}

/// Closed-form accounting for a config, without building any weights.
pub fn cmd_count_params(cfg: &ExperimentConfig) -> Result<Accounting> {
    accounting(&cfg.arch, &cfg.head, cfg.paradigm, cfg.peft.as_ref())
}

/// Reconstruction error of one quantized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantStats {
    pub name: String,
    pub numel: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// Largest value of the per-block analytic bound.
    pub max_bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantInspection {
    pub block_size: usize,
    pub dq_block_size: usize,
    pub layers: Vec<LayerQuantStats>,
}

impl QuantInspection {
    pub fn all_within_bound(&self) -> bool {
        self.layers.iter().all(|l| l.within_bound)
    }
}

/// Quantizes one dense weight and compares every element against the
/// per-block bound `absmax·g/2 + |absmax' − absmax|`, where `g` is the
/// widest gap between neighbouring codebook values and `absmax'` the
/// double-quantized scale.
pub fn inspect_weight(name: &str, w: &Tensor<f64>, cfg: QuantConfig) -> Result<LayerQuantStats> {
    let q = quantize_linear(w, None, cfg)?;
    let gap = build_nf4_codebook().max_gap();
    let deq = q.dequantized();
    let approx = q.absmax();
    let (mut max_err, mut sum_err, mut max_bound, mut ok) = (0.0f64, 0.0f64, 0.0f64, true);
    for (b, block) in w.data().chunks(cfg.block_size).enumerate() {
        let exact = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = exact * gap / 2.0 + (approx[b] - exact).abs();
        max_bound = max_bound.max(bound);
        for (j, v) in block.iter().enumerate() {
            let e = (deq[b * cfg.block_size + j] - v).abs();
            max_err = max_err.max(e);
            sum_err += e;
            ok &= e <= bound * (1.0 + 1e-12) + 1e-300;
        }
    }
    Ok(LayerQuantStats {
        name: name.to_string(),
        numel: w.numel(),
        max_abs_error: max_err,
        mean_abs_error: sum_err / w.numel().max(1) as f64,
        max_bound,
        within_bound: ok,
    })
}

/// Quantization error of every dense quantizable linear in a model
/// checkpoint.
pub fn cmd_quant_inspect(ck: &Checkpoint, cfg: QuantConfig) -> Result<QuantInspection> {
    cfg.validate()?;
    let model = Model::<f64>::from_checkpoint(ck)?;
    let mut layers = Vec::new();
    for lin in model.arch.block_linears() {
        if let Ok(w) = model.param(&format!("{}.weight", lin.name)) {
            layers.push(inspect_weight(&lin.name, w, cfg)?);
        }
    }
    if layers.is_empty() {
        return Err(Error::Data("checkpoint has no dense block linears to inspect".into()));
    }
    Ok(QuantInspection {
        block_size: cfg.block_size,
        dq_block_size: cfg.dq_block_size,
        layers,
    })
}

/// Writes the train, val and test splits under `out/{train,val,test}`.
pub fn cmd_synth(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<BTreeMap<String, usize>> {
    let ds = synthesize_dataset(spec, seed)?;
    let mut counts = BTreeMap::new();
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        export_split(split, &out.join(name))?;
        counts.insert(name.to_string(), split.len());
    }
    Ok(counts)
}

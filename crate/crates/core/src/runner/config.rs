//! Experiment configuration files and the named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SyntheticSpec, BEHAVIORS};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, HeadSpec, ModelKind};
use crate::peft::{Method, Paradigm, PeftConfig};
use crate::quant::QuantConfig;
use crate::train::TrainConfig;

/// Floating-point type used for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated in memory from `spec` with its own seed, independent of the
    /// training seed so that seed sweeps share one dataset.
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        spec: SyntheticSpec,
    },
    /// `root/{train,val,test}/<class>/<images>`.
    Directory {
        root: PathBuf,
        #[serde(default = "behavior_names")]
        classes: Vec<String>,
        #[serde(default = "default_source")]
        source: String,
    },
}

fn behavior_names() -> Vec<String> {
    BEHAVIORS.iter().map(|s| s.to_string()).collect()
}

fn default_source() -> String {
    "directory".into()
}

/// Where the backbone weights come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneInit {
    /// Seeded random initialisation.
    #[default]
    Random,
    /// Every non-head tensor of a model checkpoint with the same
    /// architecture.
    Checkpoint { path: PathBuf },
}

fn three() -> usize {
    3
}

/// One experiment: model, adaptation paradigm, schedule and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub paradigm: Paradigm,
    #[serde(default)]
    pub quantize_backbone: bool,
    #[serde(default)]
    pub precision: Precision,
    /// Training images are replaced by this many augmented variants each.
    #[serde(default = "three")]
    pub augment_multiplier: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub arch: ArchSpec,
    pub head: HeadSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peft: Option<PeftConfig>,
    #[serde(default)]
    pub quant: QuantConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub backbone: BackboneInit,
}

/// Backbones above this size are accounting-only and never built.
pub const MAX_BUILD_PARAMS: u64 = 500_000_000;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        self.arch.validate()?;
        self.head.validate()?;
        self.quant.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.augment_multiplier == 0 {
            return Err(Error::Config("augment_multiplier must be at least 1".into()));
        }
        if self.quantize_backbone && self.paradigm == Paradigm::Scratch {
            return Err(Error::Config("a quantized backbone cannot be trained from scratch".into()));
        }
        match (self.paradigm, &self.peft) {
            (Paradigm::Peft, None) => return Err(Error::Config("paradigm \"peft\" needs a [peft] section".into())),
            (Paradigm::Peft, Some(p)) => p.validate()?,
            (_, Some(_)) => return Err(Error::Config("a [peft] section requires paradigm \"peft\"".into())),
            _ => {}
        }
        if self.paradigm == Paradigm::Peft && self.arch.kind != ModelKind::Vit {
            return Err(Error::Config("adapters need a ViT backbone".into()));
        }
        if self.augment.resize != self.arch.image_size {
            return Err(Error::Config(format!(
                "augment.resize {} differs from arch.image_size {}",
                self.augment.resize, self.arch.image_size
            )));
        }
        let classes = match &self.dataset {
            DatasetSource::Synthetic { spec, .. } => {
                spec.validate()?;
                spec.num_classes
            }
            DatasetSource::Directory { classes, .. } => classes.len(),
        };
        if classes != self.arch.num_classes {
            return Err(Error::Config(format!(
                "dataset has {classes} classes but the model predicts {}",
                self.arch.num_classes
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if name_or_path.ends_with(".toml") || Path::new(name_or_path).exists() {
            Self::load(Path::new(name_or_path))
        } else {
            preset(name_or_path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Method, targets and rank for tables, or the paradigm for baselines.
    pub fn describe(&self) -> (String, String) {
        match (&self.peft, self.paradigm) {
            (Some(p), _) => {
                let method = match (p.method, self.quantize_backbone) {
                    (Method::Lora, true) => "QLoRA",
                    (Method::Lora, false) => "LoRA",
                    (Method::Dora, _) => "DoRA",
                };
                (method.into(), format!("{} r={}", p.targets, p.rank))
            }
            (None, Paradigm::Scratch) => {
                let arch = match self.arch.kind {
                    ModelKind::Vit => "vit",
                    ModelKind::ResnetCnn => "resnet cnn",
                };
                ("Scratch".into(), arch.into())
            }
            (None, _) => ("Frozen".into(), "head only".into()),
        }
    }
}

// ---------------------------------------------------------------- presets

/// The eight adapter configurations: `(name, method, targets, rank, dropout)`.
const PEFT_PRESETS: [(&str, Method, &str, usize, f64); 8] = [
    ("q1", Method::Lora, "q_proj_only", 16, 0.05),
    ("q2", Method::Lora, "q_proj_only", 8, 0.10),
    ("q3", Method::Lora, "all_linear", 16, 0.05),
    ("q4", Method::Lora, "all_linear", 64, 0.05),
    ("d1", Method::Dora, "q_proj_only", 16, 0.05),
    ("d2", Method::Dora, "q_proj_only", 8, 0.05),
    ("d3", Method::Dora, "all_linear", 16, 0.05),
    ("d4", Method::Dora, "all_linear", 64, 0.05),
];

const FULL_BASELINES: [&str; 3] = ["resnet18", "vit_small", "frozen"];
const TOY_BASELINES: [&str; 3] = ["cnn_scratch_toy", "frozen_toy", "vit_scratch_toy"];

/// Every preset name.
pub fn preset_names() -> Vec<String> {
    let mut out: Vec<String> = PEFT_PRESETS.iter().map(|p| p.0.to_string()).collect();
    out.extend(FULL_BASELINES.iter().map(|s| s.to_string()));
    out.extend(PEFT_PRESETS.iter().map(|p| format!("{}_toy", p.0)));
    out.extend(TOY_BASELINES.iter().map(|s| s.to_string()));
    out
}

/// The eight toy adapter presets plus the frozen and CNN baselines.
pub fn toy_matrix() -> Vec<String> {
    let mut out: Vec<String> = PEFT_PRESETS.iter().map(|p| format!("{}_toy", p.0)).collect();
    out.push("frozen_toy".into());
    out.push("cnn_scratch_toy".into());
    out
}

fn resnet18(num_classes: usize) -> ArchSpec {
    ArchSpec {
        width: 64,
        image_size: 224,
        ..ArchSpec::toy_cnn(num_classes)
    }
}

/// Schedules for the 16-pixel experiments. A few thousand optimizer steps
/// replace tens of thousands, so learning rates are raised; patience is
/// widened because one validation image is worth almost 2 points.
fn toy_train(paradigm: Paradigm, arch: ModelKind) -> TrainConfig {
    match (paradigm, arch) {
        (Paradigm::Peft, _) => TrainConfig {
            peak_lr: 3e-3,
            patience: 20,
            ..TrainConfig::peft()
        },
        (Paradigm::FrozenBackbone, _) => TrainConfig {
            peak_lr: 1e-2,
            patience: 20,
            ..TrainConfig::frozen()
        },
        (Paradigm::Scratch, ModelKind::ResnetCnn) => TrainConfig {
            patience: 20,
            ..TrainConfig::scratch_cnn()
        },
        (Paradigm::Scratch, ModelKind::Vit) => TrainConfig {
            peak_lr: 1e-3,
            patience: 20,
            ..TrainConfig::scratch_vit()
        },
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (base, toy) = match name.strip_suffix("_toy") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let classes = BEHAVIORS.len();
    let (arch, head, paradigm, peft) = if let Some(&(_, method, targets, rank, dropout)) =
        PEFT_PRESETS.iter().find(|p| p.0 == base)
    {
        let peft = PeftConfig {
            dropout,
            ..PeftConfig::preset(method, targets, rank)
        };
        let (arch, head) = if toy {
            (ArchSpec::toy_vit(classes), HeadSpec::linear())
        } else {
            (ArchSpec::dinov3_like(classes), HeadSpec::full())
        };
        (arch, head, Paradigm::Peft, Some(peft))
    } else {
        match (name, toy) {
            ("resnet18", false) => (resnet18(classes), HeadSpec::linear(), Paradigm::Scratch, None),
            ("vit_small", false) => (ArchSpec::vit_small(classes), HeadSpec::linear(), Paradigm::Scratch, None),
            ("frozen", false) => (ArchSpec::dinov3_like(classes), HeadSpec::full(), Paradigm::FrozenBackbone, None),
            ("cnn_scratch_toy", true) => (ArchSpec::toy_cnn(classes), HeadSpec::linear(), Paradigm::Scratch, None),
            ("vit_scratch_toy", true) => (ArchSpec::toy_vit(classes), HeadSpec::linear(), Paradigm::Scratch, None),
            ("frozen_toy", true) => (ArchSpec::toy_vit(classes), HeadSpec::linear(), Paradigm::FrozenBackbone, None),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; known: {}",
                    preset_names().join(", ")
                )))
            }
        }
    };
    let train = if toy {
        toy_train(paradigm, arch.kind)
    } else {
        match (paradigm, arch.kind) {
            (Paradigm::Peft, _) => TrainConfig::peft(),
            (Paradigm::FrozenBackbone, _) => TrainConfig::frozen(),
            (Paradigm::Scratch, ModelKind::ResnetCnn) => TrainConfig::scratch_cnn(),
            (Paradigm::Scratch, ModelKind::Vit) => TrainConfig::scratch_vit(),
        }
    };
    let dataset = if toy {
        DatasetSource::Synthetic {
            seed: 0,
            spec: SyntheticSpec::default(),
        }
    } else {
        DatasetSource::Directory {
            root: PathBuf::from("data"),
            classes: behavior_names(),
            source: default_source(),
        }
    };
    let augment = AugmentConfig::with_resize(arch.image_size);
    let cfg = ExperimentConfig {
        name: name.to_string(),
        quantize_backbone: paradigm == Paradigm::Peft,
        paradigm,
        precision: Precision::F32,
        augment_multiplier: 3,
        output_dir: None,
        arch,
        head,
        peft,
        quant: QuantConfig::default(),
        train,
        augment,
        dataset,
        backbone: BackboneInit::Random,
    };
    cfg.validate()?;
    Ok(cfg)
}

//! `peftkit` command-line front end.
//!
//! Exit codes: 0 success, 1 internal contract violation, 2 configuration or
//! usage error, 3 data/IO/format error, 4 numeric failure (NaN, divergence),
//! 5 shape or index error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use peftkit::data::SyntheticSpec;
use peftkit::nn::Checkpoint;
use peftkit::quant::QuantConfig;
use peftkit::runner::{
    cmd_count_params, cmd_matrix, cmd_quant_inspect, cmd_run, cmd_synth, format_params, load_results, DatasetSource,
    ExperimentConfig, MatrixConfig, RunResult, Table,
};
use peftkit::{Error, Result};

#[derive(Parser)]
#[command(name = "peftkit", version, about = "LoRA / DoRA / NF4 fine-tuning experiments on small vision models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output format for tables printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Md, global = true)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Run {
        /// Preset name or experiment TOML file.
        #[arg(long)]
        config: String,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a list of experiments sequentially and tabulate them.
    Matrix {
        /// Matrix TOML file (`runs = [...]`); the toy matrix when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/matrix")]
        out: PathBuf,
    },
    /// Closed-form trainable parameter accounting.
    CountParams {
        #[arg(long)]
        config: String,
    },
    /// Per-layer NF4 reconstruction error of a dense checkpoint.
    QuantInspect {
        checkpoint: PathBuf,
        /// Experiment whose `[quant]` section is used; defaults otherwise.
        #[arg(long)]
        config: Option<String>,
    },
    /// Export a synthetic dataset as class-per-directory images.
    Synth {
        /// Synthetic spec TOML, or an experiment with a synthetic dataset.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render tables from stored run directories.
    Report {
        dir: PathBuf,
    },
}

fn render(table: &Table, format: Format) -> String {
    match format {
        Format::Md => table.to_markdown(),
        Format::Csv => table.to_csv(),
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&table.to_json()).expect("string cells")),
    }
}

fn json<S: Serialize>(v: &S) -> String {
    format!("{}\n", serde_json::to_string_pretty(v).expect("serializable"))
}

fn results_output(results: &[RunResult], format: Format) -> String {
    match format {
        Format::Md => format!(
            "{}\n{}",
            Table::comparison(results).to_markdown(),
            Table::gaps(results).to_markdown()
        ),
        _ => render(&Table::comparison(results), format),
    }
}

fn synth_spec(config: Option<&str>) -> Result<(SyntheticSpec, u64)> {
    let Some(c) = config else {
        return Ok((SyntheticSpec::default(), 0));
    };
    let path = Path::new(c);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if let Ok(spec) = toml::from_str::<SyntheticSpec>(&text) {
            return Ok((spec, 0));
        }
    }
    match ExperimentConfig::resolve(c)?.dataset {
        DatasetSource::Synthetic { seed, spec } => Ok((spec, seed)),
        DatasetSource::Directory { .. } => Err(Error::Config(format!("{c}: dataset is not synthetic"))),
    }
}

fn execute(cli: Cli) -> Result<String> {
    let f = cli.format;
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::resolve(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let r = cmd_run(&cfg, out.as_deref())?;
            Ok(results_output(std::slice::from_ref(&r), f))
        }
        Command::Matrix { config, seed, out } => {
            let m = match config {
                Some(p) => MatrixConfig::load(&p)?,
                None => MatrixConfig::toy(),
            };
            let results = cmd_matrix(&m, &out, seed)?;
            Ok(results_output(&results, f))
        }
        Command::CountParams { config } => {
            let a = cmd_count_params(&ExperimentConfig::resolve(&config)?)?;
            if let Format::Json = f {
                return Ok(json(&a));
            }
            let mut rows = vec![
                ("backbone".to_string(), a.backbone.to_string()),
                ("head".into(), a.head.to_string()),
                ("adapters".into(), a.adapters.to_string()),
            ];
            for (target, layers, n) in &a.per_target {
                rows.push((format!("adapters.{target} ({layers} layers)"), n.to_string()));
            }
            rows.push(("trainable".into(), format!("{} ({})", a.count.trainable, format_params(a.count.trainable))));
            rows.push(("total".into(), format!("{} ({})", a.count.total, format_params(a.count.total))));
            rows.push(("trainable fraction".into(), format!("{:.4}%", 100.0 * a.count.fraction)));
            Ok(render(&Table::key_values(["Quantity", "Parameters"], rows), f))
        }
        Command::QuantInspect { checkpoint, config } => {
            let quant = match config {
                Some(c) => ExperimentConfig::resolve(&c)?.quant,
                None => QuantConfig::default(),
            };
            let r = cmd_quant_inspect(&Checkpoint::load(&checkpoint)?, quant)?;
            if let Format::Json = f {
                return Ok(json(&r));
            }
            let mut t = Table::key_values(["Layer", "Numel"], Vec::new());
            t.headers.extend(["Max Abs Err", "Mean Abs Err", "Bound", "Within Bound"].map(String::from));
            for l in &r.layers {
                t.rows.push(vec![
                    l.name.clone(),
                    l.numel.to_string(),
                    format!("{:.6e}", l.max_abs_error),
                    format!("{:.6e}", l.mean_abs_error),
                    format!("{:.6e}", l.max_bound),
                    l.within_bound.to_string(),
                ]);
            }
            let head = format!("block size B1 = {}, double-quant block size B2 = {}\n\n", r.block_size, r.dq_block_size);
            Ok(match f {
                Format::Md => head + &t.to_markdown(),
                _ => t.to_csv(),
            })
        }
        Command::Synth { config, seed, out } => {
            let (spec, default_seed) = synth_spec(config.as_deref())?;
            let counts = cmd_synth(&spec, seed.unwrap_or(default_seed), &out)?;
            if let Format::Json = f {
                return Ok(json(&counts));
            }
            let rows = counts.into_iter().map(|(k, v)| (k, v.to_string())).collect();
            Ok(render(&Table::key_values(["Split", "Images"], rows), f))
        }
        Command::Report { dir } => Ok(results_output(&load_results(&dir)?, f)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

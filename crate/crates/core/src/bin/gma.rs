//! `gma`: generate synthetic dialogs, train and evaluate attention variants,
//! run ablation sweeps and emit report artifacts.
//!
//! Every command writes under `--out` and finishes with `manifest.json`.
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O or file
//! format error, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use gma_core::harness::dataset::{detokenize, load_dataset, save_dataset};
use gma_core::harness::probe::ProbeTarget;
use gma_core::harness::report::{emit_plot_data, run_report, sweep, write_manifest, SweepAxis};
use gma_core::harness::train::{checkpoint_bytes, load_checkpoint};
use gma_core::harness::{Experiment, RunConfig, Split, TrainedModel, Variant};
use gma_core::metrics::{compare_maps, nemenyi_cd, ranks_from_scores};
use gma_core::saliency::grid_to_csv;
use gma_core::{GmaError, Result, Tensor};

#[derive(Parser)]
#[command(name = "gma", version, about = "Granular multimodal attention on synthetic visual dialog")]
struct Cli {
    /// RunConfig JSON; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test dialogs as JSONL plus GMAT images.
    Generate,
    /// Train one variant and write a checkpoint with its loss curve.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        /// Dataset directory written by `generate`; generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Ablation over granule counts or fusion variants.
    Sweep {
        #[arg(long, default_value = "fusion")]
        axis: SweepAxis,
        /// Comma-separated axis values; defaults to the full axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Probe saliency grids and masked word pairs for one dialog.
    Saliency {
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        dialog: usize,
        /// Checkpoint holding a probe; a probe is trained otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Rank correlation and EMD between two CSV grids.
    CompareMaps { a: PathBuf, b: PathBuf },
    /// Nemenyi critical difference from a score table (header of model names,
    /// one row per dataset, higher is better).
    StatsCd {
        scores: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Train and evaluate variants, then write the report and plot data.
    Report {
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
    },
}

/// Files written by the current command.
struct Artifacts {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Artifacts {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(path.clone());
        Ok(path)
    }

    fn finish(self) -> Result<()> {
        let manifest = write_manifest(&self.root, &self.files)?;
        println!("wrote {} artifacts, manifest {}", self.files.len(), manifest.display());
        Ok(())
    }
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(cfg: &RunConfig, data: Option<&Path>) -> Result<Experiment> {
    match data {
        Some(dir) => Experiment::new(cfg.clone(), load_dataset(dir)?),
        None => Experiment::generate(cfg.clone()),
    }
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn parse_grid(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| GmaError::Format(format!("{}: {e}", path.display())))
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(GmaError::Format(format!("{}: expected a rectangular grid", path.display())));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat())
}

/// Score table: header row of model names, then one row per dataset.
fn parse_scores(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| GmaError::Format(format!("{}: empty score table", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut by_model = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != names.len() {
            return Err(GmaError::Format(format!("{}: row {} has {} columns", path.display(), i + 1, vals.len())));
        }
        for (m, v) in vals.iter().enumerate() {
            let x = v
                .trim()
                .parse::<f64>()
                .map_err(|e| GmaError::Format(format!("{}: row {}: {e}", path.display(), i + 1)))?;
            by_model[m].push(x);
        }
    }
    Ok((names, by_model))
}

fn run(cli: &Cli) -> Result<()> {
    let mut out = Artifacts::new(&cli.out)?;
    match &cli.command {
        Command::Generate => {
            let cfg = load_config(cli, None)?;
            let data = gma_core::harness::generate_dataset(&cfg)?;
            out.files.extend(save_dataset(&data, &cli.out.join("dataset"))?);
            out.write("config.json", cfg.to_json())?;
        }
        Command::Train { variant, data } => {
            let mut cfg = load_config(cli, None)?;
            if let Some(v) = variant {
                cfg = cfg.with_variant(*v);
            }
            let mut ex = experiment(&cfg, data.as_deref())?;
            let start = Instant::now();
            let trained = ex.train(&cfg)?;
            let secs = start.elapsed().as_secs_f64();
            let probe = ex.trained_probe().map(|p| &p.model);
            out.write("checkpoint.gmat", checkpoint_bytes(&trained.model, probe)?)?;
            out.write("config.json", cfg.to_json())?;
            out.write("loss_curve.json", pretty(&json!({ "variant": cfg.variant, "loss_curve": trained.loss_curve }))?)?;
            out.write("timing.json", pretty(&json!({ "train_seconds": secs }))?)?;
            println!("{}: final loss {:.4}", cfg.variant, trained.loss_curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Evaluate {
            checkpoint,
            split,
            variant,
            data,
        } => {
            let beside = checkpoint.parent().map(|d| d.join("config.json"));
            let mut cfg = load_config(cli, beside.as_deref())?;
            if let Some(v) = variant {
                cfg = cfg.with_variant(*v);
            }
            let (model, probe) = load_checkpoint(&cfg, &fs::read(checkpoint)?)?;
            let mut ex = experiment(&cfg, data.as_deref())?;
            if let Some(p) = probe {
                ex.set_probe(TrainedModel {
                    model: p,
                    loss_curve: Vec::new(),
                })?;
            }
            let eval = ex.evaluate(&cfg, &model, *split)?;
            let text = pretty(&json!({ "variant": cfg.variant, "split": split, "metrics": eval.metrics }))?;
            out.write(&format!("metrics_{}.json", split.name()), &text)?;
            println!("{text}");
        }
        Command::Sweep { axis, values } => {
            let cfg = load_config(cli, None)?;
            let mut ex = Experiment::generate(cfg)?;
            let start = Instant::now();
            let report = sweep(&mut ex, *axis, values.clone())?;
            out.write("sweep.json", pretty(&report)?)?;
            out.write("sweep.csv", report.to_csv())?;
            out.write("timing.json", pretty(&json!({ "sweep_seconds": start.elapsed().as_secs_f64() }))?)?;
            print!("{}", report.to_csv());
        }
        Command::Saliency {
            split,
            dialog,
            checkpoint,
            data,
        } => {
            let cfg = load_config(cli, None)?;
            let mut ex = experiment(&cfg, data.as_deref())?;
            if let Some(path) = checkpoint {
                let (_, probe) = load_checkpoint(&cfg, &fs::read(path)?)?;
                let probe = probe.ok_or_else(|| GmaError::Format(format!("{} holds no probe", path.display())))?;
                ex.set_probe(TrainedModel {
                    model: probe,
                    loss_curve: Vec::new(),
                })?;
            }
            let aux = ex.dialog_aux(*split, *dialog, ProbeTarget::Predicted)?;
            let rounds = &ex.data.split(*split)[*dialog].rounds;
            let n = cfg.grid;
            let mut pairs = Vec::with_capacity(aux.len());
            for (r, (a, round)) in aux.iter().zip(rounds).enumerate() {
                out.write(&format!("saliency/round{r}.csv"), grid_to_csv(&a.saliency.reshape(&[n, n])?)?)?;
                let masked = a.masked_pair.map(|(i, j)| {
                    json!({
                        "positions": [i, j],
                        "words": [detokenize(&round.question[i..=i]), detokenize(&round.question[j..=j])],
                    })
                });
                pairs.push(json!({ "round": r, "question": detokenize(&round.question), "masked": masked }));
            }
            out.write("masked_pairs.json", pretty(&pairs)?)?;
        }
        Command::CompareMaps { a, b } => {
            let cmp = compare_maps(&parse_grid(a)?, &parse_grid(b)?)?;
            let text = pretty(&cmp)?;
            out.write("compare_maps.json", &text)?;
            println!("{text}");
        }
        Command::StatsCd { scores, alpha } => {
            let (names, by_model) = parse_scores(scores)?;
            let res = nemenyi_cd(&ranks_from_scores(&by_model)?, *alpha)?;
            out.write("cd.json", pretty(&json!({ "models": names, "result": res }))?)?;
            out.write("cd.csv", res.to_csv(&names))?;
            print!("{}", res.to_csv(&names));
        }
        Command::Report { variants } => {
            let cfg = load_config(cli, None)?;
            let variants = variants.clone().unwrap_or_else(|| Variant::TABLE.to_vec());
            let mut ex = Experiment::generate(cfg)?;
            let start = Instant::now();
            let (report, runs) = run_report(&mut ex, &variants)?;
            let secs = start.elapsed().as_secs_f64();
            out.write("report.json", report.to_json())?;
            out.files.extend(emit_plot_data(&mut ex, &report, &runs, &cli.out.join("plots"))?);
            out.write("timing.json", pretty(&json!({ "report_seconds": secs }))?)?;
            print!("{}", report.metrics_csv());
        }
    }
    out.finish()
}

fn exit_code(e: &GmaError) -> u8 {
    match e {
        GmaError::Config(_) => 2,
        GmaError::Numeric(_) => 3,
        GmaError::Io(_) | GmaError::Format(_) | GmaError::Json(_) => 4,
        GmaError::Shape { .. } | GmaError::Contract { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

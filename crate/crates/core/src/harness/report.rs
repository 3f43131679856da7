//! Run reports, ablation sweeps, plot data and artifact manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GmaError, Result};
use crate::metrics::{compare_maps, MetricVector};
use crate::saliency::grid_to_csv;
use crate::tensor::Tensor;

use super::config::{RunConfig, Variant};
use super::dataset::Split;
use super::probe::ProbeTarget;
use super::train::{Evaluation, Experiment, TrainedModel};

/// Mean agreement between a model's cell attention and the probe saliency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub rounds: usize,
    pub rank_correlation: f64,
    pub p_value: f64,
    pub emd: f64,
    pub emd_exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub granules: usize,
    pub loss_curve: Vec<f64>,
    pub val: MetricVector,
    pub test: MetricVector,
    pub map_comparison: Option<MapSummary>,
}

/// Deterministic summary of a run; wall-clock timings are kept elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub tie_convention: String,
    pub variants: Vec<VariantReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Table-style CSV, one row per variant.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("variant,granules,R@1,R@5,R@10,MRR,Mean,NDCG\n");
        for v in &self.variants {
            let m = &v.val;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                v.variant, v.granules, m.r_at_1, m.r_at_5, m.r_at_10, m.mrr, m.mean_rank, m.ndcg
            ));
        }
        out
    }
}

pub const TIE_CONVENTION: &str = "mean rank among tied candidates";

/// Trained model plus its evaluations, kept in memory for plot data.
pub struct VariantRun {
    pub config: RunConfig,
    pub trained: TrainedModel,
    pub val: Evaluation,
    pub test: Evaluation,
    pub report: VariantReport,
}

/// Compares every available cell map of `eval` with the probe saliency of the
/// same round; constant maps are skipped.
pub fn summarize_maps(ex: &mut Experiment, cfg: &RunConfig, eval: &Evaluation, split: Split) -> Result<Option<MapSummary>> {
    if eval.maps.iter().flatten().all(Option::is_none) {
        return Ok(None);
    }
    let aux = ex.aux(cfg, Variant::Gia, split, ProbeTarget::Predicted)?;
    let n = cfg.grid;
    let (mut count, mut rho, mut p, mut emd, mut exact) = (0usize, 0.0, 0.0, 0.0, true);
    for (maps, a) in eval.maps.iter().zip(&aux) {
        let Some(a) = a else { continue };
        for (map, ra) in maps.iter().zip(a) {
            let Some(map) = map else { continue };
            let m = map.reshape(&[n, n])?;
            let s = ra.saliency.reshape(&[n, n])?;
            if s.max() == s.min() || m.max() == m.min() {
                continue;
            }
            let shifted = s.map(|v| v - s.min());
            let c = compare_maps(&m, &s)?;
            let e = crate::metrics::emd_2d(&m, &shifted)?;
            count += 1;
            rho += c.rank_correlation;
            p += c.p_value;
            emd += e.distance;
            exact &= matches!(e.method, crate::metrics::EmdMethod::Exact);
        }
    }
    if count == 0 {
        return Ok(None);
    }
    let k = count as f64;
    Ok(Some(MapSummary {
        rounds: count,
        rank_correlation: rho / k,
        p_value: p / k,
        emd: emd / k,
        emd_exact: exact,
    }))
}

/// Trains and evaluates one configuration on the experiment's data.
pub fn run_variant(ex: &mut Experiment, cfg: &RunConfig) -> Result<VariantRun> {
    let trained = ex.train(cfg)?;
    let val = ex.evaluate(cfg, &trained.model, Split::Val)?;
    let test = ex.evaluate(cfg, &trained.model, Split::Test)?;
    let map_comparison = summarize_maps(ex, cfg, &val, Split::Val)?;
    let report = VariantReport {
        variant: cfg.variant,
        granules: cfg.granules,
        loss_curve: trained.loss_curve.clone(),
        val: val.metrics,
        test: test.metrics,
        map_comparison,
    };
    Ok(VariantRun {
        config: cfg.clone(),
        trained,
        val,
        test,
        report,
    })
}

/// Runs every listed variant with the experiment's config.
pub fn run_report(ex: &mut Experiment, variants: &[Variant]) -> Result<(RunReport, Vec<VariantRun>)> {
    let base = ex.config.clone();
    let mut runs = Vec::with_capacity(variants.len());
    for &v in variants {
        runs.push(run_variant(ex, &base.with_variant(v))?);
    }
    let report = RunReport {
        config: base,
        tie_convention: TIE_CONVENTION.into(),
        variants: runs.iter().map(|r| r.report.clone()).collect(),
    };
    Ok((report, runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Granules,
    Fusion,
}

impl std::str::FromStr for SweepAxis {
    type Err = GmaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "granules" => Ok(SweepAxis::Granules),
            "fusion" | "variant" => Ok(SweepAxis::Fusion),
            other => Err(GmaError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// Granule counts of the ablation, capped at the cell count and deduplicated.
pub fn granule_axis(grid: usize) -> Vec<usize> {
    let cap = grid * grid;
    let mut ks: Vec<usize> = [8, 32, 64, 128].iter().map(|&k: &usize| k.min(cap)).collect();
    ks.dedup();
    ks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub config: RunConfig,
    pub rows: Vec<VariantReport>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        RunReport {
            config: self.config.clone(),
            tie_convention: TIE_CONVENTION.into(),
            variants: self.rows.clone(),
        }
        .metrics_csv()
    }
}

/// Trains and evaluates each setting of the axis with the shared seed. An
/// explicit `values` list overrides the default axis values.
pub fn sweep(ex: &mut Experiment, axis: SweepAxis, values: Option<Vec<String>>) -> Result<SweepReport> {
    let base = ex.config.clone();
    let configs: Vec<RunConfig> = match axis {
        SweepAxis::Granules => {
            let ks = match values {
                Some(v) => v
                    .iter()
                    .map(|s| s.parse::<usize>().map_err(|e| GmaError::Config(format!("bad granule count {s:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?,
                None => granule_axis(base.grid),
            };
            ks.into_iter()
                .map(|k| RunConfig {
                    granules: k,
                    ..base.clone()
                })
                .collect()
        }
        SweepAxis::Fusion => {
            let vs = match values {
                Some(v) => v.iter().map(|s| s.parse::<Variant>()).collect::<Result<Vec<_>>>()?,
                None => Variant::TABLE.to_vec(),
            };
            vs.into_iter().map(|v| base.with_variant(v)).collect()
        }
    };
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in &configs {
        cfg.validate()?;
        rows.push(run_variant(ex, cfg)?.report);
    }
    Ok(SweepReport {
        axis,
        config: base,
        rows,
    })
}

/// Joint histogram of two equally sized maps after min-max scaling each to
/// `[0, 1]`; `bins x bins`, total mass one.
pub fn joint_histogram(pairs: &[(Tensor, Tensor)], bins: usize) -> Result<Tensor> {
    if bins == 0 || pairs.is_empty() {
        return Err(GmaError::contract("joint_histogram", "need bins and at least one map pair"));
    }
    let scale = |t: &Tensor| {
        let (lo, hi) = (t.min(), t.max());
        t.data()
            .iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let mut h = vec![0.0; bins * bins];
    let mut total = 0usize;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(GmaError::shape("joint_histogram", a.dims(), b.dims()));
        }
        for (x, y) in scale(a).into_iter().zip(scale(b)) {
            let bx = ((x * bins as f64) as usize).min(bins - 1);
            let by = ((y * bins as f64) as usize).min(bins - 1);
            h[bx * bins + by] += 1.0;
            total += 1;
        }
    }
    h.iter_mut().for_each(|v| *v /= total as f64);
    Tensor::new(vec![bins, bins], h)
}

/// Writes heatmaps for the first validation dialog, probe saliency grids, a
/// joint histogram of attention vs saliency, loss curves and the metric
/// table. Returns the written paths.
pub fn emit_plot_data(ex: &mut Experiment, report: &RunReport, runs: &[VariantRun], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut write = |path: PathBuf, text: String| -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    let n = report.config.grid;
    write(dir.join("metrics.csv"), report.metrics_csv())?;
    let mut curves = String::from("variant,epoch,loss\n");
    for v in &report.variants {
        for (e, l) in v.loss_curve.iter().enumerate() {
            curves.push_str(&format!("{},{},{}\n", v.variant, e, l));
        }
    }
    write(dir.join("loss_curves.csv"), curves)?;

    let needs_saliency = runs.iter().any(|r| r.val.maps.iter().flatten().any(Option::is_some));
    let saliency = if needs_saliency {
        Some(ex.aux(&report.config, Variant::Gia, Split::Val, ProbeTarget::Predicted)?)
    } else {
        None
    };
    if let Some(Some(first)) = saliency.as_ref().and_then(|s| s.first()) {
        for (r, a) in first.iter().enumerate() {
            write(dir.join(format!("saliency/dialog0_round{r}.csv")), grid_to_csv(&a.saliency.reshape(&[n, n])?)?)?;
        }
    }
    for run in runs {
        let Some(maps) = run.val.maps.first() else { continue };
        for (r, m) in maps.iter().enumerate() {
            if let Some(m) = m {
                let path = dir.join(format!("heatmaps/{}/dialog0_round{r}.csv", run.config.variant));
                write(path, grid_to_csv(&m.reshape(&[n, n])?)?)?;
            }
        }
        if let Some(sal) = &saliency {
            let mut pairs = Vec::new();
            for (maps, a) in run.val.maps.iter().zip(sal) {
                let Some(a) = a else { continue };
                for (m, ra) in maps.iter().zip(a) {
                    if let Some(m) = m {
                        pairs.push((m.clone(), ra.saliency.clone()));
                    }
                }
            }
            if !pairs.is_empty() {
                let h = joint_histogram(&pairs, 10)?;
                write(dir.join(format!("joint_hist/{}.csv", run.config.variant)), grid_to_csv(&h)?)?;
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Lists artifacts below `root` with their SHA-256 digests, sorted by path.
pub fn write_manifest(root: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let mut entries: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    for f in files {
        let bytes = fs::read(f)?;
        let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
        entries.insert(
            rel.clone(),
            ManifestEntry {
                path: rel,
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            },
        );
    }
    let list: Vec<_> = entries.into_values().collect();
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&serde_json::json!({ "artifacts": list }))?)?;
    Ok(path)
}

//! Training, evaluation and checkpoints.

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::error::{GmaError, Result};
use crate::gmat;
use crate::metrics::{retrieval_metrics, MetricVector, RankedRound};
use crate::rng::{chacha, derive_seed};
use crate::saliency::{sample_masks, MaskSet};
use crate::tensor::Tensor;

use super::config::{RunConfig, SaliencySource, Variant};
use super::dataset::{Dataset, DialogInstance, Split};
use super::model::{Model, RoundAux};
use super::probe::{uniform_aux, FastSan, ProbeTarget, SaliencyCache};

/// Parameter-name prefix of the probe inside a checkpoint.
pub const PROBE_PREFIX: &str = "probe.";

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    /// Mean training loss of each epoch, measured during the epoch.
    pub loss_curve: Vec<f64>,
}

/// Per-dialog probe inputs aligned with a dialog slice.
pub type AuxTable = Vec<Option<Vec<RoundAux>>>;

/// Plain SGD over whole dialogs; dialog order is reshuffled each epoch from
/// the config seed.
pub fn train_model(cfg: &RunConfig, variant: Variant, dialogs: &[DialogInstance], aux: &AuxTable) -> Result<TrainedModel> {
    if dialogs.is_empty() {
        return Err(GmaError::contract("train_model", "no training dialogs"));
    }
    if aux.len() != dialogs.len() {
        return Err(GmaError::shape("train_model", &[dialogs.len()], &[aux.len()]));
    }
    let mut model = Model::new(cfg, variant)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dialogs.len()).collect();
        order.shuffle(&mut chacha(derive_seed(cfg.seed, &format!("epoch/{epoch}"))));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            for &i in batch {
                let grads = {
                    let mut tape = Tape::with_params(&model.store);
                    let pass = model
                        .dialog_pass(&mut tape, &dialogs[i], aux[i].as_deref())
                        .map_err(|e| diverged(variant, epoch, dialogs[i].id, e))?;
                    let loss = tape.value(pass.loss).item()?;
                    if !loss.is_finite() {
                        return Err(GmaError::Numeric(format!(
                            "{variant}: loss {loss} at epoch {epoch}, dialog {}",
                            dialogs[i].id
                        )));
                    }
                    total += loss;
                    tape.backward(pass.loss)?
                };
                grads.accumulate_into(&mut model.store)?;
            }
            model.store.sgd_step(cfg.learning_rate / batch.len() as f64);
            if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(GmaError::Numeric(format!("{variant}: non-finite parameters after an update in epoch {epoch}")));
            }
        }
        curve.push(total / dialogs.len() as f64);
    }
    Ok(TrainedModel { model, loss_curve: curve })
}

fn diverged(variant: Variant, epoch: usize, dialog: u64, e: GmaError) -> GmaError {
    match e {
        GmaError::Numeric(msg) => GmaError::Numeric(format!("{variant}: epoch {epoch}, dialog {dialog}: {msg}")),
        other => other,
    }
}

/// Scores of one evaluated split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricVector,
    pub rounds: Vec<RankedRound>,
    /// Final cell attention per dialog and round, when the model has one.
    pub maps: Vec<Vec<Option<Tensor>>>,
}

pub fn evaluate_model(model: &Model, dialogs: &[DialogInstance], aux: &AuxTable) -> Result<Evaluation> {
    if aux.len() != dialogs.len() {
        return Err(GmaError::shape("evaluate_model", &[dialogs.len()], &[aux.len()]));
    }
    let mut rounds = Vec::new();
    let mut maps = Vec::with_capacity(dialogs.len());
    for (d, a) in dialogs.iter().zip(aux) {
        let mut tape = Tape::with_params(&model.store);
        let pass = model.dialog_pass(&mut tape, d, a.as_deref())?;
        for (r, &logits) in d.rounds.iter().zip(&pass.logits) {
            rounds.push(RankedRound::new(tape.value(logits).data().to_vec(), r.gt_index, r.relevance.clone())?);
        }
        maps.push(pass.maps);
    }
    Ok(Evaluation {
        metrics: retrieval_metrics(&rounds)?,
        rounds,
        maps,
    })
}

/// Whether the variant needs a trained probe under this config.
pub fn needs_probe(cfg: &RunConfig, variant: Variant) -> bool {
    let image = variant.uses_image_granules() && cfg.saliency == SaliencySource::Rise;
    let text = variant.uses_text_granules() && variant.fusion() != Some(crate::attention::Fusion::Passthrough);
    image || text
}

/// Fields that do not influence the probe are normalised away.
fn probe_key(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        variant: Variant::San,
        granules: 1,
        ..cfg.clone()
    }
}

/// One dataset with its probe and saliency cache, shared by every variant
/// trained on it.
pub struct Experiment {
    pub config: RunConfig,
    pub data: Dataset,
    masks: Option<MaskSet>,
    probe: Option<TrainedModel>,
    fast: Option<FastSan>,
    cache: SaliencyCache,
}

impl Experiment {
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        Ok(Experiment {
            config,
            data,
            masks: None,
            probe: None,
            fast: None,
            cache: SaliencyCache::new(),
        })
    }

    pub fn generate(config: RunConfig) -> Result<Self> {
        let data = super::dataset::generate_dataset(&config)?;
        Experiment::new(config, data)
    }

    /// Installs an already trained probe (e.g. from a checkpoint).
    pub fn set_probe(&mut self, probe: TrainedModel) -> Result<()> {
        self.fast = Some(FastSan::new(&probe.model)?);
        self.probe = Some(probe);
        self.cache = SaliencyCache::new();
        Ok(())
    }

    pub fn probe(&mut self) -> Result<&TrainedModel> {
        if self.probe.is_none() {
            let cfg = self.config.with_variant(Variant::San);
            let aux = vec![None; self.data.train.len()];
            let trained = train_model(&cfg, Variant::San, &self.data.train, &aux)?;
            self.set_probe(trained)?;
        }
        Ok(self.probe.as_ref().expect("trained"))
    }

    pub fn masks(&mut self) -> Result<&MaskSet> {
        if self.masks.is_none() {
            let c = &self.config;
            self.masks = Some(sample_masks(
                c.grid,
                c.mask_keep_prob,
                c.mask_low_res,
                c.mask_count,
                derive_seed(c.seed, "masks"),
            )?);
        }
        Ok(self.masks.as_ref().expect("sampled"))
    }

    /// Probe inputs for every dialog of `split`.
    pub fn aux(&mut self, cfg: &RunConfig, variant: Variant, split: Split, target: ProbeTarget) -> Result<AuxTable> {
        let dialogs = self.data.split(split).to_vec();
        if !matches!(variant, Variant::Gia | Variant::Gta) && variant.fusion().is_none() {
            return Ok(vec![None; dialogs.len()]);
        }
        if !needs_probe(cfg, variant) {
            return Ok(dialogs.iter().map(|d| Some(uniform_aux(cfg, d))).collect());
        }
        self.probe()?;
        self.masks()?;
        let probe = &self.probe.as_ref().expect("trained").model;
        let fast = self.fast.as_ref().expect("trained");
        let masks = self.masks.as_ref().expect("sampled");
        dialogs
            .iter()
            .map(|d| Ok(Some(self.cache.dialog(probe, fast, &self.config, masks, d, target)?)))
            .collect()
    }

    /// Probe inputs for a single dialog, computed on demand.
    pub fn dialog_aux(&mut self, split: Split, index: usize, target: ProbeTarget) -> Result<Vec<RoundAux>> {
        let dialog = self
            .data
            .split(split)
            .get(index)
            .cloned()
            .ok_or_else(|| GmaError::Config(format!("{} split has no dialog {index}", split.name())))?;
        self.probe()?;
        self.masks()?;
        let probe = &self.probe.as_ref().expect("trained").model;
        let fast = self.fast.as_ref().expect("trained");
        let masks = self.masks.as_ref().expect("sampled");
        self.cache.dialog(probe, fast, &self.config, masks, &dialog, target)
    }

    /// Trains `cfg.variant`; the stacked-attention baseline reuses the probe
    /// when its configuration matches. Probe inputs target the probe's
    /// predicted answer so they carry no label information.
    pub fn train(&mut self, cfg: &RunConfig) -> Result<TrainedModel> {
        cfg.validate()?;
        let variant = cfg.variant;
        if variant == Variant::San && probe_key(cfg) == probe_key(&self.config) {
            return Ok(self.probe()?.clone());
        }
        let aux = self.aux(cfg, variant, Split::Train, ProbeTarget::Predicted)?;
        train_model(cfg, variant, &self.data.train, &aux)
    }

    /// Evaluates with the same probe inputs as training: driven by the
    /// probe's own prediction, never by the annotated answer.
    pub fn evaluate(&mut self, cfg: &RunConfig, model: &Model, split: Split) -> Result<Evaluation> {
        let aux = self.aux(cfg, model.variant, split, ProbeTarget::Predicted)?;
        let dialogs = self.data.split(split).to_vec();
        evaluate_model(model, &dialogs, &aux)
    }

    pub fn trained_probe(&self) -> Option<&TrainedModel> {
        self.probe.as_ref()
    }
}

/// Serialises a model and optional probe into one checkpoint container.
pub fn checkpoint_bytes(model: &Model, probe: Option<&Model>) -> Result<Vec<u8>> {
    let mut items: Vec<(String, Tensor)> = model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    if let Some(pr) = probe {
        items.extend(pr.store.iter().map(|(_, p)| (format!("{PROBE_PREFIX}{}", p.name), p.value.clone())));
    }
    gmat::named_tensors_to_bytes(items.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Rebuilds the model for `cfg.variant` (and the probe, when present) from a
/// checkpoint; names and shapes must match the config.
pub fn load_checkpoint(cfg: &RunConfig, bytes: &[u8]) -> Result<(Model, Option<Model>)> {
    let named = gmat::named_tensors_from_bytes(bytes)?;
    let (probe_vals, main_vals): (Vec<_>, Vec<_>) = named.into_iter().partition(|(n, _)| n.starts_with(PROBE_PREFIX));
    let mut model = Model::new(cfg, cfg.variant)?;
    model.load_values(&main_vals)?;
    let probe = if probe_vals.is_empty() {
        None
    } else {
        let mut p = Model::new(cfg, Variant::San)?;
        let stripped: Vec<_> = probe_vals
            .into_iter()
            .map(|(n, t)| (n[PROBE_PREFIX.len()..].to_string(), t))
            .collect();
        p.load_values(&stripped)?;
        Some(p)
    };
    Ok((model, probe))
}

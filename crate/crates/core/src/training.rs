//! Teacher-forced SGD with per-group learning rates, exponential decay,
//! decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Batch, TokenizedExample, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::features::FeatureSource;
use crate::metrics::{bleu4_corpus, Smoothing};
use crate::model::{CaptionModel, Forward, ParamGroup, RecordInputs, TrainProgress};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_fusion: f64,
    pub lr_encoders: f64,
    pub lr_decoder: f64,
    pub weight_decay: f64,
    /// Per-epoch multiplier on every group's rate.
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_fusion: 5e-5,
            lr_encoders: 1e-4,
            lr_decoder: 5e-4,
            weight_decay: 1e-5,
            lr_decay: 0.9,
            clip_norm: 5.0,
            epochs: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (name, lr) in [
            ("lr_fusion", self.lr_fusion),
            ("lr_encoders", self.lr_encoders),
            ("lr_decoder", self.lr_decoder),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                out.push((name, format!("must be positive and finite, got {lr}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            out.push((
                "lr_decay",
                format!("must be in (0, 1], got {}", self.lr_decay),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push((
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            out.push((
                "clip_norm",
                format!("must be positive, got {}", self.clip_norm),
            ));
        }
        if self.epochs == 0 {
            out.push(("epochs", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            out.push(("batch_size", "must be at least 1".into()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            return Ok(());
        }
        let msgs: Vec<_> = v
            .iter()
            .map(|(k, m)| format!("optimizer.{k}: {m}"))
            .collect();
        Err(Error::Config(msgs.join("; ")))
    }

    pub fn base_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoders => self.lr_encoders,
            ParamGroup::Fusion => self.lr_fusion,
            ParamGroup::Decoder => self.lr_decoder,
        }
    }

    pub fn rates_at(&self, epoch: usize) -> GroupRates {
        let at = |g| lr_schedule(self.base_rate(g), epoch, self.lr_decay);
        GroupRates {
            encoders: at(ParamGroup::Encoders),
            fusion: at(ParamGroup::Fusion),
            decoder: at(ParamGroup::Decoder),
        }
    }

    /// Shuffle seed for `epoch`; batch order depends only on this.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// `base · decay^epoch`.
pub fn lr_schedule(base: f64, epoch: usize, decay: f64) -> f64 {
    base * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub encoders: f64,
    pub fusion: f64,
    pub decoder: f64,
}

impl GroupRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoders => self.encoders,
            ParamGroup::Fusion => self.fusion,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epoch in progress, or the next one to run between epochs.
    pub epoch: usize,
    /// Optimizer updates applied so far.
    pub step: usize,
    pub lr: GroupRates,
    /// Mean batch loss so far in the current epoch.
    pub running_loss: f64,
    pub best_val_bleu4: Option<f64>,
    /// Seed of the current epoch's shuffle.
    pub shuffle_seed: u64,
}

impl TrainState {
    pub fn new(opt: &OptimizerConfig, epoch: usize) -> Self {
        TrainState {
            epoch,
            step: 0,
            lr: opt.rates_at(epoch),
            running_loss: 0.0,
            best_val_bleu4: None,
            shuffle_seed: opt.epoch_seed(epoch),
        }
    }

    pub fn progress(&self) -> TrainProgress {
        TrainProgress {
            epoch: self.epoch,
            step: self.step,
            best_val_bleu4: self.best_val_bleu4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: GroupRates,
    pub train_loss: f64,
    pub val_bleu4: Option<f64>,
}

/// Scales every gradient so the global L2 norm is at most `clip_norm`.
/// Returns the factor applied, 1.0 when no clipping was needed.
pub fn clip_gradients(params: &mut crate::model::Parameters, clip_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm <= clip_norm {
        return 1.0;
    }
    let mut scale = clip_norm / norm;
    let apply = |params: &mut crate::model::Parameters, factor: f64| {
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    };
    apply(params, scale);
    // Rounding can leave the norm an ulp or two above the bound.
    while params.grad_norm() > clip_norm {
        let nudge = 1.0 - 4.0 * f64::EPSILON;
        apply(params, nudge);
        scale *= nudge;
    }
    scale
}

/// `p ← p − lr_g · (grad + weight_decay · p)` for every parameter.
pub fn sgd_update(
    params: &mut crate::model::Parameters,
    rates: &GroupRates,
    weight_decay: f64,
) -> Result<()> {
    for (name, t) in params.iter_mut() {
        let group = ParamGroup::of(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} has no group")))?;
        let lr = rates.get(group);
        let grad = t.grad().map(<[f64]>::to_vec);
        let data = t.data_mut();
        match grad {
            Some(g) => data
                .iter_mut()
                .zip(g)
                .for_each(|(p, g)| *p -= lr * (g + weight_decay * *p)),
            None => data.iter_mut().for_each(|p| *p -= lr * weight_decay * *p),
        }
    }
    Ok(())
}

/// Builds the encoder inputs for one example. The image is looked up by
/// feature reference, or by id when the reference is empty.
pub fn record_inputs(
    model: &CaptionModel,
    example: &TokenizedExample,
    features: &FeatureSource,
) -> Result<RecordInputs> {
    let image = if model.config.use_vision {
        let key = if example.feature_ref.is_empty() {
            &example.id
        } else {
            &example.feature_ref
        };
        let v = features.lookup(key)?;
        if v.len() != model.config.d_clip {
            return Err(Error::Config(format!(
                "feature {key:?} has dimension {}, model expects d_clip = {}",
                v.len(),
                model.config.d_clip
            )));
        }
        Some(v)
    } else {
        None
    };
    Ok(RecordInputs {
        image,
        figure_text_ids: example.figure_text_ids.clone(),
        abstract_ids: example.abstract_ids.clone(),
    })
}

/// Mean token NLL over the unmasked caption positions of `batch`.
pub fn compute_loss<'g>(
    model: &CaptionModel,
    fwd: &Forward<'g, '_>,
    batch: &Batch,
    features: &FeatureSource,
) -> Result<Var<'g>> {
    if batch.is_empty() {
        return Err(Error::Contract("loss of an empty batch".into()));
    }
    let mut total: Option<Var<'g>> = None;
    let mut count = 0;
    for (i, example) in batch.examples.iter().enumerate() {
        let enc = fwd.encode(&record_inputs(model, example, features)?)?;
        let (nll, n) = fwd.caption_nll(&enc, &batch.caption_ids[i], &batch.mask[i])?;
        count += n;
        total = Some(match total {
            Some(t) => t.add(&nll)?,
            None => nll,
        });
    }
    if count == 0 {
        return Err(Error::Contract(
            "batch has no unmasked target positions".into(),
        ));
    }
    Ok(total.expect("non-empty batch").scale(1.0 / count as f64))
}

/// Gradients keyed by parameter name.
pub type NamedGrads = Vec<(String, Vec<f64>)>;

/// Loss and parameter gradients for one batch, without updating anything.
pub fn loss_and_grads(
    model: &CaptionModel,
    batch: &Batch,
    features: &FeatureSource,
) -> Result<(f64, NamedGrads)> {
    let graph = Graph::new();
    let fwd = model.forward(&graph, true);
    let loss = compute_loss(model, &fwd, batch, features)?;
    let value = loss.to_vec()[0];
    loss.backward()?;
    Ok((value, fwd.param_grads()))
}

/// Token-weighted mean loss over `examples`, evaluated in batches.
pub fn dataset_loss(
    model: &CaptionModel,
    examples: &[TokenizedExample],
    features: &FeatureSource,
    batch_size: usize,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::from_examples(chunk.to_vec(), PAD);
        let graph = Graph::new();
        let fwd = model.forward(&graph, false);
        let n: usize = batch
            .mask
            .iter()
            .map(|m| m.iter().skip(1).filter(|&&x| x).count())
            .sum();
        sum += compute_loss(model, &fwd, &batch, features)?.to_vec()[0] * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Contract("loss of an empty dataset".into()));
    }
    Ok(sum / count as f64)
}

/// Caption ids with BOS, EOS and padding removed.
pub fn caption_body(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .filter(|&t| t != BOS && t != EOS && t != PAD)
        .collect()
}

/// Greedy decodes of `examples`, each paired with its reference body.
pub fn decode_pairs(
    model: &CaptionModel,
    examples: &[TokenizedExample],
    features: &FeatureSource,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    examples
        .iter()
        .map(|ex| {
            let hyp = model
                .greedy_decode(&record_inputs(model, ex, features)?, model.max_decode_len())?;
            Ok((caption_body(&hyp.tokens), caption_body(&ex.caption_ids)))
        })
        .collect()
}

/// Smoothed corpus BLEU-4 of greedy decodes against the references.
pub fn greedy_bleu4(
    model: &CaptionModel,
    examples: &[TokenizedExample],
    features: &FeatureSource,
) -> Result<f64> {
    Ok(bleu4_corpus(
        &decode_pairs(model, examples, features)?,
        Smoothing::Epsilon,
    )?
    .bleu4)
}

pub struct TrainData<'a> {
    pub train: &'a [TokenizedExample],
    pub val: &'a [TokenizedExample],
    pub features: &'a FeatureSource,
}

/// Passed to the per-epoch callback after validation.
pub struct EpochReport<'a> {
    pub metrics: &'a EpochMetrics,
    pub model: &'a CaptionModel,
    pub state: &'a TrainState,
    /// This epoch set a new best validation BLEU-4.
    pub improved: bool,
}

pub struct TrainOutcome {
    pub model: CaptionModel,
    /// Parameters from the best-validation epoch; the final model when
    /// there is no validation split.
    pub best: CaptionModel,
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs epochs `start.epoch + 1 ..< opt.epochs` (or from 0 without `start`).
pub fn train(
    model: CaptionModel,
    opt: &OptimizerConfig,
    data: &TrainData,
    start: Option<&TrainProgress>,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    opt.validate()?;
    model.config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let first_epoch = start.map_or(0, |p| p.epoch + 1);
    let mut state = TrainState::new(opt, first_epoch);
    if let Some(p) = start {
        state.step = p.step;
        state.best_val_bleu4 = p.best_val_bleu4;
    }
    let mut model = model;
    let mut best = model.clone();
    let mut metrics = Vec::new();

    for epoch in first_epoch..opt.epochs {
        state.epoch = epoch;
        state.lr = opt.rates_at(epoch);
        state.shuffle_seed = opt.epoch_seed(epoch);
        state.running_loss = 0.0;
        let batches = dataset::batch(data.train, opt.batch_size, PAD, state.shuffle_seed)?;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = loss_and_grads(&model, batch, data.features)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: state.step,
                    loss,
                });
            }
            model.params.zero_grad();
            model.params.accumulate_grads(grads)?;
            clip_gradients(&mut model.params, opt.clip_norm);
            sgd_update(&mut model.params, &state.lr, opt.weight_decay)?;
            model.params.zero_grad();
            if !model.params.all_finite() {
                return Err(Error::Diverged {
                    step: state.step,
                    loss: f64::NAN,
                });
            }
            state.step += 1;
            state.running_loss += (loss - state.running_loss) / (b + 1) as f64;
        }

        let val_bleu4 = if data.val.is_empty() {
            None
        } else {
            Some(greedy_bleu4(&model, data.val, data.features)?)
        };
        let improved = match (val_bleu4, state.best_val_bleu4) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            state.best_val_bleu4 = val_bleu4;
            best = model.clone();
        } else if data.val.is_empty() {
            best = model.clone();
        }
        let m = EpochMetrics {
            epoch,
            lr: state.lr,
            train_loss: state.running_loss,
            val_bleu4,
        };
        on_epoch(&EpochReport {
            metrics: &m,
            model: &model,
            state: &state,
            improved,
        })?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        best,
        state,
        metrics,
    })
}

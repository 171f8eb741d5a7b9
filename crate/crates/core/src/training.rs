//! Training objective, negative sampling and the epoch loop.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codefeat::CodeFeatureSource;
use crate::dataio::{LearnerSequence, Vocabulary, PAD_INDEX, UNKNOWN_INDEX};
use crate::encoder::ModelError;
use crate::evalrank::{evaluate, EvalReport};
use crate::model::PersModel;
use crate::rng::seeded;
use crate::tensorkit::{clip_global_norm, Adam, AdamConfig, Gradients, Graph, NodeId, ParamSet, Tensor, TensorError};

/// Tuning grids for learning rate, MLP depth and dropout.
pub const LR_GRID: [f64; 3] = [0.1, 0.01, 0.001];
pub const LAYER_GRID: [usize; 3] = [1, 2, 3];
pub const DROPOUT_GRID: [f64; 3] = [0.1, 0.3, 0.5];

/// The two reserved rows never score.
pub const MASKED: [usize; 2] = [PAD_INDEX, UNKNOWN_INDEX];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] crate::evalrank::EvalError),
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("target index {0} is reserved")]
    ReservedTarget(usize),
    #[error("catalog of {available} exercises too small for {k} negatives")]
    CatalogTooSmall { available: usize, k: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    FullSoftmax,
    SampledBce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub negatives: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            dropout: 0.1,
            batch_size: 2048,
            eval_batch_size: 4096,
            epochs: 20,
            seed: 0,
            loss_mode: LossMode::FullSoftmax,
            negatives: 4,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.loss_mode == LossMode::SampledBce && self.negatives == 0 {
            return bad("sampled_bce needs at least one negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `k` distinct real exercises other than `target`, uniformly at random.
pub fn sample_negatives(
    target: usize,
    catalog: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, TrainError> {
    if target < 2 {
        return Err(TrainError::ReservedTarget(target));
    }
    let available = catalog.saturating_sub(3);
    if k == 0 || available < k {
        return Err(TrainError::CatalogTooSmall { available, k });
    }
    Ok(rand::seq::index::sample(rng, available, k)
        .into_iter()
        .map(|i| {
            let idx = i + 2;
            if idx >= target {
                idx + 1
            } else {
                idx
            }
        })
        .collect())
}

/// Per-step loss node on `logits` for the next exercise `target`.
pub fn loss_node(
    graph: &mut Graph,
    logits: NodeId,
    target: usize,
    mode: LossMode,
    negatives: &[usize],
) -> Result<NodeId, TrainError> {
    if MASKED.contains(&target) {
        return Err(TrainError::ReservedTarget(target));
    }
    Ok(match mode {
        LossMode::FullSoftmax => graph.softmax_xent(logits, target, MASKED.to_vec()),
        LossMode::SampledBce => graph.sampled_bce(logits, target, negatives.to_vec()),
    })
}

/// Mean per-target loss over a sequence of logits.
pub fn loss(
    logits: &[Tensor],
    targets: &[usize],
    negatives: &[Vec<usize>],
    mode: LossMode,
) -> Result<f64, TrainError> {
    assert_eq!(logits.len(), targets.len(), "one target per step");
    let mut g = Graph::new();
    let mut terms = Vec::with_capacity(targets.len());
    for (i, (z, &t)) in logits.iter().zip(targets).enumerate() {
        let z = g.constant(z.clone());
        let neg = negatives.get(i).map(Vec::as_slice).unwrap_or(&[]);
        terms.push(loss_node(&mut g, z, t, mode, neg)?);
    }
    let Some(total) = g.add_all(&terms) else {
        return Ok(0.0);
    };
    g.scale(total, 1.0 / targets.len() as f64);
    Ok(g.forward(&ParamSet::new())?.data()[0])
}

/// Model, vocabulary and code features shared by training and evaluation.
pub struct TrainData<'a> {
    pub model: &'a PersModel,
    pub vocab: &'a Vocabulary,
    pub source: &'a CodeFeatureSource,
}

/// Summed loss and gradients of one window.
pub struct WindowGrad {
    pub loss: f64,
    pub targets: usize,
    pub grads: Gradients,
}

/// Loss graph of one window, with dropout and negatives drawn from `rng`.
pub fn window_gradient(
    data: &TrainData<'_>,
    params: &ParamSet,
    seq: &LearnerSequence,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<WindowGrad, TrainError> {
    let indices = PersModel::exercise_indices(&seq.events, data.vocab);
    let dropout = (cfg.dropout > 0.0).then_some(cfg.dropout);
    let mut sg = match dropout {
        Some(rate) => data.model.build(&seq.events, &indices, data.source, Some((rate, &mut *rng)))?,
        None => data.model.build(&seq.events, &indices, data.source, None)?,
    };
    let catalog = data.model.hp.catalog();
    let mut terms = Vec::new();
    for pos in seq.target_positions() {
        let Some(trace) = sg.steps[pos - 1] else { continue };
        let target = indices[pos];
        if target == UNKNOWN_INDEX {
            continue;
        }
        let neg = match cfg.loss_mode {
            LossMode::SampledBce => sample_negatives(target, catalog, cfg.negatives, rng)?,
            LossMode::FullSoftmax => Vec::new(),
        };
        terms.push(loss_node(&mut sg.graph, trace.logits, target, cfg.loss_mode, &neg)?);
    }
    let Some(root) = sg.graph.add_all(&terms) else {
        return Ok(WindowGrad {
            loss: 0.0,
            targets: 0,
            grads: params.zeros_like(),
        });
    };
    let loss = sg.graph.forward(params)?.data()[0];
    let grads = sg.graph.backward(root, params)?;
    Ok(WindowGrad {
        loss,
        targets: terms.len(),
        grads,
    })
}

/// Mean loss and gradient over a batch. Windows run in parallel; the
/// reduction is sequential in batch order, so the result is bitwise
/// independent of the thread count.
pub fn batch_gradient(
    data: &TrainData<'_>,
    params: &ParamSet,
    batch: &[&LearnerSequence],
    cfg: &TrainConfig,
    rng_path: &[u64],
) -> Result<(f64, usize, Gradients), TrainError> {
    let parts: Vec<WindowGrad> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut path = rng_path.to_vec();
            path.push(i as u64);
            let mut rng = seeded(cfg.seed, &path);
            window_gradient(data, params, seq, cfg, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let mut grads = params.zeros_like();
    let (mut loss, mut n) = (0.0, 0);
    for p in &parts {
        grads.accumulate(&p.grads)?;
        loss += p.loss;
        n += p.targets;
    }
    if n > 0 {
        grads.scale(1.0 / n as f64);
    }
    Ok((loss, n, grads))
}

/// Parameters plus optimizer state; everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(model: &PersModel, cfg: &TrainConfig) -> Self {
        let params = model.init_params(cfg.seed);
        let adam = Adam::new(cfg.adam(), &params);
        Self {
            params,
            adam,
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub targets: usize,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<EvalReport>,
}

pub struct TrainOutcome {
    pub last: TrainState,
    /// State with the best validation HR@10 when a validation split was
    /// given, otherwise the last state.
    pub best: TrainState,
    pub log: Vec<EpochLog>,
}

const SHUFFLE: u64 = 0x5348;
const BATCH: u64 = 0x4241;

/// Run epochs `state.epoch..cfg.epochs`. Each epoch shuffles the windows
/// with a stream keyed by `(seed, epoch)`; each window's dropout and
/// negatives come from a stream keyed by `(seed, epoch, batch, position)`.
pub fn train(
    data: &TrainData<'_>,
    train_set: &[LearnerSequence],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    valid: Option<&[LearnerSequence]>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.iter().all(|s| s.target_count() == 0) {
        return Err(TrainError::EmptyTrain);
    }
    let mut state = state.unwrap_or_else(|| TrainState::fresh(data.model, cfg));
    data.model.check_params(&state.params)?;
    state.adam.config = cfg.adam();

    let mut log = Vec::new();
    let mut best: Option<(f64, TrainState)> = None;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<&LearnerSequence> = train_set.iter().collect();
        order.shuffle(&mut seeded(cfg.seed, &[SHUFFLE, epoch as u64]));

        let (mut total, mut count, mut norm) = (0.0, 0, 0.0f64);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, n, mut grads) =
                batch_gradient(data, &state.params, batch, cfg, &[BATCH, epoch as u64, b as u64])?;
            if n == 0 {
                continue;
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            norm = norm.max(clip_global_norm(&mut grads, cfg.clip_norm));
            state.adam.step(&mut state.params, &grads)?;
            total += loss;
            count += n;
        }
        state.epoch += 1;

        let report = match valid {
            Some(v) if !v.is_empty() => Some(evaluate(data, &state.params, v)?),
            _ => None,
        };
        if let Some(r) = &report {
            if best.as_ref().map_or(true, |(hr, _)| r.hr > *hr) {
                best = Some((r.hr, state.clone()));
            }
        }
        log.push(EpochLog {
            epoch: state.epoch,
            loss: total / count.max(1) as f64,
            targets: count,
            grad_norm: norm,
            valid: report,
        });
    }
    let best = best.map(|(_, s)| s).unwrap_or_else(|| state.clone());
    Ok(TrainOutcome {
        last: state,
        best,
        log,
    })
}

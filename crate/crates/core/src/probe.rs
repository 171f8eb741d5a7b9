//! Final-step latent export and linear probes for learning styles.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::LearnerHistory;
use crate::encoder::ModelError;
use crate::evalrank::EvalError;
use crate::model::PersModel;
use crate::perscell::LatentState;
use crate::rng::seeded;
use crate::simlearner::{Label, Processing, Understanding};
use crate::tensorkit::ParamSet;
use crate::training::TrainData;

pub const MIN_PER_CLASS: usize = 20;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("class {0} has fewer than {MIN_PER_CLASS} learners")]
    ClassTooSmall(bool),
    #[error("{0} feature rows but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no latent row for learner {0}")]
    MissingLearner(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub learner_id: String,
    /// Events in the window the latents were read from.
    pub length: usize,
    pub latent: LatentState,
}

/// Latents after the last step of one window; zeros when empty.
pub fn final_latents(
    data: &TrainData<'_>,
    params: &ParamSet,
    events: &[crate::dataio::Interaction],
) -> Result<LatentState, ProbeError> {
    let indices = PersModel::exercise_indices(events, data.vocab);
    Ok(data.model.run(params, events, &indices, data.source)?.final_state)
}

/// One row per learner from the last `max_len` events of their history.
pub fn export_latents(
    data: &TrainData<'_>,
    params: &ParamSet,
    histories: &[LearnerHistory],
) -> Result<Vec<LatentRow>, ProbeError> {
    let catalog = data.model.hp.catalog();
    if data.vocab.size() != catalog {
        return Err(EvalError::VocabMismatch {
            vocab: data.vocab.size(),
            model: catalog,
        }
        .into());
    }
    let max_len = data.model.hp.max_len;
    histories
        .iter()
        .map(|h| {
            let tail = &h.events[h.events.len().saturating_sub(max_len)..];
            Ok(LatentRow {
                learner_id: h.learner_id.clone(),
                length: tail.len(),
                latent: final_latents(data, params, tail)?,
            })
        })
        .collect()
}

/// Header then tab-separated rows; floats at 9 significant digits.
pub fn write_latents<W: Write>(mut w: W, rows: &[LatentRow]) -> io::Result<()> {
    let d = rows.first().map_or(0, |r| r.latent.pa.len());
    let mut header = String::from("learner_id\tlength");
    for name in ["pa", "ps", "us"] {
        for i in 0..d {
            header.push_str(&format!("\t{name}_{i}"));
        }
    }
    writeln!(w, "{header}")?;
    for r in rows {
        write!(w, "{}\t{}", r.learner_id, r.length)?;
        for t in [&r.latent.pa, &r.latent.ps, &r.latent.us] {
            for v in t.data() {
                write!(w, "\t{v:.8e}")?;
            }
        }
        writeln!(w)?;
    }
    w.flush()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleDim {
    Processing,
    Understanding,
}

/// PS for processing, US for understanding; positive class is reflective
/// or global respectively.
pub fn probe_inputs(
    rows: &[LatentRow],
    labels: &[Label],
    dim: StyleDim,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), ProbeError> {
    let by_id: HashMap<&str, &LatentRow> = rows.iter().map(|r| (r.learner_id.as_str(), r)).collect();
    let mut x = Vec::with_capacity(labels.len());
    let mut y = Vec::with_capacity(labels.len());
    for l in labels {
        let r = by_id
            .get(l.learner_id.as_str())
            .ok_or_else(|| ProbeError::MissingLearner(l.learner_id.clone()))?;
        match dim {
            StyleDim::Processing => {
                x.push(r.latent.ps.data().to_vec());
                y.push(l.processing == Processing::Reflective);
            }
            StyleDim::Understanding => {
                x.push(r.latent.us.data().to_vec());
                y.push(l.understanding == Understanding::Global);
            }
        }
    }
    Ok((x, y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub test_fraction: f64,
    pub lr: f64,
    pub iterations: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            lr: 0.5,
            iterations: 500,
            l2: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train: usize,
    pub test: usize,
}

const SPLIT: u64 = 0x5B17;
const PERMUTE: u64 = 0x9E27;

/// Stratified train/test indices.
pub fn stratified_split(y: &[bool], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded(seed, &[SPLIT]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression by full-batch gradient descent on standardised
/// features; returns held-out accuracy.
pub fn fit_probe(x: &[Vec<f64>], y: &[bool], cfg: &ProbeConfig) -> Result<ProbeResult, ProbeError> {
    if x.len() != y.len() {
        return Err(ProbeError::LengthMismatch(x.len(), y.len()));
    }
    for class in [false, true] {
        if y.iter().filter(|&&c| c == class).count() < MIN_PER_CLASS {
            return Err(ProbeError::ClassTooSmall(class));
        }
    }
    let d = x[0].len();
    let (train, test) = stratified_split(y, cfg.test_fraction, cfg.seed);

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&x[i]) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in sd.iter_mut().zip(&x[i]).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|s| if s > 1e-24 { s.sqrt() } else { 1.0 }).collect();
    let z = |i: usize| -> Vec<f64> { (0..d).map(|k| (x[i][k] - mean[k]) / sd[k]).collect() };
    let ztrain: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &i) in ztrain.iter().zip(&train) {
            let s: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let err = sigmoid(s) - if y[i] { 1.0 } else { 0.0 };
            for (g, v) in gw.iter_mut().zip(row) {
                *g += err * v;
            }
            gb += err;
        }
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= cfg.lr * (g / n + cfg.l2 * *wk);
        }
        b -= cfg.lr * gb / n;
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            let s: f64 = z(i).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            (s > 0.0) == y[i]
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len().max(1) as f64,
        train: train.len(),
        test: test.len(),
    })
}

/// Probe accuracy on `trials` random permutations of the labels.
pub fn permutation_null(
    x: &[Vec<f64>],
    y: &[bool],
    cfg: &ProbeConfig,
    trials: usize,
) -> Result<Vec<f64>, ProbeError> {
    (0..trials)
        .map(|t| {
            let mut yp = y.to_vec();
            yp.shuffle(&mut seeded(cfg.seed, &[PERMUTE, t as u64]));
            Ok(fit_probe(x, &yp, cfg)?.accuracy)
        })
        .collect()
}

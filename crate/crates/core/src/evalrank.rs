//! Full-catalog ranking, HR/MRR/NDCG at k, and the ablation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{LearnerSequence, UNKNOWN_INDEX};
use crate::encoder::ModelError;
use crate::model::PersModel;
use crate::perscell::{CellConfig, Variant};
use crate::tensorkit::{ParamSet, Tensor};
use crate::training::{train, TrainConfig, TrainData, TrainError};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target index {0} is masked")]
    MaskedTarget(usize),
    #[error("target index {target} outside catalog of {catalog}")]
    TargetOutOfRange { target: usize, catalog: usize },
    #[error("no events to score")]
    Empty,
    #[error("vocabulary has {vocab} entries but the model was built for {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 1-based rank of `target` among real exercises (indices 2..). Candidates
/// with a strictly greater score, or an equal score and a smaller index,
/// rank ahead of it.
pub fn rank_event(logits: &[f64], target: usize) -> Result<usize, EvalError> {
    if target < 2 {
        return Err(EvalError::MaskedTarget(target));
    }
    if target >= logits.len() {
        return Err(EvalError::TargetOutOfRange {
            target,
            catalog: logits.len(),
        });
    }
    let z = logits[target];
    let ahead = logits
        .iter()
        .enumerate()
        .skip(2)
        .filter(|&(j, &s)| s > z || (s == z && j < target))
        .count();
    Ok(ahead + 1)
}

/// Contributions of one rank at cutoff `k`: (hit, reciprocal rank, dcg).
pub fn contributions(rank: usize, k: usize) -> (f64, f64, f64) {
    if rank == 0 || rank > k {
        return (0.0, 0.0, 0.0);
    }
    let r = rank as f64;
    (1.0, 1.0 / r, 1.0 / (r + 1.0).log2())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

pub fn metrics_at_k(ranks: &[usize], k: usize) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut hr, mut mrr, mut ndcg) = (0.0, 0.0, 0.0);
    for &r in ranks {
        let (h, m, n) = contributions(r, k);
        hr += h;
        mrr += m;
        ndcg += n;
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        hr: hr / n,
        mrr: mrr / n,
        ndcg: ndcg / n,
    })
}

/// One scored prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub learner_id: String,
    /// Position of the target event within its window.
    pub event: usize,
    pub rank: usize,
    pub hit: f64,
    pub rr: f64,
    pub dcg: f64,
    pub unknown: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub events: usize,
    pub hr: f64,
    pub mrr: f64,
    pub ndcg: f64,
    /// Targets absent from the training vocabulary; scored as misses.
    pub unknown_targets: usize,
}

/// Score every target of every window. Targets unseen in training get rank
/// `catalog - 1`, i.e. behind every real exercise.
pub fn rank_all(
    data: &TrainData<'_>,
    params: &ParamSet,
    seqs: &[LearnerSequence],
) -> Result<Vec<RankResult>, EvalError> {
    let catalog = data.model.hp.catalog();
    if data.vocab.size() != catalog {
        return Err(EvalError::VocabMismatch {
            vocab: data.vocab.size(),
            model: catalog,
        });
    }
    let per_seq: Vec<Vec<RankResult>> = seqs
        .par_iter()
        .map(|seq| {
            let indices = PersModel::exercise_indices(&seq.events, data.vocab);
            let run = data.model.run(params, &seq.events, &indices, data.source)?;
            let mut out = Vec::new();
            for pos in seq.target_positions() {
                let Some(trace) = &run.traces[pos - 1] else { continue };
                let target = indices[pos];
                let unknown = target == UNKNOWN_INDEX;
                let rank = if unknown {
                    catalog - 1
                } else {
                    rank_event(trace.logits.data(), target)?
                };
                let (hit, rr, dcg) = contributions(rank, DEFAULT_K);
                out.push(RankResult {
                    learner_id: seq.learner_id.clone(),
                    event: pos,
                    rank,
                    hit,
                    rr,
                    dcg,
                    unknown,
                });
            }
            Ok(out)
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}

pub fn evaluate(
    data: &TrainData<'_>,
    params: &ParamSet,
    seqs: &[LearnerSequence],
) -> Result<EvalReport, EvalError> {
    evaluate_at(data, params, seqs, DEFAULT_K)
}

pub fn evaluate_at(
    data: &TrainData<'_>,
    params: &ParamSet,
    seqs: &[LearnerSequence],
    k: usize,
) -> Result<EvalReport, EvalError> {
    let results = rank_all(data, params, seqs)?;
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    let m = metrics_at_k(&ranks, k)?;
    Ok(EvalReport {
        k,
        events: ranks.len(),
        hr: m.hr,
        mrr: m.mrr,
        ndcg: m.ndcg,
        unknown_targets: results.iter().filter(|r| r.unknown).count(),
    })
}

/// Logits of one window's last step; handy for inspection.
pub fn last_logits(
    data: &TrainData<'_>,
    params: &ParamSet,
    seq: &LearnerSequence,
) -> Result<Option<Tensor>, EvalError> {
    let indices = PersModel::exercise_indices(&seq.events, data.vocab);
    let run = data.model.run(params, &seq.events, &indices, data.source)?;
    Ok(run.traces.into_iter().rev().flatten().next().map(|t| t.logits))
}

/// Tab-separated report: header plus one row per variant.
pub fn format_report_tsv(rows: &[(String, EvalReport)]) -> String {
    let k = rows.first().map_or(DEFAULT_K, |(_, r)| r.k);
    let mut s = format!("variant\tHR@{k}\tMRR@{k}\tNDCG@{k}\n");
    for (name, r) in rows {
        s.push_str(&format!("{name}\t{:.4}\t{:.4}\t{:.4}\n", r.hr, r.mrr, r.ndcg));
    }
    s
}

#[derive(Debug, Error)]
pub enum AblateError {
    #[error("{variant}: {source}")]
    Train { variant: Variant, source: TrainError },
    #[error("{variant}: {source}")]
    Eval { variant: Variant, source: EvalError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Train and evaluate each variant with the same seed, data and budget.
pub fn ablate(
    data: &TrainData<'_>,
    train_set: &[LearnerSequence],
    test_set: &[LearnerSequence],
    cfg: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<(Variant, EvalReport)>, AblateError> {
    let base = data.model;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let model = PersModel::new(
            base.hp.clone(),
            CellConfig {
                variant,
                ..base.cell
            },
            base.code.clone(),
        )?;
        let vdata = TrainData {
            model: &model,
            vocab: data.vocab,
            source: data.source,
        };
        let out = train(&vdata, train_set, cfg, None, None)
            .map_err(|source| AblateError::Train { variant, source })?;
        let report = evaluate(&vdata, &out.best.params, test_set)
            .map_err(|source| AblateError::Eval { variant, source })?;
        rows.push((variant, report));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_max_is_rank_one() {
        assert_eq!(rank_event(&[9.0, 9.0, 0.1, 2.0, -1.0], 3).unwrap(), 1);
    }

    #[test]
    fn ties_favour_smaller_index() {
        let z = [0.0; 6];
        assert_eq!(rank_event(&z, 2).unwrap(), 1);
        assert_eq!(rank_event(&z, 5).unwrap(), 4);
    }

    #[test]
    fn masked_target_rejected() {
        assert!(matches!(rank_event(&[0.0; 4], 1), Err(EvalError::MaskedTarget(1))));
    }

    #[test]
    fn closed_forms() {
        let m = metrics_at_k(&[3], 10).unwrap();
        assert_eq!(m.hr, 1.0);
        assert!((m.mrr - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.ndcg - 0.5).abs() < 1e-15);
        let m = metrics_at_k(&[12], 10).unwrap();
        assert_eq!((m.hr, m.mrr, m.ndcg), (0.0, 0.0, 0.0));
        assert!(matches!(metrics_at_k(&[], 10), Err(EvalError::Empty)));
    }

    #[test]
    fn shift_invariance() {
        let z = [0.0, 0.0, 0.3, -1.2, 0.3, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.0).collect();
        for t in 2..z.len() {
            assert_eq!(rank_event(&z, t).unwrap(), rank_event(&shifted, t).unwrap());
        }
    }

    #[test]
    fn tsv_layout() {
        let r = EvalReport {
            k: 10,
            events: 4,
            hr: 0.5,
            mrr: 0.25,
            ndcg: 0.3,
            unknown_targets: 0,
        };
        let s = format_report_tsv(&[("PERS".into(), r)]);
        assert_eq!(s, "variant\tHR@10\tMRR@10\tNDCG@10\nPERS\t0.5000\t0.2500\t0.3000\n");
    }
}

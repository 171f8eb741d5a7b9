//! Central finite-difference check of the whole model on a small window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codefeat::{CodeFeatureSource, CodeSourceKind};
use crate::dataio::{Interaction, Status, Vocabulary};
use crate::encoder::{HyperParams, ModelError};
use crate::model::PersModel;
use crate::perscell::{CellConfig, Variant};
use crate::rng::seeded;
use crate::tensorkit::{finite_diff_check, ParamSet};
use crate::training::{loss_node, LossMode, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// `(parameter, max relative error)` sorted by name.
    pub errors: Vec<(String, f64)>,
    pub max_error: f64,
}

/// Model with `d_k` everywhere, `n_exercises` real exercises and hashed
/// code tokens.
pub fn small_model(d_k: usize, n_exercises: usize, variant: Variant) -> Result<PersModel, ModelError> {
    let d_k = d_k + d_k % 2;
    let hp = HyperParams {
        d_p: d_k,
        d_pos: d_k,
        d_c: d_k,
        d_ct: 4,
        d_cm: 4,
        d_cs: 4,
        d_k,
        max_len: 8,
        n_exercises,
        layers: 1,
    };
    PersModel::new(
        hp,
        CellConfig {
            variant,
            squash_us: false,
        },
        CodeSourceKind::HashedTokens { buckets: 16, dim: d_k },
    )
}

fn event(ex: &str, t: i64, status: Status, code: &str) -> Interaction {
    Interaction {
        learner_id: "g".into(),
        exercise_id: ex.into(),
        timestamp: t,
        status,
        exec_time_ms: 40 + 13 * t as u64,
        exec_memory_kb: 900 + 250 * t as u64,
        code: Some(code.into()),
        code_vec_ref: None,
    }
}

/// A failed attempt, a retry of the same exercise, then a switch.
pub fn sample_window() -> Vec<Interaction> {
    vec![
        event("e03", 0, Status::WrongAnswer, "for i in range(n): print(i)"),
        event("e03", 1, Status::Accepted, "for i in range(n + 1): print(i * i)"),
        event("e07", 2, Status::RuntimeError, "x = input().split(); print(x[3])"),
    ]
}

/// Max relative error of every parameter's gradient on the summed
/// next-exercise loss of a 3-step window (last step targets `e05`).
pub fn gradcheck(d_k: usize, variant: Variant, h: f64, seed: u64) -> Result<GradReport, TrainError> {
    let vocab = Vocabulary::new((0..10).map(|i| format!("e{i:02}")));
    let model = small_model(d_k, vocab.exercises(), variant)?;
    let source = match model.code {
        CodeSourceKind::HashedTokens { buckets, dim } => CodeFeatureSource::HashedTokens { buckets, dim },
        CodeSourceKind::Precomputed { .. } => unreachable!("small model hashes tokens"),
    };
    let events = sample_window();
    let indices = PersModel::exercise_indices(&events, &vocab);
    let mut targets = indices[1..].to_vec();
    targets.push(vocab.encode("e05"));

    let mut params: ParamSet = model.init_params(seed);
    let mut rng = seeded(seed, &[0x6C4E]);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }

    let mut sg = model.build(&events, &indices, &source, None)?;
    let mut terms = Vec::new();
    for (step, &target) in sg.steps.clone().iter().zip(&targets) {
        if let Some(trace) = step {
            terms.push(loss_node(&mut sg.graph, trace.logits, target, LossMode::FullSoftmax, &[])?);
        }
    }
    sg.graph.add_all(&terms).expect("three steps");

    let mut errors = Vec::new();
    for (name, _) in model.param_shapes() {
        let e = finite_diff_check(&mut sg.graph, &params, &name, h)?;
        errors.push((name, e));
    }
    let max_error = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradReport { errors, max_error })
}

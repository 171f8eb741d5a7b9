//! Representing module: enhanced exercise and code embeddings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codefeat::{CodeFeatError, CodeFeatureSource};
use crate::dataio::{Interaction, PAD_INDEX};
use crate::tensorkit::{Graph, NodeId, ParamSet, Tensor, TensorError};

pub const EXERCISE_TABLE: &str = "exercise_table";
pub const STATUS_TABLE: &str = "status_table";
pub const TIME_TABLE: &str = "time_table";
pub const MEMORY_TABLE: &str = "memory_table";
pub const EXERCISE_PROJ: &str = "ex_proj";
pub const CODE_PROJ: &str = "code_proj";

pub const STATUS_ROWS: usize = 7;
/// Execution time and memory buckets: `min(⌊log₂(x+1)⌋, 31)`.
pub const LOG_BUCKETS: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("positional encoding dimension must be even, got {0}")]
    OddPositionDim(usize),
    #[error("exercise index {index} out of range for table of {rows}")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("invalid hyper-parameters: {0}")]
    InvalidHyperParams(String),
    #[error("code features: {0}")]
    Code(#[from] CodeFeatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub d_p: usize,
    pub d_pos: usize,
    pub d_c: usize,
    pub d_ct: usize,
    pub d_cm: usize,
    pub d_cs: usize,
    pub d_k: usize,
    pub max_len: usize,
    /// Real exercises; tables carry two extra rows.
    pub n_exercises: usize,
    /// Depth of the embedding and readout MLPs.
    pub layers: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            d_p: 128,
            d_pos: 128,
            d_c: 128,
            d_ct: 16,
            d_cm: 16,
            d_cs: 16,
            d_k: 128,
            max_len: 50,
            n_exercises: 0,
            layers: 1,
        }
    }
}

impl HyperParams {
    /// Output layer width, `N + 2`.
    pub fn catalog(&self) -> usize {
        self.n_exercises + 2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHyperParams(m.to_string()));
        let dims = [
            self.d_p, self.d_pos, self.d_c, self.d_ct, self.d_cm, self.d_cs, self.d_k,
        ];
        if dims.iter().any(|&d| d == 0) {
            return bad("all dimensions must be positive");
        }
        if self.d_pos % 2 != 0 {
            return Err(ModelError::OddPositionDim(self.d_pos));
        }
        if self.max_len < 2 {
            return bad("max_len must be >= 2");
        }
        if self.n_exercises == 0 {
            return bad("catalog has no exercises");
        }
        if !(1..=3).contains(&self.layers) {
            return bad("layers must be 1, 2 or 3");
        }
        Ok(())
    }
}

/// Sinusoidal encoding of position `t`: even entries `sin`, odd entries `cos`
/// of `t / 10000^(2i/d_pos)`.
pub fn positional_encoding(t: usize, d_pos: usize) -> Result<Tensor, ModelError> {
    if d_pos % 2 != 0 || d_pos == 0 {
        return Err(ModelError::OddPositionDim(d_pos));
    }
    let mut out = vec![0.0; d_pos];
    for i in 0..d_pos / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_pos as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(Tensor::vector(out))
}

pub fn log_bucket(x: u64) -> usize {
    // ⌊log₂(x+1)⌋ is the index of the highest set bit of x+1
    let b = 63 - x.saturating_add(1).leading_zeros() as usize;
    b.min(LOG_BUCKETS - 1)
}

/// Dense layer stack: the first layer maps to `d_k`, further layers are
/// `tanh` followed by `d_k x d_k` projections. Names: `{prefix}.w/.b`, then
/// `{prefix}.h{l}.w/.b`.
pub fn mlp(graph: &mut Graph, input: NodeId, prefix: &str, layers: usize) -> NodeId {
    let mut x = dense(graph, input, prefix, true);
    for l in 1..layers {
        let h = graph.tanh(x);
        x = dense(graph, h, &format!("{prefix}.h{l}"), true);
    }
    x
}

/// `wᵀx (+ b)` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn dense(graph: &mut Graph, input: NodeId, prefix: &str, bias: bool) -> NodeId {
    let w = graph.param(&format!("{prefix}.w"));
    let y = graph.project(input, w);
    if bias {
        let b = graph.param(&format!("{prefix}.b"));
        graph.add(y, b)
    } else {
        y
    }
}

/// Options that zero parts of the representing module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncoderMask {
    pub no_position: bool,
    pub no_code_vector: bool,
}

/// Enhanced exercise embedding `W₁ᵀ[e_p ⊕ pos_t] + b₁`.
pub fn enhance_exercise_node(
    graph: &mut Graph,
    hp: &HyperParams,
    exercise_index: usize,
    position: usize,
    mask: EncoderMask,
) -> Result<NodeId, ModelError> {
    let rows = hp.catalog();
    if exercise_index >= rows {
        return Err(ModelError::IndexOutOfRange {
            index: exercise_index,
            rows,
        });
    }
    // the padding row is a constant so it never receives gradient
    let e = if exercise_index == PAD_INDEX {
        graph.zeros(hp.d_p)
    } else {
        let table = graph.param(EXERCISE_TABLE);
        graph.gather_row(table, exercise_index)
    };
    let pos = if mask.no_position {
        graph.zeros(hp.d_pos)
    } else {
        graph.constant(positional_encoding(position, hp.d_pos)?)
    };
    let x = graph.concat(&[e, pos]);
    Ok(mlp(graph, x, EXERCISE_PROJ, hp.layers))
}

/// Enhanced code embedding `W₂ᵀ[e_c ⊕ es ⊕ et ⊕ em] + b₂`.
pub fn enhance_code_node(
    graph: &mut Graph,
    hp: &HyperParams,
    rec: &Interaction,
    source: &CodeFeatureSource,
    mask: EncoderMask,
) -> Result<NodeId, ModelError> {
    let ec = if mask.no_code_vector {
        graph.zeros(hp.d_c)
    } else {
        source.code_node(graph, rec)?
    };
    let st = graph.param(STATUS_TABLE);
    let es = graph.gather_row(st, rec.status.index());
    let tt = graph.param(TIME_TABLE);
    let et = graph.gather_row(tt, log_bucket(rec.exec_time_ms));
    let mt = graph.param(MEMORY_TABLE);
    let em = graph.gather_row(mt, log_bucket(rec.exec_memory_kb));
    let x = graph.concat(&[ec, es, et, em]);
    Ok(mlp(graph, x, CODE_PROJ, hp.layers))
}

pub fn enhance_exercise(
    params: &ParamSet,
    hp: &HyperParams,
    exercise_index: usize,
    position: usize,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    enhance_exercise_node(&mut g, hp, exercise_index, position, EncoderMask::default())?;
    Ok(g.forward(params)?)
}

pub fn enhance_code(
    params: &ParamSet,
    hp: &HyperParams,
    rec: &Interaction,
    source: &CodeFeatureSource,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    enhance_code_node(&mut g, hp, rec, source, EncoderMask::default())?;
    Ok(g.forward(params)?)
}

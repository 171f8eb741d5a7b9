//! One recurrence step: difference embeddings, the three latent updates
//! (programming ability, processing style, understanding style) and the
//! next-exercise scores.
//!
//! Each stage exists at two levels: a `*_node` builder that appends to a
//! [`Graph`] (used for training and batch evaluation) and a tensor-level
//! wrapper that evaluates the stage in isolation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codefeat::CodeFeatureSource;
use crate::dataio::{Interaction, PAD_INDEX};
use crate::encoder::{
    dense, enhance_code_node, enhance_exercise_node, mlp, EncoderMask, HyperParams, ModelError,
};
use crate::tensorkit::{Graph, NodeId, ParamSet, Tensor};

pub const EX_DIFF: &str = "ex_diff";
pub const CODE_DIFF: &str = "code_diff";
pub const ABILITY_DELTA: &str = "ability_delta";
pub const ABILITY: &str = "ability";
pub const PS_GATE: &str = "ps_gate";
pub const PS_FUSE: &str = "ps_fuse";
pub const US_GATE: &str = "us_gate";
pub const US_PROJ: &str = "us_proj";
pub const READOUT: &str = "readout";
pub const OUTPUT: &str = "output";

/// Model variants. All share one code path; each ablation only zeroes an
/// input or a latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "PERS")]
    Pers,
    /// No code branch at all: the enhanced code embedding is zero.
    #[serde(rename = "ERS")]
    Ers,
    /// No positional encoding.
    #[serde(rename = "PERS-ep")]
    PersEp,
    /// No code vector; execution side features are kept.
    #[serde(rename = "PERS-cr")]
    PersCr,
    #[serde(rename = "PERS-pa")]
    PersPa,
    #[serde(rename = "PERS-ps")]
    PersPs,
    #[serde(rename = "PERS-us")]
    PersUs,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Pers,
        Variant::Ers,
        Variant::PersEp,
        Variant::PersCr,
        Variant::PersPa,
        Variant::PersPs,
        Variant::PersUs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pers => "PERS",
            Variant::Ers => "ERS",
            Variant::PersEp => "PERS-ep",
            Variant::PersCr => "PERS-cr",
            Variant::PersPa => "PERS-pa",
            Variant::PersPs => "PERS-ps",
            Variant::PersUs => "PERS-us",
        }
    }

    pub fn encoder_mask(self) -> EncoderMask {
        EncoderMask {
            no_position: self == Variant::PersEp,
            no_code_vector: self == Variant::PersCr,
        }
    }

    /// Whether the variant reads any code-side input.
    pub fn uses_code(self) -> bool {
        self != Variant::Ers
    }

    /// Whether the code vector itself (not just side features) is read.
    pub fn uses_code_vector(self) -> bool {
        !matches!(self, Variant::Ers | Variant::PersCr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub variant: Variant,
    /// Squash the understanding-style accumulator through `tanh`. Off by
    /// default; the plain recurrence is unbounded.
    #[serde(default)]
    pub squash_us: bool,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Pers,
            squash_us: false,
        }
    }
}

/// Graph handles of the three latent vectors.
#[derive(Clone, Copy, Debug)]
pub struct LatentNodes {
    pub pa: NodeId,
    pub ps: NodeId,
    pub us: NodeId,
}

impl LatentNodes {
    pub fn zeros(graph: &mut Graph, d_k: usize) -> Self {
        let z = graph.zeros(d_k);
        Self { pa: z, ps: z, us: z }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub pa: Tensor,
    pub ps: Tensor,
    pub us: Tensor,
}

impl LatentState {
    pub fn zeros(d_k: usize) -> Self {
        Self {
            pa: Tensor::zeros(&[d_k]),
            ps: Tensor::zeros(&[d_k]),
            us: Tensor::zeros(&[d_k]),
        }
    }
}

/// `(cur - prev)` and `W ᵀ[(cur - prev) ⊕ cur ⊕ prev] + b`.
fn diff_node(graph: &mut Graph, cur: NodeId, prev: NodeId, prefix: &str) -> (NodeId, NodeId) {
    let raw = graph.sub(cur, prev);
    let x = graph.concat(&[raw, cur, prev]);
    (raw, dense(graph, x, prefix, true))
}

/// Exercise difference. Returns `(Δe_p, Δ'e_p)`.
pub fn diff_exercise_node(graph: &mut Graph, cur: NodeId, prev: NodeId) -> (NodeId, NodeId) {
    diff_node(graph, cur, prev, EX_DIFF)
}

/// Code difference. Returns `(Δe_c, Δ'e_c)`.
pub fn diff_code_node(graph: &mut Graph, cur: NodeId, prev: NodeId) -> (NodeId, NodeId) {
    diff_node(graph, cur, prev, CODE_DIFF)
}

/// Programming ability: `ΔPA = W₅ᵀ[e'_p ⊕ e'_c] + b₅`, then
/// `PA_t = W₆ᵀ[ΔPA ⊕ PA_{t-1}] + b₆`.
pub fn update_pa_node(graph: &mut Graph, pa_prev: NodeId, ep: NodeId, ec: NodeId) -> NodeId {
    let x = graph.concat(&[ep, ec]);
    let delta = dense(graph, x, ABILITY_DELTA, true);
    let y = graph.concat(&[delta, pa_prev]);
    dense(graph, y, ABILITY, true)
}

/// Processing style with its gate. Returns `(PS_t, g_ps)`.
pub fn update_ps_node(
    graph: &mut Graph,
    ps_prev: NodeId,
    ex_diff: NodeId,
    code_diff: NodeId,
) -> (NodeId, NodeId) {
    let pre = dense(graph, ex_diff, PS_GATE, true);
    let gate = graph.tanh(pre);
    let gated = graph.hadamard(gate, code_diff);
    let x = graph.concat(&[ps_prev, gated]);
    (dense(graph, x, PS_FUSE, true), gate)
}

/// Understanding style: `US_t = US_{t-1} + W₁₀ᵀ(g_us ⊙ e'_p)`, no bias.
/// Returns `(US_t, g_us)`.
pub fn update_us_node(
    graph: &mut Graph,
    us_prev: NodeId,
    ex_diff: NodeId,
    ep: NodeId,
    squash: bool,
) -> (NodeId, NodeId) {
    let pre = dense(graph, ex_diff, US_GATE, true);
    let gate = graph.tanh(pre);
    let gated = graph.hadamard(gate, ep);
    let inc = dense(graph, gated, US_PROJ, false);
    let us = graph.add(us_prev, inc);
    let us = if squash { graph.tanh(us) } else { us };
    (us, gate)
}

/// Scores over the full table (`N + 2` entries, including the two reserved
/// rows, which callers mask). Ablated latents enter as zeros.
pub fn predict_node(
    graph: &mut Graph,
    state: LatentNodes,
    hp: &HyperParams,
    variant: Variant,
) -> NodeId {
    let mut pick = |node: NodeId, dropped: bool| {
        if dropped {
            graph.zeros(hp.d_k)
        } else {
            node
        }
    };
    let pa = pick(state.pa, variant == Variant::PersPa);
    let ps = pick(state.ps, variant == Variant::PersPs);
    let us = pick(state.us, variant == Variant::PersUs);
    let x = graph.concat(&[pa, ps, us]);
    let pre = mlp(graph, x, READOUT, hp.layers);
    dense(graph, pre, OUTPUT, true)
}

/// Carried between steps: latents plus the previous enhanced embeddings.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub latent: LatentNodes,
    pub prev_ex: NodeId,
    pub prev_code: NodeId,
}

impl CellState {
    /// All-zero start state; previous embeddings are zero at `t = 0`.
    pub fn initial(graph: &mut Graph, d_k: usize) -> Self {
        let latent = LatentNodes::zeros(graph, d_k);
        Self {
            latent,
            prev_ex: latent.pa,
            prev_code: latent.pa,
        }
    }
}

/// Graph handles of a step's intermediates.
#[derive(Clone, Copy, Debug)]
pub struct TraceNodes {
    pub raw_ex_diff: NodeId,
    pub ex_diff: NodeId,
    pub code_diff: NodeId,
    pub g_ps: NodeId,
    pub g_us: NodeId,
    pub logits: NodeId,
}

/// Intermediates of one non-padding step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    /// `e'_p(t) - e'_p(t-1)` before projection.
    pub raw_ex_diff: Tensor,
    pub ex_diff: Tensor,
    pub code_diff: Tensor,
    pub g_ps: Tensor,
    pub g_us: Tensor,
    pub logits: Tensor,
}

impl TraceNodes {
    pub fn read(&self, graph: &Graph) -> StepTrace {
        let v = |id| graph.value(id).expect("graph evaluated").clone();
        StepTrace {
            raw_ex_diff: v(self.raw_ex_diff),
            ex_diff: v(self.ex_diff),
            code_diff: v(self.code_diff),
            g_ps: v(self.g_ps),
            g_us: v(self.g_us),
            logits: v(self.logits),
        }
    }
}

/// Input of one step. `exercise == PAD_INDEX` marks a padding step.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub exercise: usize,
    pub position: usize,
    pub rec: &'a Interaction,
}

/// Optional dropout masks (already scaled) for the enhanced embeddings.
#[derive(Clone, Debug, Default)]
pub struct StepDropout {
    pub ex: Option<Tensor>,
    pub code: Option<Tensor>,
}

/// Append one full recurrence step. Padding steps return `None`: the state
/// is left as is and no trace is produced.
pub fn step_node(
    graph: &mut Graph,
    hp: &HyperParams,
    cfg: &CellConfig,
    source: &CodeFeatureSource,
    state: CellState,
    input: StepInput<'_>,
    dropout: StepDropout,
) -> Result<Option<(CellState, TraceNodes)>, ModelError> {
    if input.exercise == PAD_INDEX {
        return Ok(None);
    }
    let mask = cfg.variant.encoder_mask();
    let mut ep = enhance_exercise_node(graph, hp, input.exercise, input.position, mask)?;
    let mut ec = if cfg.variant.uses_code() {
        enhance_code_node(graph, hp, input.rec, source, mask)?
    } else {
        graph.zeros(hp.d_k)
    };
    if let Some(m) = dropout.ex {
        let m = graph.constant(m);
        ep = graph.hadamard(ep, m);
    }
    if let (Some(m), true) = (dropout.code, cfg.variant.uses_code()) {
        let m = graph.constant(m);
        ec = graph.hadamard(ec, m);
    }

    let (raw_ex_diff, ex_diff) = diff_exercise_node(graph, ep, state.prev_ex);
    let (_, code_diff) = diff_code_node(graph, ec, state.prev_code);
    let pa = update_pa_node(graph, state.latent.pa, ep, ec);
    let (ps, g_ps) = update_ps_node(graph, state.latent.ps, ex_diff, code_diff);
    let (us, g_us) = update_us_node(graph, state.latent.us, ex_diff, ep, cfg.squash_us);
    let latent = LatentNodes { pa, ps, us };
    let logits = predict_node(graph, latent, hp, cfg.variant);
    Ok(Some((
        CellState {
            latent,
            prev_ex: ep,
            prev_code: ec,
        },
        TraceNodes {
            raw_ex_diff,
            ex_diff,
            code_diff,
            g_ps,
            g_us,
            logits,
        },
    )))
}

fn eval_with(
    params: &ParamSet,
    inputs: &[&Tensor],
    build: impl FnOnce(&mut Graph, &[NodeId]) -> Vec<NodeId>,
) -> Result<Vec<Tensor>, ModelError> {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let outs = build(&mut g, &ids);
    g.forward(params)?;
    Ok(outs.into_iter().map(|id| g.value(id).expect("evaluated").clone()).collect())
}

pub fn diff_exercise(params: &ParamSet, cur: &Tensor, prev: &Tensor) -> Result<Tensor, ModelError> {
    let out = eval_with(params, &[cur, prev], |g, x| vec![diff_exercise_node(g, x[0], x[1]).1])?;
    Ok(out.into_iter().next().expect("one output"))
}

pub fn diff_code(params: &ParamSet, cur: &Tensor, prev: &Tensor) -> Result<Tensor, ModelError> {
    let out = eval_with(params, &[cur, prev], |g, x| vec![diff_code_node(g, x[0], x[1]).1])?;
    Ok(out.into_iter().next().expect("one output"))
}

pub fn update_pa(
    params: &ParamSet,
    state: &LatentState,
    ep: &Tensor,
    ec: &Tensor,
) -> Result<Tensor, ModelError> {
    let out = eval_with(params, &[&state.pa, ep, ec], |g, x| {
        vec![update_pa_node(g, x[0], x[1], x[2])]
    })?;
    Ok(out.into_iter().next().expect("one output"))
}

/// Returns `(PS_t, g_ps)`.
pub fn update_ps(
    params: &ParamSet,
    state: &LatentState,
    ex_diff: &Tensor,
    code_diff: &Tensor,
) -> Result<(Tensor, Tensor), ModelError> {
    let mut out = eval_with(params, &[&state.ps, ex_diff, code_diff], |g, x| {
        let (ps, gate) = update_ps_node(g, x[0], x[1], x[2]);
        vec![ps, gate]
    })?;
    let gate = out.pop().expect("two outputs");
    Ok((out.pop().expect("two outputs"), gate))
}

/// Returns `(US_t, g_us)`.
pub fn update_us(
    params: &ParamSet,
    state: &LatentState,
    ex_diff: &Tensor,
    ep: &Tensor,
) -> Result<(Tensor, Tensor), ModelError> {
    let mut out = eval_with(params, &[&state.us, ex_diff, ep], |g, x| {
        let (us, gate) = update_us_node(g, x[0], x[1], x[2], false);
        vec![us, gate]
    })?;
    let gate = out.pop().expect("two outputs");
    Ok((out.pop().expect("two outputs"), gate))
}

pub fn predict(
    params: &ParamSet,
    state: &LatentState,
    hp: &HyperParams,
    variant: Variant,
) -> Result<Tensor, ModelError> {
    let out = eval_with(params, &[&state.pa, &state.ps, &state.us], |g, x| {
        let latent = LatentNodes {
            pa: x[0],
            ps: x[1],
            us: x[2],
        };
        vec![predict_node(g, latent, hp, variant)]
    })?;
    Ok(out.into_iter().next().expect("one output"))
}

/// Softmax over real exercises; the two reserved entries get probability 0.
pub fn masked_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits[2..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| if j < 2 { 0.0 } else { (z - max).exp() })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

//! Full model: parameter layout, initialisation and per-window graphs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codefeat::{CodeFeatureSource, CodeSourceKind, CODE_TABLE};
use crate::dataio::{Interaction, Vocabulary};
use crate::encoder::{
    HyperParams, ModelError, CODE_PROJ, EXERCISE_PROJ, EXERCISE_TABLE, LOG_BUCKETS, MEMORY_TABLE,
    STATUS_ROWS, STATUS_TABLE, TIME_TABLE,
};
use crate::perscell::{
    step_node, CellConfig, CellState, LatentNodes, LatentState, StepDropout, StepInput, StepTrace,
    TraceNodes, ABILITY, ABILITY_DELTA, CODE_DIFF, EX_DIFF, OUTPUT, PS_FUSE, PS_GATE, READOUT,
    US_GATE, US_PROJ,
};
use crate::rng::seeded;
use crate::tensorkit::{Graph, ParamSet, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersModel {
    pub hp: HyperParams,
    pub cell: CellConfig,
    pub code: CodeSourceKind,
}

/// Graph of one window, with handles to every step.
pub struct SequenceGraph {
    pub graph: Graph,
    /// `None` for padding steps.
    pub steps: Vec<Option<TraceNodes>>,
    pub final_state: LatentNodes,
}

/// Evaluated window.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub traces: Vec<Option<StepTrace>>,
    pub final_state: LatentState,
}

impl PersModel {
    pub fn new(hp: HyperParams, cell: CellConfig, code: CodeSourceKind) -> Result<Self, ModelError> {
        hp.validate()?;
        if code.dim() != hp.d_c {
            return Err(ModelError::InvalidHyperParams(format!(
                "code source dim {} != d_c {}",
                code.dim(),
                hp.d_c
            )));
        }
        if let CodeSourceKind::HashedTokens { buckets: 0, .. } = code {
            return Err(ModelError::InvalidHyperParams("zero hash buckets".into()));
        }
        Ok(Self { hp, cell, code })
    }

    /// Every parameter tensor with its dims, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let hp = &self.hp;
        let (dk, m) = (hp.d_k, hp.catalog());
        let mut out: Vec<(String, Vec<usize>)> = vec![
            (EXERCISE_TABLE.into(), vec![m, hp.d_p]),
            (STATUS_TABLE.into(), vec![STATUS_ROWS, hp.d_cs]),
            (TIME_TABLE.into(), vec![LOG_BUCKETS, hp.d_ct]),
            (MEMORY_TABLE.into(), vec![LOG_BUCKETS, hp.d_cm]),
        ];
        if let CodeSourceKind::HashedTokens { buckets, dim } = self.code {
            out.push((CODE_TABLE.into(), vec![buckets, dim]));
        }
        let mut linear = |name: &str, fan_in: usize, fan_out: usize, bias: bool| {
            out.push((format!("{name}.w"), vec![fan_in, fan_out]));
            if bias {
                out.push((format!("{name}.b"), vec![fan_out]));
            }
        };
        let code_in = hp.d_c + hp.d_cs + hp.d_ct + hp.d_cm;
        for (name, fan_in) in [
            (EXERCISE_PROJ, hp.d_p + hp.d_pos),
            (CODE_PROJ, code_in),
            (READOUT, 3 * dk),
        ] {
            linear(name, fan_in, dk, true);
            for l in 1..hp.layers {
                linear(&format!("{name}.h{l}"), dk, dk, true);
            }
        }
        linear(EX_DIFF, 3 * dk, dk, true);
        linear(CODE_DIFF, 3 * dk, dk, true);
        linear(ABILITY_DELTA, 2 * dk, dk, true);
        linear(ABILITY, 2 * dk, dk, true);
        linear(PS_GATE, dk, dk, true);
        linear(PS_FUSE, 2 * dk, dk, true);
        linear(US_GATE, dk, dk, true);
        linear(US_PROJ, dk, dk, false);
        linear(OUTPUT, dk, m, true);
        out.sort();
        out
    }

    /// Weights `U(-1/√fan_in, 1/√fan_in)`, embedding tables
    /// `U(-1/√width, 1/√width)`, biases zero, and the padding and unknown
    /// rows of the exercise table zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng: ChaCha8Rng = seeded(seed, &[0x1417]);
        self.param_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let mut t = Tensor::zeros(&dims);
                if !name.ends_with(".b") {
                    let fan = if name.ends_with(".w") { dims[0] } else { dims[1] };
                    let bound = 1.0 / (fan as f64).sqrt();
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.gen_range(-bound..bound));
                }
                if name == EXERCISE_TABLE {
                    t.data_mut()[..2 * dims[1]].fill(0.0);
                }
                (name, t)
            })
            .collect()
    }

    /// Reject parameter sets whose names or dims disagree with the layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), ModelError> {
        let shapes = self.param_shapes();
        for (name, dims) in &shapes {
            let t = params.require(name)?;
            if t.dims() != dims.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    context: format!("parameter `{name}`"),
                    left: dims.clone(),
                    right: t.dims().to_vec(),
                }
                .into());
            }
        }
        if params.len() != shapes.len() {
            let extra = params
                .names()
                .find(|n| !shapes.iter().any(|(s, _)| s == n))
                .unwrap_or_default();
            return Err(ModelError::InvalidHyperParams(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(())
    }

    pub fn check_source(&self, source: &CodeFeatureSource) -> Result<(), ModelError> {
        if source.kind() != self.code {
            return Err(ModelError::InvalidHyperParams(format!(
                "code source {:?} does not match model {:?}",
                source.kind(),
                self.code
            )));
        }
        Ok(())
    }

    /// Parameters that receive no gradient under the configured variant.
    pub fn inactive_params(&self) -> Vec<String> {
        use crate::perscell::Variant::*;
        let variant = self.cell.variant;
        let shapes = self.param_shapes();
        let prefixed = |p: &str| {
            shapes
                .iter()
                .filter(|(n, _)| n.starts_with(&format!("{p}.")))
                .map(|(n, _)| n.clone())
                .collect::<Vec<_>>()
        };
        let mut out = Vec::new();
        match variant {
            Ers => {
                out.extend([STATUS_TABLE, TIME_TABLE, MEMORY_TABLE].map(String::from));
                out.extend(prefixed(CODE_PROJ));
                out.push(format!("{CODE_DIFF}.w"));
            }
            PersPa => {
                out.extend(prefixed(ABILITY_DELTA));
                out.extend(prefixed(ABILITY));
            }
            PersPs => {
                out.extend(prefixed(PS_GATE));
                out.extend(prefixed(PS_FUSE));
                out.extend(prefixed(CODE_DIFF));
            }
            PersUs => {
                out.extend(prefixed(US_GATE));
                out.extend(prefixed(US_PROJ));
            }
            Pers | PersEp | PersCr => {}
        }
        if !variant.uses_code_vector() && shapes.iter().any(|(n, _)| n == CODE_TABLE) {
            out.push(CODE_TABLE.into());
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn exercise_indices(events: &[Interaction], vocab: &Vocabulary) -> Vec<usize> {
        events.iter().map(|e| vocab.encode(&e.exercise_id)).collect()
    }

    /// Position of each step: the 0-based index of its run of consecutive
    /// attempts on one exercise within the window. Repeated attempts share a
    /// position, so their enhanced exercise embeddings coincide.
    pub fn positions(indices: &[usize]) -> Vec<usize> {
        let mut pos = Vec::with_capacity(indices.len());
        let mut run = 0;
        for (t, idx) in indices.iter().enumerate() {
            if t > 0 && indices[t - 1] != *idx {
                run += 1;
            }
            pos.push(run);
        }
        pos
    }

    /// Build the graph of one window. With `dropout = Some((rate, rng))`
    /// inverted dropout masks are drawn for the enhanced embeddings; the
    /// exercise mask is redrawn only when the exercise changes.
    pub fn build(
        &self,
        events: &[Interaction],
        indices: &[usize],
        source: &CodeFeatureSource,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<SequenceGraph, ModelError> {
        assert_eq!(events.len(), indices.len(), "one index per event");
        let mut graph = Graph::new();
        let mut state = CellState::initial(&mut graph, self.hp.d_k);
        let positions = Self::positions(indices);
        let mut steps = Vec::with_capacity(events.len());
        let mut ex_mask: Option<Tensor> = None;
        for t in 0..events.len() {
            let mut drop = StepDropout::default();
            if let Some((rate, rng)) = dropout.as_mut() {
                if rate.is_finite() && *rate > 0.0 {
                    if t == 0 || indices[t] != indices[t - 1] || ex_mask.is_none() {
                        ex_mask = Some(dropout_mask(*rng, self.hp.d_k, *rate));
                    }
                    drop.ex = ex_mask.clone();
                    drop.code = Some(dropout_mask(*rng, self.hp.d_k, *rate));
                }
            }
            let input = StepInput {
                exercise: indices[t],
                position: positions[t],
                rec: &events[t],
            };
            match step_node(&mut graph, &self.hp, &self.cell, source, state, input, drop)? {
                Some((next, trace)) => {
                    state = next;
                    steps.push(Some(trace));
                }
                None => steps.push(None),
            }
        }
        Ok(SequenceGraph {
            graph,
            steps,
            final_state: state.latent,
        })
    }

    /// Evaluate one window without dropout.
    pub fn run(
        &self,
        params: &ParamSet,
        events: &[Interaction],
        indices: &[usize],
        source: &CodeFeatureSource,
    ) -> Result<SequenceRun, ModelError> {
        let mut sg = self.build(events, indices, source, None)?;
        sg.graph.forward(params)?;
        let g = &sg.graph;
        let v = |id| g.value(id).expect("evaluated").clone();
        Ok(SequenceRun {
            traces: sg.steps.iter().map(|s| s.map(|t| t.read(g))).collect(),
            final_state: LatentState {
                pa: v(sg.final_state.pa),
                ps: v(sg.final_state.ps),
                us: v(sg.final_state.us),
            },
        })
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Tensor {
    let keep = 1.0 - rate;
    Tensor::vector(
        (0..len)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codefeat::VectorTable;
    use crate::dataio::Status;
    use crate::perscell::{
        diff_code, diff_exercise, predict, update_pa, update_ps, update_us, Variant,
    };
    use crate::encoder::{enhance_code, enhance_exercise};

    fn hp() -> HyperParams {
        HyperParams {
            d_p: 4,
            d_pos: 4,
            d_c: 3,
            d_ct: 2,
            d_cm: 2,
            d_cs: 2,
            d_k: 5,
            max_len: 10,
            n_exercises: 6,
            layers: 1,
        }
    }

    fn setup(variant: Variant) -> (PersModel, CodeFeatureSource, Vec<Interaction>, Vocabulary) {
        let mut table = VectorTable::new(3);
        let ids = ["p1", "p1", "p3", "p2", "p2"];
        let mut events = Vec::new();
        for (t, id) in ids.iter().enumerate() {
            let key = format!("c{t}");
            table
                .insert(key.clone(), vec![0.1 * t as f64, -0.2, 0.3 + t as f64 * 0.05])
                .unwrap();
            events.push(Interaction {
                learner_id: "u".into(),
                exercise_id: id.to_string(),
                timestamp: t as i64,
                status: if t % 2 == 0 { Status::WrongAnswer } else { Status::Accepted },
                exec_time_ms: 10 * t as u64,
                exec_memory_kb: 100 + t as u64,
                code: None,
                code_vec_ref: Some(key),
            });
        }
        let vocab = Vocabulary::new(["p1", "p2", "p3", "p4", "p5", "p6"]);
        let cell = CellConfig {
            variant,
            squash_us: false,
        };
        let model = PersModel::new(hp(), cell, CodeSourceKind::Precomputed { dim: 3 }).unwrap();
        (model, CodeFeatureSource::Precomputed(table), events, vocab)
    }

    #[test]
    fn positions_follow_exercise_runs() {
        assert_eq!(PersModel::positions(&[2, 2, 4, 3, 3, 2]), vec![0, 0, 1, 2, 2, 3]);
    }

    #[test]
    fn init_layout_and_padding_rows() {
        let (model, ..) = setup(Variant::Pers);
        let p = model.init_params(3);
        model.check_params(&p).unwrap();
        let ep = p.get(EXERCISE_TABLE).unwrap();
        assert!(ep.row(0).iter().chain(ep.row(1)).all(|&v| v == 0.0));
        assert!(ep.row(2).iter().any(|&v| v != 0.0));
        assert!(p.iter().filter(|(n, _)| n.ends_with(".b")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        assert!(!p.contains("us_proj.b"));
        assert_eq!(p, model.init_params(3));
    }

    #[test]
    fn shape_check_rejects_wrong_dims() {
        let (model, ..) = setup(Variant::Pers);
        let mut p = model.init_params(1);
        p.insert("output.b", Tensor::zeros(&[3]));
        assert!(model.check_params(&p).is_err());
    }

    #[test]
    fn all_padding_keeps_zero_state() {
        let (model, source, events, _) = setup(Variant::Pers);
        let p = model.init_params(1);
        let run = model.run(&p, &events, &[0; 5], &source).unwrap();
        assert!(run.traces.iter().all(Option::is_none));
        assert_eq!(run.final_state, LatentState::zeros(5));
    }

    /// Hand-unrolled composition of the tensor-level stages.
    fn unrolled(
        model: &PersModel,
        p: &ParamSet,
        source: &CodeFeatureSource,
        events: &[Interaction],
        indices: &[usize],
    ) -> (LatentState, Vec<Tensor>) {
        let hp = &model.hp;
        let mut state = LatentState::zeros(hp.d_k);
        let (mut prev_ep, mut prev_ec) = (Tensor::zeros(&[hp.d_k]), Tensor::zeros(&[hp.d_k]));
        let positions = PersModel::positions(indices);
        let mut logits = Vec::new();
        for t in 0..events.len() {
            let ep = enhance_exercise(p, hp, indices[t], positions[t]).unwrap();
            let ec = enhance_code(p, hp, &events[t], source).unwrap();
            let dep = diff_exercise(p, &ep, &prev_ep).unwrap();
            let dec = diff_code(p, &ec, &prev_ec).unwrap();
            let pa = update_pa(p, &state, &ep, &ec).unwrap();
            let (ps, _) = update_ps(p, &state, &dep, &dec).unwrap();
            let (us, _) = update_us(p, &state, &dep, &ep).unwrap();
            state = LatentState { pa, ps, us };
            logits.push(predict(p, &state, hp, Variant::Pers).unwrap());
            prev_ep = ep;
            prev_ec = ec;
        }
        (state, logits)
    }

    #[test]
    fn one_and_three_steps_match_unrolled_composition() {
        let (model, source, events, vocab) = setup(Variant::Pers);
        let p = model.init_params(7);
        for len in [1, 3] {
            let ev = &events[..len];
            let idx = PersModel::exercise_indices(ev, &vocab);
            let run = model.run(&p, ev, &idx, &source).unwrap();
            let (state, logits) = unrolled(&model, &p, &source, ev, &idx);
            assert_eq!(run.final_state, state);
            for (tr, want) in run.traces.iter().zip(&logits) {
                assert_eq!(&tr.as_ref().unwrap().logits, want);
            }
        }
    }

    #[test]
    fn repeat_attempt_has_exactly_zero_exercise_difference() {
        let (model, source, events, vocab) = setup(Variant::Pers);
        let p = model.init_params(9);
        let idx = PersModel::exercise_indices(&events, &vocab);
        let run = model.run(&p, &events, &idx, &source).unwrap();
        for t in 1..events.len() {
            let raw = &run.traces[t].as_ref().unwrap().raw_ex_diff;
            let zero = raw.data().iter().all(|&v| v == 0.0);
            assert_eq!(zero, idx[t] == idx[t - 1], "step {t}");
        }
    }

    #[test]
    fn ers_needs_no_code_features() {
        let (model, _, mut events, vocab) = setup(Variant::Ers);
        for e in &mut events {
            e.code_vec_ref = None;
        }
        let p = model.init_params(2);
        let idx = PersModel::exercise_indices(&events, &vocab);
        let empty = CodeFeatureSource::Precomputed(VectorTable::new(3));
        model.run(&p, &events, &idx, &empty).unwrap();

        let (pers, ..) = setup(Variant::Pers);
        assert!(pers.run(&p, &events, &idx, &empty).is_err());
    }

    #[test]
    fn dropout_is_seeded() {
        use crate::rng::seeded;
        let (model, source, events, vocab) = setup(Variant::Pers);
        let p = model.init_params(2);
        let idx = PersModel::exercise_indices(&events, &vocab);
        let eval = |seed| {
            let mut rng = seeded(seed, &[]);
            let mut sg = model.build(&events, &idx, &source, Some((0.5, &mut rng))).unwrap();
            sg.graph.forward(&p).unwrap();
            sg.graph.value(sg.final_state.ps).unwrap().clone()
        };
        assert_eq!(eval(1), eval(1));
        assert_ne!(eval(1), eval(2));
    }
}

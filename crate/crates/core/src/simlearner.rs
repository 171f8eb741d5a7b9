//! Synthetic learners with known processing and understanding styles.
//!
//! Each attempt passes with probability
//! `σ(a − δ_j + β·attempt + γ_active)`. After a pass the ability grows by
//! `η` and the learner moves on; after a failure reflective learners retry
//! far more often than active ones. Sequential learners take the
//! lowest-index open exercise, global learners jump to a random one.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codefeat::VectorTable;
use crate::dataio::{Interaction, Status};
use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("code vector dim {0} too small (need >= 8)")]
    CodeDim(usize),
    #[error("bad labels file line {line}: {message}")]
    BadLabels { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Processing {
    Active,
    Reflective,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Understanding {
    Sequential,
    Global,
}

impl fmt::Display for Processing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Processing::Active => "active",
            Processing::Reflective => "reflective",
        })
    }
}

impl fmt::Display for Understanding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Understanding::Sequential => "sequential",
            Understanding::Global => "global",
        })
    }
}

impl FromStr for Processing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "active" => Ok(Processing::Active),
            "reflective" => Ok(Processing::Reflective),
            _ => Err(format!("unknown processing style `{s}`")),
        }
    }
}

impl FromStr for Understanding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequential" => Ok(Understanding::Sequential),
            "global" => Ok(Understanding::Global),
            _ => Err(format!("unknown understanding style `{s}`")),
        }
    }
}

/// The four style cells in mix order.
pub const CELLS: [(Processing, Understanding); 4] = [
    (Processing::Active, Understanding::Sequential),
    (Processing::Active, Understanding::Global),
    (Processing::Reflective, Understanding::Sequential),
    (Processing::Reflective, Understanding::Global),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerProfile {
    pub processing: Processing,
    pub understanding: Understanding,
    /// Initial ability in [-2, 2].
    pub ability: f64,
    /// Ability gain per pass.
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub beta: f64,
    pub gamma_active: f64,
    pub retry_reflective: f64,
    pub retry_active: f64,
    /// Range of per-learner η.
    pub eta_min: f64,
    pub eta_max: f64,
    /// Length of synthetic code vectors.
    pub d_c: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            beta: 0.4,
            gamma_active: 0.8,
            retry_reflective: 0.9,
            retry_active: 0.4,
            eta_min: 0.002,
            eta_max: 0.01,
            d_c: 16,
        }
    }
}

/// Exercise difficulties; index order is the curriculum.
#[derive(Clone, Debug, PartialEq)]
pub struct ExerciseCatalog {
    pub difficulties: Vec<f64>,
}

impl ExerciseCatalog {
    pub fn generate(m: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, &[CATALOG]);
        Self {
            difficulties: (0..m).map(|_| rng.gen_range(-2.0..=2.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.difficulties.len()
    }

    pub fn is_empty(&self) -> bool {
        self.difficulties.is_empty()
    }

    pub fn exercise_id(j: usize) -> String {
        format!("p{j:04}")
    }
}

const CATALOG: u64 = 0xCA7A;
const LEARNER: u64 = 0x1EA2;
const BASE_TIME: i64 = 1_600_000_000;

pub struct SimTrace {
    pub interactions: Vec<Interaction>,
    /// `code_vec_ref -> vector`, in step order.
    pub vectors: Vec<(String, Vec<f64>)>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pick_next(
    profile: &LearnerProfile,
    done: &mut BTreeSet<usize>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    if done.len() >= m {
        done.clear();
    }
    match profile.understanding {
        Understanding::Sequential => (0..m).find(|j| !done.contains(j)).expect("open exercise"),
        Understanding::Global => {
            let open: Vec<usize> = (0..m).filter(|j| !done.contains(j)).collect();
            open[rng.gen_range(0..open.len())]
        }
    }
}

pub fn simulate_learner(
    learner_id: &str,
    profile: &LearnerProfile,
    catalog: &ExerciseCatalog,
    steps: usize,
    sim: &SimParams,
    rng: &mut ChaCha8Rng,
) -> Result<SimTrace, SimError> {
    if catalog.is_empty() {
        return Err(SimError::EmptyCatalog);
    }
    if steps == 0 {
        return Err(SimError::NoSteps);
    }
    if sim.d_c < 8 {
        return Err(SimError::CodeDim(sim.d_c));
    }
    let m = catalog.len();
    let noise = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let time_dist = LogNormal::<f64>::new(5.0, 0.5).expect("lognormal");
    let mem_dist = LogNormal::<f64>::new(9.0, 0.3).expect("lognormal");
    let (gamma, retry) = match profile.processing {
        Processing::Active => (sim.gamma_active, sim.retry_active),
        Processing::Reflective => (0.0, sim.retry_reflective),
    };

    let mut a = profile.ability;
    let mut done = BTreeSet::new();
    let mut j = pick_next(profile, &mut done, m, rng);
    let mut attempt = 0usize;
    let mut out = SimTrace {
        interactions: Vec::with_capacity(steps),
        vectors: Vec::with_capacity(steps),
    };
    let half = sim.d_c / 2;
    for t in 0..steps {
        let delta = catalog.difficulties[j];
        let p = sigmoid(a - delta + sim.beta * attempt as f64 + gamma);
        let pass = rng.gen::<f64>() < p;

        let mut v: Vec<f64> = (0..half).map(|_| noise.sample(rng)).collect();
        v.extend_from_slice(&[attempt as f64 / 5.0, a, delta, if pass { 1.0 } else { 0.0 }]);
        v.resize(sim.d_c, 0.0);
        let vref = format!("{learner_id}/{t}");
        out.interactions.push(Interaction {
            learner_id: learner_id.to_string(),
            exercise_id: ExerciseCatalog::exercise_id(j),
            timestamp: BASE_TIME + 60 * t as i64,
            status: if pass { Status::Accepted } else { Status::WrongAnswer },
            exec_time_ms: time_dist.sample(rng).round() as u64,
            exec_memory_kb: mem_dist.sample(rng).round() as u64,
            code: None,
            code_vec_ref: Some(vref.clone()),
        });
        out.vectors.push((vref, v));

        if pass {
            a += profile.eta;
        }
        if pass || rng.gen::<f64>() >= retry {
            done.insert(j);
            j = pick_next(profile, &mut done, m, rng);
            attempt = 0;
        } else {
            attempt += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub learner_id: String,
    pub processing: Processing,
    pub understanding: Understanding,
}

pub struct Population {
    pub interactions: Vec<Interaction>,
    pub labels: Vec<Label>,
    pub vectors: VectorTable,
}

/// Proportions over [`CELLS`].
pub fn validate_mix(mix: &[f64; 4]) -> Result<(), SimError> {
    if mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(SimError::InvalidMix("proportions must be finite and >= 0".into()));
    }
    let s: f64 = mix.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(SimError::InvalidMix(format!("proportions sum to {s}, not 1")));
    }
    Ok(())
}

pub fn draw_profile(mix: &[f64; 4], sim: &SimParams, rng: &mut ChaCha8Rng) -> LearnerProfile {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut cell = CELLS[3];
    for (c, p) in CELLS.iter().zip(mix) {
        acc += p;
        if u < acc {
            cell = *c;
            break;
        }
    }
    LearnerProfile {
        processing: cell.0,
        understanding: cell.1,
        ability: rng.gen_range(-2.0..=2.0),
        eta: rng.gen_range(sim.eta_min..=sim.eta_max),
    }
}

pub fn learner_id(i: usize) -> String {
    format!("L{i:05}")
}

/// `n` learners, each on its own RNG stream keyed by `(seed, i)`, so the
/// output does not depend on the thread count.
pub fn simulate_population(
    n: usize,
    mix: &[f64; 4],
    catalog: &ExerciseCatalog,
    steps: usize,
    seed: u64,
    sim: &SimParams,
) -> Result<Population, SimError> {
    validate_mix(mix)?;
    let per: Vec<(Label, SimTrace)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded(seed, &[LEARNER, i as u64]);
            let profile = draw_profile(mix, sim, &mut rng);
            let id = learner_id(i);
            let trace = simulate_learner(&id, &profile, catalog, steps, sim, &mut rng)?;
            Ok((
                Label {
                    learner_id: id,
                    processing: profile.processing,
                    understanding: profile.understanding,
                },
                trace,
            ))
        })
        .collect::<Result<_, SimError>>()?;
    let mut pop = Population {
        interactions: Vec::with_capacity(n * steps),
        labels: Vec::with_capacity(n),
        vectors: VectorTable::new(sim.d_c),
    };
    for (label, trace) in per {
        pop.labels.push(label);
        pop.interactions.extend(trace.interactions);
        for (k, v) in trace.vectors {
            pop.vectors.insert(k, v).expect("dim checked");
        }
    }
    Ok(pop)
}

pub const LABELS_HEADER: &str = "learner_id\tprocessing\tunderstanding";

pub fn write_labels<W: Write>(mut w: W, labels: &[Label]) -> io::Result<()> {
    writeln!(w, "{LABELS_HEADER}")?;
    for l in labels {
        writeln!(w, "{}\t{}\t{}", l.learner_id, l.processing, l.understanding)?;
    }
    w.flush()
}

pub fn read_labels(r: impl BufRead) -> Result<Vec<Label>, SimError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 && line == LABELS_HEADER || line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| SimError::BadLabels {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", f.len())));
        }
        out.push(Label {
            learner_id: f[0].to_string(),
            processing: f[1].parse().map_err(bad)?,
            understanding: f[2].parse().map_err(bad)?,
        });
    }
    Ok(out)
}

/// Small deterministic logs: learner `l` starts at exercise `l mod m`,
/// fails exercise `j` `(j + l) mod 3` times before passing it, then moves
/// `1 + l mod 3` exercises ahead. Code text names the learner's stride.
pub fn toy_logs(learners: usize, exercises: usize, per_learner: usize) -> Vec<Interaction> {
    let mut out = Vec::with_capacity(learners * per_learner);
    for l in 0..learners {
        let stride = 1 + l % 3;
        let mut j = l % exercises;
        let mut fails = 0;
        for t in 0..per_learner {
            let pass = fails >= (j + l) % 3;
            out.push(Interaction {
                learner_id: learner_id(l),
                exercise_id: ExerciseCatalog::exercise_id(j),
                timestamp: BASE_TIME + 60 * t as i64,
                status: if pass { Status::Accepted } else { Status::WrongAnswer },
                exec_time_ms: 100 + 10 * fails as u64,
                exec_memory_kb: 2048,
                code: Some(format!("solve step{stride} try{fails}")),
                code_vec_ref: None,
            });
            if pass {
                j = (j + stride) % exercises;
                fails = 0;
            } else {
                fails += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(p: Processing, u: Understanding) -> LearnerProfile {
        LearnerProfile {
            processing: p,
            understanding: u,
            ability: 0.0,
            eta: 0.005,
        }
    }

    #[test]
    fn huge_ability_always_passes() {
        let mut pr = profile(Processing::Reflective, Understanding::Global);
        pr.ability = 1e3;
        let cat = ExerciseCatalog::generate(10, 1);
        let tr = simulate_learner("x", &pr, &cat, 500, &SimParams::default(), &mut seeded(3, &[])).unwrap();
        assert!(tr.interactions.iter().all(|e| e.status == Status::Accepted));
    }

    #[test]
    fn sequential_first_submissions_follow_catalog() {
        let pr = profile(Processing::Reflective, Understanding::Sequential);
        let cat = ExerciseCatalog::generate(200, 2);
        let tr = simulate_learner("x", &pr, &cat, 300, &SimParams::default(), &mut seeded(4, &[])).unwrap();
        let mut firsts: Vec<&str> = Vec::new();
        for e in &tr.interactions {
            if firsts.last() != Some(&e.exercise_id.as_str()) {
                firsts.push(&e.exercise_id);
            }
        }
        let mut sorted = firsts.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(firsts, sorted);
    }

    #[test]
    fn errors() {
        let pr = profile(Processing::Active, Understanding::Global);
        let empty = ExerciseCatalog { difficulties: vec![] };
        let sim = SimParams::default();
        assert!(matches!(
            simulate_learner("x", &pr, &empty, 5, &sim, &mut seeded(0, &[])),
            Err(SimError::EmptyCatalog)
        ));
        assert!(validate_mix(&[0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(validate_mix(&[-0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(validate_mix(&[0.25; 4]).is_ok());
    }

    #[test]
    fn labels_round_trip() {
        let labels = vec![
            Label {
                learner_id: "a".into(),
                processing: Processing::Active,
                understanding: Understanding::Global,
            },
            Label {
                learner_id: "b".into(),
                processing: Processing::Reflective,
                understanding: Understanding::Sequential,
            },
        ];
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).unwrap();
        assert_eq!(read_labels(buf.as_slice()).unwrap(), labels);
    }

    #[test]
    fn code_vector_layout() {
        let pr = profile(Processing::Active, Understanding::Sequential);
        let cat = ExerciseCatalog::generate(5, 0);
        let sim = SimParams::default();
        let tr = simulate_learner("x", &pr, &cat, 20, &sim, &mut seeded(1, &[])).unwrap();
        for (e, (_, v)) in tr.interactions.iter().zip(&tr.vectors) {
            assert_eq!(v.len(), sim.d_c);
            let pass = if e.status == Status::Accepted { 1.0 } else { 0.0 };
            assert_eq!(v[sim.d_c / 2 + 3], pass);
        }
    }
}

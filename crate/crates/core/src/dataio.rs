//! Submission logs: parsing, vocabulary, per-learner windows, chronological
//! split and dataset statistics.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("max sequence length must be >= 2, got {0}")]
    WindowTooShort(usize),
    #[error("split ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("statistics need at least one interaction")]
    EmptyInput,
}

/// Judge verdict. Verdicts outside the fixed set map to [`Status::Other`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Status {
    Accepted,
    WrongAnswer,
    CompileError,
    RuntimeError,
    TimeLimit,
    MemoryLimit,
    Other,
}

impl Status {
    pub const ALL: [Status; 7] = [
        Status::Accepted,
        Status::WrongAnswer,
        Status::CompileError,
        Status::RuntimeError,
        Status::TimeLimit,
        Status::MemoryLimit,
        Status::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Accepted => "accepted",
            Status::WrongAnswer => "wrong_answer",
            Status::CompileError => "compile_error",
            Status::RuntimeError => "runtime_error",
            Status::TimeLimit => "time_limit",
            Status::MemoryLimit => "memory_limit",
            Status::Other => "other",
        }
    }

    /// Row in the status embedding table.
    pub fn index(self) -> usize {
        Status::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

impl From<String> for Status {
    fn from(s: String) -> Self {
        Status::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .unwrap_or(Status::Other)
    }
}

impl From<Status> for String {
    fn from(s: Status) -> Self {
        s.as_str().to_string()
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One submission event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub learner_id: String,
    pub exercise_id: String,
    pub timestamp: i64,
    pub status: Status,
    pub exec_time_ms: u64,
    pub exec_memory_kb: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_vec_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedLog {
    pub interactions: Vec<Interaction>,
    pub issues: Vec<ParseIssue>,
}

/// Parse a JSONL submission log. Malformed lines are collected in
/// [`ParsedLog::issues`]; with `strict` the first one is an error instead.
pub fn parse_log(path: &Path, strict: bool) -> Result<ParsedLog, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    parse_reader(io::BufReader::new(file), strict).map_err(|e| match e {
        ReadError::Io(source) => io_err(source),
        ReadError::Data(d) => d,
    })
}

enum ReadError {
    Io(io::Error),
    Data(DataError),
}

fn parse_reader(reader: impl BufRead, strict: bool) -> Result<ParsedLog, ReadError> {
    let mut out = ParsedLog::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(ReadError::Io)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Interaction>(&line) {
            Ok(rec) => out.interactions.push(rec),
            Err(e) => {
                let issue = ParseIssue {
                    line: lineno,
                    message: e.to_string(),
                };
                if strict {
                    return Err(ReadError::Data(DataError::Malformed {
                        line: issue.line,
                        message: issue.message,
                    }));
                }
                out.issues.push(issue);
            }
        }
    }
    Ok(out)
}

/// Parse JSONL text held in memory.
pub fn parse_str(text: &str, strict: bool) -> Result<ParsedLog, DataError> {
    parse_reader(text.as_bytes(), strict).map_err(|e| match e {
        ReadError::Io(_) => unreachable!("in-memory read"),
        ReadError::Data(d) => d,
    })
}

pub fn write_jsonl<W: Write>(mut w: W, interactions: &[Interaction]) -> io::Result<()> {
    for rec in interactions {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub const PAD_INDEX: usize = 0;
pub const UNKNOWN_INDEX: usize = 1;

/// Exercise id to index table. Index 0 is padding, 1 is unknown, real
/// exercises occupy `2..N+2` in sorted id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i + 2))
            .collect();
        Self { ids, index }
    }

    pub fn from_interactions(interactions: &[Interaction]) -> Self {
        Self::new(interactions.iter().map(|r| r.exercise_id.as_str()))
    }

    /// Unknown exercises map to [`UNKNOWN_INDEX`].
    pub fn encode(&self, exercise_id: &str) -> usize {
        self.index.get(exercise_id).copied().unwrap_or(UNKNOWN_INDEX)
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(2)
            .and_then(|i| self.ids.get(i))
            .map(String::as_str)
    }

    /// Number of real exercises.
    pub fn exercises(&self) -> usize {
        self.ids.len()
    }

    /// Table size including the two reserved rows.
    pub fn size(&self) -> usize {
        self.ids.len() + 2
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(ids: Vec<String>) -> Self {
        Self::new(ids)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.ids
    }
}

/// All events of one learner, in chronological order.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerHistory {
    pub learner_id: String,
    pub events: Vec<Interaction>,
}

/// A window of at most `max_len` consecutive events of one learner.
///
/// The step at position `t` predicts `events[t + 1]`; only targets at
/// positions `>= first_target` are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerSequence {
    pub learner_id: String,
    pub events: Vec<Interaction>,
    pub first_target: usize,
}

impl LearnerSequence {
    /// Positions (into `events`) of the scored next-item targets.
    pub fn target_positions(&self) -> std::ops::Range<usize> {
        self.first_target.max(1)..self.events.len()
    }

    pub fn target_count(&self) -> usize {
        self.target_positions().len()
    }
}

/// Group by learner (first-appearance order) and sort each learner's events
/// by timestamp; ties keep file order.
pub fn group_learners(interactions: &[Interaction]) -> Vec<LearnerHistory> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_learner: HashMap<&str, Vec<Interaction>> = HashMap::new();
    for rec in interactions {
        by_learner
            .entry(rec.learner_id.as_str())
            .or_insert_with(|| {
                order.push(rec.learner_id.as_str());
                Vec::new()
            })
            .push(rec.clone());
    }
    order
        .into_iter()
        .map(|id| {
            let mut events = by_learner.remove(id).expect("grouped");
            events.sort_by_key(|e| e.timestamp);
            LearnerHistory {
                learner_id: id.to_string(),
                events,
            }
        })
        .collect()
}

/// Cut a history into training windows: non-overlapping chunks of `max_len`,
/// or with `sliding` one window per stride-1 offset (after the first, each
/// window scores only its final target).
pub fn windows(history: &LearnerHistory, max_len: usize, sliding: bool) -> Vec<LearnerSequence> {
    let ev = &history.events;
    let seq = |events: &[Interaction], first_target| LearnerSequence {
        learner_id: history.learner_id.clone(),
        events: events.to_vec(),
        first_target,
    };
    if sliding && ev.len() > max_len {
        let mut out = vec![seq(&ev[..max_len], 1)];
        for start in 1..=ev.len() - max_len {
            out.push(seq(&ev[start..start + max_len], max_len - 1));
        }
        out
    } else {
        ev.chunks(max_len).map(|c| seq(c, 1)).collect()
    }
}

pub fn build_sequences(
    interactions: &[Interaction],
    max_len: usize,
    sliding: bool,
) -> Result<(Vec<LearnerSequence>, Vocabulary), DataError> {
    if max_len < 2 {
        return Err(DataError::WindowTooShort(max_len));
    }
    let vocab = Vocabulary::from_interactions(interactions);
    let seqs = group_learners(interactions)
        .iter()
        .flat_map(|h| windows(h, max_len, sliding))
        .collect();
    Ok((seqs, vocab))
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<LearnerSequence>,
    pub test: Vec<LearnerSequence>,
}

/// Number of held-out next-item targets for a learner with `len` events.
pub fn test_target_count(len: usize, ratio: f64) -> usize {
    if len < 3 {
        return 0;
    }
    ((ratio * len as f64).ceil() as usize).min(len - 1)
}

/// Chronological per-learner split: the last `⌈ratio·len⌉` targets of every
/// learner are test targets, the earlier prefix is windowed for training.
/// Test windows carry up to `max_len - 1` events of history before their
/// targets.
pub fn split(
    histories: &[LearnerHistory],
    ratio: f64,
    max_len: usize,
    sliding: bool,
) -> Result<Split, DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    if max_len < 2 {
        return Err(DataError::WindowTooShort(max_len));
    }
    let mut out = Split::default();
    for h in histories {
        let len = h.events.len();
        let n_test = test_target_count(len, ratio);
        let prefix = LearnerHistory {
            learner_id: h.learner_id.clone(),
            events: h.events[..len - n_test].to_vec(),
        };
        out.train.extend(
            windows(&prefix, max_len, sliding)
                .into_iter()
                .filter(|s| s.events.len() >= 2),
        );

        let mut chunks = Vec::new();
        let mut end = len;
        while end > len - n_test {
            let begin = (len - n_test).max(end.saturating_sub(max_len - 1));
            let start = end.saturating_sub(max_len);
            chunks.push(LearnerSequence {
                learner_id: h.learner_id.clone(),
                events: h.events[start..end].to_vec(),
                first_target: begin - start,
            });
            end = begin;
        }
        chunks.reverse();
        out.test.extend(chunks);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub learners: u64,
    pub interactions: u64,
    pub exercises: u64,
    pub sparsity: f64,
    pub pass_rate: f64,
    pub ape: f64,
}

/// Streaming accumulator behind [`stats`].
#[derive(Default)]
pub struct StatsAccumulator {
    learners: HashMap<String, u32>,
    exercises: HashMap<String, u32>,
    pairs: HashSet<u64>,
    interactions: u64,
    accepted: u64,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn intern(table: &mut HashMap<String, u32>, id: &str) -> u32 {
        if let Some(&i) = table.get(id) {
            return i;
        }
        let i = table.len() as u32;
        table.insert(id.to_string(), i);
        i
    }

    pub fn push_ids(&mut self, learner_id: &str, exercise_id: &str, accepted: bool) {
        let l = Self::intern(&mut self.learners, learner_id);
        let e = Self::intern(&mut self.exercises, exercise_id);
        self.pairs.insert(((l as u64) << 32) | e as u64);
        self.interactions += 1;
        self.accepted += accepted as u64;
    }

    pub fn push(&mut self, rec: &Interaction) {
        self.push_ids(
            &rec.learner_id,
            &rec.exercise_id,
            rec.status == Status::Accepted,
        );
    }

    pub fn finish(&self) -> Result<DatasetStats, DataError> {
        if self.interactions == 0 {
            return Err(DataError::EmptyInput);
        }
        let (u, e, i) = (
            self.learners.len() as u64,
            self.exercises.len() as u64,
            self.interactions,
        );
        Ok(DatasetStats {
            learners: u,
            interactions: i,
            exercises: e,
            sparsity: 1.0 - i as f64 / (u as f64 * e as f64),
            pass_rate: self.accepted as f64 / i as f64,
            // every attempt counts, accepted or not
            ape: i as f64 / self.pairs.len() as f64,
        })
    }
}

pub fn stats(interactions: &[Interaction]) -> Result<DatasetStats, DataError> {
    let mut acc = StatsAccumulator::new();
    interactions.iter().for_each(|r| acc.push(r));
    acc.finish()
}

/// Tab-separated table with one row per named dataset.
pub fn format_stats_table(rows: &[(&str, DatasetStats)]) -> String {
    let mut out = String::from(
        "Dataset\t#Learners\t#Interactions\t#Exercises\t#Sparsity\t#Pass-Rate\t#APE\n",
    );
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{:.2}%\t{:.2}%\t{:.2}",
            s.learners,
            s.interactions,
            s.exercises,
            100.0 * s.sparsity,
            100.0 * s.pass_rate,
            s.ape
        );
    }
    out
}

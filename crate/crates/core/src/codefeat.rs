//! Sources for the initial code embedding of a submission.
//!
//! Two kinds are supported: a frozen table of precomputed vectors keyed by
//! `code_vec_ref`, and a trainable hashed bag of code tokens.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Interaction;
use crate::tensorkit::{Graph, NodeId, ParamSet, Tensor, TensorError};

pub const CODE_TABLE: &str = "code_table";
const VEC_MAGIC: &str = "PERSVEC1";

#[derive(Debug, Error)]
pub enum CodeFeatError {
    #[error("no precomputed vector for ref `{0}`")]
    MissingRef(String),
    #[error("interaction carries no code_vec_ref")]
    NoRef,
    #[error("interaction carries no code text")]
    NoCode,
    #[error("vector file line {line}: {message}")]
    BadVectorFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Frozen `ref -> vector` table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f64>) -> Result<(), CodeFeatError> {
        if v.len() != self.dim {
            return Err(CodeFeatError::Tensor(TensorError::ShapeMismatch {
                context: "precomputed vector".into(),
                left: vec![self.dim],
                right: vec![v.len()],
            }));
        }
        self.vectors.insert(key.into(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    pub fn read(reader: impl BufRead) -> Result<Self, CodeFeatError> {
        let bad = |line, message: &str| CodeFeatError::BadVectorFile {
            line,
            message: message.to_string(),
        };
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))??;
        let dim = header
            .strip_prefix(VEC_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("d_c="))
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| bad(1, "expected `PERSVEC1 d_c=<int>`"))?;
        let mut table = Self::new(dim);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let key = parts.next().filter(|k| !k.is_empty()).ok_or_else(|| bad(lineno, "missing ref"))?;
            let v = parts
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(lineno, &e.to_string()))?;
            if v.len() != dim {
                return Err(bad(lineno, &format!("expected {dim} values, got {}", v.len())));
            }
            table.vectors.insert(key.to_string(), v);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, CodeFeatError> {
        Self::read(io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Writes refs in sorted order; floats use shortest round-trip text.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{VEC_MAGIC} d_c={}", self.dim)?;
        let mut keys: Vec<_> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            write!(w, "{k}")?;
            for v in &self.vectors[k] {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CodeSourceKind {
    Precomputed { dim: usize },
    HashedTokens { buckets: usize, dim: usize },
}

impl CodeSourceKind {
    pub fn dim(&self) -> usize {
        match *self {
            CodeSourceKind::Precomputed { dim } | CodeSourceKind::HashedTokens { dim, .. } => dim,
        }
    }
}

#[derive(Clone, Debug)]
pub enum CodeFeatureSource {
    Precomputed(VectorTable),
    /// Mean of trainable bucket embeddings stored as `code_table`
    /// (`buckets x dim`) in the model parameters.
    HashedTokens { buckets: usize, dim: usize },
}

impl CodeFeatureSource {
    pub fn kind(&self) -> CodeSourceKind {
        match self {
            CodeFeatureSource::Precomputed(t) => CodeSourceKind::Precomputed { dim: t.dim() },
            CodeFeatureSource::HashedTokens { buckets, dim } => CodeSourceKind::HashedTokens {
                buckets: *buckets,
                dim: *dim,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    /// Bucket weights for a hashed source: each distinct bucket with its share
    /// of the token count. Empty for code without tokens.
    fn bucket_weights(code: &str, buckets: usize) -> Vec<(usize, f64)> {
        let toks = tokenize(code);
        if toks.is_empty() {
            return Vec::new();
        }
        let mut counts: Vec<(usize, f64)> = Vec::new();
        for t in &toks {
            let b = (fnv1a64(t.as_bytes()) % buckets as u64) as usize;
            match counts.iter_mut().find(|(k, _)| *k == b) {
                Some((_, c)) => *c += 1.0,
                None => counts.push((b, 1.0)),
            }
        }
        let n = toks.len() as f64;
        counts.into_iter().map(|(b, c)| (b, c / n)).collect()
    }

    /// Add the code vector of `rec` to `graph`.
    pub fn code_node(&self, graph: &mut Graph, rec: &Interaction) -> Result<NodeId, CodeFeatError> {
        match self {
            CodeFeatureSource::Precomputed(table) => {
                let key = rec.code_vec_ref.as_deref().ok_or(CodeFeatError::NoRef)?;
                let v = table
                    .get(key)
                    .ok_or_else(|| CodeFeatError::MissingRef(key.to_string()))?;
                Ok(graph.constant(Tensor::vector(v.to_vec())))
            }
            CodeFeatureSource::HashedTokens { buckets, dim } => {
                let code = rec.code.as_deref().ok_or(CodeFeatError::NoCode)?;
                let rows = Self::bucket_weights(code, *buckets);
                if rows.is_empty() {
                    return Ok(graph.zeros(*dim));
                }
                let table = graph.param(CODE_TABLE);
                Ok(graph.weighted_rows(table, rows))
            }
        }
    }

    /// Initial code embedding of one interaction.
    pub fn code_vector(&self, rec: &Interaction, params: &ParamSet) -> Result<Tensor, CodeFeatError> {
        let mut g = Graph::new();
        self.code_node(&mut g, rec)?;
        Ok(g.forward(params)?)
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(code: &str) -> Vec<String> {
    code.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Status;
    use proptest::prelude::*;

    fn rec(code: Option<&str>, vref: Option<&str>) -> Interaction {
        Interaction {
            learner_id: "u".into(),
            exercise_id: "p".into(),
            timestamp: 0,
            status: Status::Accepted,
            exec_time_ms: 0,
            exec_memory_kb: 0,
            code: code.map(Into::into),
            code_vec_ref: vref.map(Into::into),
        }
    }

    fn table_params(buckets: usize, dim: usize) -> ParamSet {
        let data = (0..buckets * dim).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let mut p = ParamSet::new();
        p.insert(CODE_TABLE, Tensor::matrix(buckets, dim, data).unwrap());
        p
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenizer_splits_and_lowercases() {
        assert_eq!(tokenize("For(i=0;I<n)"), vec!["for", "i", "0", "i", "n"]);
        assert!(tokenize("  ;;  ").is_empty());
    }

    #[test]
    fn precomputed_lookup_bit_exact() {
        let mut t = VectorTable::new(3);
        let v = vec![0.1, -2.5e-7, 1.0 / 3.0];
        t.insert("v17", v.clone()).unwrap();
        let src = CodeFeatureSource::Precomputed(t);
        let out = src.code_vector(&rec(None, Some("v17")), &ParamSet::new()).unwrap();
        assert_eq!(out.data(), v.as_slice());
    }

    #[test]
    fn missing_ref_and_code() {
        let src = CodeFeatureSource::Precomputed(VectorTable::new(2));
        assert!(matches!(
            src.code_vector(&rec(None, Some("x")), &ParamSet::new()),
            Err(CodeFeatError::MissingRef(_))
        ));
        assert!(matches!(
            src.code_vector(&rec(None, None), &ParamSet::new()),
            Err(CodeFeatError::NoRef)
        ));
        let hashed = CodeFeatureSource::HashedTokens { buckets: 4, dim: 2 };
        assert!(matches!(
            hashed.code_vector(&rec(None, None), &table_params(4, 2)),
            Err(CodeFeatError::NoCode)
        ));
    }

    #[test]
    fn empty_code_is_zero() {
        let src = CodeFeatureSource::HashedTokens { buckets: 4, dim: 3 };
        let out = src.code_vector(&rec(Some(""), None), &table_params(4, 3)).unwrap();
        assert_eq!(out, Tensor::zeros(&[3]));
    }

    #[test]
    fn mean_of_bucket_rows() {
        let (buckets, dim) = (13, 4);
        let params = table_params(buckets, dim);
        let table = params.get(CODE_TABLE).unwrap();
        let src = CodeFeatureSource::HashedTokens { buckets, dim };
        let out = src.code_vector(&rec(Some("a a b"), None), &params).unwrap();
        let ha = (0xaf63dc4c8601ec8cu64 % buckets as u64) as usize;
        let hb = (fnv1a64(b"b") % buckets as u64) as usize;
        for j in 0..dim {
            let want = (2.0 * table.row(ha)[j] + table.row(hb)[j]) / 3.0;
            assert!((out.data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn vector_file_round_trip() {
        let mut t = VectorTable::new(2);
        t.insert("b", vec![0.1, f64::MIN_POSITIVE]).unwrap();
        t.insert("a", vec![-3.0, 1e300]).unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"PERSVEC1 d_c=2\na -3.0 1e300\n"));
        assert_eq!(VectorTable::read(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn vector_file_errors() {
        assert!(VectorTable::read("PERSVEC2 d_c=2\n".as_bytes()).is_err());
        let err = VectorTable::read("PERSVEC1 d_c=2\nx 1 2\ny 1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CodeFeatError::BadVectorFile { line: 3, .. }));
    }

    proptest! {
        #[test]
        fn hashed_is_pure_and_convex(code in "[a-zA-Z0-9 ;(){}]{0,40}") {
            let (buckets, dim) = (7, 3);
            let params = table_params(buckets, dim);
            let src = CodeFeatureSource::HashedTokens { buckets, dim };
            let a = src.code_vector(&rec(Some(&code), None), &params).unwrap();
            let b = src.code_vector(&rec(Some(&code), None), &params).unwrap();
            prop_assert_eq!(&a, &b);
            let table = params.get(CODE_TABLE).unwrap();
            let max_norm = (0..buckets)
                .map(|r| table.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            prop_assert!(a.norm() <= max_norm + 1e-12);
        }
    }
}

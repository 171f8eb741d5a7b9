use std::collections::HashMap;

use super::{Gradients, ParamSet, Tensor, TensorError};

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Param(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    GatherRow {
        table: NodeId,
        row: usize,
    },
    WeightedRows {
        table: NodeId,
        rows: Vec<(usize, f64)>,
    },
    SoftmaxXent {
        logits: NodeId,
        target: usize,
        masked: Vec<usize>,
    },
    SampledBce {
        logits: NodeId,
        target: usize,
        negatives: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::GatherRow { .. } => "gather_row",
            Op::WeightedRows { .. } => "weighted_rows",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::SampledBce { .. } => "sampled_bce",
        }
    }
}

/// A taped computation over parameters and constants.
///
/// Nodes are appended in construction order, so the tape is always
/// topologically sorted. Parameters are referenced by name and bound at
/// [`Graph::forward`] time, which lets the same tape be re-evaluated under
/// perturbed parameters (see [`finite_diff_check`]).
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.values.push(None);
        NodeId(self.ops.len() - 1)
    }

    /// Parameter leaf. Repeated calls with one name share a node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.constant(Tensor::zeros(&[len]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// `wᵀx` for a weight stored as `(fan_in, fan_out)`.
    pub fn project(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::MatMul(x, w))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn gather_row(&mut self, table: NodeId, row: usize) -> NodeId {
        self.push(Op::GatherRow { table, row })
    }

    /// `Σ wᵢ · table[rowᵢ]`.
    pub fn weighted_rows(&mut self, table: NodeId, rows: Vec<(usize, f64)>) -> NodeId {
        self.push(Op::WeightedRows { table, rows })
    }

    /// Cross-entropy of `softmax(logits)` at `target`, with `masked` indices
    /// removed from the normalisation.
    pub fn softmax_xent(&mut self, logits: NodeId, target: usize, masked: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxXent {
            logits,
            target,
            masked,
        })
    }

    /// `-ln σ(z_target) - Σ ln(1 - σ(z_neg))`.
    pub fn sampled_bce(&mut self, logits: NodeId, target: usize, negatives: Vec<usize>) -> NodeId {
        self.push(Op::SampledBce {
            logits,
            target,
            negatives,
        })
    }

    /// Sum of several scalar nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Option<NodeId> {
        let (&first, rest) = terms.split_first()?;
        Some(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }

    /// Value computed by the last [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn root(&self) -> Option<NodeId> {
        if self.ops.is_empty() {
            None
        } else {
            Some(NodeId(self.ops.len() - 1))
        }
    }

    /// Evaluate every node in tape order, caching values for backward.
    /// Returns the value of the last node.
    pub fn forward(&mut self, params: &ParamSet) -> Result<Tensor, TensorError> {
        let root = self.root().ok_or(TensorError::EmptyGraph)?;
        for i in 0..self.ops.len() {
            let v = self.eval_node(i, params)?;
            self.values[i] = Some(v);
        }
        Ok(self.values[root.0].clone().expect("root evaluated"))
    }

    fn input(&self, node: usize, id: NodeId) -> Result<&Tensor, TensorError> {
        if id.0 >= node {
            return Err(TensorError::NotTopological { node, input: id.0 });
        }
        Ok(self.values[id.0].as_ref().expect("inputs precede node"))
    }

    fn shape_err(&self, node: usize, detail: String) -> TensorError {
        TensorError::NodeShape {
            node,
            op: self.ops[node].name(),
            detail,
        }
    }

    fn eval_node(&self, i: usize, params: &ParamSet) -> Result<Tensor, TensorError> {
        let out = match &self.ops[i] {
            Op::Param(name) => params.require(name)?.clone(),
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.input(i, *a)?, self.input(i, *b)?);
                matmul(a, b).map_err(|d| self.shape_err(i, d))?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => {
                let (x, y) = (self.input(i, *a)?, self.input(i, *b)?);
                if x.dims() != y.dims() {
                    return Err(self.shape_err(i, format!("{:?} vs {:?}", x.dims(), y.dims())));
                }
                let f: fn(f64, f64) -> f64 = match &self.ops[i] {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(x.dims().to_vec(), data)?
            }
            Op::Scale(a, k) => map(self.input(i, *a)?, |v| v * k),
            Op::Tanh(a) => map(self.input(i, *a)?, f64::tanh),
            Op::Sigmoid(a) => map(self.input(i, *a)?, sigmoid),
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(self.shape_err(i, "no inputs".into()));
                }
                let mut data = Vec::new();
                for p in parts {
                    let t = self.input(i, *p)?;
                    if t.rank() != 1 {
                        return Err(self.shape_err(i, format!("non-vector input {:?}", t.dims())));
                    }
                    data.extend_from_slice(t.data());
                }
                Tensor::vector(data)
            }
            Op::Sum(a) => Tensor::scalar(self.input(i, *a)?.data().iter().sum()),
            Op::GatherRow { table, row } => {
                let t = self.input(i, *table)?;
                if t.rank() != 2 || *row >= t.dims()[0] {
                    return Err(self.shape_err(i, format!("row {row} of {:?}", t.dims())));
                }
                Tensor::vector(t.row(*row).to_vec())
            }
            Op::WeightedRows { table, rows } => {
                let t = self.input(i, *table)?;
                if t.rank() != 2 {
                    return Err(self.shape_err(i, format!("table {:?}", t.dims())));
                }
                let mut out = vec![0.0; t.dims()[1]];
                for &(r, w) in rows {
                    if r >= t.dims()[0] {
                        return Err(self.shape_err(i, format!("row {r} of {:?}", t.dims())));
                    }
                    for (o, v) in out.iter_mut().zip(t.row(r)) {
                        *o += w * v;
                    }
                }
                Tensor::vector(out)
            }
            Op::SoftmaxXent {
                logits,
                target,
                masked,
            } => {
                let z = self.input(i, *logits)?;
                check_logit_index(z, *target, masked).map_err(|d| self.shape_err(i, d))?;
                let lse = masked_logsumexp(z.data(), masked);
                Tensor::scalar(lse - z.data()[*target])
            }
            Op::SampledBce {
                logits,
                target,
                negatives,
            } => {
                let z = self.input(i, *logits)?;
                check_logit_index(z, *target, &[]).map_err(|d| self.shape_err(i, d))?;
                let mut loss = softplus(-z.data()[*target]);
                for &n in negatives {
                    if n >= z.len() {
                        return Err(self.shape_err(i, format!("negative {n} of {}", z.len())));
                    }
                    loss += softplus(z.data()[n]);
                }
                Tensor::scalar(loss)
            }
        };
        Ok(out)
    }

    /// Reverse pass from `root`. The returned set holds one gradient for every
    /// parameter in `params`; parameters the root does not depend on get zeros.
    pub fn backward(&self, root: NodeId, params: &ParamSet) -> Result<Gradients, TensorError> {
        let root_val = self.value(root).ok_or(TensorError::NotEvaluated)?;
        if !root_val.is_scalar() {
            return Err(TensorError::RootNotScalar(root_val.dims().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        let mut grads = params.zeros_like();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let val = |id: &NodeId| self.values[id.0].as_ref().expect("forward ran");
            match &self.ops[i] {
                Op::Param(name) => {
                    if let Some(dst) = grads.get_mut(name) {
                        for (d, s) in dst.data_mut().iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::Const(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (ga, gb) = matmul_backward(ta, tb, &g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let ga = g.iter().zip(tb.data()).map(|(u, v)| u * v).collect();
                    let gb = g.iter().zip(ta.data()).map(|(u, v)| u * v).collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut adj, *a, g.iter().map(|v| v * k).collect()),
                Op::Tanh(a) => {
                    let y = self.values[i].as_ref().expect("forward ran");
                    let ga = g.iter().zip(y.data()).map(|(u, y)| u * (1.0 - y * y)).collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.values[i].as_ref().expect("forward ran");
                    let ga = g.iter().zip(y.data()).map(|(u, y)| u * y * (1.0 - y)).collect();
                    accumulate(&mut adj, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = val(p).len();
                        accumulate(&mut adj, *p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Sum(a) => accumulate(&mut adj, *a, vec![g[0]; val(a).len()]),
                Op::GatherRow { table, row } => {
                    let t = val(table);
                    let cols = t.dims()[1];
                    let mut gt = vec![0.0; t.len()];
                    gt[row * cols..(row + 1) * cols].copy_from_slice(&g);
                    accumulate(&mut adj, *table, gt);
                }
                Op::WeightedRows { table, rows } => {
                    let t = val(table);
                    let cols = t.dims()[1];
                    let mut gt = vec![0.0; t.len()];
                    for &(r, w) in rows {
                        for (d, s) in gt[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                            *d += w * s;
                        }
                    }
                    accumulate(&mut adj, *table, gt);
                }
                Op::SoftmaxXent {
                    logits,
                    target,
                    masked,
                } => {
                    let z = val(logits).data();
                    let lse = masked_logsumexp(z, masked);
                    let mut gz: Vec<f64> = z.iter().map(|v| g[0] * (v - lse).exp()).collect();
                    for &m in masked {
                        gz[m] = 0.0;
                    }
                    gz[*target] -= g[0];
                    accumulate(&mut adj, *logits, gz);
                }
                Op::SampledBce {
                    logits,
                    target,
                    negatives,
                } => {
                    let z = val(logits).data();
                    let mut gz = vec![0.0; z.len()];
                    gz[*target] += g[0] * (sigmoid(z[*target]) - 1.0);
                    for &n in negatives {
                        gz[n] += g[0] * sigmoid(z[n]);
                    }
                    accumulate(&mut adj, *logits, gz);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.dims().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same dims as input")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn masked_logsumexp(z: &[f64], masked: &[usize]) -> f64 {
    let allowed = |j: &usize| !masked.contains(j);
    let max = (0..z.len())
        .filter(allowed)
        .map(|j| z[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..z.len()).filter(allowed).map(|j| (z[j] - max).exp()).sum();
    max + s.ln()
}

fn check_logit_index(z: &Tensor, target: usize, masked: &[usize]) -> Result<(), String> {
    if z.rank() != 1 {
        return Err(format!("logits must be a vector, got {:?}", z.dims()));
    }
    if target >= z.len() {
        return Err(format!("target {target} out of {} logits", z.len()));
    }
    if masked.contains(&target) {
        return Err(format!("target {target} is masked"));
    }
    if masked.iter().any(|&m| m >= z.len()) {
        return Err("mask index out of range".into());
    }
    Ok(())
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    let mismatch = || format!("{:?} x {:?}", a.dims(), b.dims());
    match (a.dims(), b.dims()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                for (p, &av) in a.row(r).iter().enumerate() {
                    let brow = &b.data()[p * n..(p + 1) * n];
                    for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out).map_err(|e| e.to_string())
        }
        (&[m, k], &[k2]) if k == k2 => {
            let out = (0..m)
                .map(|r| a.row(r).iter().zip(b.data()).map(|(x, y)| x * y).sum())
                .collect();
            Ok(Tensor::vector(out))
        }
        (&[k], &[k2, n]) if k == k2 => {
            let mut out = vec![0.0; n];
            for (p, &av) in a.data().iter().enumerate() {
                for (o, &bv) in out.iter_mut().zip(&b.data()[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
            Ok(Tensor::vector(out))
        }
        _ => Err(mismatch()),
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match (a.dims(), b.dims()) {
        (&[m, k], &[_, n]) => {
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for r in 0..m {
                let grow = &g[r * n..(r + 1) * n];
                for p in 0..k {
                    let brow = &b.data()[p * n..(p + 1) * n];
                    ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    let av = a.data()[r * k + p];
                    for (d, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
            (ga, gb)
        }
        (&[m, k], &[_]) => {
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k];
            for r in 0..m {
                for p in 0..k {
                    ga[r * k + p] = g[r] * b.data()[p];
                    gb[p] += a.data()[r * k + p] * g[r];
                }
            }
            (ga, gb)
        }
        (&[k], &[_, n]) => {
            let mut ga = vec![0.0; k];
            let mut gb = vec![0.0; k * n];
            for p in 0..k {
                let brow = &b.data()[p * n..(p + 1) * n];
                ga[p] = brow.iter().zip(g).map(|(x, y)| x * y).sum();
                let av = a.data()[p];
                for (d, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g) {
                    *d = av * gv;
                }
            }
            (ga, gb)
        }
        _ => unreachable!("shapes validated in forward"),
    }
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every coordinate
/// of parameter `name`, with numeric derivatives by central differences of
/// the graph's last node.
pub fn finite_diff_check(
    graph: &mut Graph,
    params: &ParamSet,
    name: &str,
    h: f64,
) -> Result<f64, TensorError> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(TensorError::InvalidStep(h));
    }
    let root = graph.root().ok_or(TensorError::EmptyGraph)?;
    graph.forward(params)?;
    let analytic = graph.backward(root, params)?;
    let analytic = analytic.require(name)?.clone();

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let orig = params.require(name)?.data()[i];
        probe.get_mut(name).expect("present").data_mut()[i] = orig + h;
        let up = graph.forward(&probe)?.data()[0];
        probe.get_mut(name).expect("present").data_mut()[i] = orig - h;
        let down = graph.forward(&probe)?.data()[0];
        probe.get_mut(name).expect("present").data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    graph.forward(params)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecn(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let x = g.constant(vecn(&[3.0, 4.0]));
        g.matmul(i, x);
        assert_eq!(g.forward(&ParamSet::new()).unwrap(), vecn(&[3.0, 4.0]));
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::new();
        let z = g.zeros(3);
        g.tanh(z);
        assert_eq!(g.forward(&ParamSet::new()).unwrap(), Tensor::zeros(&[3]));
    }

    #[test]
    fn concat_vectors() {
        let mut g = Graph::new();
        let a = g.constant(vecn(&[1.0, 2.0]));
        let b = g.constant(vecn(&[3.0]));
        g.concat(&[a, b]);
        assert_eq!(g.forward(&ParamSet::new()).unwrap(), vecn(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.constant(vecn(&[1.0, 2.0]));
        let b = g.constant(vecn(&[3.0]));
        g.add(a, b);
        match g.forward(&ParamSet::new()) {
            Err(TensorError::NodeShape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_gradient_is_input() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(vecn(&[1.0, -2.0]));
        let w = g.param("w");
        let y = g.project(x, w);
        let root = g.sum(y);
        g.forward(&params).unwrap();
        let grads = g.backward(root, &params).unwrap();
        assert_eq!(
            grads.get("w").unwrap().data(),
            &[1.0, 1.0, 1.0, -2.0, -2.0, -2.0]
        );
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut params = ParamSet::new();
        params.insert("z", Tensor::zeros(&[4]));
        let mut g = Graph::new();
        let z = g.param("z");
        let t = g.tanh(z);
        let root = g.sum(t);
        g.forward(&params).unwrap();
        let grads = g.backward(root, &params).unwrap();
        assert_eq!(grads.get("z").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::vector(vec![1.0, 2.0]));
        params.insert("unused", Tensor::vector(vec![7.0]));
        let mut g = Graph::new();
        let a = g.param("a");
        let root = g.sum(a);
        g.forward(&params).unwrap();
        let grads = g.backward(root, &params).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[1]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.constant(vecn(&[1.0, 2.0]));
        g.forward(&ParamSet::new()).unwrap();
        assert!(matches!(
            g.backward(a, &ParamSet::new()),
            Err(TensorError::RootNotScalar(_))
        ));
    }

    #[test]
    fn step_size_validated() {
        let mut g = Graph::new();
        let a = g.constant(vecn(&[1.0]));
        g.sum(a);
        for h in [0.0, -1e-5, 1e-2] {
            assert!(matches!(
                finite_diff_check(&mut g, &ParamSet::new(), "x", h),
                Err(TensorError::InvalidStep(_))
            ));
        }
    }

    #[test]
    fn linear_graph_fd_exact() {
        let mut params = ParamSet::new();
        params.insert(
            "w",
            Tensor::matrix(3, 2, vec![0.1, -0.3, 0.7, 0.2, -0.5, 0.9]).unwrap(),
        );
        let mut g = Graph::new();
        let x = g.constant(vecn(&[0.3, -0.8, 0.25]));
        let w = g.param("w");
        let y = g.project(x, w);
        g.sum(y);
        let err = finite_diff_check(&mut g, &params, "w", 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}

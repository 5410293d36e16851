//! Reverse-mode automatic differentiation over tensor-valued nodes.
//!
//! A [`Tape`] records operations during the forward pass; [`Tape::backward`]
//! replays them in reverse, accumulating gradients into every node. Each
//! operation implements its adjoint in closed form, so the op set stays
//! small and every rule is checked against central finite differences in the
//! test suite.
//!
//! Scalars are one-element tensors, which lets loss expressions mix vector
//! ops (matvec, log-softmax) with scalar arithmetic (sums, scaling) on one
//! tape.

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, log_softmax, matvec, softmax, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Input node; gradient accumulates but propagates no further.
    Leaf,
    /// y = m v
    Matvec { m: NodeId, v: NodeId },
    /// y = a + b (elementwise)
    Add { a: NodeId, b: NodeId },
    /// y = a - b (elementwise)
    Sub { a: NodeId, b: NodeId },
    /// y = k a
    Scale { a: NodeId, k: f64 },
    /// y = tanh(a) elementwise
    Tanh { a: NodeId },
    /// y = mean of the selected rows of a matrix (duplicates allowed)
    RowMean { table: NodeId, rows: Vec<usize> },
    /// y = cos(a, b), scalar
    Cosine { a: NodeId, b: NodeId },
    /// y[i] = parts[i], a vector assembled from scalar nodes
    Stack { parts: Vec<NodeId> },
    /// y = a[index], scalar
    Pick { a: NodeId, index: usize },
    /// y = log softmax(a)
    LogSoftmax { a: NodeId },
    /// y = log sum exp(a), scalar
    LogSumExp { a: NodeId },
    /// y = sum_i w[i] a[i], scalar with constant weights
    WeightedSum { a: NodeId, weights: Tensor },
    /// y = sum_i (a[i] - c[i])^2, scalar with a constant reference
    SqDiffConst { a: NodeId, reference: Tensor },
    /// y = sum of same-shape nodes
    SumN { parts: Vec<NodeId> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar convenience accessor.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    /// New input node. Gradients accumulate here and can be read back after
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let value = matvec(self.value(m), self.value(v))?;
        Ok(self.push(value, Op::Matvec { m, v }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::dims("add", ta.dims(), tb.dims()));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::dims("sub", ta.dims(), tb.dims()));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(ta.dims().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_assign(k);
        self.push(value, Op::Scale { a, k })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.value(a).dims().to_vec(), data).expect("same shape");
        self.push(value, Op::Tanh { a })
    }

    /// Mean of the given rows of a `[n x d]` matrix node. Row indices may
    /// repeat; each occurrence contributes to the mean and to the gradient.
    /// Rows are summed in sorted order so the result is bitwise independent
    /// of their ordering.
    pub fn row_mean(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (n, d) = match t.dims() {
            [n, d] => (*n, *d),
            other => return Err(Error::dims("row_mean table", &[0, 0], other)),
        };
        if rows.is_empty() {
            return Err(Error::Empty("row_mean needs at least one row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Infeasible(format!(
                "row index {bad} out of range for table with {n} rows"
            )));
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        let mut acc = vec![0.0; d];
        for &r in &rows {
            for (slot, x) in acc.iter_mut().zip(&t.data()[r * d..(r + 1) * d]) {
                *slot += x;
            }
        }
        let scale = 1.0 / rows.len() as f64;
        for slot in &mut acc {
            *slot *= scale;
        }
        Ok(self.push(Tensor::vector(&acc), Op::RowMean { table, rows }))
    }

    /// Cosine similarity between two vector nodes, as a scalar node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = cosine_sim(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(value), Op::Cosine { a, b }))
    }

    /// Assemble scalar nodes into one vector node.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("stack of zero scalars".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return Err(Error::dims("stack expects scalars", &[1], v.dims()));
            }
            data.push(v.item());
        }
        Ok(self.push(
            Tensor::vector(&data),
            Op::Stack {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(a);
        if index >= v.len() {
            return Err(Error::Infeasible(format!(
                "pick index {index} out of range {}",
                v.len()
            )));
        }
        let value = Tensor::scalar(v.data()[index]);
        Ok(self.push(value, Op::Pick { a, index }))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax(self.value(a));
        self.push(value, Op::LogSoftmax { a })
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        self.push(Tensor::scalar(lse), Op::LogSumExp { a })
    }

    /// Dot product with a constant weight vector.
    pub fn weighted_sum(&mut self, a: NodeId, weights: &Tensor) -> Result<NodeId> {
        let value = self.value(a).dot(weights)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::WeightedSum {
                a,
                weights: weights.clone(),
            },
        ))
    }

    /// Sum of squared differences against a constant reference tensor.
    pub fn sq_diff(&mut self, a: NodeId, reference: &Tensor) -> Result<NodeId> {
        let t = self.value(a);
        if t.dims() != reference.dims() {
            return Err(Error::dims("sq_diff", reference.dims(), t.dims()));
        }
        let value: f64 = t
            .data()
            .iter()
            .zip(reference.data())
            .map(|(x, c)| (x - c) * (x - c))
            .sum();
        Ok(self.push(
            Tensor::scalar(value),
            Op::SqDiffConst {
                a,
                reference: reference.clone(),
            },
        ))
    }

    /// Elementwise sum of same-shape nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("sum of zero nodes".into()));
        }
        let dims = self.value(parts[0]).dims().to_vec();
        let mut acc = Tensor::zeros(&dims);
        for &p in parts {
            let v = self.value(p);
            if v.dims() != dims {
                return Err(Error::dims("sum", &dims, v.dims()));
            }
            acc.add_assign(v);
        }
        Ok(self.push(
            acc,
            Op::SumN {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Backpropagate from a scalar node; returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.dims()))
            .collect();
        debug_assert_eq!(self.nodes[root.0].value.len(), 1, "backward from non-scalar");
        grads[root.0].data_mut()[0] = 1.0;

        for idx in (0..=root.0).rev() {
            let go = std::mem::replace(&mut grads[idx], Tensor::zeros(&[1]));
            if go.data().iter().all(|&g| g == 0.0) {
                grads[idx] = go;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matvec { m, v } => {
                    let c = self.nodes[v.0].value.len();
                    {
                        // dm[i,j] += go[i] * v[j]
                        let vv: Vec<f64> = self.nodes[v.0].value.data().to_vec();
                        let gm = grads[m.0].data_mut();
                        for (i, &g) in go.data().iter().enumerate() {
                            for (j, &vj) in vv.iter().enumerate() {
                                gm[i * c + j] += g * vj;
                            }
                        }
                    }
                    {
                        // dv[j] += sum_i go[i] * m[i,j]
                        let md: Vec<f64> = self.nodes[m.0].value.data().to_vec();
                        let gv = grads[v.0].data_mut();
                        for (i, &g) in go.data().iter().enumerate() {
                            for (j, slot) in gv.iter_mut().enumerate() {
                                *slot += g * md[i * c + j];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    grads[a.0].add_assign(&go);
                    grads[b.0].add_assign(&go);
                }
                Op::Sub { a, b } => {
                    grads[a.0].add_assign(&go);
                    for (slot, g) in grads[b.0].data_mut().iter_mut().zip(go.data()) {
                        *slot -= g;
                    }
                }
                Op::Scale { a, k } => {
                    for (slot, g) in grads[a.0].data_mut().iter_mut().zip(go.data()) {
                        *slot += k * g;
                    }
                }
                Op::Tanh { a } => {
                    let y = self.nodes[idx].value.data().to_vec();
                    for ((slot, g), yi) in grads[a.0].data_mut().iter_mut().zip(go.data()).zip(y) {
                        *slot += g * (1.0 - yi * yi);
                    }
                }
                Op::RowMean { table, rows } => {
                    let d = go.len();
                    let scale = 1.0 / rows.len() as f64;
                    let gt = grads[table.0].data_mut();
                    for &r in rows {
                        for (j, &g) in go.data().iter().enumerate() {
                            gt[r * d + j] += g * scale;
                        }
                    }
                }
                Op::Cosine { a, b } => {
                    let g = go.item();
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    let na = va.norm();
                    let nb = vb.norm();
                    let cos = self.nodes[idx].value.item();
                    {
                        let ga = grads[a.0].data_mut();
                        for ((slot, &ai), &bi) in ga.iter_mut().zip(va.data()).zip(vb.data()) {
                            *slot += g * (bi / (na * nb) - cos * ai / (na * na));
                        }
                    }
                    {
                        let gb = grads[b.0].data_mut();
                        for ((slot, &bi), &ai) in gb.iter_mut().zip(vb.data()).zip(va.data()) {
                            *slot += g * (ai / (na * nb) - cos * bi / (nb * nb));
                        }
                    }
                }
                Op::Stack { parts } => {
                    for (&p, &g) in parts.iter().zip(go.data()) {
                        grads[p.0].data_mut()[0] += g;
                    }
                }
                Op::Pick { a, index } => {
                    grads[a.0].data_mut()[*index] += go.item();
                }
                Op::LogSoftmax { a } => {
                    // dx = go - softmax(x) * sum(go)
                    let gsum: f64 = go.data().iter().sum();
                    let sm = softmax(&self.nodes[a.0].value);
                    let ga = grads[a.0].data_mut();
                    for ((slot, &g), &p) in ga.iter_mut().zip(go.data()).zip(sm.data()) {
                        *slot += g - p * gsum;
                    }
                }
                Op::LogSumExp { a } => {
                    let g = go.item();
                    let sm = softmax(&self.nodes[a.0].value);
                    let ga = grads[a.0].data_mut();
                    for (slot, &p) in ga.iter_mut().zip(sm.data()) {
                        *slot += g * p;
                    }
                }
                Op::WeightedSum { a, weights } => {
                    let g = go.item();
                    let ga = grads[a.0].data_mut();
                    for (slot, &w) in ga.iter_mut().zip(weights.data()) {
                        *slot += g * w;
                    }
                }
                Op::SqDiffConst { a, reference } => {
                    let g = go.item();
                    let x = self.nodes[a.0].value.data().to_vec();
                    let ga = grads[a.0].data_mut();
                    for ((slot, &xi), &ci) in ga.iter_mut().zip(&x).zip(reference.data()) {
                        *slot += g * 2.0 * (xi - ci);
                    }
                }
                Op::SumN { parts } => {
                    for &p in parts {
                        grads[p.0].add_assign(&go);
                    }
                }
            }
            grads[idx] = go;
        }
        Gradients { grads }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

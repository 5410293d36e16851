//! Dense double-precision tensors and the pure numeric operations the rest
//! of the crate builds on.
//!
//! Tensors are row-major `f64` buffers with explicit dimensions. Scalars are
//! represented as one-element vectors. All operations here are pure; the
//! differentiable versions live in [`crate::autodiff`] and call back into
//! these for their forward passes.

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate: cosine similarity and
/// prototype construction reject them instead of patching them over.
pub const EPSILON_NORM: f64 = 1e-12;

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() || dims.contains(&0) {
            return Err(Error::dims("Tensor::new", &dims, &[data.len()]));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            dims: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Row-major `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::dims("dot", &self.dims, &other.dims));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Rescale to unit Euclidean norm. Errors when the norm is degenerate.
    pub fn normalized(&self) -> Result<Tensor> {
        let n = self.norm();
        if n <= EPSILON_NORM {
            return Err(Error::Degenerate {
                norm: n,
                min: EPSILON_NORM,
            });
        }
        let mut out = self.clone();
        out.scale_assign(1.0 / n);
        Ok(out)
    }

    /// Little-endian byte image of the payload, used for checksums and the
    /// checkpoint format.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }
}

/// Matrix-vector product `m[r x c] * v[c] -> [r]`.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (r, c) = match m.dims() {
        [r, c] => (*r, *c),
        other => return Err(Error::dims("matvec matrix", &[0, 0], other)),
    };
    if v.dims() != [c] {
        return Err(Error::dims("matvec vector", &[c], v.dims()));
    }
    let mut out = vec![0.0; r];
    for (i, slot) in out.iter_mut().enumerate() {
        let row = &m.data()[i * c..(i + 1) * c];
        *slot = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
    }
    Ok(Tensor {
        dims: vec![r],
        data: out,
    })
}

/// Cosine similarity of two equal-length vectors. Rejects vectors whose norm
/// is below [`EPSILON_NORM`] rather than silently returning 0.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() || a.dims().len() != 1 {
        return Err(Error::dims("cosine_sim", a.dims(), b.dims()));
    }
    let na = a.norm();
    let nb = b.norm();
    for n in [na, nb] {
        if n <= EPSILON_NORM {
            return Err(Error::Degenerate {
                norm: n,
                min: EPSILON_NORM,
            });
        }
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Numerically stable softmax (max-subtraction before exponentiation).
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor {
        dims: logits.dims().to_vec(),
        data: exps.into_iter().map(|e| e / sum).collect(),
    }
}

/// Stable log-softmax: `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let max = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .data()
            .iter()
            .map(|&x| (x - max).exp())
            .sum::<f64>()
            .ln();
    Tensor {
        dims: logits.dims().to_vec(),
        data: logits.data().iter().map(|&x| x - lse).collect(),
    }
}

/// Named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.dims());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    items: Vec<Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.items.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateName(name));
        }
        self.items.push(Param::new(name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.items
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.items
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.items.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matvec_identity() {
        let m = Tensor::identity(2);
        let v = Tensor::vector(&[3.0, 4.0]);
        assert_eq!(matvec(&m, &v).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matvec_zero_matrix() {
        let m = Tensor::zeros(&[3, 2]);
        let v = Tensor::vector(&[5.0, -1.0]);
        assert_eq!(matvec(&m, &v).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_example() {
        // ((1,2),(3,4)) * (1,1) = (3,7)
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::vector(&[1.0, 1.0]);
        assert_eq!(matvec(&m, &v).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_mismatched_dims() {
        let m = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let v = Tensor::vector(&[1.0, 2.0]);
        match matvec(&m, &v) {
            Err(Error::DimMismatch { expected, got, .. }) => {
                assert_eq!(expected, vec![3]);
                assert_eq!(got, vec![2]);
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn cosine_identity_orthogonal_and_diagonal() {
        let a = Tensor::vector(&[2.0, -1.0, 0.5]);
        assert!(close(cosine_sim(&a, &a).unwrap(), 1.0, 1e-12));

        let e1 = Tensor::vector(&[1.0, 0.0]);
        let e2 = Tensor::vector(&[0.0, 1.0]);
        assert!(close(cosine_sim(&e1, &e2).unwrap(), 0.0, 1e-12));

        let d = Tensor::vector(&[1.0, 1.0]);
        assert!(close(
            cosine_sim(&e1, &d).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            1e-12
        ));
    }

    #[test]
    fn cosine_rejects_degenerate() {
        let z = Tensor::vector(&[0.0, 0.0]);
        let a = Tensor::vector(&[1.0, 0.0]);
        assert!(matches!(cosine_sim(&z, &a), Err(Error::Degenerate { .. })));
        assert!(matches!(cosine_sim(&a, &z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(&[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);

        let one = softmax(&Tensor::vector(&[3.7]));
        assert_eq!(one.data(), &[1.0]);

        // Frozen from an independent high-precision evaluation.
        let s = softmax(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (got, want) in s.data().iter().zip(expected) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::vector(&[0.3, -2.0, 5.5, 1.1]);
        let ls = log_softmax(&x);
        let s = softmax(&x);
        for (l, p) in ls.data().iter().zip(s.data()) {
            assert!(close(*l, p.ln(), 1e-12));
        }
    }

    #[test]
    fn model_params_reject_duplicates() {
        let mut params = ModelParams::new();
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            params.insert("w", Tensor::scalar(2.0)),
            Err(Error::DuplicateName(_))
        ));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let t = Tensor::vector(&logits);
            let s = softmax(&t);
            prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p > 0.0));

            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let s2 = softmax(&Tensor::vector(&shifted));
            for (a, b) in s.data().iter().zip(s2.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_in_range(
            a in proptest::collection::vec(-5.0f64..5.0, 2..8),
            b in proptest::collection::vec(-5.0f64..5.0, 2..8),
        ) {
            let n = a.len().min(b.len());
            let ta = Tensor::vector(&a[..n]);
            let tb = Tensor::vector(&b[..n]);
            if ta.norm() > 1e-6 && tb.norm() > 1e-6 {
                let ab = cosine_sim(&ta, &tb).unwrap();
                let ba = cosine_sim(&tb, &ta).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
            }
        }
    }
}

//! Dense float64 tensors, the seeded generator, and the handful of
//! differentiable primitives the model stack is built from.
//!
//! Every reduction here accumulates left to right in row-major order, so two
//! calls on identical inputs produce bit-identical outputs.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    /// Entries drawn i.i.d. from `Normal(0, std)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.normal(std);
        }
        t
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::dim(format!(
                "transpose needs a matrix, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// A fixed, ordered collection of trainable tensors.
///
/// Gradient containers reuse the parameter type, so the i-th tensor of a
/// gradient always lines up with the i-th tensor of the parameters.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, b.data(), a.data_mut());
        }
    }

    fn scale(&mut self, factor: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(factor));
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrites every entry from a flat buffer laid out as [`Parameters::flatten`] produces.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// `out += a · b` on raw row-major buffers.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is k×m and `b` is k×n; `out` is m×n.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is m×k and `b` is n×k; `out` is m×n.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Softmax over all entries of `x`.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::dim("softmax of an empty tensor"));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: softmax_slice(&x.data),
    })
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Gradient through softmax: given `y = softmax(x)` and `dy`, returns `dx`.
pub(crate) fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - inner)).collect()
}

pub fn sigmoid_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.check_same(upstream)?;
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&v, g)| {
            let s = sigmoid_scalar(v);
            s * (1.0 - s) * g
        })
        .collect();
    Tensor::from_vec(&x.shape, data)
}

pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.check_same(upstream)?;
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(&x.shape, data)
}

pub fn softmax_backward_tensor(y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    y.check_same(upstream)?;
    Tensor::from_vec(&y.shape, softmax_backward(&y.data, &upstream.data))
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Numeric(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite at coordinate {i}"
            )));
        }
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative error used by the gradient checks.
///
/// The denominator is floored at `1e-6` so coordinates whose true gradient is
/// (numerically) zero are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Serializable position of an [`Rng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Seeded ChaCha8 generator; the stream depends only on the seed.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl PartialEq for Rng {
    fn eq(&self, other: &Self) -> bool {
        self.state() == other.state()
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { inner }
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std)
            .expect("std must be finite and non-negative")
            .sample(&mut self.inner)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::matrix(2, 2, vec![1.5, -2.0, 3.25, 4.0]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);

        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = Rng::new(3);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let mut tn = vec![0.0; 6];
        matmul_tn_into(a.data(), b.data(), &mut tn, 4, 3, 2);
        let expected = naive_matmul(&a.transpose().unwrap(), &b);
        for (x, y) in tn.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let c = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut nt = vec![0.0; 20];
        matmul_nt_into(a.data(), c.data(), &mut nt, 4, 3, 5);
        let expected = naive_matmul(&a, &c.transpose().unwrap());
        for (x, y) in nt.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        let low = sigmoid_scalar(-1000.0);
        assert!((0.0..=1e-300).contains(&low));
        let high = sigmoid_scalar(1000.0);
        assert!(high.is_finite() && high <= 1.0);
        for x in [-30.0, -2.5, 0.1, 7.0, 501.0] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![2.0; 3])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(
            softmax(&Tensor::vector(vec![])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = Rng::new(11);
        let x = Tensor::randn(&[8], 2.0, &mut rng);
        let s = softmax(&x).unwrap();
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (xi, si) in x.data().iter().zip(s.data()) {
            assert!((xi.exp() / denom - si).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_magnitude_sums_to_one() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let x = Tensor::vector((0..10).map(|_| rng.uniform(-1e3, 1e3)).collect());
            let s = softmax(&x).unwrap();
            assert!(s.is_finite());
            assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_cases() {
        let r = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let r = relu(&Tensor::vector(vec![-1.0, -0.5, -3.0]));
        assert!(r.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[20], 1.0, &mut rng);
        let r = relu(&x);
        for (xi, ri) in x.data().iter().zip(r.data()) {
            let oracle = (xi + xi.abs()) / 2.0;
            assert_eq!(*ri, oracle);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(
            |t| t.data()[0] * t.data()[0],
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let g = finite_diff_grad(|_| 4.2, &Tensor::vector(vec![1.0, -2.0]), 1e-5).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));

        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[6], 1.5, &mut rng);
        let g = finite_diff_grad(|t| sigmoid(t).data().iter().sum(), &x, 1e-5).unwrap();
        for (xi, gi) in x.data().iter().zip(g.data()) {
            let s = sigmoid_scalar(*xi);
            assert!((s * (1.0 - s) - gi).abs() < 1e-7);
        }
    }

    #[test]
    fn finite_diff_rejects_bad_inputs() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_grad(|_| 0.0, &x, 1e-2).is_err());
        assert!(matches!(
            finite_diff_grad(|_| f64::NAN, &x, 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn hand_backward_passes_match_finite_differences() {
        let mut rng = Rng::new(21);
        for _ in 0..100 {
            let x = Tensor::randn(&[5], 2.0, &mut rng);
            let w = Tensor::randn(&[5], 1.0, &mut rng);
            let weighted = |f: &dyn Fn(&Tensor) -> Tensor, t: &Tensor| dot(f(t).data(), w.data());

            let num = finite_diff_grad(|t| weighted(&sigmoid, t), &x, 1e-5).unwrap();
            let ana = sigmoid_backward(&x, &w).unwrap();
            for (a, n) in ana.data().iter().zip(num.data()) {
                assert!(relative_error(*a, *n) <= 1e-4);
            }

            let num =
                finite_diff_grad(|t| weighted(&|u| softmax(u).unwrap(), t), &x, 1e-5).unwrap();
            let ana = softmax_backward_tensor(&softmax(&x).unwrap(), &w).unwrap();
            for (a, n) in ana.data().iter().zip(num.data()) {
                assert!(relative_error(*a, *n) <= 1e-4);
            }

            let num = finite_diff_grad(|t| weighted(&relu, t), &x, 1e-5).unwrap();
            let ana = relu_backward(&x, &w).unwrap();
            for (a, n) in ana.data().iter().zip(num.data()) {
                assert!(relative_error(*a, *n) <= 1e-4);
            }
        }
    }

    #[test]
    fn rng_is_reproducible_and_restorable() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f64> = (0..10).map(|_| a.normal(1.0)).collect();
        let ys: Vec<f64> = (0..10).map(|_| b.normal(1.0)).collect();
        assert_eq!(xs, ys);

        let saved = a.state();
        let next = a.next_u64();
        let mut restored = Rng::from_state(saved);
        assert_eq!(restored.next_u64(), next);
    }

    #[test]
    fn operations_are_bit_deterministic() {
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let p1 = matmul(&a, &b).unwrap();
        let p2 = matmul(&a, &b).unwrap();
        assert_eq!(p1.data(), p2.data());
        assert_eq!(softmax(&a).unwrap(), softmax(&a).unwrap());
    }
}

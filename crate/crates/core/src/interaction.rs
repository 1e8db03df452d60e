//! The two feature-representation branches over the field embeddings.
//!
//! * Multi-head self-attention (MHSA): scaled dot-product attention across the
//!   `n` field rows, heads concatenated and projected back to `d`, plus a
//!   residual projection of the input, then ReLU. The `n × d` result is
//!   flattened row-major into the internal representation.
//! * Attention crossing (AC): every unordered field pair `(i, j)` is crossed by
//!   element-wise product, scored by a one-hidden-layer attention network
//!   `hᵀ ReLU(W φ + b)`, normalized by softmax across pairs, and pooled into a
//!   single `d`-vector by the weighted sum of the crossings.

use crate::error::{Error, Result};
use crate::numerics::{
    axpy, dot, matmul_into, matmul_nt_into, matmul_tn_into, softmax_backward, softmax_slice,
    Parameters, Rng, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams {
    pub heads: usize,
    /// `d × d_attn`; columns `h·d_k .. (h+1)·d_k` belong to head `h`.
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    /// `d_attn × d`
    pub output: Tensor,
    /// `d × d`
    pub residual: Tensor,
}

impl MhsaParams {
    pub fn new(dim: usize, attn_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || attn_dim == 0 || attn_dim % heads != 0 {
            return Err(Error::config(format!(
                "attention width {attn_dim} must be a positive multiple of {heads} heads"
            )));
        }
        let in_std = (1.0 / dim as f64).sqrt();
        let out_std = (1.0 / attn_dim as f64).sqrt();
        Ok(MhsaParams {
            heads,
            query: Tensor::randn(&[dim, attn_dim], in_std, rng),
            key: Tensor::randn(&[dim, attn_dim], in_std, rng),
            value: Tensor::randn(&[dim, attn_dim], in_std, rng),
            output: Tensor::randn(&[attn_dim, dim], out_std, rng),
            residual: Tensor::randn(&[dim, dim], in_std, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }

    pub fn attn_dim(&self) -> usize {
        self.query.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim() / self.heads
    }
}

impl Parameters for MhsaParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.residual,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.residual,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcParams {
    /// `t × d`
    pub weight: Tensor,
    /// `t`
    pub bias: Tensor,
    /// `t`
    pub projection: Tensor,
}

impl AcParams {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("attention network width must be at least 1"));
        }
        let glorot = (2.0 / (dim + hidden) as f64).sqrt();
        Ok(AcParams {
            weight: Tensor::randn(&[hidden, dim], glorot, rng),
            bias: Tensor::zeros(&[hidden]),
            projection: Tensor::randn(&[hidden], (1.0 / hidden as f64).sqrt(), rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.weight.rows()
    }
}

impl Parameters for AcParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias, &self.projection]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias, &mut self.projection]
    }
}

/// Element-wise crossing of field rows `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossPair {
    pub i: usize,
    pub j: usize,
    pub phi: Vec<f64>,
}

/// All `n(n-1)/2` pairwise crossings in lexicographic order.
pub fn cross_pairs(e: &Tensor) -> Result<Vec<CrossPair>> {
    let n = e.rows();
    if n < 2 {
        return Err(Error::domain(format!(
            "need at least two fields to cross, got {n}"
        )));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let phi = e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).collect();
            pairs.push(CrossPair { i, j, phi });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcOutput {
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AcTrace {
    pub pairs: Vec<CrossPair>,
    /// Pre-activation `W φ + b` per pair.
    pre: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Scores and pools crossings; weights are a softmax over the attention logits.
pub fn ac_attention(pairs: Vec<CrossPair>, params: &AcParams) -> Result<(AcOutput, AcTrace)> {
    if pairs.is_empty() {
        return Err(Error::domain("attention crossing needs at least one pair"));
    }
    let d = params.weight.cols();
    let t = params.hidden();
    let mut pre = Vec::with_capacity(pairs.len());
    let mut logits = Vec::with_capacity(pairs.len());
    for p in &pairs {
        if p.phi.len() != d {
            return Err(Error::dim(format!(
                "crossing of width {} against attention weight {:?}",
                p.phi.len(),
                params.weight.shape()
            )));
        }
        let mut u = params.bias.data().to_vec();
        for (k, uk) in u.iter_mut().enumerate().take(t) {
            *uk += dot(params.weight.row(k), &p.phi);
        }
        let logit = u
            .iter()
            .zip(params.projection.data())
            .map(|(uk, hk)| uk.max(0.0) * hk)
            .sum();
        logits.push(logit);
        pre.push(u);
    }
    let weights = softmax_slice(&logits);
    let mut pooled = vec![0.0; d];
    for (w, p) in weights.iter().zip(&pairs) {
        axpy(*w, &p.phi, &mut pooled);
    }
    Ok((
        AcOutput {
            weights: weights.clone(),
            pooled,
        },
        AcTrace {
            pairs,
            pre,
            weights,
        },
    ))
}

/// Gradients of the attention network and of the `n × d` input given `∂L/∂pooled`.
pub fn ac_backward(
    e: &Tensor,
    trace: &AcTrace,
    params: &AcParams,
    upstream: &[f64],
) -> (AcParams, Tensor) {
    let d = e.cols();
    let t = params.hidden();
    let mut grad = params.zeros_like();
    let mut d_e = Tensor::zeros(e.shape());

    let d_weights: Vec<f64> = trace.pairs.iter().map(|p| dot(&p.phi, upstream)).collect();
    let d_logits = softmax_backward(&trace.weights, &d_weights);

    let mut d_phi = vec![0.0; d];
    let mut d_u = vec![0.0; t];
    for ((p, u), (&w, &g_logit)) in trace
        .pairs
        .iter()
        .zip(&trace.pre)
        .zip(trace.weights.iter().zip(&d_logits))
    {
        d_phi
            .iter_mut()
            .zip(upstream)
            .for_each(|(dp, g)| *dp = w * g);
        for k in 0..t {
            let active = u[k] > 0.0;
            if active {
                grad.projection.data_mut()[k] += g_logit * u[k];
            }
            d_u[k] = if active {
                g_logit * params.projection.data()[k]
            } else {
                0.0
            };
        }
        for (k, &duk) in d_u.iter().enumerate() {
            if duk == 0.0 {
                continue;
            }
            grad.bias.data_mut()[k] += duk;
            axpy(duk, &p.phi, grad.weight.row_mut(k));
            axpy(duk, params.weight.row(k), &mut d_phi);
        }
        let (ri, rj) = (e.row(p.j).to_vec(), e.row(p.i).to_vec());
        d_e.row_mut(p.i)
            .iter_mut()
            .zip(d_phi.iter().zip(&ri))
            .for_each(|(de, (dp, ej))| *de += dp * ej);
        d_e.row_mut(p.j)
            .iter_mut()
            .zip(d_phi.iter().zip(&rj))
            .for_each(|(de, (dp, ei))| *de += dp * ei);
    }
    (grad, d_e)
}

#[derive(Debug, Clone)]
pub struct MhsaTrace {
    e: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Row-stochastic `n × n` attention matrix per head.
    pub attention: Vec<Vec<f64>>,
    concat: Vec<f64>,
    pre: Vec<f64>,
}

/// Self-attention across field rows; returns the flattened `n·d` representation.
pub fn mhsa_forward(e: &Tensor, params: &MhsaParams) -> Result<(Tensor, MhsaTrace)> {
    let n = e.rows();
    let d = params.dim();
    if n == 0 || e.cols() != d {
        return Err(Error::dim(format!(
            "self-attention input {:?} does not match width {d}",
            e.shape()
        )));
    }
    let da = params.attn_dim();
    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let project = |w: &Tensor| {
        let mut out = vec![0.0; n * da];
        matmul_into(e.data(), w.data(), &mut out, n, d, da);
        out
    };
    let q = project(&params.query);
    let k = project(&params.key);
    let v = project(&params.value);

    let mut concat = vec![0.0; n * da];
    let mut attention = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let cols = h * dk..(h + 1) * dk;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q[i * da..][cols.clone()];
            let scores: Vec<f64> = (0..n)
                .map(|j| dot(qi, &k[j * da..][cols.clone()]) * scale)
                .collect();
            let row = softmax_slice(&scores);
            let out = &mut concat[i * da..][cols.clone()];
            for (j, &aij) in row.iter().enumerate() {
                axpy(aij, &v[j * da..][cols.clone()], out);
            }
            a[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        attention.push(a);
    }

    let mut pre = vec![0.0; n * d];
    matmul_into(&concat, params.output.data(), &mut pre, n, da, d);
    matmul_into(e.data(), params.residual.data(), &mut pre, n, d, d);
    let out: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();

    Ok((
        Tensor::vector(out),
        MhsaTrace {
            e: e.clone(),
            q,
            k,
            v,
            attention,
            concat,
            pre,
        },
    ))
}

/// Gradients of the MHSA parameters and of the input given `∂L/∂S` (length `n·d`).
pub fn mhsa_backward(
    trace: &MhsaTrace,
    params: &MhsaParams,
    upstream: &[f64],
) -> (MhsaParams, Tensor) {
    let e = &trace.e;
    let n = e.rows();
    let d = params.dim();
    let da = params.attn_dim();
    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut grad = params.zeros_like();
    let mut d_e = vec![0.0; n * d];

    let d_pre: Vec<f64> = trace
        .pre
        .iter()
        .zip(upstream)
        .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
        .collect();

    matmul_tn_into(&trace.concat, &d_pre, grad.output.data_mut(), n, da, d);
    matmul_tn_into(e.data(), &d_pre, grad.residual.data_mut(), n, d, d);
    matmul_nt_into(&d_pre, params.residual.data(), &mut d_e, n, d, d);
    let mut d_concat = vec![0.0; n * da];
    matmul_nt_into(&d_pre, params.output.data(), &mut d_concat, n, d, da);

    let mut d_q = vec![0.0; n * da];
    let mut d_k = vec![0.0; n * da];
    let mut d_v = vec![0.0; n * da];
    for (h, a) in trace.attention.iter().enumerate() {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..n {
            let d_out = &d_concat[i * da..][cols.clone()];
            let row = &a[i * n..(i + 1) * n];
            let d_row: Vec<f64> = (0..n)
                .map(|j| dot(d_out, &trace.v[j * da..][cols.clone()]))
                .collect();
            for (j, &aij) in row.iter().enumerate() {
                axpy(aij, d_out, &mut d_v[j * da..][cols.clone()]);
            }
            let d_scores = softmax_backward(row, &d_row);
            for (j, &ds) in d_scores.iter().enumerate() {
                let ds = ds * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = trace.k[j * da..][cols.clone()].to_vec();
                axpy(ds, &kj, &mut d_q[i * da..][cols.clone()]);
                let qi = trace.q[i * da..][cols.clone()].to_vec();
                axpy(ds, &qi, &mut d_k[j * da..][cols.clone()]);
            }
        }
    }

    for (dw, w, dx) in [
        (&mut grad.query, &params.query, &d_q),
        (&mut grad.key, &params.key, &d_k),
        (&mut grad.value, &params.value, &d_v),
    ] {
        matmul_tn_into(e.data(), dx, dw.data_mut(), n, d, da);
        matmul_nt_into(dx, w.data(), &mut d_e, n, da, d);
    }

    let d_e = Tensor::from_vec(e.shape(), d_e).expect("shape matches input");
    (grad, d_e)
}

/// Outputs of both branches for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    /// Flattened `n × d` internal representation.
    pub s_mhsa: Vec<f64>,
    /// Pooled `d`-vector cross representation.
    pub p_ac: Vec<f64>,
    /// Attention weight of each crossing, lexicographic pair order.
    pub pair_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub mhsa: MhsaTrace,
    pub ac: AcTrace,
}

#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub mhsa: MhsaParams,
    pub ac: AcParams,
    pub input: Tensor,
}

pub fn branch_forward(
    e: &Tensor,
    mhsa: &MhsaParams,
    ac: &AcParams,
) -> Result<(BranchOutputs, BranchTrace)> {
    let (s, mhsa_trace) = mhsa_forward(e, mhsa)?;
    let (out, ac_trace) = ac_attention(cross_pairs(e)?, ac)?;
    Ok((
        BranchOutputs {
            s_mhsa: s.into_data(),
            p_ac: out.pooled,
            pair_weights: out.weights,
        },
        BranchTrace {
            mhsa: mhsa_trace,
            ac: ac_trace,
        },
    ))
}

pub fn branch_backward(
    trace: &BranchTrace,
    mhsa: &MhsaParams,
    ac: &AcParams,
    d_s: &[f64],
    d_p: &[f64],
) -> Result<BranchGrads> {
    let e = &trace.mhsa.e;
    if d_s.len() != e.len() || d_p.len() != e.cols() {
        return Err(Error::Internal(format!(
            "branch gradients of length {}/{} for input {:?}",
            d_s.len(),
            d_p.len(),
            e.shape()
        )));
    }
    let (g_mhsa, mut d_e) = mhsa_backward(&trace.mhsa, mhsa, d_s);
    let (g_ac, d_e_ac) = ac_backward(e, &trace.ac, ac, d_p);
    d_e.add_assign(&d_e_ac)?;
    Ok(BranchGrads {
        mhsa: g_mhsa,
        ac: g_ac,
        input: d_e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn random_setup(
        rng: &mut Rng,
        n: usize,
        d: usize,
        heads: usize,
    ) -> (Tensor, MhsaParams, AcParams) {
        let e = Tensor::randn(&[n, d], 1.0, rng);
        let mhsa = MhsaParams::new(d, d, heads, rng).unwrap();
        let mut ac = AcParams::new(d, 5, rng).unwrap();
        ac.bias = Tensor::randn(&[5], 0.5, rng);
        (e, mhsa, ac)
    }

    #[test]
    fn pair_count_matches_enumeration() {
        for n in 2..=20 {
            let e = Tensor::zeros(&[n, 2]);
            let pairs = cross_pairs(&e).unwrap();
            let brute = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i < j)
                .count();
            assert_eq!(pairs.len(), brute);
            assert_eq!(pairs.len(), n * (n - 1) / 2);
        }
        assert!(cross_pairs(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn crossing_cases() {
        let e = Tensor::matrix(4, 2, vec![1.0, 2.0, 0.0, 0.0, 3.0, -1.0, 3.0, -1.0]).unwrap();
        let pairs = cross_pairs(&e).unwrap();
        assert_eq!(pairs.len(), 6);
        for p in &pairs {
            if p.i == 1 || p.j == 1 {
                assert!(p.phi.iter().all(|&v| v == 0.0));
            }
        }
        let p23 = pairs.iter().find(|p| (p.i, p.j) == (2, 3)).unwrap();
        assert_eq!(p23.phi, vec![9.0, 1.0]);
        let order: Vec<_> = pairs.iter().map(|p| (p.i, p.j)).collect();
        assert_eq!(order, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn identical_crossings_give_uniform_weights() {
        let mut rng = Rng::new(4);
        let e = Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let ac = AcParams::new(2, 4, &mut rng).unwrap();
        let (out, _) = ac_attention(cross_pairs(&e).unwrap(), &ac).unwrap();
        for w in &out.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(out.pooled.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_projection_gives_uniform_weights() {
        let mut rng = Rng::new(5);
        let e = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut ac = AcParams::new(3, 4, &mut rng).unwrap();
        ac.projection.fill(0.0);
        let (out, _) = ac_attention(cross_pairs(&e).unwrap(), &ac).unwrap();
        assert!(out.weights.iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn pooled_matches_direct_summation() {
        let mut rng = Rng::new(6);
        let (e, _, ac) = random_setup(&mut rng, 3, 4, 1);
        let (out, _) = ac_attention(cross_pairs(&e).unwrap(), &ac).unwrap();

        // Direct evaluation of the scoring network and normalization.
        let mut logits = Vec::new();
        let mut phis = Vec::new();
        for i in 0..3 {
            for j in i + 1..3 {
                let phi: Vec<f64> = (0..4).map(|c| e.at(i, c) * e.at(j, c)).collect();
                let mut logit = 0.0;
                for k in 0..5 {
                    let mut u = ac.bias.data()[k];
                    for c in 0..4 {
                        u += ac.weight.at(k, c) * phi[c];
                    }
                    logit += ac.projection.data()[k] * u.max(0.0);
                }
                logits.push(logit);
                phis.push(phi);
            }
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..4 {
            let expected: f64 = logits
                .iter()
                .zip(&phis)
                .map(|(l, p)| l.exp() / z * p[c])
                .sum();
            assert!((out.pooled[c] - expected).abs() < 1e-12);
        }
        assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn single_field_attention_is_identity() {
        let mut rng = Rng::new(7);
        let e = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let p = MhsaParams::new(4, 4, 2, &mut rng).unwrap();
        let (s, trace) = mhsa_forward(&e, &p).unwrap();
        for a in &trace.attention {
            assert_eq!(a, &vec![1.0]);
        }
        let v = crate::numerics::matmul(&e, &p.value).unwrap();
        let combined = crate::numerics::matmul(&v, &p.output).unwrap();
        let res = crate::numerics::matmul(&e, &p.residual).unwrap();
        for c in 0..4 {
            let expected = (combined.data()[c] + res.data()[c]).max(0.0);
            assert!((s.data()[c] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_rows_give_uniform_attention() {
        let mut rng = Rng::new(8);
        let row = Tensor::randn(&[3], 1.0, &mut rng);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(row.data());
        }
        let e = Tensor::matrix(4, 3, data).unwrap();
        let p = MhsaParams::new(3, 3, 1, &mut rng).unwrap();
        let (_, trace) = mhsa_forward(&e, &p).unwrap();
        assert!(trace.attention[0].iter().all(|a| (a - 0.25).abs() < 1e-15));
    }

    /// Straight per-head loop over explicit index arithmetic.
    fn mhsa_oracle(e: &Tensor, p: &MhsaParams) -> Vec<f64> {
        let (n, d, da, dk) = (e.rows(), p.dim(), p.attn_dim(), p.head_dim());
        let mut out = vec![0.0; n * d];
        let mut heads_out = vec![vec![0.0; da]; n];
        for h in 0..p.heads {
            let proj = |w: &Tensor, i: usize, c: usize| -> f64 {
                (0..d).map(|r| e.at(i, r) * w.at(r, h * dk + c)).sum()
            };
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dk)
                            .map(|c| proj(&p.query, i, c) * proj(&p.key, j, c))
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..dk {
                    heads_out[i][h * dk + c] = (0..n)
                        .map(|j| scores[j].exp() / z * proj(&p.value, j, c))
                        .sum();
                }
            }
        }
        for i in 0..n {
            for c in 0..d {
                let mut z = 0.0;
                for a in 0..da {
                    z += heads_out[i][a] * p.output.at(a, c);
                }
                for r in 0..d {
                    z += e.at(i, r) * p.residual.at(r, c);
                }
                out[i * d + c] = z.max(0.0);
            }
        }
        out
    }

    #[test]
    fn mhsa_matches_direct_oracle() {
        let mut rng = Rng::new(9);
        let e = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let p = MhsaParams::new(4, 4, 2, &mut rng).unwrap();
        let (s, _) = mhsa_forward(&e, &p).unwrap();
        for (a, b) in s.data().iter().zip(mhsa_oracle(&e, &p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(10);
        let (e, mhsa, ac) = random_setup(&mut rng, 4, 4, 2);
        let (_, trace) = branch_forward(&e, &mhsa, &ac).unwrap();
        let g = branch_backward(&trace, &mhsa, &ac, &[0.0; 16], &[0.0; 4]).unwrap();
        assert!(g.mhsa.flatten().iter().all(|&v| v == 0.0));
        assert!(g.ac.flatten().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pair_gradient_is_product_rule() {
        let mut rng = Rng::new(11);
        let e = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let ac = AcParams::new(3, 4, &mut rng).unwrap();
        let (out, trace) = ac_attention(cross_pairs(&e).unwrap(), &ac).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        let up = [0.5, -1.0, 2.0];
        let (g, d_e) = ac_backward(&e, &trace, &ac, &up);
        for c in 0..3 {
            assert!((d_e.at(0, c) - up[c] * e.at(1, c)).abs() < 1e-15);
            assert!((d_e.at(1, c) - up[c] * e.at(0, c)).abs() < 1e-15);
        }
        // With one pair the weight is constant, so the scoring network gets no gradient.
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let mut rng = Rng::new(12);
        for trial in 0..50 {
            let n = 2 + rng.below(5);
            let heads = 1 + rng.below(2);
            let d = heads * (1 + rng.below(4));
            let (e, mhsa, ac) = random_setup(&mut rng, n, d, heads);
            let ws = Tensor::randn(&[n * d], 1.0, &mut rng);
            let wp = Tensor::randn(&[d], 1.0, &mut rng);
            let objective = |e: &Tensor, m: &MhsaParams, a: &AcParams| {
                let (o, _) = branch_forward(e, m, a).unwrap();
                dot(&o.s_mhsa, ws.data()) + dot(&o.p_ac, wp.data())
            };
            let (_, trace) = branch_forward(&e, &mhsa, &ac).unwrap();
            let g = branch_backward(&trace, &mhsa, &ac, ws.data(), wp.data()).unwrap();

            let check = |ana: &[f64], num: &Tensor, what: &str| {
                for (a, n) in ana.iter().zip(num.data()) {
                    assert!(
                        relative_error(*a, *n) <= 1e-4,
                        "trial {trial} {what}: {a} vs {n}"
                    );
                }
            };
            let num = finite_diff_grad(|t| objective(t, &mhsa, &ac), &e, 1e-5).unwrap();
            check(g.input.data(), &num, "input");

            let flat = Tensor::vector(mhsa.flatten());
            let num = finite_diff_grad(
                |t| {
                    let mut m = mhsa.clone();
                    m.assign_flat(t.data());
                    objective(&e, &m, &ac)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            check(&g.mhsa.flatten(), &num, "mhsa");

            let flat = Tensor::vector(ac.flatten());
            let num = finite_diff_grad(
                |t| {
                    let mut a = ac.clone();
                    a.assign_flat(t.data());
                    objective(&e, &mhsa, &a)
                },
                &flat,
                1e-5,
            )
            .unwrap();
            check(&g.ac.flatten(), &num, "ac");
        }
    }

    #[test]
    fn pooled_crossing_is_invariant_under_field_permutation() {
        let mut rng = Rng::new(13);
        let e = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let ac = AcParams::new(3, 4, &mut rng).unwrap();
        let (base, _) = ac_attention(cross_pairs(&e).unwrap(), &ac).unwrap();

        let perm = [3, 0, 4, 1, 2];
        let mut data = Vec::new();
        for &p in &perm {
            data.extend_from_slice(e.row(p));
        }
        let permuted = Tensor::matrix(5, 3, data).unwrap();
        let (out, _) = ac_attention(cross_pairs(&permuted).unwrap(), &ac).unwrap();

        // Reindex pair weights back to the original field labels.
        let pairs = cross_pairs(&permuted).unwrap();
        for (p, w) in pairs.iter().zip(&out.weights) {
            let (a, b) = (perm[p.i].min(perm[p.j]), perm[p.i].max(perm[p.j]));
            let k = cross_pairs(&e)
                .unwrap()
                .iter()
                .position(|q| (q.i, q.j) == (a, b))
                .unwrap();
            assert!((w - base.weights[k]).abs() < 1e-15);
        }
        for (x, y) in out.pooled.iter().zip(&base.pooled) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_rows_permute_with_fields() {
        let mut rng = Rng::new(14);
        let e = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let p = MhsaParams::new(4, 4, 2, &mut rng).unwrap();
        let (s, _) = mhsa_forward(&e, &p).unwrap();
        let perm = [2, 0, 3, 1];
        let mut data = Vec::new();
        for &r in &perm {
            data.extend_from_slice(e.row(r));
        }
        let (sp, _) = mhsa_forward(&Tensor::matrix(4, 4, data).unwrap(), &p).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((sp.data()[new_row * 4 + c] - s.data()[old_row * 4 + c]).abs() < 1e-12);
            }
        }
    }
}

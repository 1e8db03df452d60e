//! Training losses and the user-conditioned modality fusion.
//!
//! * `logloss`: clamped binary cross-entropy, natural log.
//! * `similarity_loss`: half mean squared distance between the public-domain
//!   audio and visual features of each item.
//! * `difference_loss`: base-2 KL divergence between the softmax distributions
//!   of private and public features, summed over the audio and visual
//!   modalities.
//! * `fuse_modalities`: a shared MLP scores `concat(user, modality)`; a softmax
//!   over modalities weights the modality vectors into one fused vector.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax_backward, softmax_slice, Parameters, Rng, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;
pub const KL_FLOOR: f64 = 1e-12;

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::domain("logloss of an empty sequence"));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| example_logloss(p, y))
        .sum();
    Ok(total / predictions.len() as f64)
}

pub fn example_logloss(prediction: f64, label: u8) -> f64 {
    let p = prediction.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Unclamped cross-entropy of `sigmoid(logit)`, stable for any logit.
///
/// This is the objective the optimizer differentiates; its gradient with
/// respect to the logit is `sigmoid(logit) - label`.
pub fn logistic_loss(logit: f64, label: u8) -> f64 {
    crate::numerics::softplus(logit) - f64::from(label) * logit
}

fn check_dims(what: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "{what}: dimension mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `(1/2N) Σ_n ‖a_n − v_n‖²` over the public-domain audio/visual pairs.
pub fn similarity_loss(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("similarity loss needs at least one pair"));
    }
    let mut total = 0.0;
    for (a, v) in pairs {
        check_dims("similarity loss", a, v)?;
        total += a
            .iter()
            .zip(*v)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(total / (2.0 * pairs.len() as f64))
}

/// Gradient of [`similarity_loss`] with respect to each `(a_n, v_n)`.
pub fn similarity_loss_grad(pairs: &[(&[f64], &[f64])]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let scale = 1.0 / pairs.len().max(1) as f64;
    pairs
        .iter()
        .map(|(a, v)| {
            check_dims("similarity loss", a, v)?;
            let da: Vec<f64> = a.iter().zip(*v).map(|(x, y)| scale * (x - y)).collect();
            let dv = da.iter().map(|g| -g).collect();
            Ok((da, dv))
        })
        .collect()
}

/// `Σ P log₂(P/Q)` with `P = softmax(private)`, `Q = softmax(public)`.
pub fn kl_divergence_bits(private: &[f64], public: &[f64]) -> Result<f64> {
    check_dims("difference loss", private, public)?;
    if private.is_empty() {
        return Err(Error::domain("difference loss of empty features"));
    }
    let p = softmax_slice(private);
    let q = softmax_slice(public);
    Ok(p.iter()
        .zip(&q)
        .map(|(&pk, &qk)| pk * (pk.max(KL_FLOOR) / qk.max(KL_FLOOR)).log2())
        .sum())
}

fn kl_divergence_bits_grad(private: &[f64], public: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = softmax_slice(private);
    let q = softmax_slice(public);
    let ln2 = std::f64::consts::LN_2;
    let dp: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&pk, &qk)| {
            let own = if pk > KL_FLOOR { 1.0 } else { 0.0 };
            (pk.max(KL_FLOOR).ln() - qk.max(KL_FLOOR).ln() + own) / ln2
        })
        .collect();
    let dq: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&pk, &qk)| if qk > KL_FLOOR { -pk / qk / ln2 } else { 0.0 })
        .collect();
    (softmax_backward(&p, &dp), softmax_backward(&q, &dq))
}

/// Private/public feature vectors of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub public_audio: Vec<f64>,
    pub public_visual: Vec<f64>,
    pub private_audio: Vec<f64>,
    pub private_visual: Vec<f64>,
}

impl ModalityFeatures {
    pub fn zeros(dim: usize) -> Self {
        ModalityFeatures {
            public_audio: vec![0.0; dim],
            public_visual: vec![0.0; dim],
            private_audio: vec![0.0; dim],
            private_visual: vec![0.0; dim],
        }
    }
}

/// KL difference loss summed over the audio and visual modalities.
pub fn difference_loss(f: &ModalityFeatures) -> Result<f64> {
    Ok(kl_divergence_bits(&f.private_audio, &f.public_audio)?
        + kl_divergence_bits(&f.private_visual, &f.public_visual)?)
}

/// Gradient of [`difference_loss`], laid out like the input.
pub fn difference_loss_grad(f: &ModalityFeatures) -> Result<ModalityFeatures> {
    check_dims("difference loss", &f.private_audio, &f.public_audio)?;
    check_dims("difference loss", &f.private_visual, &f.public_visual)?;
    let (pa, sa) = kl_divergence_bits_grad(&f.private_audio, &f.public_audio);
    let (pv, sv) = kl_divergence_bits_grad(&f.private_visual, &f.public_visual);
    Ok(ModalityFeatures {
        public_audio: sa,
        public_visual: sv,
        private_audio: pa,
        private_visual: pv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    File(String),
    Synthetic { seed: u64 },
}

/// Precomputed modality features keyed by raw item id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatureSet {
    pub dim: usize,
    pub items: BTreeMap<String, ModalityFeatures>,
    pub source: FeatureSource,
}

const TAGS: [&str; 4] = ["sa", "sv", "pa", "pv"];

impl ModalityFeatureSet {
    pub fn get(&self, item: &str) -> Option<&ModalityFeatures> {
        self.items.get(item)
    }

    /// Reads `item_id tag v1,…,v_dm` lines; every item needs all of `sa sv pa pv`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut partial: BTreeMap<String, [Option<Vec<f64>>; 4]> = BTreeMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            let err = |msg: String| Error::Parse {
                file: path.to_path_buf(),
                line: no,
                msg,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(item), Some(tag), Some(values), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err("expected `item_id tag v1,...,vd`".into()));
            };
            let slot = TAGS
                .iter()
                .position(|t| *t == tag)
                .ok_or_else(|| err(format!("unknown tag {tag:?}")))?;
            let values = values
                .split(',')
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("non-numeric or non-finite feature value".into()))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(err(format!(
                        "feature width {} differs from {d}",
                        values.len()
                    )))
                }
                _ => {}
            }
            let entry = partial.entry(item.to_string()).or_default();
            if entry[slot].is_some() {
                return Err(err(format!("duplicate {tag} vector for item {item}")));
            }
            entry[slot] = Some(values);
        }
        let dim = dim.unwrap_or(0);
        let mut items = BTreeMap::new();
        for (item, slots) in partial {
            let [sa, sv, pa, pv] = slots;
            match (sa, sv, pa, pv) {
                (Some(sa), Some(sv), Some(pa), Some(pv)) => {
                    items.insert(
                        item,
                        ModalityFeatures {
                            public_audio: sa,
                            public_visual: sv,
                            private_audio: pa,
                            private_visual: pv,
                        },
                    );
                }
                _ => {
                    return Err(Error::domain(format!(
                        "item {item} is missing one of the sa/sv/pa/pv vectors"
                    )))
                }
            }
        }
        Ok(ModalityFeatureSet {
            dim,
            items,
            source: FeatureSource::File(path.display().to_string()),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (item, f) in &self.items {
            for (tag, v) in TAGS.iter().zip([
                &f.public_audio,
                &f.public_visual,
                &f.private_audio,
                &f.private_visual,
            ]) {
                let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(out, "{item} {tag} {}", vals.join(","));
            }
        }
        out
    }

    /// Random features per item: public vectors share a per-item component, private ones don't.
    pub fn synthetic<'a>(items: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut map = BTreeMap::new();
        let mut keys: Vec<&str> = items.into_iter().collect();
        keys.sort_unstable();
        keys.dedup();
        for key in keys {
            let shared: Vec<f64> = (0..dim).map(|_| rng.normal(1.0)).collect();
            let mut noisy =
                |base: &[f64]| -> Vec<f64> { base.iter().map(|b| b + rng.normal(0.3)).collect() };
            let public_audio = noisy(&shared);
            let public_visual = noisy(&shared);
            let zero = vec![0.0; dim];
            let private_audio = noisy(&zero);
            let private_visual = noisy(&zero);
            map.insert(
                key.to_string(),
                ModalityFeatures {
                    public_audio,
                    public_visual,
                    private_audio,
                    private_visual,
                },
            );
        }
        ModalityFeatureSet {
            dim,
            items: map,
            source: FeatureSource::Synthetic { seed },
        }
    }
}

/// Shared scoring MLP for modality fusion: `concat(user, m) → hidden (ReLU) → scalar`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `hidden × (user_dim + modality_dim)`
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    /// Length 1; shifts every modality equally, so it never changes the weights.
    pub b2: Tensor,
}

pub const FUSION_HIDDEN: usize = 32;

impl FusionParams {
    pub fn new(user_dim: usize, modality_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let input = user_dim + modality_dim;
        FusionParams {
            w1: Tensor::randn(&[hidden, input], (2.0 / input as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden], (1.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[1]),
        }
    }

    fn input_dim(&self) -> usize {
        self.w1.cols()
    }
}

impl Parameters for FusionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub fused: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    weights: Vec<f64>,
    modalities: Vec<Vec<f64>>,
    user_dim: usize,
}

pub fn fuse_modalities(
    user: &[f64],
    modalities: &[&[f64]],
    params: &FusionParams,
) -> Result<(FusionOutput, FusionTrace)> {
    let Some(first) = modalities.first() else {
        return Err(Error::domain("fusion needs at least one modality"));
    };
    let dm = first.len();
    if modalities.iter().any(|m| m.len() != dm) || user.len() + dm != params.input_dim() {
        return Err(Error::domain(format!(
            "fusion expects user+modality width {}, got {} + {}",
            params.input_dim(),
            user.len(),
            dm
        )));
    }
    let hidden = params.w1.rows();
    let mut inputs = Vec::with_capacity(modalities.len());
    let mut pre = Vec::with_capacity(modalities.len());
    let mut logits = Vec::with_capacity(modalities.len());
    for m in modalities {
        let mut x = user.to_vec();
        x.extend_from_slice(m);
        let u: Vec<f64> = (0..hidden)
            .map(|k| dot(params.w1.row(k), &x) + params.b1.data()[k])
            .collect();
        let logit = u
            .iter()
            .zip(params.w2.data())
            .map(|(uk, wk)| uk.max(0.0) * wk)
            .sum::<f64>()
            + params.b2.data()[0];
        logits.push(logit);
        inputs.push(x);
        pre.push(u);
    }
    let weights = softmax_slice(&logits);
    let mut fused = vec![0.0; dm];
    for (w, m) in weights.iter().zip(modalities) {
        axpy(*w, m, &mut fused);
    }
    Ok((
        FusionOutput {
            fused,
            weights: weights.clone(),
        },
        FusionTrace {
            inputs,
            pre,
            weights,
            modalities: modalities.iter().map(|m| m.to_vec()).collect(),
            user_dim: user.len(),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub params: FusionParams,
    pub user: Vec<f64>,
    pub modalities: Vec<Vec<f64>>,
}

pub fn fusion_backward(
    trace: &FusionTrace,
    params: &FusionParams,
    upstream: &[f64],
) -> FusionGrads {
    let mut grad = params.zeros_like();
    let mut d_user = vec![0.0; trace.user_dim];
    let d_weights: Vec<f64> = trace.modalities.iter().map(|m| dot(m, upstream)).collect();
    let d_logits = softmax_backward(&trace.weights, &d_weights);
    let mut d_mods = Vec::with_capacity(trace.modalities.len());
    for (k, ((x, u), &g)) in trace
        .inputs
        .iter()
        .zip(&trace.pre)
        .zip(&d_logits)
        .enumerate()
    {
        let mut d_x = vec![0.0; x.len()];
        grad.b2.data_mut()[0] += g;
        for (h, &uh) in u.iter().enumerate() {
            if uh <= 0.0 {
                continue;
            }
            grad.w2.data_mut()[h] += g * uh;
            let du = g * params.w2.data()[h];
            grad.b1.data_mut()[h] += du;
            axpy(du, x, grad.w1.row_mut(h));
            axpy(du, params.w1.row(h), &mut d_x);
        }
        axpy(1.0, &d_x[..trace.user_dim], &mut d_user);
        let mut d_m = d_x[trace.user_dim..].to_vec();
        axpy(trace.weights[k], upstream, &mut d_m);
        d_mods.push(d_m);
    }
    FusionGrads {
        params: grad,
        user: d_user,
        modalities: d_mods,
    }
}

use super::mlp::{Mlp, MlpTrace};
use super::{ModelConfig, ModelGrads};
use crate::data::{EncodedExample, FeatureSchema};
use crate::embedding::{embed, embed_backward, EmbedTrace, EmbeddingParams};
use crate::error::Result;
use crate::numerics::{Rng, Tensor};

/// `Σ_{i<j} ⟨e_i, e_j⟩` via `½ Σ_k [(Σ_i e_ik)² − Σ_i e_ik²]`.
pub fn fm_second_order(e: &Tensor) -> f64 {
    let d = e.cols();
    let mut total = 0.0;
    for k in 0..d {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..e.rows() {
            let v = e.at(i, k);
            sum += v;
            sum_sq += v * v;
        }
        total += sum * sum - sum_sq;
    }
    0.5 * total
}

/// Explicit pairwise form of [`fm_second_order`].
pub fn fm_pairwise_oracle(e: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..e.rows() {
        for j in i + 1..e.rows() {
            total += e
                .row(i)
                .iter()
                .zip(e.row(j))
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
    total
}

/// Factorization machine over field embeddings: bias + per-value weights + pairwise inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct FmModel {
    pub embedding: EmbeddingParams,
    pub linear: EmbeddingParams,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct FmTrace {
    embed: EmbedTrace,
    linear: EmbedTrace,
    e: Tensor,
}

impl FmModel {
    pub fn new(config: &ModelConfig, schema: &FeatureSchema, rng: &mut Rng) -> Self {
        FmModel {
            embedding: EmbeddingParams::new(schema, config.embed_dim, rng),
            linear: EmbeddingParams::new(schema, 1, rng),
            bias: Tensor::zeros(&[1]),
        }
    }

    fn tables(&self) -> usize {
        2 * self.embedding.fields()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.embedding.tables.iter().collect();
        v.extend(self.linear.tables.iter());
        v.push(&self.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.embedding.tables.iter_mut().collect();
        v.extend(self.linear.tables.iter_mut());
        v.push(&mut self.bias);
        v
    }

    pub fn forward(&self, example: &EncodedExample) -> Result<(f64, FmTrace)> {
        let (e, embed_trace) = embed(example, &self.embedding)?;
        let (w, linear) = embed(example, &self.linear)?;
        let logit = self.bias.data()[0] + w.data().iter().sum::<f64>() + fm_second_order(&e);
        Ok((
            logit,
            FmTrace {
                embed: embed_trace,
                linear,
                e,
            },
        ))
    }

    /// Embedding-output gradient plus the sparse table gradients.
    fn backward_parts(
        &self,
        trace: &FmTrace,
        d_logit: f64,
        d_e_extra: Option<&[f64]>,
    ) -> Result<ModelGrads> {
        let (n, d) = (trace.e.rows(), trace.e.cols());
        let mut sums = vec![0.0; d];
        for i in 0..n {
            for (s, v) in sums.iter_mut().zip(trace.e.row(i)) {
                *s += v;
            }
        }
        let mut d_e = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for k in 0..d {
                d_e.row_mut(i)[k] = d_logit * (sums[k] - trace.e.at(i, k));
            }
        }
        if let Some(extra) = d_e_extra {
            for (g, x) in d_e.data_mut().iter_mut().zip(extra) {
                *g += x;
            }
        }
        let mut grads = ModelGrads {
            tables: self.tables(),
            sparse: Vec::new(),
            dense: Vec::new(),
        };
        grads.push_sparse(0, embed_backward(&trace.embed, &d_e)?);
        let ones = Tensor::from_vec(&[n, 1], vec![d_logit; n])?;
        grads.push_sparse(n, embed_backward(&trace.linear, &ones)?);
        grads.dense.push(Tensor::vector(vec![d_logit]));
        Ok(grads)
    }

    pub fn backward(&self, trace: &FmTrace, d_logit: f64) -> Result<ModelGrads> {
        self.backward_parts(trace, d_logit, None)
    }
}

/// FM plus an MLP over the flattened field embeddings; both share the embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFmModel {
    pub fm: FmModel,
    pub deep: Mlp,
}

#[derive(Debug, Clone)]
pub struct DeepFmTrace {
    fm: FmTrace,
    deep: MlpTrace,
}

impl DeepFmModel {
    pub fn new(config: &ModelConfig, schema: &FeatureSchema, rng: &mut Rng) -> Self {
        let fm = FmModel::new(config, schema, rng);
        let deep = Mlp::new(schema.len() * config.embed_dim, &config.hidden, rng);
        DeepFmModel { fm, deep }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.fm.tensors();
        v.extend(self.deep.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.fm.tensors_mut();
        v.extend(self.deep.tensors_mut());
        v
    }

    pub fn forward(&self, example: &EncodedExample) -> Result<(f64, DeepFmTrace)> {
        let (fm_logit, fm) = self.fm.forward(example)?;
        let (deep_logit, deep) = self.deep.forward(fm.e.data())?;
        Ok((fm_logit + deep_logit, DeepFmTrace { fm, deep }))
    }

    pub fn backward(&self, trace: &DeepFmTrace, d_logit: f64) -> Result<ModelGrads> {
        let (deep_grads, d_input) = self.deep.backward(&trace.deep, d_logit);
        let mut grads = self.fm.backward_parts(&trace.fm, d_logit, Some(&d_input))?;
        grads.dense.extend(deep_grads);
        Ok(grads)
    }
}

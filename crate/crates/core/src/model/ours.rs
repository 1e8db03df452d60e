use super::mlp::{Mlp, MlpTrace};
use super::{Mode, ModelConfig, ModelGrads};
use crate::data::{EncodedExample, FeatureSchema};
use crate::embedding::{embed, embed_backward, EmbedTrace, EmbeddingParams};
use crate::error::{Error, Result};
use crate::interaction::{branch_backward, branch_forward, AcParams, BranchTrace, MhsaParams};
use crate::losses::{
    difference_loss, difference_loss_grad, fuse_modalities, fusion_backward, FusionParams,
    FusionTrace, ModalityFeatures,
};
use crate::numerics::{axpy, dot, matmul_into, Parameters, Rng, Tensor};

/// Learned maps from precomputed modality features into the embedding space,
/// plus the user-conditioned fusion network.
///
/// The public-domain projection is shared by audio and visual features; each
/// modality has its own private-domain projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    /// `d × d_m`
    pub public: Tensor,
    pub private_audio: Tensor,
    pub private_visual: Tensor,
    pub fusion: FusionParams,
}

impl ModalityParams {
    fn new(dim: usize, feature_dim: usize, fusion_hidden: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / feature_dim.max(1) as f64).sqrt();
        ModalityParams {
            public: Tensor::randn(&[dim, feature_dim], std, rng),
            private_audio: Tensor::randn(&[dim, feature_dim], std, rng),
            private_visual: Tensor::randn(&[dim, feature_dim], std, rng),
            fusion: FusionParams::new(dim, dim, fusion_hidden, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.public.cols()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.public, &self.private_audio, &self.private_visual];
        v.extend(self.fusion.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.public,
            &mut self.private_audio,
            &mut self.private_visual,
        ];
        v.extend(self.fusion.tensors_mut());
        v
    }
}

fn project(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), x)).collect()
}

/// Two-branch attention model with shallow and deep heads.
#[derive(Debug, Clone, PartialEq)]
pub struct OursModel {
    pub mode: Mode,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub user_field: Option<usize>,
    pub embedding: EmbeddingParams,
    /// Optional first-order term: one scalar per raw feature value.
    pub linear: Option<EmbeddingParams>,
    pub mhsa: MhsaParams,
    pub ac: AcParams,
    /// Shallow weight on the flattened self-attention output.
    pub w_mhsa: Tensor,
    /// Shallow weight on the pooled crossing vector.
    pub w_ac: Tensor,
    pub bias: Tensor,
    pub deep: Mlp,
    pub modality: Option<ModalityParams>,
}

#[derive(Debug, Clone)]
struct ModalityTrace {
    raw: ModalityFeatures,
    projected: ModalityFeatures,
    fusion: FusionTrace,
}

#[derive(Debug, Clone)]
pub struct OursTrace {
    embed: EmbedTrace,
    linear: Option<EmbedTrace>,
    branch: BranchTrace,
    s_mhsa: Vec<f64>,
    p_ac: Vec<f64>,
    pub pair_weights: Vec<f64>,
    deep: Option<MlpTrace>,
    modality: Option<ModalityTrace>,
    pub similarity: f64,
    pub difference: f64,
}

impl OursModel {
    pub fn new(
        config: &ModelConfig,
        schema: &FeatureSchema,
        modality_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = config.embed_dim;
        if modality_dim.is_some() && schema.user_field.is_none() {
            return Err(Error::config(
                "modality fusion needs a user field in the schema",
            ));
        }
        let fields = schema.len() + usize::from(modality_dim.is_some());
        let embedding = EmbeddingParams::new(schema, d, rng);
        let linear = config
            .linear_term
            .then(|| EmbeddingParams::new(schema, 1, rng));
        let mhsa = MhsaParams::new(d, config.attention_width(), config.heads, rng)?;
        let ac = AcParams::new(d, config.attn_hidden, rng)?;
        let shallow_in = fields * d + d;
        let std = (1.0 / shallow_in as f64).sqrt();
        let w_mhsa = Tensor::randn(&[fields * d], std, rng);
        let w_ac = Tensor::randn(&[d], std, rng);
        let deep = Mlp::new(shallow_in, &config.hidden, rng);
        let modality = modality_dim.map(|dm| ModalityParams::new(d, dm, config.fusion_hidden, rng));
        Ok(OursModel {
            mode: config.mode,
            lambda_s: config.lambda_s,
            lambda_d: config.lambda_d,
            user_field: schema.user_field,
            embedding,
            linear,
            mhsa,
            ac,
            w_mhsa,
            w_ac,
            bias: Tensor::zeros(&[1]),
            deep,
            modality,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim
    }

    fn tables(&self) -> usize {
        self.embedding.fields() + self.linear.as_ref().map_or(0, |l| l.fields())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.embedding.tables.iter().collect();
        if let Some(l) = &self.linear {
            v.extend(l.tables.iter());
        }
        v.extend(self.mhsa.tensors());
        v.extend(self.ac.tensors());
        v.extend([&self.w_mhsa, &self.w_ac, &self.bias]);
        v.extend(self.deep.tensors());
        if let Some(m) = &self.modality {
            v.extend(m.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.embedding.tables.iter_mut().collect();
        if let Some(l) = &mut self.linear {
            v.extend(l.tables.iter_mut());
        }
        v.extend(self.mhsa.tensors_mut());
        v.extend(self.ac.tensors_mut());
        v.extend([&mut self.w_mhsa, &mut self.w_ac, &mut self.bias]);
        v.extend(self.deep.tensors_mut());
        if let Some(m) = &mut self.modality {
            v.extend(m.tensors_mut());
        }
        v
    }

    pub fn forward(
        &self,
        example: &EncodedExample,
        features: Option<&ModalityFeatures>,
    ) -> Result<(f64, OursTrace)> {
        let d = self.dim();
        let (e0, embed_trace) = embed(example, &self.embedding)?;

        let mut logit = 0.0;
        let linear = match &self.linear {
            Some(l) => {
                let (w, t) = embed(example, l)?;
                logit += w.data().iter().sum::<f64>();
                Some(t)
            }
            None => None,
        };

        let (e, modality, similarity, difference) = match &self.modality {
            None => (e0, None, 0.0, 0.0),
            Some(mp) => {
                let dm = mp.feature_dim();
                let zeros = ModalityFeatures::zeros(dm);
                let raw = features.unwrap_or(&zeros);
                for v in [
                    &raw.public_audio,
                    &raw.public_visual,
                    &raw.private_audio,
                    &raw.private_visual,
                ] {
                    if v.len() != dm {
                        return Err(Error::dim(format!(
                            "modality feature of width {} for a model expecting {dm}",
                            v.len()
                        )));
                    }
                }
                let projected = ModalityFeatures {
                    public_audio: project(&mp.public, &raw.public_audio),
                    public_visual: project(&mp.public, &raw.public_visual),
                    private_audio: project(&mp.private_audio, &raw.private_audio),
                    private_visual: project(&mp.private_visual, &raw.private_visual),
                };
                let audio: Vec<f64> = projected
                    .public_audio
                    .iter()
                    .zip(&projected.private_audio)
                    .map(|(a, b)| a + b)
                    .collect();
                let visual: Vec<f64> = projected
                    .public_visual
                    .iter()
                    .zip(&projected.private_visual)
                    .map(|(a, b)| a + b)
                    .collect();
                let user_field = self
                    .user_field
                    .ok_or_else(|| Error::Internal("no user field".into()))?;
                let (fused, fusion) =
                    fuse_modalities(e0.row(user_field), &[&audio, &visual], &mp.fusion)?;

                let similarity = 0.5
                    * projected
                        .public_audio
                        .iter()
                        .zip(&projected.public_visual)
                        .map(|(a, v)| (a - v) * (a - v))
                        .sum::<f64>();
                let difference = difference_loss(&projected)?;

                let n = e0.rows();
                let mut data = e0.into_data();
                data.extend_from_slice(&fused.fused);
                let e = Tensor::matrix(n + 1, d, data)?;
                (
                    e,
                    Some(ModalityTrace {
                        raw: raw.clone(),
                        projected,
                        fusion,
                    }),
                    similarity,
                    difference,
                )
            }
        };

        let (branches, branch_trace) = branch_forward(&e, &self.mhsa, &self.ac)?;
        if self.mode.shallow() {
            logit += dot(self.w_mhsa.data(), &branches.s_mhsa)
                + dot(self.w_ac.data(), &branches.p_ac)
                + self.bias.data()[0];
        }
        let deep = if self.mode.deep() {
            let mut a0 = branches.s_mhsa.clone();
            a0.extend_from_slice(&branches.p_ac);
            let (z, t) = self.deep.forward(&a0)?;
            logit += z;
            Some(t)
        } else {
            None
        };

        Ok((
            logit,
            OursTrace {
                embed: embed_trace,
                linear,
                branch: branch_trace,
                s_mhsa: branches.s_mhsa,
                p_ac: branches.p_ac,
                pair_weights: branches.pair_weights,
                deep,
                modality,
                similarity,
                difference,
            },
        ))
    }

    pub fn backward(&self, trace: &OursTrace, d_logit: f64) -> Result<ModelGrads> {
        let d = self.dim();
        let mut d_s = vec![0.0; trace.s_mhsa.len()];
        let mut d_p = vec![0.0; d];

        let mut g_w_mhsa = Tensor::zeros_like(&self.w_mhsa);
        let mut g_w_ac = Tensor::zeros_like(&self.w_ac);
        let mut g_bias = Tensor::zeros(&[1]);
        if self.mode.shallow() {
            axpy(d_logit, self.w_mhsa.data(), &mut d_s);
            axpy(d_logit, self.w_ac.data(), &mut d_p);
            axpy(d_logit, &trace.s_mhsa, g_w_mhsa.data_mut());
            axpy(d_logit, &trace.p_ac, g_w_ac.data_mut());
            g_bias.data_mut()[0] = d_logit;
        }

        let deep_grads = match &trace.deep {
            Some(t) => {
                let (grads, d_a0) = self.deep.backward(t, d_logit);
                let (ds, dp) = d_a0.split_at(d_s.len());
                axpy(1.0, ds, &mut d_s);
                axpy(1.0, dp, &mut d_p);
                grads
            }
            None => self
                .deep
                .tensors()
                .into_iter()
                .map(Tensor::zeros_like)
                .collect(),
        };

        let branch = branch_backward(&trace.branch, &self.mhsa, &self.ac, &d_s, &d_p)?;
        let n = self.embedding.fields();
        let mut d_e0 = Tensor::from_vec(&[n, d], branch.input.data()[..n * d].to_vec())?;

        let mut modality_grads = Vec::new();
        if let (Some(mp), Some(mt)) = (&self.modality, &trace.modality) {
            let d_fused = &branch.input.data()[n * d..];
            let fg = fusion_backward(&mt.fusion, &mp.fusion, d_fused);
            let user_field = self
                .user_field
                .ok_or_else(|| Error::Internal("no user field".into()))?;
            axpy(1.0, &fg.user, d_e0.row_mut(user_field));

            let aux = difference_loss_grad(&mt.projected)?;
            let p = &mt.projected;
            let mut d_sa = fg.modalities[0].clone();
            let mut d_sv = fg.modalities[1].clone();
            let mut d_pa = fg.modalities[0].clone();
            let mut d_pv = fg.modalities[1].clone();
            for k in 0..d {
                let diff = p.public_audio[k] - p.public_visual[k];
                d_sa[k] += self.lambda_s * diff + self.lambda_d * aux.public_audio[k];
                d_sv[k] += -self.lambda_s * diff + self.lambda_d * aux.public_visual[k];
                d_pa[k] += self.lambda_d * aux.private_audio[k];
                d_pv[k] += self.lambda_d * aux.private_visual[k];
            }
            let dm = mp.feature_dim();
            let mut g_public = Tensor::zeros_like(&mp.public);
            let mut g_pa = Tensor::zeros_like(&mp.private_audio);
            let mut g_pv = Tensor::zeros_like(&mp.private_visual);
            matmul_into(&d_sa, &mt.raw.public_audio, g_public.data_mut(), d, 1, dm);
            matmul_into(&d_sv, &mt.raw.public_visual, g_public.data_mut(), d, 1, dm);
            matmul_into(&d_pa, &mt.raw.private_audio, g_pa.data_mut(), d, 1, dm);
            matmul_into(&d_pv, &mt.raw.private_visual, g_pv.data_mut(), d, 1, dm);
            modality_grads.extend([g_public, g_pa, g_pv]);
            modality_grads.extend(fg.params.tensors().into_iter().cloned());
        }

        let mut grads = ModelGrads {
            tables: self.tables(),
            sparse: Vec::new(),
            dense: Vec::new(),
        };
        grads.push_sparse(0, embed_backward(&trace.embed, &d_e0)?);
        if let Some(lt) = &trace.linear {
            let ones = Tensor::from_vec(&[n, 1], vec![d_logit; n])?;
            grads.push_sparse(n, embed_backward(lt, &ones)?);
        }
        grads
            .dense
            .extend(branch.mhsa.tensors().into_iter().cloned());
        grads.dense.extend(branch.ac.tensors().into_iter().cloned());
        grads.dense.extend([g_w_mhsa, g_w_ac, g_bias]);
        grads.dense.extend(deep_grads);
        grads.dense.extend(modality_grads);
        Ok(grads)
    }
}

//! Predictors: the two-branch attention model and the FM / DeepFM baselines.
//!
//! All models expose the same surface: a forward pass producing a
//! [`Prediction`] with its trace, a backward pass producing [`ModelGrads`],
//! and an ordered tensor list used by the optimizer and the checkpoint
//! format. Embedding tables come first in that list so their gradients can
//! stay sparse.

mod fm;
mod mlp;
mod ours;

use std::fmt;
use std::str::FromStr;

use crate::data::{EncodedExample, FeatureSchema};
use crate::embedding::EmbeddingGrad;
use crate::error::{Error, Result};
use crate::losses::{logistic_loss, ModalityFeatures};
use crate::numerics::{axpy, sigmoid_scalar, Rng, Tensor};

pub use fm::{fm_pairwise_oracle, fm_second_order, DeepFmModel, FmModel};
pub use mlp::{Dense, Mlp};
pub use ours::{ModalityParams, OursModel, OursTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ours,
    Fm,
    DeepFm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ours => "ours",
            ModelKind::Fm => "fm",
            ModelKind::DeepFm => "deepfm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(ModelKind::Ours),
            "fm" => Ok(ModelKind::Fm),
            "deepfm" => Ok(ModelKind::DeepFm),
            other => Err(Error::config(format!(
                "unknown model {other:?} (ours|fm|deepfm)"
            ))),
        }
    }
}

/// Which heads contribute to the logit of the attention model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ShallowOnly,
    DeepOnly,
    Combined,
}

impl Mode {
    pub fn shallow(self) -> bool {
        matches!(self, Mode::ShallowOnly | Mode::Combined)
    }

    pub fn deep(self) -> bool {
        matches!(self, Mode::DeepOnly | Mode::Combined)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::ShallowOnly => "shallow",
            Mode::DeepOnly => "deep",
            Mode::Combined => "combined",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Mode::ShallowOnly),
            "deep" => Ok(Mode::DeepOnly),
            "combined" => Ok(Mode::Combined),
            other => Err(Error::config(format!(
                "unknown mode {other:?} (shallow|deep|combined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub heads: usize,
    /// Total attention width across heads; `0` means "same as `embed_dim`".
    pub attn_dim: usize,
    /// Hidden width `t` of the crossing attention network.
    pub attn_hidden: usize,
    pub hidden: Vec<usize>,
    pub mode: Mode,
    pub linear_term: bool,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub fusion_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Ours,
            embed_dim: 16,
            heads: 2,
            attn_dim: 0,
            attn_hidden: 32,
            hidden: vec![64, 64],
            mode: Mode::Combined,
            linear_term: false,
            lambda_s: 0.1,
            lambda_d: 0.1,
            fusion_hidden: crate::losses::FUSION_HIDDEN,
        }
    }
}

impl ModelConfig {
    pub fn attention_width(&self) -> usize {
        if self.attn_dim == 0 {
            self.embed_dim
        } else {
            self.attn_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        if self.heads == 0 || self.attention_width() % self.heads != 0 {
            return Err(Error::config(format!(
                "attention width {} is not divisible by {} heads",
                self.attention_width(),
                self.heads
            )));
        }
        if self.attn_hidden == 0 || self.fusion_hidden == 0 {
            return Err(Error::config("attention network widths must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be at least 1"));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_d >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Gradient of one example's objective, aligned with [`Model::tensors`].
///
/// The first `tables` tensors are embedding tables and are returned as sparse
/// rows; every other tensor has a dense gradient in `dense`.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tables: usize,
    pub sparse: Vec<(usize, usize, Vec<f64>)>,
    pub dense: Vec<Tensor>,
}

impl ModelGrads {
    pub(crate) fn push_sparse(&mut self, offset: usize, g: EmbeddingGrad) {
        self.sparse.extend(
            g.rows
                .into_iter()
                .map(|(field, row, v)| (offset + field, row, v)),
        );
    }

    /// Adds `scale ×` this gradient into a dense accumulator shaped like the model tensors.
    pub fn accumulate_into(&self, acc: &mut [Tensor], scale: f64) {
        for (t, row, g) in &self.sparse {
            axpy(scale, g, acc[*t].row_mut(*row));
        }
        for (k, g) in self.dense.iter().enumerate() {
            axpy(scale, g.data(), acc[self.tables + k].data_mut());
        }
    }

    pub fn to_dense(&self, model: &Model) -> Vec<Tensor> {
        let mut acc: Vec<Tensor> = model
            .tensors()
            .iter()
            .map(|t| Tensor::zeros_like(t))
            .collect();
        self.accumulate_into(&mut acc, 1.0);
        acc
    }
}

#[derive(Debug, Clone)]
pub enum Trace {
    Ours(Box<OursTrace>),
    Fm(fm::FmTrace),
    DeepFm(fm::DeepFmTrace),
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probability: f64,
    pub logit: f64,
    /// Per-example similarity loss (zero without modality features).
    pub similarity: f64,
    /// Per-example difference loss (zero without modality features).
    pub difference: f64,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ours(OursModel),
    Fm(FmModel),
    DeepFm(DeepFmModel),
}

impl Model {
    /// Builds a freshly initialized model. `modality_dim` enables the modality pathway (attention model only).
    pub fn new(
        config: &ModelConfig,
        schema: &FeatureSchema,
        modality_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if schema.len() < 2 {
            return Err(Error::config("models need at least two feature fields"));
        }
        match config.kind {
            ModelKind::Ours => Ok(Model::Ours(OursModel::new(
                config,
                schema,
                modality_dim,
                rng,
            )?)),
            ModelKind::Fm | ModelKind::DeepFm if modality_dim.is_some() => Err(Error::config(
                "modality features are only supported by the attention model",
            )),
            ModelKind::Fm => Ok(Model::Fm(FmModel::new(config, schema, rng))),
            ModelKind::DeepFm => Ok(Model::DeepFm(DeepFmModel::new(config, schema, rng))),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Ours(_) => ModelKind::Ours,
            Model::Fm(_) => ModelKind::Fm,
            Model::DeepFm(_) => ModelKind::DeepFm,
        }
    }

    pub fn uses_modality(&self) -> bool {
        matches!(self, Model::Ours(m) if m.modality.is_some())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Model::Ours(m) => m.tensors(),
            Model::Fm(m) => m.tensors(),
            Model::DeepFm(m) => m.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Ours(m) => m.tensors_mut(),
            Model::Fm(m) => m.tensors_mut(),
            Model::DeepFm(m) => m.tensors_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn predict(
        &self,
        example: &EncodedExample,
        modality: Option<&ModalityFeatures>,
    ) -> Result<Prediction> {
        let (logit, similarity, difference, trace) = match self {
            Model::Ours(m) => {
                let (logit, trace) = m.forward(example, modality)?;
                let (s, d) = (trace.similarity, trace.difference);
                (logit, s, d, Trace::Ours(Box::new(trace)))
            }
            Model::Fm(m) => {
                let (logit, trace) = m.forward(example)?;
                (logit, 0.0, 0.0, Trace::Fm(trace))
            }
            Model::DeepFm(m) => {
                let (logit, trace) = m.forward(example)?;
                (logit, 0.0, 0.0, Trace::DeepFm(trace))
            }
        };
        Ok(Prediction {
            probability: sigmoid_scalar(logit),
            logit,
            similarity,
            difference,
            trace,
        })
    }

    /// Per-example training objective: logistic loss plus the weighted modality losses.
    pub fn objective(&self, prediction: &Prediction, label: u8) -> f64 {
        let (ls, ld) = match self {
            Model::Ours(m) => (m.lambda_s, m.lambda_d),
            _ => (0.0, 0.0),
        };
        logistic_loss(prediction.logit, label)
            + ls * prediction.similarity
            + ld * prediction.difference
    }

    /// Gradient of [`Model::objective`] with respect to every tensor.
    pub fn backward(&self, prediction: &Prediction, label: u8) -> Result<ModelGrads> {
        let d_logit = prediction.probability - f64::from(label);
        self.backward_logit(prediction, d_logit)
    }

    /// Backpropagates an arbitrary logit gradient (plus the weighted modality losses).
    pub fn backward_logit(&self, prediction: &Prediction, d_logit: f64) -> Result<ModelGrads> {
        match (self, &prediction.trace) {
            (Model::Ours(m), Trace::Ours(t)) => m.backward(t, d_logit),
            (Model::Fm(m), Trace::Fm(t)) => m.backward(t, d_logit),
            (Model::DeepFm(m), Trace::DeepFm(t)) => m.backward(t, d_logit),
            _ => Err(Error::Internal(
                "trace does not belong to this model".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_and_mode_parse() {
        for k in [ModelKind::Ours, ModelKind::Fm, ModelKind::DeepFm] {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        for m in [Mode::ShallowOnly, Mode::DeepOnly, Mode::Combined] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("afm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.hidden = vec![8, 0];
        assert!(c.validate().is_err());
    }
}

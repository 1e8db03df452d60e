//! Mini-batch Adam training, early stopping and the embedding-dimension sweep.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{DatasetSplit, EncodedExample, FeatureSchema};
use crate::error::{Error, Result};
use crate::losses::{example_logloss, ModalityFeatureSet};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Mode, Model, ModelConfig, ModelGrads, ModelKind};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub embed_dim: usize,
    pub heads: usize,
    pub attn_dim: usize,
    pub attn_hidden: usize,
    pub hidden: Vec<usize>,
    pub mode: Mode,
    pub linear_term: bool,
    pub fusion_hidden: usize,
    pub clip_norm: f64,
    pub sweep_dims: Vec<usize>,
    pub deterministic: bool,
    /// Worker threads; `0` lets the runtime decide.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            model: m.kind,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 15,
            patience: 3,
            seed: 42,
            lambda_s: m.lambda_s,
            lambda_d: m.lambda_d,
            embed_dim: m.embed_dim,
            heads: m.heads,
            attn_dim: m.attn_dim,
            attn_hidden: m.attn_hidden,
            hidden: m.hidden,
            mode: m.mode,
            linear_term: m.linear_term,
            fusion_hidden: m.fusion_hidden,
            clip_norm: 10.0,
            sweep_dims: vec![8, 16, 32, 64],
            deterministic: false,
            threads: 0,
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("{v:?} is not a non-negative integer")))
        })
        .collect()
}

fn join(list: &[usize]) -> String {
    list.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 23] = [
        "model",
        "batch_size",
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "max_epochs",
        "patience",
        "seed",
        "lambda_s",
        "lambda_d",
        "embed_dim",
        "heads",
        "attn_dim",
        "attn_hidden",
        "hidden",
        "mode",
        "linear_term",
        "fusion_hidden",
        "clip_norm",
        "sweep_dims",
        "deterministic",
        "threads",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => self.model = v.parse()?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "epsilon" => self.epsilon = parse_value(key, v)?,
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "lambda_s" => self.lambda_s = parse_value(key, v)?,
            "lambda_d" => self.lambda_d = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "attn_dim" => self.attn_dim = parse_value(key, v)?,
            "attn_hidden" => self.attn_hidden = parse_value(key, v)?,
            "hidden" => self.hidden = parse_list(v)?,
            "mode" => self.mode = v.parse()?,
            "linear_term" => self.linear_term = parse_value(key, v)?,
            "fusion_hidden" => self.fusion_hidden = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "sweep_dims" => self.sweep_dims = parse_list(v)?,
            "deterministic" => self.deterministic = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let value = match key {
                "model" => self.model.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "learning_rate" => self.learning_rate.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "epsilon" => self.epsilon.to_string(),
                "max_epochs" => self.max_epochs.to_string(),
                "patience" => self.patience.to_string(),
                "seed" => self.seed.to_string(),
                "lambda_s" => self.lambda_s.to_string(),
                "lambda_d" => self.lambda_d.to_string(),
                "embed_dim" => self.embed_dim.to_string(),
                "heads" => self.heads.to_string(),
                "attn_dim" => self.attn_dim.to_string(),
                "attn_hidden" => self.attn_hidden.to_string(),
                "hidden" => join(&self.hidden),
                "mode" => self.mode.to_string(),
                "linear_term" => self.linear_term.to_string(),
                "fusion_hidden" => self.fusion_hidden.to_string(),
                "clip_norm" => self.clip_norm.to_string(),
                "sweep_dims" => join(&self.sweep_dims),
                "deterministic" => self.deterministic.to_string(),
                "threads" => self.threads.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key}={value}");
        }
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            embed_dim: self.embed_dim,
            heads: self.heads,
            attn_dim: self.attn_dim,
            attn_hidden: self.attn_hidden,
            hidden: self.hidden.clone(),
            mode: self.mode,
            linear_term: self.linear_term,
            lambda_s: self.lambda_s,
            lambda_d: self.lambda_d,
            fusion_hidden: self.fusion_hidden,
        }
    }

    fn validate_optimizer(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("epsilon and clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_optimizer()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::config("patience and max_epochs must be at least 1"));
        }
        self.model_config().validate()
    }
}

/// Dense Adam over every model tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .tensors()
            .into_iter()
            .map(Tensor::zeros_like)
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &[Tensor], config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = config.learning_rate;
        for (k, p) in model.tensors_mut().into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + config.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_auc: Option<f64>,
    pub val_logloss: f64,
    pub model: Model,
}

impl BestSnapshot {
    /// Selection key: validation AUC, or negated logloss when AUC is undefined.
    fn score(&self) -> f64 {
        self.val_auc.unwrap_or(-self.val_logloss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub best: Option<BestSnapshot>,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(model: Model, rng: Rng) -> Self {
        TrainState {
            adam: Adam::new(&model),
            model,
            epoch: 0,
            best: None,
            rng,
        }
    }

    /// Seeds the RNG from the config, draws the initial parameters and keeps the stream for shuffling.
    pub fn initialize(
        config: &TrainConfig,
        schema: &FeatureSchema,
        modality_dim: Option<usize>,
    ) -> Result<Self> {
        let mut rng = Rng::new(config.seed);
        let model = Model::new(&config.model_config(), schema, modality_dim, &mut rng)?;
        Ok(TrainState::new(model, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean clamped logloss over the epoch's examples.
    pub train_loss: f64,
    pub similarity: f64,
    pub difference: f64,
}

struct ExampleResult {
    objective: f64,
    logloss: f64,
    similarity: f64,
    difference: f64,
    grads: ModelGrads,
}

fn example_step(
    model: &Model,
    ex: &EncodedExample,
    features: Option<&ModalityFeatureSet>,
) -> Result<ExampleResult> {
    let f = features.and_then(|s| s.get(&ex.item_key));
    let pred = model.predict(ex, f)?;
    Ok(ExampleResult {
        objective: model.objective(&pred, ex.label),
        logloss: example_logloss(pred.probability, ex.label),
        similarity: pred.similarity,
        difference: pred.difference,
        grads: model.backward(&pred, ex.label)?,
    })
}

fn batch_results(
    model: &Model,
    batch: &[&EncodedExample],
    features: Option<&ModalityFeatureSet>,
) -> Result<Vec<ExampleResult>> {
    batch
        .par_iter()
        .map(|ex| example_step(model, ex, features))
        .collect()
}

fn reduce(model: &Model, results: &[ExampleResult]) -> (f64, Vec<Tensor>) {
    let scale = 1.0 / results.len() as f64;
    let mut acc: Vec<Tensor> = model
        .tensors()
        .into_iter()
        .map(Tensor::zeros_like)
        .collect();
    let mut loss = 0.0;
    for r in results {
        r.grads.accumulate_into(&mut acc, scale);
        loss += r.objective;
    }
    (loss * scale, acc)
}

/// Mean objective and its gradient over a batch, reduced in example order.
pub fn batch_gradient(
    model: &Model,
    batch: &[&EncodedExample],
    features: Option<&ModalityFeatureSet>,
) -> Result<(f64, Vec<Tensor>)> {
    Ok(reduce(model, &batch_results(model, batch, features)?))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
}

/// One shuffled pass over `train` with an Adam update per batch.
pub fn train_epoch(
    state: &mut TrainState,
    train: &[EncodedExample],
    features: Option<&ModalityFeatureSet>,
    config: &TrainConfig,
) -> Result<EpochMetrics> {
    config.validate_optimizer()?;
    if train.is_empty() {
        return Err(Error::domain("training split is empty"));
    }
    let epoch = state.epoch + 1;
    let mut order: Vec<usize> = (0..train.len()).collect();
    state.rng.shuffle(&mut order);

    let (mut logloss, mut similarity, mut difference) = (0.0, 0.0, 0.0);
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train[i]).collect();
        let results = batch_results(&state.model, &batch, features)?;
        let (batch_loss, mut acc) = reduce(&state.model, &results);
        for r in &results {
            logloss += r.logloss;
            similarity += r.similarity;
            difference += r.difference;
        }
        if !batch_loss.is_finite() || acc.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                batch: b,
                loss: batch_loss,
            });
        }
        clip(&mut acc, config.clip_norm);
        state.adam.update(&mut state.model, &acc, config);
    }
    state.epoch = epoch;
    let n = train.len() as f64;
    Ok(EpochMetrics {
        epoch,
        train_loss: logloss / n,
        similarity: similarity / n,
        difference: difference / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_logloss: f64,
    pub d: usize,
    pub seed: u64,
    pub similarity: f64,
    pub difference: f64,
}

/// CSV for a training curve; the auxiliary-loss columns are included when `with_aux`.
pub fn curve_csv(rows: &[CurveRow], with_aux: bool) -> String {
    let mut s = String::from("epoch,train_loss,val_auc,val_logloss,d,seed");
    if with_aux {
        s.push_str(",l_s,l_d");
    }
    s.push('\n');
    for r in rows {
        let auc = r.val_auc.map_or("nan".to_string(), |a| a.to_string());
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, auc, r.val_logloss, r.d, r.seed
        );
        if with_aux {
            let _ = write!(s, ",{},{}", r.similarity, r.difference);
        }
        s.push('\n');
    }
    s
}

fn validation_metrics(
    model: &Model,
    val: &[EncodedExample],
    features: Option<&ModalityFeatureSet>,
) -> Result<(Option<f64>, f64)> {
    match evaluate(model, val, features, "validation") {
        Ok(r) => Ok((Some(r.auc), r.logloss)),
        Err(Error::UndefinedMetric(_)) => {
            let scores = crate::metrics::predict_all(model, val, features)?;
            let labels: Vec<u8> = val.iter().map(|e| e.label).collect();
            Ok((None, crate::losses::logloss(&scores, &labels)?))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Final optimizer state with the model restored to the best snapshot.
    pub state: TrainState,
    pub curve: Vec<CurveRow>,
}

impl FitResult {
    pub fn best(&self) -> &BestSnapshot {
        self.state
            .best
            .as_ref()
            .expect("fit runs at least one epoch")
    }
}

/// Trains until validation AUC stops improving for `patience` epochs or `max_epochs` is reached.
pub fn fit(
    mut state: TrainState,
    train: &[EncodedExample],
    val: &[EncodedExample],
    features: Option<&ModalityFeatureSet>,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::domain("validation split is empty"));
    }
    let mut curve = Vec::new();
    let mut stale = 0;
    for _ in 0..config.max_epochs {
        let m = train_epoch(&mut state, train, features, config)?;
        let (val_auc, val_logloss) = validation_metrics(&state.model, val, features)?;
        curve.push(CurveRow {
            epoch: m.epoch,
            train_loss: m.train_loss,
            val_auc,
            val_logloss,
            d: config.embed_dim,
            seed: config.seed,
            similarity: m.similarity,
            difference: m.difference,
        });
        let candidate = BestSnapshot {
            epoch: m.epoch,
            val_auc,
            val_logloss,
            model: state.model.clone(),
        };
        let improved = state
            .best
            .as_ref()
            .is_none_or(|b| candidate.score() > b.score());
        log::info!(
            "epoch {} train_loss={:.6} val_auc={:?} val_logloss={:.6}",
            m.epoch,
            m.train_loss,
            val_auc,
            val_logloss
        );
        if improved {
            state.best = Some(candidate);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some(best) = &state.best {
        state.model = best.model.clone();
    }
    Ok(FitResult { state, curve })
}

#[derive(Debug)]
pub struct SweepRun {
    pub d: usize,
    pub outcome: Result<(FitResult, EvalReport)>,
}

/// One fit per embedding dimension; each run is scored on the test split. Failures are kept and the sweep continues.
pub fn sweep(
    config: &TrainConfig,
    schema: &FeatureSchema,
    split: &DatasetSplit<EncodedExample>,
    features: Option<&ModalityFeatureSet>,
    dims: &[usize],
) -> Result<Vec<SweepRun>> {
    if dims.is_empty() {
        return Err(Error::config(
            "the sweep needs at least one embedding dimension",
        ));
    }
    let modality_dim = features.map(|f| f.dim);
    Ok(dims
        .iter()
        .map(|&d| {
            let outcome = (|| {
                let cfg = TrainConfig {
                    embed_dim: d,
                    ..config.clone()
                };
                let state = TrainState::initialize(&cfg, schema, modality_dim)?;
                let fitted = fit(state, &split.train, &split.validation, features, &cfg)?;
                let report = evaluate(
                    &fitted.state.model,
                    &split.test,
                    features,
                    &format!("test_d{d}"),
                )?;
                Ok((fitted, report))
            })();
            SweepRun { d, outcome }
        })
        .collect())
}

/// Aggregate sweep CSV `d,auc,logloss`; failed runs are omitted.
pub fn sweep_csv(runs: &[SweepRun]) -> String {
    let mut s = String::from("d,auc,logloss\n");
    for run in runs {
        if let Ok((_, r)) = &run.outcome {
            let _ = writeln!(s, "{},{},{}", run.d, r.auc, r.logloss);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.learning_rate = 0.003;
        c.hidden = vec![32, 16];
        c.model = ModelKind::DeepFm;
        c.mode = Mode::ShallowOnly;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = TrainConfig::parse("seed=1\nbatch_size=abc\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(TrainConfig::parse("colour=red").is_err());
        assert!(TrainConfig::parse("batch_size=0").is_err());
        assert!(TrainConfig::parse("learning_rate=0").is_err());
        assert!(TrainConfig::parse("patience=0").is_err());
        let c = TrainConfig::parse("# comment\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::vector(vec![30.0, 40.0]), Tensor::vector(vec![0.0])];
        clip(&mut g, 10.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12 && (g[0].data()[1] - 8.0).abs() < 1e-12);
        let mut small = vec![Tensor::vector(vec![3.0, 4.0])];
        clip(&mut small, 10.0);
        assert_eq!(small[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn curve_csv_layout() {
        let row = CurveRow {
            epoch: 1,
            train_loss: 0.5,
            val_auc: None,
            val_logloss: 0.6,
            d: 8,
            seed: 3,
            similarity: 0.1,
            difference: 0.2,
        };
        assert_eq!(
            curve_csv(&[row], false),
            "epoch,train_loss,val_auc,val_logloss,d,seed\n1,0.5,nan,0.6,8,3\n"
        );
        assert!(curve_csv(&[row], true)
            .starts_with("epoch,train_loss,val_auc,val_logloss,d,seed,l_s,l_d\n"));
    }
}

//! Seeded mini-batch training, prediction and the stored model artifact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
use super::loss::{mae_loss, LossKind};
use super::network::{backprop_through_time, batch_loss, forward_sequence, Output, Target};
use super::serialize::{deserialize_model, serialize_model};
use super::spec::{HeadKind, NetworkParams, NetworkSpec};
use super::NeuralError;
use crate::docstore::Document;

/// Global gradient-norm ceiling applied before every update.
pub const GRAD_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Recorded with the artifact; the examples themselves carry the shift.
    pub lead_seconds: f64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Size of each epoch's Monte-Carlo validation draw, as a fraction of the
    /// training pool.
    pub validation_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            loss: LossKind::Mae,
            lead_seconds: 0.0,
            adam: AdamConfig::default(),
            clip_norm: GRAD_CLIP_NORM,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// `seq_len` rows of `input_features` values.
    pub x: Vec<Vec<f64>>,
    pub target: Target,
}

/// Per-feature z-scores for inputs and, for regression, the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl Normalization {
    pub fn identity(features: usize) -> Self {
        Self {
            feature_mean: vec![0.0; features],
            feature_std: vec![1.0; features],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn fit(data: &[TrainingExample], features: usize, head: HeadKind) -> Self {
        let mut norm = Self::identity(features);
        for f in 0..features {
            let col = data.iter().flat_map(|e| e.x.iter().map(move |row| row[f]));
            (norm.feature_mean[f], norm.feature_std[f]) = mean_std(col);
        }
        if head == HeadKind::Linear {
            let ys = data.iter().filter_map(|e| match e.target {
                Target::Value(v) => Some(v),
                Target::Class(_) => None,
            });
            (norm.target_mean, norm.target_std) = mean_std(ys);
        }
        norm
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                row.iter()
                    .zip(self.feature_mean.iter().zip(&self.feature_std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect()
    }

    fn target(&self, t: Target) -> Target {
        match t {
            Target::Value(v) => Target::Value((v - self.target_mean) / self.target_std),
            c => c,
        }
    }

    fn output(&self, o: Output) -> Output {
        match o {
            Output::Value(v) => Output::Value(v * self.target_std + self.target_mean),
            p => p,
        }
    }
}

/// A trained network together with everything needed to use and audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub normalization: Normalization,
    pub hyper: TrainHyper,
    /// Mean training loss per epoch, in target units for regression.
    pub train_loss: Vec<f64>,
    /// Loss on each epoch's validation draw, same units.
    pub val_loss: Vec<f64>,
}

impl ModelArtifact {
    /// Meta document and weight bytes suitable for `Store::put_model`.
    pub fn to_blob(&self) -> (Document, Vec<u8>) {
        let (mut meta, bytes) = serialize_model(&self.spec, &self.params);
        meta.set("normalization", serde_json::to_value(&self.normalization).expect("finite stats"));
        meta.set("hyper", serde_json::to_value(&self.hyper).expect("hyper serializes"));
        meta.set("train_loss", json!(self.train_loss));
        meta.set("val_loss", json!(self.val_loss));
        (meta, bytes)
    }

    pub fn from_blob(meta: &Document, bytes: &[u8]) -> Result<Self, NeuralError> {
        let (spec, params) = deserialize_model(meta, bytes)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| NeuralError::BadMeta(format!("missing `{k}`")));
        let parse_err = |k: &str| NeuralError::BadMeta(format!("malformed `{k}`"));
        let normalization: Normalization =
            serde_json::from_value(field("normalization")?).map_err(|_| parse_err("normalization"))?;
        if normalization.feature_mean.len() != spec.input_features || normalization.feature_std.len() != spec.input_features {
            return Err(NeuralError::BadMeta("normalization width differs from input_features".into()));
        }
        Ok(Self {
            spec,
            params,
            normalization,
            hyper: serde_json::from_value(field("hyper")?).map_err(|_| parse_err("hyper"))?,
            train_loss: serde_json::from_value(field("train_loss")?).map_err(|_| parse_err("train_loss"))?,
            val_loss: serde_json::from_value(field("val_loss")?).map_err(|_| parse_err("val_loss"))?,
        })
    }
}

/// Predictions against targets, plus the artifact's loss curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Regression targets, or class indices.
    pub y: Vec<f64>,
    /// Regression predictions, or the probability of class 1.
    pub y_hat: Vec<f64>,
    pub n: usize,
    pub mae: f64,
    pub accuracy: Option<f64>,
    pub cce: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn loss_scale(artifact_norm: &Normalization, loss: LossKind) -> f64 {
    match loss {
        LossKind::Mae => artifact_norm.target_std,
        LossKind::Cce => 1.0,
    }
}

/// Trains `spec` on `data` with seeded initialisation, shuffling and
/// validation draws. Each epoch holds out a fresh with-replacement sample of
/// the pool for validation and trains on the rest.
pub fn train(spec: &NetworkSpec, data: &[TrainingExample], hyper: &TrainHyper) -> Result<(ModelArtifact, MetricsReport), NeuralError> {
    spec.validate()?;
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    if hyper.batch_size == 0 {
        return Err(NeuralError::ShapeMismatch("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = NetworkParams::init(spec, &mut rng);
    let normalization = Normalization::fit(data, spec.input_features, spec.head);
    let xs: Vec<Vec<Vec<f64>>> = data.iter().map(|e| normalization.apply(&e.x)).collect();
    let ys: Vec<Target> = data.iter().map(|e| normalization.target(e.target)).collect();
    let scale = loss_scale(&normalization, hyper.loss);
    let mut adam = AdamState::new(&params, hyper.adam);
    let mut train_loss = Vec::with_capacity(hyper.epochs);
    let mut val_loss = Vec::with_capacity(hyper.epochs);
    let n = data.len();
    let n_val = if hyper.validation_fraction > 0.0 {
        ((n as f64 * hyper.validation_fraction).round() as usize).max(1)
    } else {
        0
    };

    for epoch in 0..hyper.epochs {
        let val_idx: Vec<usize> = (0..n_val).map(|_| rng.gen_range(0..n)).collect();
        let mut held_out = vec![false; n];
        val_idx.iter().for_each(|&i| held_out[i] = true);
        let mut order: Vec<usize> = (0..n).filter(|&i| !held_out[i]).collect();
        if order.is_empty() {
            order = (0..n).collect();
        }
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(&[Vec<f64>], Target)> = chunk.iter().map(|&i| (&xs[i][..], ys[i])).collect();
            let (loss, mut grads) = backprop_through_time(spec, &params, &batch, hyper.loss)?;
            if !loss.is_finite() {
                return Err(NeuralError::DivergedLoss { epoch });
            }
            total += loss * chunk.len() as f64;
            clip_global_norm(&mut grads, hyper.clip_norm);
            adam_step(&mut params, &grads, &mut adam);
        }
        let epoch_loss = total / order.len() as f64 * scale;
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(NeuralError::DivergedLoss { epoch });
        }
        train_loss.push(epoch_loss);
        if n_val > 0 {
            let batch: Vec<(&[Vec<f64>], Target)> = val_idx.iter().map(|&i| (&xs[i][..], ys[i])).collect();
            val_loss.push(batch_loss(spec, &params, &batch, hyper.loss)? * scale);
        }
        log::debug!("epoch {epoch}: train {epoch_loss:.4} val {:?}", val_loss.last());
    }

    let artifact = ModelArtifact {
        spec: spec.clone(),
        params,
        normalization,
        hyper: hyper.clone(),
        train_loss,
        val_loss,
    };
    let report = evaluate(&artifact, data)?;
    Ok((artifact, report))
}

/// Deterministic forward pass in original units.
pub fn predict(artifact: &ModelArtifact, x: &[Vec<f64>]) -> Result<Output, NeuralError> {
    let (out, _) = forward_sequence(&artifact.spec, &artifact.params, &artifact.normalization.apply(x))?;
    Ok(artifact.normalization.output(out))
}

pub fn predict_batch(artifact: &ModelArtifact, xs: &[Vec<Vec<f64>>]) -> Result<Vec<Output>, NeuralError> {
    xs.iter().map(|x| predict(artifact, x)).collect()
}

/// Scores `artifact` on `data`.
pub fn evaluate(artifact: &ModelArtifact, data: &[TrainingExample]) -> Result<MetricsReport, NeuralError> {
    if data.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let mut y = Vec::with_capacity(data.len());
    let mut y_hat = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    let mut cce = 0.0;
    for e in data {
        match (predict(artifact, &e.x)?, e.target) {
            (Output::Value(v), Target::Value(t)) => {
                y.push(t);
                y_hat.push(v);
            }
            (Output::Probs(p), Target::Class(k)) if k < p.len() => {
                let predicted = if p[1] > p[0] { 1 } else { 0 };
                correct += usize::from(predicted == k);
                let mut label = vec![0.0; p.len()];
                label[k] = 1.0;
                cce += super::loss::cce_loss(&label, &p)?;
                y.push(k as f64);
                y_hat.push(p[1]);
            }
            _ => return Err(NeuralError::ShapeMismatch("targets do not match the network head".into())),
        }
    }
    let n = y.len();
    let classification = artifact.spec.head == HeadKind::Softmax;
    Ok(MetricsReport {
        mae: mae_loss(&y, &y_hat)?,
        n,
        y,
        y_hat,
        accuracy: classification.then(|| correct as f64 / n as f64),
        cce: classification.then(|| cce / n as f64),
        train_loss: artifact.train_loss.clone(),
        val_loss: artifact.val_loss.clone(),
    })
}

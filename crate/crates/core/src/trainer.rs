//! Mini-batch training of an embedding model and its class centers.
//!
//! Each step evaluates the batch objective, backpropagates the embedding
//! gradients through the model, applies Adam to the model and to the centers
//! with their own learning rates, and projects every center back onto the
//! unit sphere. Center gradients are reduced to their tangential part first.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::eval::{self, DEFAULT_KS, DEFAULT_MERGE_EPS};
use crate::linalg::{self, dot, normalize, rng_for, streams, UnitEmbedding};
use crate::losses::{objective, CenterBank, HyperParams, LossKind};
use crate::model::EmbeddingModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub hp: HyperParams,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_model: f64,
    pub lr_centers: f64,
    /// Epoch counts after which both learning rates are divided by
    /// `lr_decay_factor`. Milestones at or beyond `epochs` never fire.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Evaluate retrieval metrics every this many epochs (0: never).
    pub eval_every: usize,
    pub merge_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SoftTriple,
            hp: HyperParams::default(),
            batch_size: 32,
            epochs: 50,
            lr_model: 1e-4,
            lr_centers: 1e-2,
            lr_decay_epochs: vec![20, 40],
            lr_decay_factor: 10.0,
            seed: 0,
            eval_every: 0,
            merge_eps: DEFAULT_MERGE_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss.single_center() && self.hp.centers_per_class != 1 {
            return Err(Error::contract(format!(
                "loss {} needs K=1, got K={}",
                self.loss.name(),
                self.hp.centers_per_class
            )));
        }
        self.hp.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.lr_model >= 0.0 && self.lr_centers >= 0.0) {
            return Err(Error::contract("learning rates must be nonnegative"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::contract("decay factor must be positive"));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("decay epochs must be strictly increasing"));
        }
        if !(self.merge_eps > 0.0) {
            return Err(Error::contract("merge threshold must be positive"));
        }
        Ok(())
    }

    /// Learning rates `(model, centers)` in effect during 1-based `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let decays = self
            .lr_decay_epochs
            .iter()
            .filter(|m| epoch > **m)
            .count() as i32;
        let div = self.lr_decay_factor.powi(decays);
        (self.lr_model / div, self.lr_centers / div)
    }
}

/// Adam moment buffers for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(tensor_sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: tensor_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: tensor_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), self.first.len(), "tensor count changed");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// `C × K` unit centers with i.i.d. Gaussian directions.
pub fn init_centers(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<CenterBank> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::contract("center bank dimensions must be positive"));
    }
    let mut rng = rng_for(seed, streams::CENTERS);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    for _ in 0..classes * per_class {
        let unit = loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(u) = normalize(&v) {
                break u;
            }
        };
        data.extend_from_slice(&unit);
    }
    CenterBank::new(classes, per_class, dim, data)
}

/// Rescales every center to unit norm in place.
pub fn project_unit(bank: &mut CenterBank) -> Result<()> {
    let dim = bank.dim();
    for (i, c) in bank.data_mut().chunks_exact_mut(dim).enumerate() {
        let n = crate::linalg::norm(c);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::degenerate(format!("center {i} has norm {n}")));
        }
        c.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

pub fn embed(model: &EmbeddingModel, features: &[Vec<f64>]) -> Result<Vec<UnitEmbedding>> {
    features.iter().map(|f| model.forward(f)).collect()
}

/// Removes from each center's gradient the part along the center itself.
///
/// For a unit `w` this is the gradient of the loss composed with
/// normalization. The radial part would be undone by the projection anyway,
/// but left in place it inflates Adam's second moments and stalls the
/// tangential motion that lets centers of one class merge.
pub fn tangent_component(bank: &CenterBank, grad: &mut [f64]) {
    let d = bank.dim();
    for (w, g) in bank.data().chunks_exact(d).zip(grad.chunks_exact_mut(d)) {
        let radial = dot(w, g);
        linalg::axpy(-radial, w, g);
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: Option<usize>,
    pub loss: Option<f64>,
    pub lr_model: Option<f64>,
    pub lr_centers: Option<f64>,
    pub recall_at: BTreeMap<usize, f64>,
    pub nmi: Option<f64>,
    pub unique_centers_per_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub centers: CenterBank,
    /// Epoch 0 holds the objective at initialization.
    pub log: Vec<MetricsRecord>,
}

fn check_dataset(ds: &LabeledDataset, model: &EmbeddingModel, classes: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if ds.dim() != model.input_dim() {
        return Err(Error::contract(format!(
            "dataset has {} features, model expects {}",
            ds.dim(),
            model.input_dim()
        )));
    }
    if let Some(l) = ds.labels.iter().find(|l| **l >= classes) {
        return Err(Error::contract(format!("label {l} out of range for C={classes}")));
    }
    Ok(())
}

fn full_objective(ds: &LabeledDataset, model: &EmbeddingModel, centers: &CenterBank, config: &TrainConfig) -> Result<f64> {
    let embs = embed(model, &ds.features)?;
    let batch: Vec<(&[f64], usize)> = embs.iter().map(|e| e.as_slice()).zip(ds.labels.iter().copied()).collect();
    Ok(objective(config.loss, &batch, centers, &config.hp)?.value)
}

fn evaluate_record(
    epoch: usize,
    loss: f64,
    model: &EmbeddingModel,
    centers: &CenterBank,
    config: &TrainConfig,
    eval_set: Option<&LabeledDataset>,
    evaluate_now: bool,
) -> Result<MetricsRecord> {
    let (lr_model, lr_centers) = config.learning_rates(epoch.max(1));
    let mut record = MetricsRecord {
        epoch: Some(epoch),
        loss: Some(loss),
        lr_model: Some(lr_model),
        lr_centers: Some(lr_centers),
        recall_at: BTreeMap::new(),
        nmi: None,
        unique_centers_per_class: eval::count_unique_centers(centers, config.merge_eps)?,
    };
    if let (true, Some(es)) = (evaluate_now, eval_set) {
        let embs = embed(model, &es.features)?;
        let ks: Vec<usize> = DEFAULT_KS.iter().copied().filter(|k| *k < es.len()).collect();
        let m = eval::evaluate(&embs, &es.labels, &ks, config.seed)?;
        record.recall_at = m.recall_at;
        record.nmi = Some(m.nmi);
    }
    Ok(record)
}

/// Trains `model` with freshly initialized centers (one class per label of
/// `train_set`), seeded from `config.seed`.
pub fn train(
    train_set: &LabeledDataset,
    model: EmbeddingModel,
    config: &TrainConfig,
    eval_set: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    let centers = init_centers(
        train_set.num_classes,
        config.hp.centers_per_class,
        model.output_dim(),
        config.seed,
    )?;
    train_with_centers(train_set, model, centers, config, eval_set)
}

pub fn train_with_centers(
    train_set: &LabeledDataset,
    mut model: EmbeddingModel,
    mut centers: CenterBank,
    config: &TrainConfig,
    eval_set: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if centers.per_class() != config.hp.centers_per_class {
        return Err(Error::contract("center bank K differs from the configured K"));
    }
    if centers.dim() != model.output_dim() {
        return Err(Error::contract("center dimension differs from the embedding dimension"));
    }
    check_dataset(train_set, &model, centers.classes())?;

    let initial = full_objective(train_set, &model, &centers, config)?;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            value: initial,
        });
    }
    let mut log = vec![evaluate_record(
        0,
        initial,
        &model,
        &centers,
        config,
        eval_set,
        config.eval_every > 0,
    )?];

    let model_sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut model_opt = OptimizerState::new(&model_sizes);
    let mut center_opt = OptimizerState::new(&[centers.data().len()]);
    let mut shuffle_rng = rng_for(config.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let (lr_model, lr_centers) = config.learning_rates(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut weighted_loss = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let embs: Vec<UnitEmbedding> = rows
                .iter()
                .map(|i| model.forward(&train_set.features[*i]))
                .collect::<Result<_>>()?;
            let batch: Vec<(&[f64], usize)> = embs
                .iter()
                .zip(rows)
                .map(|(e, i)| (e.as_slice(), train_set.labels[*i]))
                .collect();
            let eval = objective(config.loss, &batch, &centers, &config.hp)?;
            if !eval.value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: eval.value,
                });
            }
            weighted_loss += eval.value * rows.len() as f64;

            let mut grads = model.zero_grad();
            for (i, gx) in rows.iter().zip(&eval.grad_x) {
                let (g, _) = model.backward(&train_set.features[*i], gx)?;
                grads.accumulate(1.0, &g);
            }
            model_opt.update(model.tensors_mut(), &grads.tensors(), lr_model);
            let mut grad_w = eval.grad_w;
            tangent_component(&centers, &mut grad_w);
            center_opt.update(vec![centers.data_mut()], &[&grad_w], lr_centers);
            project_unit(&mut centers)?;
        }
        let loss = weighted_loss / train_set.len() as f64;
        let evaluate_now = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
        log.push(evaluate_record(epoch, loss, &model, &centers, config, eval_set, evaluate_now)?);
    }
    Ok(TrainOutcome { model, centers, log })
}

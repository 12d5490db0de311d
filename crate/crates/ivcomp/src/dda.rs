//! Deep Discriminant Analysis: a feed-forward compensation network trained
//! under joint softmax + center loss with per-mini-batch center updates.
//!
//! Layer order: linear → PReLU, linear → PReLU → BatchNorm, linear embedding
//! (no nonlinearity), affine classifier. All gradients are hand-derived,
//! including the BatchNorm batch-statistics terms, and validated against
//! central finite differences in the tests. Centers are not trained by
//! gradient descent; they follow their own moving-average update rule.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Embedding, LabeledCorpus};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::textio;

/// First line of a serialized DDA model file.
pub const MODEL_TAG: &str = "dda";

/// BatchNorm running-statistics decay: `running = 0.9·running + 0.1·batch`.
const BN_DECAY: f64 = 0.9;

/// BatchNorm variance floor.
pub const BN_EPSILON: f64 = 1e-5;

/// Initial PReLU slope for every unit.
const PRELU_INIT: f64 = 0.25;

/// Network shape. The classifier width always equals `n_classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DdaArchitecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl DdaArchitecture {
    /// The reference configuration: 600-dim inputs, 600-unit hidden layers,
    /// 300-dim embeddings.
    pub fn with_defaults(n_classes: usize) -> Self {
        Self { input_dim: 600, hidden_dim: 600, embed_dim: 300, n_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("all layer dimensions must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// Whether a model is still trainable or finalized for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A dense layer `y = x Wᵀ + b` with `w` stored as out_dim × in_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for i in 0..out_dim {
            for j in 0..in_dim {
                let z: f64 = rng.sample(StandardNormal);
                w.set(i, j, std * z);
            }
        }
        Self { w, b: vec![0.0; out_dim] }
    }

    /// `x` is batch-major (m × in_dim); output is m × out_dim.
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.w.transpose())?;
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Batch normalization over features, with running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNorm {
    fn init(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            epsilon: BN_EPSILON,
        }
    }
}

/// The DDA network plus the class centers used by the center loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DdaModel {
    pub arch: DdaArchitecture,
    pub layer1: Linear,
    pub prelu1: Vec<f64>,
    pub layer2: Linear,
    pub prelu2: Vec<f64>,
    pub batchnorm: BatchNorm,
    pub embed: Linear,
    pub classifier: Linear,
    /// One row per class; a training artifact, unused at inference.
    pub centers: Matrix,
    pub mode: Mode,
    /// Bumped by every train-mode forward and parameter update; caches carry
    /// the value they were created under so stale ones are rejected.
    train_steps: u64,
}

impl DdaModel {
    /// Fresh trainable model: He-initialized weights, zero biases, PReLU
    /// slopes 0.25, identity BatchNorm, zero centers.
    pub fn init(arch: DdaArchitecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            layer1: Linear::init(arch.hidden_dim, arch.input_dim, rng),
            prelu1: vec![PRELU_INIT; arch.hidden_dim],
            layer2: Linear::init(arch.hidden_dim, arch.hidden_dim, rng),
            prelu2: vec![PRELU_INIT; arch.hidden_dim],
            batchnorm: BatchNorm::init(arch.hidden_dim),
            embed: Linear::init(arch.embed_dim, arch.hidden_dim, rng),
            classifier: Linear::init(arch.n_classes, arch.embed_dim, rng),
            centers: Matrix::zeros(arch.n_classes, arch.embed_dim),
            mode: Mode::Train,
            train_steps: 0,
        })
    }

    /// Switch to inference mode; compensation requires a finalized model.
    pub fn finalize(&mut self) {
        self.mode = Mode::Infer;
    }
}

/// Embeddings and classifier logits for one batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embeddings: Matrix,
    pub logits: Matrix,
}

/// Intermediate activations of a train-mode forward pass, consumed by
/// [`backward`]. Tied to the model state it was produced under.
#[derive(Debug, Clone)]
pub struct BatchCache {
    token: u64,
    input: Matrix,
    z1: Matrix,
    a1: Matrix,
    z2: Matrix,
    xhat: Matrix,
    inv_std: Vec<f64>,
    y_bn: Matrix,
    embeddings: Matrix,
    logits: Matrix,
}

/// Joint loss and its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub softmax: f64,
    pub center: f64,
}

/// Gradient of the joint loss with respect to every trainable parameter and
/// the input batch. Centers are excluded: they follow their own update rule.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub prelu1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub prelu2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
    pub w4: Matrix,
    pub b4: Vec<f64>,
    pub input: Matrix,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub center_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

/// Learning-rate schedule: constant, or ×0.1 at half and three-quarters of
/// the epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    StepDecay,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr: 0.01,
            center_lr: 0.1,
            batch_size: 256,
            epochs: 50,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be finite and > 0".into()));
        }
        if !self.center_lr.is_finite() || !(0.0..=1.0).contains(&self.center_lr) {
            return Err(Error::Config("center_lr must lie in [0, 1]".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

fn prelu(z: &Matrix, slopes: &[f64]) -> Matrix {
    let mut out = z.clone();
    for i in 0..out.rows() {
        for (v, s) in out.row_mut(i).iter_mut().zip(slopes) {
            if *v < 0.0 {
                *v *= s;
            }
        }
    }
    out
}

fn check_input(model: &DdaModel, batch: &Matrix) -> Result<()> {
    if batch.cols() != model.arch.input_dim {
        return Err(Error::Dimension(format!(
            "batch dim {} does not match network input dim {}",
            batch.cols(),
            model.arch.input_dim
        )));
    }
    if batch.rows() == 0 {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    Ok(())
}

/// Train-mode forward pass: normalizes with batch statistics, updates the
/// running statistics, and returns the activation cache for [`backward`].
pub fn forward_train(model: &mut DdaModel, batch: &Matrix) -> Result<(ForwardPass, BatchCache)> {
    if model.mode != Mode::Train {
        return Err(Error::Mode("train-mode forward on a finalized model".into()));
    }
    check_input(model, batch)?;
    let m = batch.rows();
    if m < 2 {
        return Err(Error::DegenerateInput(
            "train-mode batch needs at least 2 rows for batch statistics".into(),
        ));
    }
    let h = model.arch.hidden_dim;

    let z1 = model.layer1.forward(batch)?;
    let a1 = prelu(&z1, &model.prelu1);
    let z2 = model.layer2.forward(&a1)?;
    let a2 = prelu(&z2, &model.prelu2);

    let mf = m as f64;
    let mut mean = vec![0.0; h];
    for i in 0..m {
        for (s, v) in mean.iter_mut().zip(a2.row(i)) {
            *s += v / mf;
        }
    }
    let mut var = vec![0.0; h];
    for i in 0..m {
        for ((s, v), mu) in var.iter_mut().zip(a2.row(i)).zip(&mean) {
            *s += (v - mu).powi(2) / mf;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + model.batchnorm.epsilon).sqrt())
        .collect();
    let mut xhat = Matrix::zeros(m, h);
    let mut y_bn = Matrix::zeros(m, h);
    for i in 0..m {
        for k in 0..h {
            let xh = (a2.get(i, k) - mean[k]) * inv_std[k];
            xhat.set(i, k, xh);
            y_bn.set(i, k, model.batchnorm.gamma[k] * xh + model.batchnorm.beta[k]);
        }
    }
    for k in 0..h {
        model.batchnorm.running_mean[k] =
            BN_DECAY * model.batchnorm.running_mean[k] + (1.0 - BN_DECAY) * mean[k];
        model.batchnorm.running_var[k] =
            BN_DECAY * model.batchnorm.running_var[k] + (1.0 - BN_DECAY) * var[k];
    }

    let embeddings = model.embed.forward(&y_bn)?;
    let logits = model.classifier.forward(&embeddings)?;
    model.train_steps += 1;
    let cache = BatchCache {
        token: model.train_steps,
        input: batch.clone(),
        z1,
        a1,
        z2,
        xhat,
        inv_std,
        y_bn,
        embeddings: embeddings.clone(),
        logits: logits.clone(),
    };
    Ok((ForwardPass { embeddings, logits }, cache))
}

/// Inference-mode forward pass: uses running statistics, mutates nothing,
/// and is independent of what else is in the batch.
pub fn forward_infer(model: &DdaModel, batch: &Matrix) -> Result<ForwardPass> {
    check_input(model, batch)?;
    let m = batch.rows();
    let h = model.arch.hidden_dim;

    let z1 = model.layer1.forward(batch)?;
    let a1 = prelu(&z1, &model.prelu1);
    let z2 = model.layer2.forward(&a1)?;
    let a2 = prelu(&z2, &model.prelu2);
    let mut y_bn = Matrix::zeros(m, h);
    for i in 0..m {
        for k in 0..h {
            let inv = 1.0 / (model.batchnorm.running_var[k] + model.batchnorm.epsilon).sqrt();
            let xh = (a2.get(i, k) - model.batchnorm.running_mean[k]) * inv;
            y_bn.set(i, k, model.batchnorm.gamma[k] * xh + model.batchnorm.beta[k]);
        }
    }
    let embeddings = model.embed.forward(&y_bn)?;
    let logits = model.classifier.forward(&embeddings)?;
    Ok(ForwardPass { embeddings, logits })
}

/// Joint loss: mean negative log-softmax of the true class, plus λ times
/// half the mean squared distance of each embedding to its class center.
pub fn compute_loss(
    logits: &Matrix,
    embeddings: &Matrix,
    labels: &[usize],
    centers: &Matrix,
    lambda: f64,
) -> Result<LossBreakdown> {
    let m = labels.len();
    if logits.rows() != m || embeddings.rows() != m {
        return Err(Error::Dimension(format!(
            "{} logit rows / {} embedding rows vs {m} labels",
            logits.rows(),
            embeddings.rows()
        )));
    }
    if embeddings.cols() != centers.cols() {
        return Err(Error::Dimension(format!(
            "embedding dim {} vs center dim {}",
            embeddings.cols(),
            centers.cols()
        )));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config("lambda must be finite and >= 0".into()));
    }
    let n_classes = logits.cols();
    let mf = m as f64;
    let mut softmax = 0.0;
    let mut center = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= n_classes || label >= centers.rows() {
            return Err(Error::Label(format!(
                "label {label} out of range for {n_classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        softmax += (lse - row[label]) / mf;
        let dist2: f64 = embeddings
            .row(i)
            .iter()
            .zip(centers.row(label))
            .map(|(e, c)| (e - c).powi(2))
            .sum();
        center += dist2 / (2.0 * mf);
    }
    Ok(LossBreakdown { total: softmax + lambda * center, softmax, center })
}

fn colsum(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (s, v) in out.iter_mut().zip(m.row(i)) {
            *s += v;
        }
    }
    out
}

/// Analytic gradient of the joint loss for the batch behind `cache`.
///
/// The cache must come from the model's most recent train-mode forward pass
/// with no parameter update in between.
pub fn backward(
    model: &DdaModel,
    labels: &[usize],
    cache: &BatchCache,
    lambda: f64,
) -> Result<Gradients> {
    if cache.token != model.train_steps {
        return Err(Error::Cache(
            "stale batch cache: the model advanced since this forward pass".into(),
        ));
    }
    let m = cache.input.rows();
    if labels.len() != m {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {m}",
            labels.len()
        )));
    }
    let mf = m as f64;
    let n_classes = model.arch.n_classes;
    let h = model.arch.hidden_dim;

    // Softmax gradient: (p − onehot)/m.
    let mut dlogits = Matrix::zeros(m, n_classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(Error::Label(format!(
                "label {label} out of range for {n_classes} classes"
            )));
        }
        let row = cache.logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (j, &l) in row.iter().enumerate() {
            let p = (l - max).exp() / denom;
            let delta = if j == label { 1.0 } else { 0.0 };
            dlogits.set(i, j, (p - delta) / mf);
        }
    }
    let w4 = dlogits.transpose().matmul(&cache.embeddings)?;
    let b4 = colsum(&dlogits);
    let mut de = dlogits.matmul(&model.classifier.w)?;

    // Center-loss term: λ/m · (e_i − c_{label_i}).
    if lambda != 0.0 {
        for (i, &label) in labels.iter().enumerate() {
            let center = model.centers.row(label).to_vec();
            for ((g, e), c) in de.row_mut(i).iter_mut().zip(cache.embeddings.row(i)).zip(&center) {
                *g += lambda / mf * (e - c);
            }
        }
    }

    let w3 = de.transpose().matmul(&cache.y_bn)?;
    let b3 = colsum(&de);
    let dy = de.matmul(&model.embed.w)?;

    // BatchNorm backward, batch-statistics terms included.
    let mut gamma = vec![0.0; h];
    let beta = colsum(&dy);
    for i in 0..m {
        for ((g, d), x) in gamma.iter_mut().zip(dy.row(i)).zip(cache.xhat.row(i)) {
            *g += d * x;
        }
    }
    let mut mean_dxhat = vec![0.0; h];
    let mut mean_dxhat_xhat = vec![0.0; h];
    for i in 0..m {
        for k in 0..h {
            let dxh = dy.get(i, k) * model.batchnorm.gamma[k];
            mean_dxhat[k] += dxh / mf;
            mean_dxhat_xhat[k] += dxh * cache.xhat.get(i, k) / mf;
        }
    }
    let mut da2 = Matrix::zeros(m, h);
    for i in 0..m {
        for k in 0..h {
            let dxh = dy.get(i, k) * model.batchnorm.gamma[k];
            da2.set(
                i,
                k,
                cache.inv_std[k]
                    * (dxh - mean_dxhat[k] - cache.xhat.get(i, k) * mean_dxhat_xhat[k]),
            );
        }
    }

    let mut prelu2 = vec![0.0; h];
    let mut dz2 = Matrix::zeros(m, h);
    for i in 0..m {
        for k in 0..h {
            let z = cache.z2.get(i, k);
            let g = da2.get(i, k);
            if z > 0.0 {
                dz2.set(i, k, g);
            } else {
                dz2.set(i, k, g * model.prelu2[k]);
                prelu2[k] += z * g;
            }
        }
    }
    let w2 = dz2.transpose().matmul(&cache.a1)?;
    let b2 = colsum(&dz2);
    let da1 = dz2.matmul(&model.layer2.w)?;

    let h1 = model.arch.hidden_dim;
    let mut prelu1 = vec![0.0; h1];
    let mut dz1 = Matrix::zeros(m, h1);
    for i in 0..m {
        for k in 0..h1 {
            let z = cache.z1.get(i, k);
            let g = da1.get(i, k);
            if z > 0.0 {
                dz1.set(i, k, g);
            } else {
                dz1.set(i, k, g * model.prelu1[k]);
                prelu1[k] += z * g;
            }
        }
    }
    let w1 = dz1.transpose().matmul(&cache.input)?;
    let b1 = colsum(&dz1);
    let input = dz1.matmul(&model.layer1.w)?;

    Ok(Gradients {
        w1,
        b1,
        prelu1,
        w2,
        b2,
        prelu2,
        gamma,
        beta,
        w3,
        b3,
        w4,
        b4,
        input,
    })
}

/// One plain-SGD step. Invalidates outstanding batch caches.
pub fn apply_gradients(model: &mut DdaModel, grads: &Gradients, lr: f64) -> Result<()> {
    if model.mode != Mode::Train {
        return Err(Error::Mode("parameter update on a finalized model".into()));
    }
    let step_vec = |p: &mut [f64], g: &[f64]| {
        for (v, d) in p.iter_mut().zip(g) {
            *v -= lr * d;
        }
    };
    model.layer1.w = model.layer1.w.sub(&grads.w1.scale(lr))?;
    step_vec(&mut model.layer1.b, &grads.b1);
    step_vec(&mut model.prelu1, &grads.prelu1);
    model.layer2.w = model.layer2.w.sub(&grads.w2.scale(lr))?;
    step_vec(&mut model.layer2.b, &grads.b2);
    step_vec(&mut model.prelu2, &grads.prelu2);
    step_vec(&mut model.batchnorm.gamma, &grads.gamma);
    step_vec(&mut model.batchnorm.beta, &grads.beta);
    model.embed.w = model.embed.w.sub(&grads.w3.scale(lr))?;
    step_vec(&mut model.embed.b, &grads.b3);
    model.classifier.w = model.classifier.w.sub(&grads.w4.scale(lr))?;
    step_vec(&mut model.classifier.b, &grads.b4);
    model.train_steps += 1;
    Ok(())
}

/// Moving-average center update: every class present in the batch moves
/// toward its batch class mean, `c ← (1−α)·c + α·mean`; absent classes stay.
pub fn update_centers(
    centers: &mut Matrix,
    embeddings: &Matrix,
    labels: &[usize],
    center_lr: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&center_lr) {
        return Err(Error::Config("center_lr must lie in [0, 1]".into()));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings vs {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let d = centers.cols();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut class_of: Vec<usize> = Vec::new();
    let mut slot: Vec<Option<usize>> = vec![None; centers.rows()];
    for (i, &label) in labels.iter().enumerate() {
        if label >= centers.rows() {
            return Err(Error::Label(format!(
                "label {label} out of range for {} centers",
                centers.rows()
            )));
        }
        let s = *slot[label].get_or_insert_with(|| {
            sums.push(vec![0.0; d]);
            counts.push(0);
            class_of.push(label);
            sums.len() - 1
        });
        counts[s] += 1;
        for (acc, v) in sums[s].iter_mut().zip(embeddings.row(i)) {
            *acc += v;
        }
    }
    for (s, &class) in class_of.iter().enumerate() {
        let mean_scale = center_lr / counts[s] as f64;
        for k in 0..d {
            let old = centers.get(class, k);
            centers.set(class, k, (1.0 - center_lr) * old + mean_scale * sums[s][k]);
        }
    }
    Ok(())
}

fn batch_matrix(corpus: &LabeledCorpus, indices: &[usize]) -> Matrix {
    let d = corpus.dim();
    let mut out = Matrix::zeros(indices.len(), d);
    for (row, &idx) in indices.iter().enumerate() {
        for (k, v) in corpus.items()[idx].embedding.iter().enumerate() {
            out.set(row, k, *v);
        }
    }
    out
}

/// Map speaker ids to class indices in sorted-id order.
pub fn class_labels(corpus: &LabeledCorpus) -> (Vec<usize>, Vec<String>) {
    let speakers = corpus.speakers();
    let names: Vec<String> = speakers.keys().map(|s| s.to_string()).collect();
    let mut labels = vec![0usize; corpus.len()];
    for (class, (_, idxs)) in speakers.iter().enumerate() {
        for &i in idxs {
            labels[i] = class;
        }
    }
    (labels, names)
}

/// Train a DDA model with mini-batch SGD. Per step: forward → loss →
/// backward → parameter update → center update. Returns the finalized model
/// and one averaged [`LossBreakdown`] per epoch.
pub fn train(
    corpus: &LabeledCorpus,
    arch: DdaArchitecture,
    cfg: &TrainConfig,
) -> Result<(DdaModel, Vec<LossBreakdown>)> {
    arch.validate()?;
    cfg.validate()?;
    if corpus.dim() != arch.input_dim {
        return Err(Error::Config(format!(
            "corpus dim {} does not match network input dim {}",
            corpus.dim(),
            arch.input_dim
        )));
    }
    if corpus.n_speakers() != arch.n_classes {
        return Err(Error::Config(format!(
            "corpus has {} speakers but the network expects {} classes",
            corpus.n_speakers(),
            arch.n_classes
        )));
    }

    let (labels, _) = class_labels(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DdaModel::init(arch, &mut rng)?;

    let half = cfg.epochs.div_ceil(2);
    let three_quarters = (cfg.epochs * 3).div_ceil(4);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.lr,
            LrSchedule::StepDecay if epoch >= three_quarters => cfg.lr * 0.01,
            LrSchedule::StepDecay if epoch >= half => cfg.lr * 0.1,
            LrSchedule::StepDecay => cfg.lr,
        };
        order.shuffle(&mut rng);
        let mut softmax_sum = 0.0;
        let mut center_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // BatchNorm cannot form batch statistics from one sample;
                // a trailing singleton is dropped for this epoch.
                continue;
            }
            let batch = batch_matrix(corpus, chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (pass, cache) = forward_train(&mut model, &batch)?;
            let loss = compute_loss(
                &pass.logits,
                &pass.embeddings,
                &batch_labels,
                &model.centers,
                cfg.lambda,
            )?;
            let grads = backward(&model, &batch_labels, &cache, cfg.lambda)?;
            apply_gradients(&mut model, &grads, lr)?;
            update_centers(&mut model.centers, &pass.embeddings, &batch_labels, cfg.center_lr)?;
            softmax_sum += loss.softmax * chunk.len() as f64;
            center_sum += loss.center * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::Config(
                "no usable batches: corpus smaller than 2 samples".into(),
            ));
        }
        let softmax = softmax_sum / seen as f64;
        let center = center_sum / seen as f64;
        history.push(LossBreakdown { total: softmax + cfg.lambda * center, softmax, center });
    }
    model.finalize();
    Ok((model, history))
}

/// Nonlinear compensation: the embed-layer output of a singleton
/// inference-mode forward pass. Requires a finalized model.
pub fn compensate(model: &DdaModel, x: &[f64]) -> Result<Embedding> {
    if model.mode != Mode::Infer {
        return Err(Error::Mode(
            "compensate requires a finalized (inference-mode) model".into(),
        ));
    }
    if x.len() != model.arch.input_dim {
        return Err(Error::Dimension(format!(
            "input dim {} does not match network input dim {}",
            x.len(),
            model.arch.input_dim
        )));
    }
    let batch = Matrix::new(1, x.len(), x.to_vec())?;
    let pass = forward_infer(model, &batch)?;
    Ok(pass.embeddings.row(0).to_vec())
}

fn push_matrix(out: &mut String, m: &Matrix) {
    for i in 0..m.rows() {
        textio::push_floats(out, m.row(i));
        out.push('\n');
    }
}

/// Serialize a finalized model: architecture header, each layer's tensors,
/// BatchNorm statistics, and the training-time centers.
pub fn write_model(model: &DdaModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(MODEL_TAG);
    out.push('\n');
    out.push_str(&format!(
        "{} {} {} {}\n",
        model.arch.input_dim, model.arch.hidden_dim, model.arch.embed_dim, model.arch.n_classes
    ));
    push_matrix(&mut out, &model.layer1.w);
    textio::push_floats(&mut out, &model.layer1.b);
    out.push('\n');
    textio::push_floats(&mut out, &model.prelu1);
    out.push('\n');
    push_matrix(&mut out, &model.layer2.w);
    textio::push_floats(&mut out, &model.layer2.b);
    out.push('\n');
    textio::push_floats(&mut out, &model.prelu2);
    out.push('\n');
    textio::push_floats(&mut out, &model.batchnorm.gamma);
    out.push('\n');
    textio::push_floats(&mut out, &model.batchnorm.beta);
    out.push('\n');
    textio::push_floats(&mut out, &model.batchnorm.running_mean);
    out.push('\n');
    textio::push_floats(&mut out, &model.batchnorm.running_var);
    out.push('\n');
    textio::push_floats(&mut out, &[model.batchnorm.epsilon]);
    out.push('\n');
    push_matrix(&mut out, &model.embed.w);
    textio::push_floats(&mut out, &model.embed.b);
    out.push('\n');
    push_matrix(&mut out, &model.classifier.w);
    textio::push_floats(&mut out, &model.classifier.b);
    out.push('\n');
    push_matrix(&mut out, &model.centers);
    std::fs::write(path, out)?;
    Ok(())
}

type NumberedLines<'a> = std::iter::Enumerate<std::str::Lines<'a>>;

fn read_row(lines: &mut NumberedLines, expected: usize, what: &str) -> Result<Vec<f64>> {
    let (idx, line) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("missing {what} line")))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    let row = textio::parse_floats(&fields, idx + 1)?;
    if row.len() != expected {
        return Err(Error::Format(format!(
            "{what} has {} values, expected {expected}",
            row.len()
        )));
    }
    Ok(row)
}

fn read_matrix(
    lines: &mut NumberedLines,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Matrix> {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = read_row(lines, cols, what)?;
        for (j, v) in row.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    Ok(m)
}

pub fn read_model(path: &Path) -> Result<DdaModel> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, tag) = lines
        .next()
        .ok_or_else(|| Error::Format("empty model file".into()))?;
    if tag.trim() != MODEL_TAG {
        return Err(Error::Format(format!(
            "expected {MODEL_TAG:?} model file, found {:?}",
            tag.trim()
        )));
    }
    let (idx, header) = lines
        .next()
        .ok_or_else(|| Error::Format("missing model header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: idx + 1,
            msg: "expected `input_dim hidden_dim embed_dim n_classes`".into(),
        });
    }
    let arch = DdaArchitecture {
        input_dim: textio::parse_usize(fields[0], idx + 1, "input_dim")?,
        hidden_dim: textio::parse_usize(fields[1], idx + 1, "hidden_dim")?,
        embed_dim: textio::parse_usize(fields[2], idx + 1, "embed_dim")?,
        n_classes: textio::parse_usize(fields[3], idx + 1, "n_classes")?,
    };
    arch.validate()?;

    let w1 = read_matrix(&mut lines, arch.hidden_dim, arch.input_dim, "layer1 weights")?;
    let b1 = read_row(&mut lines, arch.hidden_dim, "layer1 biases")?;
    let prelu1 = read_row(&mut lines, arch.hidden_dim, "layer1 slopes")?;
    let w2 = read_matrix(&mut lines, arch.hidden_dim, arch.hidden_dim, "layer2 weights")?;
    let b2 = read_row(&mut lines, arch.hidden_dim, "layer2 biases")?;
    let prelu2 = read_row(&mut lines, arch.hidden_dim, "layer2 slopes")?;
    let gamma = read_row(&mut lines, arch.hidden_dim, "gamma")?;
    let beta = read_row(&mut lines, arch.hidden_dim, "beta")?;
    let running_mean = read_row(&mut lines, arch.hidden_dim, "running mean")?;
    let running_var = read_row(&mut lines, arch.hidden_dim, "running var")?;
    let epsilon = read_row(&mut lines, 1, "epsilon")?[0];
    let w3 = read_matrix(&mut lines, arch.embed_dim, arch.hidden_dim, "embed weights")?;
    let b3 = read_row(&mut lines, arch.embed_dim, "embed biases")?;
    let w4 = read_matrix(&mut lines, arch.n_classes, arch.embed_dim, "classifier weights")?;
    let b4 = read_row(&mut lines, arch.n_classes, "classifier biases")?;
    let centers = read_matrix(&mut lines, arch.n_classes, arch.embed_dim, "centers")?;

    Ok(DdaModel {
        arch,
        layer1: Linear { w: w1, b: b1 },
        prelu1,
        layer2: Linear { w: w2, b: b2 },
        prelu2,
        batchnorm: BatchNorm { gamma, beta, running_mean, running_var, epsilon },
        embed: Linear { w: w3, b: b3 },
        classifier: Linear { w: w4, b: b4 },
        centers,
        mode: Mode::Infer,
        train_steps: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Distortion, SynthConfig};

    fn tiny_arch() -> DdaArchitecture {
        DdaArchitecture { input_dim: 20, hidden_dim: 10, embed_dim: 6, n_classes: 5 }
    }

    fn random_batch(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut out = Matrix::zeros(m, d);
        for i in 0..m {
            for j in 0..d {
                out.set(i, j, rng.random_range(-1.5..1.5));
            }
        }
        out
    }

    fn random_labels(m: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..m).map(|_| rng.random_range(0..n_classes)).collect()
    }

    fn randomize_centers(model: &mut DdaModel, rng: &mut ChaCha8Rng) {
        for i in 0..model.centers.rows() {
            for j in 0..model.centers.cols() {
                model.centers.set(i, j, rng.random_range(-0.5..0.5));
            }
        }
    }

    /// Loss at the current parameters, as a pure function: the model is
    /// cloned, so the running-statistics side effect is discarded.
    fn loss_at(model: &DdaModel, batch: &Matrix, labels: &[usize], lambda: f64) -> f64 {
        let mut probe = model.clone();
        let (pass, _) = forward_train(&mut probe, batch).unwrap();
        compute_loss(&pass.logits, &pass.embeddings, labels, &probe.centers, lambda)
            .unwrap()
            .total
    }

    /// Central finite difference through a parameter accessed by `get`/`set`.
    fn fd_grad(
        model: &DdaModel,
        batch: &Matrix,
        labels: &[usize],
        lambda: f64,
        set: impl Fn(&mut DdaModel, f64),
        get: impl Fn(&DdaModel) -> f64,
    ) -> f64 {
        let h = 1e-5 * get(model).abs().max(1.0);
        let mut plus = model.clone();
        set(&mut plus, get(model) + h);
        let mut minus = model.clone();
        set(&mut minus, get(model) - h);
        (loss_at(&plus, batch, labels, lambda) - loss_at(&minus, batch, labels, lambda))
            / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let tol = 1e-5 * analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() <= tol,
            "{what}: analytic {analytic} vs finite-difference {numeric}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1u64, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arch = tiny_arch();
            let mut model = DdaModel::init(arch, &mut rng).unwrap();
            randomize_centers(&mut model, &mut rng);
            let batch = random_batch(8, arch.input_dim, &mut rng);
            let labels = random_labels(8, arch.n_classes, &mut rng);
            let lambda = 0.05;

            let mut work = model.clone();
            let (_, cache) = forward_train(&mut work, &batch).unwrap();
            let grads = backward(&work, &labels, &cache, lambda).unwrap();
            // `work` advanced its step counter; gradient-check against the
            // pristine clone, whose parameters are identical.
            let base = model;

            for i in 0..arch.hidden_dim {
                for j in 0..arch.input_dim {
                    let fd = fd_grad(
                        &base,
                        &batch,
                        &labels,
                        lambda,
                        |m, v| m.layer1.w.set(i, j, v),
                        |m| m.layer1.w.get(i, j),
                    );
                    assert_close(grads.w1.get(i, j), fd, "w1");
                }
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.layer1.b[i] = v,
                    move |m| m.layer1.b[i],
                );
                assert_close(grads.b1[i], fd, "b1");
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.prelu1[i] = v,
                    move |m| m.prelu1[i],
                );
                assert_close(grads.prelu1[i], fd, "prelu1");
            }
            for i in 0..arch.hidden_dim {
                for j in 0..arch.hidden_dim {
                    let fd = fd_grad(
                        &base,
                        &batch,
                        &labels,
                        lambda,
                        |m, v| m.layer2.w.set(i, j, v),
                        |m| m.layer2.w.get(i, j),
                    );
                    assert_close(grads.w2.get(i, j), fd, "w2");
                }
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.layer2.b[i] = v,
                    move |m| m.layer2.b[i],
                );
                assert_close(grads.b2[i], fd, "b2");
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.prelu2[i] = v,
                    move |m| m.prelu2[i],
                );
                assert_close(grads.prelu2[i], fd, "prelu2");
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.batchnorm.gamma[i] = v,
                    move |m| m.batchnorm.gamma[i],
                );
                assert_close(grads.gamma[i], fd, "gamma");
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.batchnorm.beta[i] = v,
                    move |m| m.batchnorm.beta[i],
                );
                assert_close(grads.beta[i], fd, "beta");
            }
            for i in 0..arch.embed_dim {
                for j in 0..arch.hidden_dim {
                    let fd = fd_grad(
                        &base,
                        &batch,
                        &labels,
                        lambda,
                        |m, v| m.embed.w.set(i, j, v),
                        |m| m.embed.w.get(i, j),
                    );
                    assert_close(grads.w3.get(i, j), fd, "w3");
                }
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.embed.b[i] = v,
                    move |m| m.embed.b[i],
                );
                assert_close(grads.b3[i], fd, "b3");
            }
            for i in 0..arch.n_classes {
                for j in 0..arch.embed_dim {
                    let fd = fd_grad(
                        &base,
                        &batch,
                        &labels,
                        lambda,
                        |m, v| m.classifier.w.set(i, j, v),
                        |m| m.classifier.w.get(i, j),
                    );
                    assert_close(grads.w4.get(i, j), fd, "w4");
                }
                let fd = fd_grad(
                    &base,
                    &batch,
                    &labels,
                    lambda,
                    move |m, v| m.classifier.b[i] = v,
                    move |m| m.classifier.b[i],
                );
                assert_close(grads.b4[i], fd, "b4");
            }
            // Input gradient through the same finite-difference scheme.
            for i in 0..2 {
                for j in 0..arch.input_dim {
                    let h = 1e-5;
                    let mut plus = batch.clone();
                    plus.set(i, j, batch.get(i, j) + h);
                    let mut minus = batch.clone();
                    minus.set(i, j, batch.get(i, j) - h);
                    let fd = (loss_at(&base, &plus, &labels, lambda)
                        - loss_at(&base, &minus, &labels, lambda))
                        / (2.0 * h);
                    assert_close(grads.input.get(i, j), fd, "input");
                }
            }
        }
    }

    #[test]
    fn center_gradient_on_embeddings_is_the_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 4;
        let d = 3;
        let embeddings = random_batch(m, d, &mut rng);
        let centers = random_batch(3, d, &mut rng);
        let labels = vec![0usize, 2, 1, 0];
        let logits = random_batch(m, 3, &mut rng);
        let lambda = 0.7;

        for i in 0..m {
            for j in 0..d {
                let h = 1e-6;
                let mut plus = embeddings.clone();
                plus.set(i, j, embeddings.get(i, j) + h);
                let mut minus = embeddings.clone();
                minus.set(i, j, embeddings.get(i, j) - h);
                let lp = compute_loss(&logits, &plus, &labels, &centers, lambda).unwrap();
                let lm = compute_loss(&logits, &minus, &labels, &centers, lambda).unwrap();
                let fd = (lambda * lp.center - lambda * lm.center) / (2.0 * h);
                let analytic =
                    lambda / m as f64 * (embeddings.get(i, j) - centers.get(labels[i], j));
                assert!((fd - analytic).abs() < 1e-7, "{fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn lambda_zero_ignores_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = tiny_arch();
        let model = DdaModel::init(arch, &mut rng).unwrap();
        let batch = random_batch(6, arch.input_dim, &mut rng);
        let labels = random_labels(6, arch.n_classes, &mut rng);

        let mut a = model.clone();
        let (_, cache_a) = forward_train(&mut a, &batch).unwrap();
        let ga = backward(&a, &labels, &cache_a, 0.0).unwrap();

        let mut b = model.clone();
        randomize_centers(&mut b, &mut rng);
        let (_, cache_b) = forward_train(&mut b, &batch).unwrap();
        let gb = backward(&b, &labels, &cache_b, 0.0).unwrap();

        assert!(ga.w1.sub(&gb.w1).unwrap().max_abs() == 0.0);
        assert!(ga.w3.sub(&gb.w3).unwrap().max_abs() == 0.0);
        assert!(ga.w4.sub(&gb.w4).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn loss_closed_forms() {
        let logits = Matrix::zeros(3, 5);
        let embeddings = Matrix::new(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 0.0]).unwrap();
        let centers = embeddings.clone();
        let labels = vec![0usize, 1, 2];
        let loss = compute_loss(&logits, &embeddings, &labels, &centers, 0.3).unwrap();
        assert!((loss.softmax - 5.0f64.ln()).abs() < 1e-12);
        assert_eq!(loss.center, 0.0);
        assert!((loss.total - loss.softmax).abs() < 1e-15);

        let zero_lambda = compute_loss(&logits, &embeddings, &labels, &Matrix::zeros(5, 2), 0.0)
            .unwrap();
        assert_eq!(zero_lambda.total, zero_lambda.softmax);
    }

    #[test]
    fn loss_rejects_out_of_range_labels() {
        let logits = Matrix::zeros(1, 3);
        let embeddings = Matrix::zeros(1, 2);
        let centers = Matrix::zeros(3, 2);
        assert!(matches!(
            compute_loss(&logits, &embeddings, &[7], &centers, 0.0),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn infer_output_is_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let arch = tiny_arch();
        let mut model = DdaModel::init(arch, &mut rng).unwrap();
        model.finalize();
        let batch = random_batch(5, arch.input_dim, &mut rng);
        let all = forward_infer(&model, &batch).unwrap();
        for i in 0..5 {
            let single = Matrix::new(1, arch.input_dim, batch.row(i).to_vec()).unwrap();
            let alone = forward_infer(&model, &single).unwrap();
            for j in 0..arch.embed_dim {
                assert!((alone.embeddings.get(0, j) - all.embeddings.get(i, j)).abs() < 1e-12);
            }
            for j in 0..arch.n_classes {
                assert!((alone.logits.get(0, j) - all.logits.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_network_produces_zero_outputs() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DdaModel::init(arch, &mut rng).unwrap();
        model.layer1.w = Matrix::zeros(arch.hidden_dim, arch.input_dim);
        model.layer2.w = Matrix::zeros(arch.hidden_dim, arch.hidden_dim);
        model.embed.w = Matrix::zeros(arch.embed_dim, arch.hidden_dim);
        model.classifier.w = Matrix::zeros(arch.n_classes, arch.embed_dim);
        model.prelu1 = vec![0.0; arch.hidden_dim];
        model.prelu2 = vec![0.0; arch.hidden_dim];
        model.finalize();
        let batch = random_batch(3, arch.input_dim, &mut rng);
        let pass = forward_infer(&model, &batch).unwrap();
        assert_eq!(pass.embeddings.max_abs(), 0.0);
        assert_eq!(pass.logits.max_abs(), 0.0);
    }

    #[test]
    fn default_architecture_compresses_600_to_300() {
        let arch = DdaArchitecture::with_defaults(4);
        assert_eq!(arch.embed_dim, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = DdaModel::init(arch, &mut rng).unwrap();
        model.finalize();
        let x = vec![0.1; 600];
        let y = compensate(&model, &x).unwrap();
        assert_eq!(y.len(), 300);
    }

    #[test]
    fn unit_slopes_reduce_to_an_affine_map() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut model = DdaModel::init(arch, &mut rng).unwrap();
        model.prelu1 = vec![1.0; arch.hidden_dim];
        model.prelu2 = vec![1.0; arch.hidden_dim];
        model.finalize();

        // With running stats (0, 1), γ=1, β=0, BatchNorm is the linear map
        // x ↦ x/√(1+ε); the whole network composes to one affine map.
        let bn_scale = 1.0 / (1.0 + model.batchnorm.epsilon).sqrt();
        let batch = random_batch(4, arch.input_dim, &mut rng);
        let pass = forward_infer(&model, &batch).unwrap();
        for i in 0..4 {
            let x = batch.row(i);
            let h1: Vec<f64> = (0..arch.hidden_dim)
                .map(|k| {
                    model.layer1.b[k]
                        + (0..arch.input_dim)
                            .map(|j| model.layer1.w.get(k, j) * x[j])
                            .sum::<f64>()
                })
                .collect();
            let h2: Vec<f64> = (0..arch.hidden_dim)
                .map(|k| {
                    bn_scale
                        * (model.layer2.b[k]
                            + (0..arch.hidden_dim)
                                .map(|j| model.layer2.w.get(k, j) * h1[j])
                                .sum::<f64>())
                })
                .collect();
            for e in 0..arch.embed_dim {
                let expected: f64 = model.embed.b[e]
                    + (0..arch.hidden_dim)
                        .map(|j| model.embed.w.get(e, j) * h2[j])
                        .sum::<f64>();
                assert!((pass.embeddings.get(i, e) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_updates_follow_the_moving_average_rule() {
        let mut centers = Matrix::new(3, 2, vec![1.0, 1.0, -1.0, 0.0, 2.0, 2.0]).unwrap();
        let embeddings = Matrix::new(3, 2, vec![3.0, 5.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let labels = vec![0usize, 0, 2];

        // Full step: centers jump to the batch class means.
        let mut full = centers.clone();
        update_centers(&mut full, &embeddings, &labels, 1.0).unwrap();
        assert_eq!(full.row(0), &[2.0, 3.0]);
        assert_eq!(full.row(1), &[-1.0, 0.0]);
        assert_eq!(full.row(2), &[0.0, 0.0]);

        // Zero step: nothing moves.
        let mut frozen = centers.clone();
        update_centers(&mut frozen, &embeddings, &labels, 0.0).unwrap();
        assert_eq!(frozen, centers);

        // Partial step stays on the segment between old center and mean.
        update_centers(&mut centers, &embeddings, &labels, 0.25).unwrap();
        assert_eq!(centers.row(0), &[1.25, 1.5]);
        assert_eq!(centers.row(1), &[-1.0, 0.0]);
        for (v, (lo, hi)) in centers.row(2).iter().zip([(0.0, 2.0), (0.0, 2.0)]) {
            assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let arch = tiny_arch();
        let mut model = DdaModel::init(arch, &mut rng).unwrap();
        let batch = random_batch(4, arch.input_dim, &mut rng);
        let labels = random_labels(4, arch.n_classes, &mut rng);
        let (_, old_cache) = forward_train(&mut model, &batch).unwrap();
        let (_, fresh_cache) = forward_train(&mut model, &batch).unwrap();
        assert!(matches!(
            backward(&model, &labels, &old_cache, 0.0),
            Err(Error::Cache(_))
        ));
        assert!(backward(&model, &labels, &fresh_cache, 0.0).is_ok());
    }

    #[test]
    fn train_mode_rejects_singleton_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = tiny_arch();
        let mut model = DdaModel::init(arch, &mut rng).unwrap();
        let batch = random_batch(1, arch.input_dim, &mut rng);
        assert!(matches!(
            forward_train(&mut model, &batch),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn compensate_requires_finalized_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = tiny_arch();
        let model = DdaModel::init(arch, &mut rng).unwrap();
        let x = vec![0.0; arch.input_dim];
        assert!(matches!(compensate(&model, &x), Err(Error::Mode(_))));
    }

    fn toy_corpus(seed: u64) -> LabeledCorpus {
        generate_synthetic(&SynthConfig {
            dim: 10,
            n_speakers: 8,
            utts_per_speaker: 12,
            speaker_std: 1.0,
            channel_std: 0.3,
            residual_std: 0.2,
            distortion: Distortion::None,
            distortion_strength: 1.0,
            n_channels: 2,
            seed,
        })
        .unwrap()
        .length_normalized()
        .unwrap()
    }

    #[test]
    fn training_is_deterministic_and_decreases_the_loss() {
        let corpus = toy_corpus(5);
        let arch = DdaArchitecture {
            input_dim: 10,
            hidden_dim: 16,
            embed_dim: 4,
            n_classes: 8,
        };
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 0.05,
            seed: 7,
            ..TrainConfig::default()
        };
        let (model, history) = train(&corpus, arch, &cfg).unwrap();
        assert_eq!(model.mode, Mode::Infer);
        assert_eq!(history.len(), 20);
        for row in &history {
            assert!((row.total - (row.softmax + cfg.lambda * row.center)).abs() < 1e-12);
        }
        assert!(
            history.last().unwrap().total < history[0].total,
            "loss did not improve: {} -> {}",
            history[0].total,
            history.last().unwrap().total
        );

        let (_, history2) = train(&corpus, arch, &cfg).unwrap();
        assert_eq!(history, history2);
    }

    #[test]
    fn compensate_matches_forward_and_is_pure() {
        let corpus = toy_corpus(6);
        let arch = DdaArchitecture {
            input_dim: 10,
            hidden_dim: 12,
            embed_dim: 3,
            n_classes: 8,
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (model, _) = train(&corpus, arch, &cfg).unwrap();
        let x = corpus.items()[0].embedding.clone();
        let y1 = compensate(&model, &x).unwrap();
        let y2 = compensate(&model, &x).unwrap();
        assert_eq!(y1, y2);
        let batch = Matrix::new(1, 10, x.clone()).unwrap();
        let pass = forward_infer(&model, &batch).unwrap();
        assert_eq!(y1, pass.embeddings.row(0));
    }

    #[test]
    fn train_validates_configuration() {
        let corpus = toy_corpus(9);
        let arch = DdaArchitecture {
            input_dim: 10,
            hidden_dim: 8,
            embed_dim: 3,
            n_classes: 4,
        };
        // Speaker count mismatch.
        assert!(matches!(
            train(&corpus, arch, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        let arch = DdaArchitecture { n_classes: 8, ..arch };
        let bad = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(matches!(train(&corpus, arch, &bad), Err(Error::Config(_))));
        let bad = TrainConfig { center_lr: 1.5, ..TrainConfig::default() };
        assert!(matches!(train(&corpus, arch, &bad), Err(Error::Config(_))));
        let bad = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(matches!(train(&corpus, arch, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn model_serialization_round_trips() {
        let corpus = toy_corpus(11);
        let arch = DdaArchitecture {
            input_dim: 10,
            hidden_dim: 6,
            embed_dim: 3,
            n_classes: 8,
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (model, _) = train(&corpus, arch, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dda.model");
        write_model(&model, &path).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(model.layer1, back.layer1);
        assert_eq!(model.prelu1, back.prelu1);
        assert_eq!(model.layer2, back.layer2);
        assert_eq!(model.prelu2, back.prelu2);
        assert_eq!(model.batchnorm, back.batchnorm);
        assert_eq!(model.embed, back.embed);
        assert_eq!(model.classifier, back.classifier);
        assert_eq!(model.centers, back.centers);
        assert_eq!(back.mode, Mode::Infer);
        let x = corpus.items()[3].embedding.clone();
        assert_eq!(compensate(&model, &x).unwrap(), compensate(&back, &x).unwrap());
    }
}

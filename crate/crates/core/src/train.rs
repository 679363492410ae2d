//! Desk-scale fine-tuning experiments: synthetic tasks, base-model
//! pretraining, magnitude pruning, adapter fine-tuning, and rank sweeps.
//!
//! Models are stacks of linear layers with a rectifier between them (and
//! nothing after the last layer). Base weights are frozen the moment a model
//! is constructed; fine-tuning only ever touches adapters. Every experiment
//! is a pure function of its configuration and seeds: datasets, inits and
//! minibatch order are all derived from the task seed, and sweep cells are
//! keyed by (policy, rank, seed) so they can run on any number of workers.

use crate::adapters::{AdaptedLinear, AdapterConfig, InitPreset, LowRankAdapter, ScalingPolicy};
use crate::error::{CoreError, Result};
use crate::grad::{grad_adapter_batch, matmul_abt, matmul_atb, sgd_step, Hyperparams};
use crate::linalg::{gaussian_matrix_from, Matrix, RngSeed, SeededRng};
use rayon::prelude::*;

const TEACHER_STREAM: u64 = 0x7EAC;
const TRAIN_STREAM: u64 = 0x7301;
const EVAL_STREAM: u64 = 0x7302;
const BASE_STREAM: u64 = 0x7303;
const MODEL_INIT_STREAM: u64 = 0x7304;
const ADAPTER_STREAM: u64 = 0xADA0;
const REPLICATE_STREAM: u64 = 0x5EED_0000;

/// Task family for the toy experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Regression against a hidden two-layer rectifier network.
    TeacherStudent,
    /// Labels are the argmax of a hidden random linear map.
    Classification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TeacherStudent => "teacher-student",
            TaskKind::Classification => "classification",
        }
    }

    /// Whether larger eval metric values are better.
    pub fn higher_is_better(self) -> bool {
        matches!(self, TaskKind::Classification)
    }
}

/// Synthetic task description; datasets regenerate bit-identically from the
/// seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise_std: f64,
    pub seed: RngSeed,
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(CoreError::InvalidArgument(
                "task widths must be positive".into(),
            ));
        }
        if self.kind == TaskKind::TeacherStudent && self.d_hidden == 0 {
            return Err(CoreError::InvalidArgument(
                "teacher-student task needs d_hidden >= 1".into(),
            ));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(CoreError::InvalidArgument(
                "n_train and n_eval must be positive".into(),
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Independent replicate of this task for one sweep seed.
    pub fn replicate(&self, seed: u64) -> ToyTask {
        let mut t = self.clone();
        t.seed = self.seed.child(REPLICATE_STREAM ^ seed);
        t
    }
}

/// Inputs and targets stored column-per-example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contiguous wrap-around minibatch for a given step; `batch = 0` means
    /// the full set. Deterministic, no shuffling.
    pub fn batch(&self, step: usize, batch: usize) -> Dataset {
        let n = self.len();
        if batch == 0 || batch >= n {
            return self.clone();
        }
        let start = (step * batch) % n;
        let cols: Vec<usize> = (0..batch).map(|i| (start + i) % n).collect();
        let take = |m: &Matrix| {
            let mut data = Vec::with_capacity(m.rows() * cols.len());
            for i in 0..m.rows() {
                for &c in &cols {
                    data.push(m.get(i, c));
                }
            }
            Matrix::new(m.rows(), cols.len(), data).expect("batch slice is well-formed")
        };
        Dataset {
            inputs: take(&self.inputs),
            targets: take(&self.targets),
            labels: self
                .labels
                .as_ref()
                .map(|l| cols.iter().map(|&c| l[c]).collect()),
        }
    }
}

#[derive(Debug, Clone)]
enum TeacherNet {
    TwoLayer { w1: Matrix, w2: Matrix },
    Linear { map: Matrix },
}

fn relu(m: &Matrix) -> Matrix {
    let data = m
        .as_slice()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Matrix::new(m.rows(), m.cols(), data).expect("relu preserves shape")
}

/// grad * [pre > 0], the rectifier backward mask.
fn relu_backward(grad: &Matrix, pre: &Matrix) -> Matrix {
    let data = grad
        .as_slice()
        .iter()
        .zip(pre.as_slice())
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::new(grad.rows(), grad.cols(), data).expect("mask preserves shape")
}

fn build_teacher(task: &ToyTask) -> Result<TeacherNet> {
    let mut rng = SeededRng::new(task.seed.child(TEACHER_STREAM));
    match task.kind {
        TaskKind::TeacherStudent => {
            let w1 = gaussian_matrix_from(
                task.d_hidden,
                task.d_in,
                0.0,
                1.0 / (task.d_in as f64).sqrt(),
                &mut rng,
            )?;
            let w2 = gaussian_matrix_from(
                task.d_out,
                task.d_hidden,
                0.0,
                1.0 / (task.d_hidden as f64).sqrt(),
                &mut rng,
            )?;
            Ok(TeacherNet::TwoLayer { w1, w2 })
        }
        TaskKind::Classification => {
            let map = gaussian_matrix_from(
                task.d_out,
                task.d_in,
                0.0,
                1.0 / (task.d_in as f64).sqrt(),
                &mut rng,
            )?;
            Ok(TeacherNet::Linear { map })
        }
    }
}

fn teacher_outputs(teacher: &TeacherNet, inputs: &Matrix) -> Result<Matrix> {
    match teacher {
        TeacherNet::TwoLayer { w1, w2 } => w2.matmul(&relu(&w1.matmul(inputs)?)),
        TeacherNet::Linear { map } => map.matmul(inputs),
    }
}

fn argmax_col(m: &Matrix, col: usize) -> usize {
    let mut best = 0;
    let mut best_v = m.get(0, col);
    for i in 1..m.rows() {
        let v = m.get(i, col);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn sample_split(task: &ToyTask, teacher: &TeacherNet, n: usize, seed: RngSeed) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed);
    let inputs = gaussian_matrix_from(task.d_in, n, 0.0, 1.0, &mut rng)?;
    match task.kind {
        TaskKind::TeacherStudent => {
            let clean = teacher_outputs(teacher, &inputs)?;
            let targets = if task.noise_std > 0.0 {
                let noise =
                    gaussian_matrix_from(task.d_out, n, 0.0, task.noise_std, &mut rng)?;
                clean.add_scaled(&noise, 1.0)?
            } else {
                clean
            };
            Ok(Dataset {
                inputs,
                targets,
                labels: None,
            })
        }
        TaskKind::Classification => {
            let scores = teacher_outputs(teacher, &inputs)?;
            let labels: Vec<usize> = (0..n).map(|c| argmax_col(&scores, c)).collect();
            let mut onehot = vec![0.0; task.d_out * n];
            for (c, &l) in labels.iter().enumerate() {
                onehot[l * n + c] = 1.0;
            }
            Ok(Dataset {
                inputs,
                targets: Matrix::new(task.d_out, n, onehot)?,
                labels: Some(labels),
            })
        }
    }
}

fn class_counts(labels: &[usize], d_out: usize) -> Vec<usize> {
    let mut counts = vec![0usize; d_out];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

fn labels_balanced(labels: &[usize], d_out: usize) -> bool {
    let n = labels.len();
    class_counts(labels, d_out)
        .iter()
        .all(|&c| (c as f64) >= 0.05 * n as f64)
}

/// Generate the train/eval pair for a task.
///
/// Classification draws whose label distribution is degenerate (< 5% in some
/// class, checked for d_out <= 8) are rejected and redrawn from a derived
/// seed, deterministically; after 16 attempts this errors out.
pub fn make_task(task: &ToyTask) -> Result<(Dataset, Dataset)> {
    task.validate()?;
    for attempt in 0..16u64 {
        let teacher = build_teacher(task)?;
        let train = sample_split(task, &teacher, task.n_train, task.seed.child(TRAIN_STREAM ^ (attempt << 32)))?;
        let eval = sample_split(task, &teacher, task.n_eval, task.seed.child(EVAL_STREAM ^ (attempt << 32)))?;
        if task.kind == TaskKind::Classification && task.d_out <= 8 {
            let ok = train
                .labels
                .as_ref()
                .map(|l| labels_balanced(l, task.d_out))
                .unwrap_or(false)
                && eval
                    .labels
                    .as_ref()
                    .map(|l| labels_balanced(l, task.d_out))
                    .unwrap_or(false);
            if !ok {
                continue;
            }
        }
        return Ok((train, eval));
    }
    Err(CoreError::InvalidArgument(
        "could not draw a balanced classification dataset in 16 attempts".into(),
    ))
}

/// Architecture of the student model: layer widths from input to output and
/// the absolute std of the Gaussian weight init.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub init_std: f64,
}

impl ModelSpec {
    pub fn validate(&self, task: &ToyTask) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(CoreError::InvalidArgument(
                "model needs at least input and output widths".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidArgument(
                "model widths must be positive".into(),
            ));
        }
        if self.widths[0] != task.d_in || *self.widths.last().unwrap() != task.d_out {
            return Err(CoreError::InvalidArgument(format!(
                "model widths {:?} do not match task {}x{}",
                self.widths, task.d_in, task.d_out
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "init_std must be finite and >= 0, got {}",
                self.init_std
            )));
        }
        Ok(())
    }
}

/// Frozen stack of linear layers. Adapters are attached per fine-tuning run;
/// nothing here is mutable from outside.
#[derive(Debug, Clone)]
pub struct ToyModel {
    weights: Vec<Matrix>,
}

impl ToyModel {
    fn new(weights: Vec<Matrix>) -> ToyModel {
        ToyModel { weights }
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn total_params(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum()
    }

    pub fn nonzero_fraction(&self) -> f64 {
        let nz: usize = self
            .weights
            .iter()
            .map(|w| w.as_slice().iter().filter(|v| **v != 0.0).count())
            .sum();
        nz as f64 / self.total_params() as f64
    }

    pub fn bits_eq(&self, other: &ToyModel) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.bits_eq(b))
    }

    /// Base-only forward: rectifier between layers, linear output.
    pub fn forward_base(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut z = inputs.clone();
        for (l, w) in self.weights.iter().enumerate() {
            let pre = w.matmul(&z)?;
            z = if l + 1 < self.weights.len() { relu(&pre) } else { pre };
        }
        Ok(z)
    }
}

/// Mean over examples of the squared error summed over outputs.
pub fn mse_loss(pred: &Matrix, targets: &Matrix) -> f64 {
    let m = pred.cols() as f64;
    pred.as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / m
}

/// dL/dpred for [`mse_loss`]: 2 (pred - targets) / m.
fn mse_delta(pred: &Matrix, targets: &Matrix) -> Result<Matrix> {
    let m = pred.cols() as f64;
    let data = pred
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(p, t)| 2.0 * (p - t) / m)
        .collect();
    Matrix::new(pred.rows(), pred.cols(), data)
}

/// Mean softmax cross-entropy over examples.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> f64 {
    let m = logits.cols();
    let mut total = 0.0;
    for c in 0..m {
        let mut maxv = f64::NEG_INFINITY;
        for i in 0..logits.rows() {
            maxv = maxv.max(logits.get(i, c));
        }
        let mut lse = 0.0;
        for i in 0..logits.rows() {
            lse += (logits.get(i, c) - maxv).exp();
        }
        total += maxv + lse.ln() - logits.get(labels[c], c);
    }
    total / m as f64
}

/// dL/dlogits for [`cross_entropy_loss`]: (softmax - onehot) / m.
fn cross_entropy_delta(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let m = logits.cols();
    let mut data = vec![0.0; logits.rows() * m];
    for c in 0..m {
        let mut maxv = f64::NEG_INFINITY;
        for i in 0..logits.rows() {
            maxv = maxv.max(logits.get(i, c));
        }
        let mut z = 0.0;
        for i in 0..logits.rows() {
            z += (logits.get(i, c) - maxv).exp();
        }
        for i in 0..logits.rows() {
            let p = (logits.get(i, c) - maxv).exp() / z;
            data[i * m + c] = (p - if labels[c] == i { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    Matrix::new(logits.rows(), m, data)
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = (0..logits.cols())
        .filter(|&c| argmax_col(logits, c) == labels[c])
        .count();
    hits as f64 / logits.cols() as f64
}

fn batch_loss(kind: TaskKind, pred: &Matrix, data: &Dataset) -> f64 {
    match kind {
        TaskKind::TeacherStudent => mse_loss(pred, &data.targets),
        TaskKind::Classification => {
            cross_entropy_loss(pred, data.labels.as_ref().expect("labels present"))
        }
    }
}

fn batch_delta(kind: TaskKind, pred: &Matrix, data: &Dataset) -> Result<Matrix> {
    match kind {
        TaskKind::TeacherStudent => mse_delta(pred, &data.targets),
        TaskKind::Classification => {
            cross_entropy_delta(pred, data.labels.as_ref().expect("labels present"))
        }
    }
}

/// Task eval metric: MSE for regression (lower better), accuracy for
/// classification (higher better).
fn eval_metric_from_pred(kind: TaskKind, pred: &Matrix, data: &Dataset) -> f64 {
    match kind {
        TaskKind::TeacherStudent => mse_loss(pred, &data.targets),
        TaskKind::Classification => accuracy(pred, data.labels.as_ref().expect("labels present")),
    }
}

/// Eval metric of the frozen base model.
pub fn eval_base(model: &ToyModel, kind: TaskKind, data: &Dataset) -> Result<f64> {
    Ok(eval_metric_from_pred(kind, &model.forward_base(&data.inputs)?, data))
}

/// True when `after` is a strict improvement over `before` for this task.
pub fn metric_improved(kind: TaskKind, before: f64, after: f64) -> bool {
    if kind.higher_is_better() {
        after > before
    } else {
        after < before
    }
}

/// Train all weights on a freshly drawn base split; returns the model with
/// weights frozen from then on.
pub fn pretrain_base(task: &ToyTask, spec: &ModelSpec, hyper: &Hyperparams) -> Result<ToyModel> {
    task.validate()?;
    spec.validate(task)?;
    let teacher = build_teacher(task)?;
    let data = sample_split(task, &teacher, task.n_train, task.seed.child(BASE_STREAM))?;

    let mut rng = SeededRng::new(task.seed.child(MODEL_INIT_STREAM));
    let mut weights: Vec<Matrix> = Vec::with_capacity(spec.widths.len() - 1);
    for l in 0..spec.widths.len() - 1 {
        let w = if spec.init_std == 0.0 {
            Matrix::zeros(spec.widths[l + 1], spec.widths[l])
        } else {
            gaussian_matrix_from(spec.widths[l + 1], spec.widths[l], 0.0, spec.init_std, &mut rng)?
        };
        weights.push(w);
    }

    for step in 0..hyper.steps {
        let batch = data.batch(step, hyper.batch);
        // forward, keeping pre-activations and layer inputs
        let mut z = batch.inputs.clone();
        let mut inputs_per_layer = Vec::with_capacity(weights.len());
        let mut pre_per_layer = Vec::with_capacity(weights.len());
        for (l, w) in weights.iter().enumerate() {
            inputs_per_layer.push(z.clone());
            let pre = w.matmul(&z)?;
            z = if l + 1 < weights.len() { relu(&pre) } else { pre.clone() };
            pre_per_layer.push(pre);
        }
        let loss = batch_loss(task.kind, &z, &batch);
        if !loss.is_finite() {
            return Err(CoreError::Training {
                step,
                detail: format!("pretraining loss became {loss}"),
            });
        }
        // backward
        let mut grad = batch_delta(task.kind, &z, &batch)?;
        for l in (0..weights.len()).rev() {
            let dw = matmul_abt(&grad, &inputs_per_layer[l])?;
            if l > 0 {
                let upstream = matmul_atb(&weights[l], &grad)?;
                grad = relu_backward(&upstream, &pre_per_layer[l - 1]);
            }
            weights[l] = weights[l].add_scaled(&dw, -hyper.lr)?;
        }
    }
    Ok(ToyModel::new(weights))
}

/// Zero the globally smallest-magnitude fraction of base weights.
///
/// Ties break by flat weight index, so the mask is deterministic. The pruned
/// count is round(sparsity * total), within one weight of the target.
pub fn magnitude_prune(model: &ToyModel, sparsity: f64) -> Result<ToyModel> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(CoreError::InvalidArgument(format!(
            "sparsity must be in [0, 1), got {sparsity}"
        )));
    }
    let total = model.total_params();
    let k = (sparsity * total as f64).round() as usize;
    if k == 0 {
        return Ok(model.clone());
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat = 0usize;
    for w in &model.weights {
        for &v in w.as_slice() {
            order.push((v.abs(), flat));
            flat += 1;
        }
    }
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kill = vec![false; total];
    for &(_, idx) in order.iter().take(k) {
        kill[idx] = true;
    }
    let mut weights = Vec::with_capacity(model.weights.len());
    let mut flat = 0usize;
    for w in &model.weights {
        let data = w
            .as_slice()
            .iter()
            .map(|&v| {
                let out = if kill[flat] { 0.0 } else { v };
                flat += 1;
                out
            })
            .collect();
        weights.push(Matrix::new(w.rows(), w.cols(), data)?);
    }
    Ok(ToyModel::new(weights))
}

/// Rank, scaling rule and init for adapters attached during fine-tuning;
/// shapes come from each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSpec {
    pub r: usize,
    pub alpha: f64,
    pub policy: ScalingPolicy,
    pub init: InitPreset,
}

impl AdapterSpec {
    pub fn config_for(&self, p_in: usize, p_out: usize) -> Result<AdapterConfig> {
        AdapterConfig::new(p_in, p_out, self.r, self.alpha, self.policy, self.init)
    }
}

/// Loss and update-norm traces for one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub policy: ScalingPolicy,
    pub rank: usize,
    pub seed: u64,
    /// Loss before each update; entry 0 is the untouched zero-init model.
    pub losses: Vec<f64>,
    /// ||change of (scaling * b * a)||_F across all layers, per step.
    pub update_norms: Vec<f64>,
    /// Base-only loss on the step-0 batch; must equal `losses[0]` bit-wise.
    pub frozen_train_loss: f64,
    /// Base-only eval metric before fine-tuning.
    pub frozen_eval: f64,
    /// Eval metric after the final step.
    pub final_eval: f64,
}

impl TrainRecord {
    /// Mean update norm over the first `n` steps (or all, if shorter).
    pub fn mean_update_norm(&self, n: usize) -> f64 {
        let take = n.min(self.update_norms.len());
        if take == 0 {
            return 0.0;
        }
        self.update_norms[..take].iter().sum::<f64>() / take as f64
    }
}

fn adapted_forward_batch(layer: &AdaptedLinear, z: &Matrix) -> Result<Matrix> {
    let frozen = layer.base().matmul(z)?;
    let down = layer.adapter.a.matmul(z)?;
    let up = layer.adapter.b.matmul(&down)?;
    frozen.add_scaled(&up, layer.adapter.scaling())
}

/// Attach fresh adapters to every layer and run SGD on adapter parameters
/// only. Deterministic per seed; the base model is never modified.
pub fn finetune(
    model: &ToyModel,
    task: &ToyTask,
    spec: &AdapterSpec,
    hyper: &Hyperparams,
    seed: RngSeed,
) -> Result<TrainRecord> {
    finetune_full(model, task, spec, hyper, seed).map(|(rec, _)| rec)
}

/// As [`finetune`], also returning the final per-layer adapters (with their
/// configs) for snapshotting.
pub fn finetune_full(
    model: &ToyModel,
    task: &ToyTask,
    spec: &AdapterSpec,
    hyper: &Hyperparams,
    seed: RngSeed,
) -> Result<(TrainRecord, Vec<(AdapterConfig, LowRankAdapter)>)> {
    task.validate()?;
    let (train, eval) = make_task(task)?;

    let mut layers: Vec<AdaptedLinear> = Vec::with_capacity(model.layer_count());
    let mut configs: Vec<AdapterConfig> = Vec::with_capacity(model.layer_count());
    for (l, w) in model.weights().iter().enumerate() {
        let cfg = spec.config_for(w.cols(), w.rows())?;
        let adapter = LowRankAdapter::init(&cfg, seed.child(ADAPTER_STREAM + l as u64))?;
        layers.push(AdaptedLinear::new(w.clone(), adapter)?);
        configs.push(cfg);
    }

    let step0_batch = train.batch(0, hyper.batch);
    let frozen_train_loss = batch_loss(task.kind, &model.forward_base(&step0_batch.inputs)?, &step0_batch);
    let frozen_eval = eval_base(model, task.kind, &eval)?;

    let mut prev_eff: Vec<Matrix> = layers
        .iter()
        .map(|l| l.adapter.effective_update())
        .collect::<Result<_>>()?;

    let mut losses = Vec::with_capacity(hyper.steps);
    let mut update_norms = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let batch = train.batch(step, hyper.batch);
        // forward through adapted layers
        let mut z = batch.inputs.clone();
        let mut layer_inputs = Vec::with_capacity(layers.len());
        let mut pre_acts = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            layer_inputs.push(z.clone());
            let pre = adapted_forward_batch(layer, &z)?;
            z = if l + 1 < layers.len() { relu(&pre) } else { pre.clone() };
            pre_acts.push(pre);
        }
        let loss = batch_loss(task.kind, &z, &batch);
        if !loss.is_finite() {
            return Err(CoreError::Training {
                step,
                detail: format!(
                    "fine-tuning loss became {loss} (policy={}, rank={})",
                    spec.policy, spec.r
                ),
            });
        }
        losses.push(loss);

        // backward; base weights receive no updates
        let mut grad = batch_delta(task.kind, &z, &batch)?;
        let mut grads_per_layer = vec![None; layers.len()];
        for l in (0..layers.len()).rev() {
            grads_per_layer[l] = Some(grad_adapter_batch(
                &layers[l].adapter,
                &layer_inputs[l],
                &grad,
            )?);
            if l > 0 {
                let base_part = matmul_atb(layers[l].base(), &grad)?;
                let bt = matmul_atb(&layers[l].adapter.b, &grad)?;
                let adapter_part = matmul_atb(&layers[l].adapter.a, &bt)?;
                let upstream =
                    base_part.add_scaled(&adapter_part, layers[l].adapter.scaling())?;
                grad = relu_backward(&upstream, &pre_acts[l - 1]);
            }
        }
        for (l, layer) in layers.iter_mut().enumerate() {
            let g = grads_per_layer[l].take().expect("gradient computed");
            layer.adapter = sgd_step(&layer.adapter, &g, hyper.lr, false)?;
        }

        // ||delta of effective update||_F across layers
        let mut sq = 0.0;
        for (l, layer) in layers.iter().enumerate() {
            let eff = layer.adapter.effective_update()?;
            let d = eff.add_scaled(&prev_eff[l], -1.0)?;
            let f = d.frobenius_norm();
            sq += f * f;
            prev_eff[l] = eff;
        }
        update_norms.push(sq.sqrt());
    }

    // final eval through the adapted stack
    let mut z = eval.inputs.clone();
    for (l, layer) in layers.iter().enumerate() {
        let pre = adapted_forward_batch(layer, &z)?;
        z = if l + 1 < layers.len() { relu(&pre) } else { pre };
    }
    let final_eval = eval_metric_from_pred(task.kind, &z, &eval);

    let record = TrainRecord {
        policy: spec.policy,
        rank: spec.r,
        seed: seed.0,
        losses,
        update_norms,
        frozen_train_loss,
        frozen_eval,
        final_eval,
    };
    let adapters = configs
        .into_iter()
        .zip(layers)
        .map(|(cfg, layer)| (cfg, layer.adapter))
        .collect();
    Ok((record, adapters))
}

/// Per-rank aggregates over seeds for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rank: usize,
    pub mean_eval: f64,
    pub std_eval: f64,
    pub mean_final_update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub policy: ScalingPolicy,
    pub rows: Vec<SweepRow>,
}

/// Everything a training sweep needs, in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub task: ToyTask,
    pub model: ModelSpec,
    pub pretrain: Hyperparams,
    pub finetune: Hyperparams,
    pub alpha: f64,
    pub init: InitPreset,
    pub policies: Vec<ScalingPolicy>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate(&self.task)?;
        if self.seeds.len() < 3 {
            return Err(CoreError::InvalidArgument(format!(
                "sweeps need at least 3 seeds, got {}",
                self.seeds.len()
            )));
        }
        if self.policies.is_empty() || self.ranks.is_empty() {
            return Err(CoreError::InvalidArgument(
                "sweeps need at least one policy and one rank".into(),
            ));
        }
        Ok(())
    }
}

/// All cell records plus per-policy aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Ordered by (policy, rank, seed), matching the plan's lists.
    pub records: Vec<TrainRecord>,
    pub summaries: Vec<SweepRecord>,
}

/// Pretrained (or pretrained-then-pruned) base for each sweep seed.
struct ReplicateBases {
    tasks: Vec<ToyTask>,
    models: Vec<ToyModel>,
}

fn pretrain_replicates(plan: &SweepPlan) -> Result<ReplicateBases> {
    let tasks: Vec<ToyTask> = plan.seeds.iter().map(|&s| plan.task.replicate(s)).collect();
    let models = tasks
        .iter()
        .map(|t| pretrain_base(t, &plan.model, &plan.pretrain))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicateBases { tasks, models })
}

fn run_cells(plan: &SweepPlan, bases: &ReplicateBases) -> Result<SweepOutcome> {
    struct Cell {
        policy: ScalingPolicy,
        rank: usize,
        seed_idx: usize,
    }
    let mut cells = Vec::new();
    for &policy in &plan.policies {
        for &rank in &plan.ranks {
            for seed_idx in 0..plan.seeds.len() {
                cells.push(Cell {
                    policy,
                    rank,
                    seed_idx,
                });
            }
        }
    }
    let records: Vec<Result<TrainRecord>> = cells
        .par_iter()
        .map(|cell| {
            let task = &bases.tasks[cell.seed_idx];
            let model = &bases.models[cell.seed_idx];
            let spec = AdapterSpec {
                r: cell.rank,
                alpha: plan.alpha,
                policy: cell.policy,
                init: plan.init,
            };
            // adapter seed is shared across policies so policy comparisons
            // are paired on identical draws
            let seed = task.seed.child(ADAPTER_STREAM ^ (cell.rank as u64));
            finetune(model, task, &spec, &plan.finetune, seed).map_err(|e| {
                CoreError::SweepCell {
                    policy: cell.policy.to_string(),
                    rank: cell.rank,
                    seed: plan.seeds[cell.seed_idx],
                    source: Box::new(e),
                }
            })
        })
        .collect();
    let mut flat = Vec::with_capacity(records.len());
    for (r, cell) in records.into_iter().zip(&cells) {
        let mut rec = r?;
        rec.seed = plan.seeds[cell.seed_idx];
        flat.push(rec);
    }

    let n_seeds = plan.seeds.len();
    let mut summaries = Vec::with_capacity(plan.policies.len());
    for (pi, &policy) in plan.policies.iter().enumerate() {
        let mut rows = Vec::with_capacity(plan.ranks.len());
        for (ri, &rank) in plan.ranks.iter().enumerate() {
            let base = (pi * plan.ranks.len() + ri) * n_seeds;
            let cells = &flat[base..base + n_seeds];
            let evals: Vec<f64> = cells.iter().map(|c| c.final_eval).collect();
            let mean = evals.iter().sum::<f64>() / n_seeds as f64;
            let var = evals.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                / (n_seeds as f64 - 1.0).max(1.0);
            let final_norm = cells
                .iter()
                .map(|c| c.update_norms.last().copied().unwrap_or(0.0))
                .sum::<f64>()
                / n_seeds as f64;
            rows.push(SweepRow {
                rank,
                mean_eval: mean,
                std_eval: var.sqrt(),
                mean_final_update_norm: final_norm,
            });
        }
        summaries.push(SweepRecord { policy, rows });
    }
    Ok(SweepOutcome {
        records: flat,
        summaries,
    })
}

/// Pretrain per seed, then fine-tune every (policy, rank, seed) cell.
pub fn rank_sweep_experiment(plan: &SweepPlan) -> Result<SweepOutcome> {
    plan.validate()?;
    let bases = pretrain_replicates(plan)?;
    run_cells(plan, &bases)
}

/// Rank sweep on magnitude-pruned bases, with per-seed before/after eval of
/// the unadapted model.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedOutcome {
    /// Eval metric of the unpruned pretrained base, per seed.
    pub base_eval: Vec<f64>,
    /// Eval metric of the pruned, unadapted base, per seed.
    pub pruned_eval: Vec<f64>,
    pub sweep: SweepOutcome,
}

pub fn pruned_finetune_experiment(plan: &SweepPlan, sparsity: f64) -> Result<PrunedOutcome> {
    plan.validate()?;
    let bases = pretrain_replicates(plan)?;
    let mut base_eval = Vec::with_capacity(bases.models.len());
    let mut pruned_eval = Vec::with_capacity(bases.models.len());
    let mut pruned_models = Vec::with_capacity(bases.models.len());
    for (task, model) in bases.tasks.iter().zip(&bases.models) {
        let (_, eval) = make_task(task)?;
        base_eval.push(eval_base(model, task.kind, &eval)?);
        let pruned = magnitude_prune(model, sparsity)?;
        pruned_eval.push(eval_base(&pruned, task.kind, &eval)?);
        pruned_models.push(pruned);
    }
    let pruned_bases = ReplicateBases {
        tasks: bases.tasks,
        models: pruned_models,
    };
    let sweep = run_cells(plan, &pruned_bases)?;
    Ok(PrunedOutcome {
        base_eval,
        pruned_eval,
        sweep,
    })
}

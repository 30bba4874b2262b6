//! Three-layer graph convolutional classifier with hand-written backprop.
//!
//! ```text
//! H1 = dropout(relu(Â X W1 + b1))
//! H2 = dropout(relu(Â H1 W2 + b2))
//! H3 = Â H2 W3 + b3
//! p  = σ(w_out · mean_rows(H3) + b_out)
//! ```
//!
//! `p` is the predicted probability of failure. Training minimizes binary
//! cross-entropy with Adam and keeps the epoch with the best validation AUROC.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::stable_hash;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::metrics;
use crate::sfg::{GraphConfig, SemanticFlowGraph};
use crate::trajectory::{Label, LcLevel};

/// Probabilities are clamped to this distance from 0 and 1 before logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl GcnParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(input_dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, hidden),
            b2: vec![0.0; hidden],
            w3: Matrix::zeros(hidden, hidden),
            b3: vec![0.0; hidden],
            w_out: vec![0.0; hidden],
            b_out: 0.0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let mut fill = |m: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in m {
                *x = rng.gen_range(-limit..limit);
            }
        };
        fill(p.w1.data_mut(), input_dim, hidden);
        fill(p.w2.data_mut(), hidden, hidden);
        fill(p.w3.data_mut(), hidden, hidden);
        fill(&mut p.w_out, hidden, 1);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Parameter tensors as flat slices, in a fixed order shared with
    /// [`GcnParams::slices_mut`].
    pub fn slices(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("w1", self.w1.data()),
            ("b1", &self.b1),
            ("w2", self.w2.data()),
            ("b2", &self.b2),
            ("w3", self.w3.data()),
            ("b3", &self.b3),
            ("w_out", &self.w_out),
            ("b_out", std::slice::from_ref(&self.b_out)),
        ]
    }

    pub fn slices_mut(&mut self) -> [(&'static str, &mut [f64]); 8] {
        [
            ("w1", self.w1.data_mut()),
            ("b1", &mut self.b1),
            ("w2", self.w2.data_mut()),
            ("b2", &mut self.b2),
            ("w3", self.w3.data_mut()),
            ("b3", &mut self.b3),
            ("w_out", &mut self.w_out),
            ("b_out", std::slice::from_mut(&mut self.b_out)),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|(_, s)| s.iter().all(|x| x.is_finite()))
    }

    fn add_scaled(&mut self, other: &GcnParams, scale: f64) {
        for ((_, dst), (_, src)) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// One graph prepared for the network. `ÂX` is cached because the first
/// layer never changes it.
#[derive(Debug, Clone)]
pub struct GraphInput {
    adj: Matrix,
    ax: Matrix,
}

impl GraphInput {
    pub fn new(x: &Matrix, adj: &Matrix) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::Contract("graph has no nodes".into()));
        }
        if adj.shape() != (n, n) {
            return Err(Error::Contract(format!(
                "adjacency shape {:?} does not match {n} nodes",
                adj.shape()
            )));
        }
        Ok(Self {
            ax: adj.matmul(x),
            adj: adj.clone(),
        })
    }

    pub fn from_graph(g: &SemanticFlowGraph, binarize: bool) -> Result<Self> {
        let (x, adj) = g.to_adjacency(binarize);
        Self::new(&x, &adj)
    }

    pub fn nodes(&self) -> usize {
        self.adj.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.ax.cols()
    }
}

/// Inverted-dropout masks for the two hidden activations: entries are 0 or
/// `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub first: Matrix,
    pub second: Matrix,
}

impl DropoutMasks {
    pub fn sample<R: Rng>(nodes: usize, hidden: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let mut draw = || {
            let mut m = Matrix::zeros(nodes, hidden);
            for x in m.data_mut() {
                *x = if rng.gen::<f64>() < rate { 0.0 } else { keep };
            }
            m
        };
        let first = draw();
        let second = draw();
        Self { first, second }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub z1: Matrix,
    pub h1: Matrix,
    pub ah1: Matrix,
    pub z2: Matrix,
    pub h2: Matrix,
    pub ah2: Matrix,
    pub h3: Matrix,
    pub pooled: Vec<f64>,
    pub logit: f64,
    pub probability: f64,
}

fn check_dims(input: &GraphInput, params: &GcnParams) -> Result<()> {
    if input.feature_dim() != params.input_dim() {
        return Err(Error::Contract(format!(
            "graph feature dimension {} does not match model input dimension {}",
            input.feature_dim(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn affine(input: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = input.matmul(w);
    out.add_row_vector(b);
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Forward pass. `masks` is `None` in evaluation mode.
pub fn forward(
    input: &GraphInput,
    params: &GcnParams,
    masks: Option<&DropoutMasks>,
) -> Result<ForwardPass> {
    check_dims(input, params)?;
    if let Some(m) = masks {
        let want = (input.nodes(), params.hidden_dim());
        if m.first.shape() != want || m.second.shape() != want {
            return Err(Error::Contract(
                "dropout mask shape does not match activations".into(),
            ));
        }
    }
    let relu = |x: f64| x.max(0.0);

    let z1 = affine(&input.ax, &params.w1, &params.b1);
    let mut h1 = z1.map(relu);
    if let Some(m) = masks {
        h1.hadamard_assign(&m.first);
    }
    let ah1 = input.adj.matmul(&h1);
    let z2 = affine(&ah1, &params.w2, &params.b2);
    let mut h2 = z2.map(relu);
    if let Some(m) = masks {
        h2.hadamard_assign(&m.second);
    }
    let ah2 = input.adj.matmul(&h2);
    let h3 = affine(&ah2, &params.w3, &params.b3);
    let pooled = h3.column_means();
    let logit = dot(&params.w_out, &pooled) + params.b_out;
    Ok(ForwardPass {
        z1,
        h1,
        ah1,
        z2,
        h2,
        ah2,
        h3,
        pooled,
        logit,
        probability: sigmoid(logit),
    })
}

/// Binary cross-entropy of one prediction; `pos_weight` scales the failure
/// term.
pub fn bce(p: f64, y: Label, pos_weight: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y.is_failure() {
        -pos_weight * p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy over a batch.
pub fn loss(predictions: &[(f64, Label)]) -> f64 {
    predictions
        .iter()
        .map(|&(p, y)| bce(p, y, 1.0))
        .sum::<f64>()
        / predictions.len() as f64
}

/// d loss / d logit for sigmoid + (weighted) BCE.
fn logit_grad(p: f64, y: Label, pos_weight: f64) -> f64 {
    if y.is_failure() {
        pos_weight * (p - 1.0)
    } else {
        p
    }
}

/// Gradient of `scale * loss` for one graph given its forward pass.
pub fn backward(
    input: &GraphInput,
    params: &GcnParams,
    pass: &ForwardPass,
    masks: Option<&DropoutMasks>,
    y: Label,
    pos_weight: f64,
    scale: f64,
) -> GcnParams {
    let n = input.nodes();
    let hidden = params.hidden_dim();
    let d_logit = scale * logit_grad(pass.probability, y, pos_weight);

    let mut grad = GcnParams::zeros(params.input_dim(), hidden);
    grad.b_out = d_logit;
    grad.w_out = pass.pooled.iter().map(|g| d_logit * g).collect();

    // Mean pooling spreads the pooled gradient evenly over the nodes.
    let d_pooled: Vec<f64> = params
        .w_out
        .iter()
        .map(|w| d_logit * w / n as f64)
        .collect();
    let mut d_h3 = Matrix::zeros(n, hidden);
    for i in 0..n {
        d_h3.row_mut(i).copy_from_slice(&d_pooled);
    }

    grad.w3 = pass.ah2.t_matmul(&d_h3);
    grad.b3 = d_h3.column_sums();
    let mut d_h2 = input.adj.t_matmul(&d_h3.matmul_t(&params.w3));
    if let Some(m) = masks {
        d_h2.hadamard_assign(&m.second);
    }
    let d_z2 = relu_backward(d_h2, &pass.z2);

    grad.w2 = pass.ah1.t_matmul(&d_z2);
    grad.b2 = d_z2.column_sums();
    let mut d_h1 = input.adj.t_matmul(&d_z2.matmul_t(&params.w2));
    if let Some(m) = masks {
        d_h1.hadamard_assign(&m.first);
    }
    let d_z1 = relu_backward(d_h1, &pass.z1);

    grad.w1 = input.ax.t_matmul(&d_z1);
    grad.b1 = d_z1.column_sums();
    grad
}

fn relu_backward(mut upstream: Matrix, pre: &Matrix) -> Matrix {
    for (g, z) in upstream.data_mut().iter_mut().zip(pre.data()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    upstream
}

/// Analytic gradient of the mean batch loss. `masks[i]` must be the mask
/// used for `batch[i]` in the forward pass.
pub fn gradients(
    batch: &[(&GraphInput, Label)],
    params: &GcnParams,
    masks: Option<&[DropoutMasks]>,
    pos_weight: f64,
) -> Result<(GcnParams, f64)> {
    if batch.is_empty() {
        return Err(Error::UndefinedInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = GcnParams::zeros(params.input_dim(), params.hidden_dim());
    let mut loss_sum = 0.0;
    for (i, (input, y)) in batch.iter().enumerate() {
        let mask = masks.map(|m| &m[i]);
        let pass = forward(input, params, mask)?;
        loss_sum += bce(pass.probability, *y, pos_weight);
        let g = backward(input, params, &pass, mask, *y, pos_weight, scale);
        total.add_scaled(&g, 1.0);
    }
    Ok((total, loss_sum * scale))
}

/// Mean batch loss without gradients; the finite-difference oracle uses it.
pub fn batch_loss(
    batch: &[(&GraphInput, Label)],
    params: &GcnParams,
    masks: Option<&[DropoutMasks]>,
    pos_weight: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    for (i, (input, y)) in batch.iter().enumerate() {
        let pass = forward(input, params, masks.map(|m| &m[i]))?;
        sum += bce(pass.probability, *y, pos_weight);
    }
    Ok(sum / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub folds: usize,
    /// Weight on the failure term of the loss; 1.0 means no reweighting.
    pub pos_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            hidden_dim: 32,
            dropout_rate: 0.8,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
            folds: 5,
            pos_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size, hidden dim and epochs must be positive".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config(
                "cross-validation needs at least 2 folds".into(),
            ));
        }
        if !(self.pos_weight > 0.0) {
            return Err(Error::Config(
                "positive-class weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

struct Adam {
    m: GcnParams,
    v: GcnParams,
    t: i32,
}

impl Adam {
    fn new(shape: &GcnParams) -> Self {
        Self {
            m: GcnParams::zeros(shape.input_dim(), shape.hidden_dim()),
            v: GcnParams::zeros(shape.input_dim(), shape.hidden_dim()),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut GcnParams, grad: &GcnParams, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut().into_iter().zip(self.v.slices_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// `None` when the validation split holds a single class.
    pub validation_auroc: Option<f64>,
}

/// Index of the best epoch: highest validation AUROC, ties (and undefined
/// AUROC) resolved by lower validation loss, then by the earlier epoch.
pub fn select_best_epoch(history: &[EpochStats]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in history.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &history[b];
                let (a_new, a_cur) = (
                    e.validation_auroc.unwrap_or(0.5),
                    cur.validation_auroc.unwrap_or(0.5),
                );
                a_new > a_cur || (a_new == a_cur && e.validation_loss < cur.validation_loss)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn evaluate_split(
    data: &[(&GraphInput, Label)],
    params: &GcnParams,
) -> Result<(f64, Option<f64>, Vec<f64>)> {
    let mut probs = Vec::with_capacity(data.len());
    for (input, _) in data {
        probs.push(forward(input, params, None)?.probability);
    }
    let pairs: Vec<(f64, Label)> = probs
        .iter()
        .copied()
        .zip(data.iter().map(|d| d.1))
        .collect();
    let l = loss(&pairs);
    let auroc = metrics::auroc_of(&pairs).ok();
    Ok((l, auroc, probs))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GcnParams,
    pub best: EpochStats,
    pub history: Vec<EpochStats>,
}

/// Trains from scratch and returns the parameters of the best validation
/// epoch. All randomness comes from `cfg.seed`.
pub fn train_split(
    train: &[(&GraphInput, Label)],
    validation: &[(&GraphInput, Label)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some((first, _)) = train.first() else {
        return Err(Error::Config("training split is empty".into()));
    };
    let dim = first.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = GcnParams::glorot(dim, cfg.hidden_dim, &mut rng);
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(EpochStats, GcnParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&GraphInput, Label)> = chunk.iter().map(|&i| train[i]).collect();
            let masks: Vec<DropoutMasks> = batch
                .iter()
                .map(|(g, _)| {
                    DropoutMasks::sample(g.nodes(), cfg.hidden_dim, cfg.dropout_rate, &mut rng)
                })
                .collect();
            let (grad, batch_loss) = gradients(&batch, &params, Some(&masks), cfg.pos_weight)?;
            loss_sum += batch_loss * batch.len() as f64;
            adam.step(&mut params, &grad, cfg);
        }
        let eval_on = if validation.is_empty() {
            train
        } else {
            validation
        };
        let (validation_loss, validation_auroc, _) = evaluate_split(eval_on, &params)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            validation_loss,
            validation_auroc,
        };
        history.push(stats);
        let improved = match &best {
            None => true,
            Some((b, _)) => select_best_epoch(&[*b, stats]) == Some(1),
        };
        if improved {
            best = Some((stats, params.clone()));
        }
    }
    let (best, params) = best.expect("at least one epoch");
    if !params.is_finite() {
        return Err(Error::Data(
            "training diverged to non-finite parameters".into(),
        ));
    }
    Ok(TrainOutcome {
        params,
        best,
        history,
    })
}

/// Train / validation / test indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded k-fold split. Each fold's hold-out part is halved into validation
/// (first half, rounded down) and test.
pub fn cv_splits(n: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::Config(
            "cross-validation needs at least 2 folds".into(),
        ));
    }
    if n < folds {
        return Err(Error::Config(format!(
            "{n} examples cannot be split into {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
    Ok((0..folds)
        .map(|f| {
            let holdout = &order[bounds[f]..bounds[f + 1]];
            let half = holdout.len() / 2;
            let train = order[..bounds[f]]
                .iter()
                .chain(&order[bounds[f + 1]..])
                .copied()
                .collect();
            FoldSplit {
                fold: f,
                train,
                validation: holdout[..half].to_vec(),
                test: holdout[half..].to_vec(),
            }
        })
        .collect())
}

pub const CHECKPOINT_FORMAT: &str = "sfg-gcn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub seed: u64,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub validation_auroc: Option<f64>,
    pub validation_loss: f64,
    pub train_config: TrainConfig,
    pub graph_config: Option<GraphConfig>,
    pub params: GcnParams,
}

pub fn config_fingerprint(train: &TrainConfig, graph: Option<&GraphConfig>) -> String {
    let json = serde_json::to_string(&(train, graph)).expect("configs serialize");
    format!("{:016x}", stable_hash(json.as_bytes(), 0))
}

impl Checkpoint {
    pub fn new(
        outcome: &TrainOutcome,
        train_config: &TrainConfig,
        graph_config: Option<GraphConfig>,
        fold: Option<usize>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            fingerprint: config_fingerprint(train_config, graph_config.as_ref()),
            seed: train_config.seed,
            fold,
            epoch: outcome.best.epoch,
            validation_auroc: outcome.best.validation_auroc,
            validation_loss: outcome.best.validation_loss,
            train_config: train_config.clone(),
            graph_config,
            params: outcome.params.clone(),
        }
    }

    pub fn binarize_adjacency(&self) -> bool {
        self.graph_config
            .as_ref()
            .is_some_and(|c| c.binarize_adjacency)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let p = &ckpt.params;
        let h = p.hidden_dim();
        let consistent = p.b1.len() == h
            && p.w2.shape() == (h, h)
            && p.b2.len() == h
            && p.w3.shape() == (h, h)
            && p.b3.len() == h
            && p.w_out.len() == h;
        if !consistent {
            return Err(Error::Config(
                "checkpoint parameter shapes are inconsistent".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Evaluation-mode probability of failure.
pub fn predict(g: &SemanticFlowGraph, ckpt: &Checkpoint) -> Result<f64> {
    if g.feature_dim() != ckpt.params.input_dim() {
        return Err(Error::Contract(format!(
            "graph feature dimension {} does not match checkpoint input dimension {}",
            g.feature_dim(),
            ckpt.params.input_dim()
        )));
    }
    let input = GraphInput::from_graph(g, ckpt.binarize_adjacency())?;
    Ok(forward(&input, &ckpt.params, None)?.probability)
}

/// Held-out prediction for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutPrediction {
    pub index: usize,
    pub task_id: String,
    pub score: f64,
    pub y: Label,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub split: FoldSplit,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub test_predictions: Vec<HeldOutPrediction>,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
}

impl CrossValidation {
    /// Test predictions of all folds, ordered by dataset index.
    pub fn test_predictions(&self) -> Vec<HeldOutPrediction> {
        let mut all: Vec<HeldOutPrediction> = self
            .folds
            .iter()
            .flat_map(|f| f.test_predictions.iter().cloned())
            .collect();
        all.sort_by_key(|p| p.index);
        all
    }

    /// Checkpoint of the fold with the best validation score.
    pub fn best_checkpoint(&self) -> &Checkpoint {
        let stats: Vec<EpochStats> = self
            .folds
            .iter()
            .map(|f| EpochStats {
                epoch: f.checkpoint.epoch,
                train_loss: 0.0,
                validation_loss: f.checkpoint.validation_loss,
                validation_auroc: f.checkpoint.validation_auroc,
            })
            .collect();
        &self.folds[select_best_epoch(&stats).expect("at least two folds")].checkpoint
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    stable_hash(&(fold as u64).to_le_bytes(), seed)
}

/// k-fold cross-validation over labeled graphs. Folds train in parallel and
/// are independent, so results do not depend on the thread count.
pub fn cross_validate(
    graphs: &[SemanticFlowGraph],
    level: LcLevel,
    graph_config: Option<&GraphConfig>,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    cfg.validate()?;
    let binarize = graph_config.is_some_and(|c| c.binarize_adjacency);
    let labels: Vec<Label> = graphs
        .iter()
        .map(|g| {
            g.label(level)
                .ok_or_else(|| Error::Data(format!("graph {} carries no label", g.task_id)))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<GraphInput> = graphs
        .par_iter()
        .map(|g| GraphInput::from_graph(g, binarize))
        .collect::<Result<_>>()?;
    let splits = cv_splits(graphs.len(), cfg.folds, cfg.seed)?;
    let folds = splits
        .into_par_iter()
        .map(|split| {
            let pick = |idx: &[usize]| -> Vec<(&GraphInput, Label)> {
                idx.iter().map(|&i| (&inputs[i], labels[i])).collect()
            };
            let fold_cfg = TrainConfig {
                seed: fold_seed(cfg.seed, split.fold),
                ..cfg.clone()
            };
            let outcome = train_split(&pick(&split.train), &pick(&split.validation), &fold_cfg)?;
            let mut checkpoint =
                Checkpoint::new(&outcome, cfg, graph_config.cloned(), Some(split.fold));
            checkpoint.seed = fold_cfg.seed;
            let test_predictions = split
                .test
                .iter()
                .map(|&i| {
                    Ok(HeldOutPrediction {
                        index: i,
                        task_id: graphs[i].task_id.clone(),
                        score: forward(&inputs[i], &outcome.params, None)?.probability,
                        y: labels[i],
                    })
                })
                .collect::<Result<_>>()?;
            Ok(FoldResult {
                split,
                checkpoint,
                history: outcome.history,
                test_predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossValidation { folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GraphInput {
        let mut x = Matrix::zeros(n, d);
        for v in x.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut a = Matrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen_bool(0.4) {
                    a[(i, j)] += 1.0;
                    a[(j, i)] += 1.0;
                }
            }
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| a.row(i).iter().sum::<f64>().sqrt())
            .collect();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] /= deg[i] * deg[j];
            }
        }
        GraphInput::new(&x, &a).unwrap()
    }

    #[test]
    fn zero_params_give_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_input(&mut rng, 4, 5);
        let pass = forward(&g, &GcnParams::zeros(5, 3), None).unwrap();
        assert_eq!(pass.logit, 0.0);
        assert_eq!(pass.probability, 0.5);
    }

    #[test]
    fn single_node_reduces_to_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = GcnParams::glorot(6, 4, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = GraphInput::new(&Matrix::from_vec(1, 6, x.clone()), &Matrix::identity(1)).unwrap();
        let p = forward(&g, &params, None).unwrap().probability;

        let layer = |input: &[f64], w: &Matrix, b: &[f64], relu: bool| -> Vec<f64> {
            (0..w.cols())
                .map(|j| {
                    let s: f64 = input
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[(i, j)])
                        .sum::<f64>()
                        + b[j];
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h1 = layer(&x, &params.w1, &params.b1, true);
        let h2 = layer(&h1, &params.w2, &params.b2, true);
        let h3 = layer(&h2, &params.w3, &params.b3, false);
        let z: f64 = h3
            .iter()
            .zip(&params.w_out)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + params.b_out;
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((p - expected).abs() < 1e-14);
    }

    #[test]
    fn loss_conventions() {
        assert!((loss(&[(0.5, Label::FAILURE)]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss(&[(0.5, Label::SUCCESS)]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss(&[(1.0, Label::FAILURE)]) < 1e-11);
        assert!(loss(&[(0.0, Label::SUCCESS)]) < 1e-11);
        let l1 = bce(0.3, Label::FAILURE, 1.0);
        let l2 = bce(0.8, Label::SUCCESS, 1.0);
        assert!(
            (loss(&[(0.3, Label::FAILURE), (0.8, Label::SUCCESS)]) - (l1 + l2) / 2.0).abs() < 1e-15
        );
        assert!(bce(0.0, Label::FAILURE, 1.0).is_finite());
    }

    #[test]
    fn output_bias_gradient_is_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = GcnParams::glorot(5, 4, &mut rng);
        let gs: Vec<GraphInput> = (0..4).map(|i| random_input(&mut rng, 2 + i, 5)).collect();
        let labels = [
            Label::FAILURE,
            Label::SUCCESS,
            Label::SUCCESS,
            Label::FAILURE,
        ];
        let batch: Vec<(&GraphInput, Label)> = gs.iter().zip(labels).collect();
        let (grad, _) = gradients(&batch, &params, None, 1.0).unwrap();
        let residual: f64 = batch
            .iter()
            .map(|(g, y)| forward(g, &params, None).unwrap().probability - f64::from(y.y()))
            .sum::<f64>()
            / 4.0;
        assert!((grad.b_out - residual).abs() < 1e-15);
    }

    /// All-zero weights give p = 1/2 for every graph, so a batch with equal
    /// numbers of each class has zero readout gradient.
    #[test]
    fn balanced_batch_at_zero_weights_is_stationary_for_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_input(&mut rng, 3, 5);
        let batch = [(&g, Label::FAILURE), (&g, Label::SUCCESS)];
        let (grad, _) = gradients(&batch, &GcnParams::zeros(5, 4), None, 1.0).unwrap();
        assert_eq!(grad.b_out, 0.0);
        assert!(grad.w_out.iter().all(|&w| w == 0.0));
        // Numerically, too.
        let params = GcnParams::zeros(5, 4);
        let h = 1e-5;
        let mut plus = params.clone();
        plus.b_out += h;
        let mut minus = params.clone();
        minus.b_out -= h;
        let fd = (batch_loss(&batch, &plus, None, 1.0).unwrap()
            - batch_loss(&batch, &minus, None, 1.0).unwrap())
            / (2.0 * h);
        assert!(fd.abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = GcnParams::glorot(4, 3, &mut rng);
        let g = random_input(&mut rng, 4, 4);
        let masks = vec![DropoutMasks::sample(4, 3, 0.5, &mut rng)];
        let batch = [(&g, Label::FAILURE)];
        let (grad, _) = gradients(&batch, &params, Some(&masks), 1.0).unwrap();
        let h = 1e-6;
        for t in 0..8 {
            let len = params.slices()[t].1.len();
            for i in 0..len {
                let mut p = params.clone();
                p.slices_mut()[t].1[i] += h;
                let up = batch_loss(&batch, &p, Some(&masks), 1.0).unwrap();
                p.slices_mut()[t].1[i] -= 2.0 * h;
                let down = batch_loss(&batch, &p, Some(&masks), 1.0).unwrap();
                let fd = (up - down) / (2.0 * h);
                let an = grad.slices()[t].1[i];
                assert!(
                    (fd - an).abs() < 1e-7,
                    "{} [{i}]: {an} vs {fd}",
                    params.slices()[t].0
                );
            }
        }
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_input(&mut rng, 3, 5);
        assert!(matches!(
            forward(&g, &GcnParams::zeros(4, 2), None),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            GraphInput::new(&Matrix::zeros(3, 2), &Matrix::identity(2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dropout_mask_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = DropoutMasks::sample(50, 20, 0.8, &mut rng);
        assert!(m
            .first
            .data()
            .iter()
            .all(|&x| x == 0.0 || (x - 5.0).abs() < 1e-12));
        let kept = m.first.data().iter().filter(|&&x| x > 0.0).count() as f64 / 1000.0;
        assert!((kept - 0.2).abs() < 0.05);
    }

    #[test]
    fn best_epoch_selection() {
        let e = |epoch, auroc: Option<f64>, loss| EpochStats {
            epoch,
            train_loss: 0.0,
            validation_loss: loss,
            validation_auroc: auroc,
        };
        assert_eq!(
            select_best_epoch(&[e(1, Some(0.8), 0.5), e(2, Some(0.7), 0.1)]),
            Some(0)
        );
        assert_eq!(
            select_best_epoch(&[e(1, Some(0.8), 0.5), e(2, Some(0.8), 0.4)]),
            Some(1)
        );
        assert_eq!(
            select_best_epoch(&[e(1, None, 0.5), e(2, None, 0.6)]),
            Some(0)
        );
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn cv_split_sizes() {
        let splits = cv_splits(100, 5, 9).unwrap();
        assert_eq!(splits.len(), 5);
        let mut seen = vec![0; 100];
        for s in &splits {
            assert_eq!(s.train.len(), 80);
            assert_eq!(s.validation.len(), 10);
            assert_eq!(s.test.len(), 10);
            for &i in s.test.iter().chain(&s.validation) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(splits.iter().map(|s| s.test.len()).sum::<usize>(), 50);
        assert!(matches!(cv_splits(4, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = GcnParams::glorot(5, 3, &mut rng);
        let outcome = TrainOutcome {
            params,
            best: EpochStats {
                epoch: 3,
                train_loss: 0.1,
                validation_loss: 0.2,
                validation_auroc: Some(0.9),
            },
            history: vec![],
        };
        let ckpt = Checkpoint::new(&outcome, &TrainConfig::default(), None, None);
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(back, ckpt);
        let g = random_input(&mut rng, 3, 5);
        let a = forward(&g, &ckpt.params, None).unwrap().probability;
        let b = forward(&g, &back.params, None).unwrap().probability;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn memorizes_small_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gs: Vec<GraphInput> = (0..10)
            .map(|i| random_input(&mut rng, 2 + i % 4, 6))
            .collect();
        let data: Vec<(&GraphInput, Label)> = gs
            .iter()
            .enumerate()
            .map(|(i, g)| (g, Label::from_failure(i % 2 == 0)))
            .collect();
        let cfg = TrainConfig {
            epochs: 500,
            dropout_rate: 0.0,
            learning_rate: 0.01,
            batch_size: 10,
            hidden_dim: 16,
            ..TrainConfig::default()
        };
        let out = train_split(&data, &data, &cfg).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.train_loss < 0.05, "final loss {}", last.train_loss);
    }
}

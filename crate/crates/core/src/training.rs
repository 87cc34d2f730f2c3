//! Mixed standard/adversarial training with the optional feature-correlation term.
//!
//! Every batch is split by the mixing ratio `r`: the first `⌈r·B⌉` shuffled
//! samples stay clean and the rest are replaced by adversarial counterparts
//! generated against the current parameters. The batch objective is the mean
//! per-sample loss, so the split sizes realize the `r` / `1 − r` weighting.

use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::datasets::{batches, Dataset};
use crate::error::{ArflError, Result};
use crate::evaluation;
use crate::losses::{self, ArflConfig, LossValue};
use crate::mlp::{Activation, MlpModel, TWO_MOON_LAYERS};
use crate::seeding::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Standard,
    Adversarial,
    Dual,
    Trades,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Standard => "standard",
            Scheme::Adversarial => "adversarial",
            Scheme::Dual => "dual",
            Scheme::Trades => "trades",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Scheme::Standard),
            "adversarial" => Ok(Scheme::Adversarial),
            "dual" => Ok(Scheme::Dual),
            "trades" => Ok(Scheme::Trades),
            other => Err(ArflError::Config(format!("unknown scheme '{other}'"))),
        }
    }

    /// Mixing ratio implied by the scheme (dual uses the 1:1 default).
    pub fn default_ratio(self) -> f64 {
        match self {
            Scheme::Standard | Scheme::Trades => 1.0,
            Scheme::Adversarial => 0.0,
            Scheme::Dual => 0.5,
        }
    }

    /// Scheme that a given ratio denotes for the minimax family.
    pub fn from_ratio(r: f64) -> Self {
        if r >= 1.0 {
            Scheme::Standard
        } else if r <= 0.0 {
            Scheme::Adversarial
        } else {
            Scheme::Dual
        }
    }
}

/// Sign of the feature-correlation term on adversarial samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// `+λ·L_robust` on both clean and adversarial samples.
    #[default]
    Consistent,
    /// `−λ·L_robust` on adversarial samples, exactly as the printed minimax objective reads.
    LiteralEq5,
}

impl SignMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(SignMode::Consistent),
            "literal-eq5" => Ok(SignMode::LiteralEq5),
            other => Err(ArflError::Config(format!("unknown sign mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub momentum: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            momentum: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum,
            ..OptimizerSpec::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ArflError::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(unit(self.beta1) && unit(self.beta2) && unit(self.momentum)) || !(self.eps > 0.0) {
            return Err(ArflError::Config("optimizer betas/momentum must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam or SGD(+momentum) state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer {
            spec,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place from `grads` (same order and shapes).
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(ArflError::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let s = self.spec;
        let t = self.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(ArflError::Dimension {
                    op: "optimizer step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            match s.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *vel = s.momentum * *vel + gv;
                        *w -= s.learning_rate * *vel;
                    }
                }
                OptimizerKind::Adam => {
                    for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = s.beta1 * *mi + (1.0 - s.beta1) * gv;
                        *vi = s.beta2 * *vi + (1.0 - s.beta2) * gv * gv;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= s.learning_rate * mhat / (vhat.sqrt() + s.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub use_arfl: bool,
    /// Fraction of each batch kept clean.
    pub r: f64,
    pub lambda: f64,
    #[serde(default)]
    pub sign_mode: SignMode,
    /// Training-time attack (budget ε₁).
    pub attack: AttackSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub trades_beta: f64,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl TrainConfig {
    /// Two-moon defaults: FGSM ε₁ = 0.05, λ = 0.5, Adam 1e-2, batch 128, 5000 epochs.
    pub fn two_moon(scheme: Scheme, use_arfl: bool) -> Self {
        TrainConfig {
            scheme,
            use_arfl,
            r: scheme.default_ratio(),
            lambda: 0.5,
            sign_mode: SignMode::Consistent,
            attack: AttackSpec::fgsm(0.05),
            epochs: 5000,
            batch_size: 128,
            optimizer: OptimizerSpec::adam(1e-2),
            seed: 0,
            trades_beta: 6.0,
            layer_sizes: TWO_MOON_LAYERS.to_vec(),
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(ArflError::Config(format!("r must lie in [0, 1], got {}", self.r)));
        }
        let ok = match self.scheme {
            Scheme::Standard | Scheme::Trades => self.r == 1.0,
            Scheme::Adversarial => self.r == 0.0,
            Scheme::Dual => self.r > 0.0 && self.r < 1.0,
        };
        if !ok {
            return Err(ArflError::Config(format!(
                "r = {} is not valid for the {} scheme",
                self.r,
                self.scheme.name()
            )));
        }
        if self.scheme == Scheme::Trades && self.use_arfl {
            return Err(ArflError::Config("ARFL is not combined with the trades scheme".into()));
        }
        ArflConfig::new(self.lambda)?;
        if !(self.trades_beta >= 0.0 && self.trades_beta.is_finite()) {
            return Err(ArflError::Config(format!("trades beta must be >= 0, got {}", self.trades_beta)));
        }
        if self.batch_size == 0 {
            return Err(ArflError::Config("batch size must be at least 1".into()));
        }
        self.attack.validate()?;
        self.optimizer.validate()
    }

    fn arfl(&self) -> ArflConfig {
        ArflConfig {
            lambda: if self.use_arfl { self.lambda } else { 0.0 },
            feature_source: Default::default(),
        }
    }
}

/// A batch after the clean/adversarial split.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedBatch {
    pub standard: Tensor,
    pub standard_labels: Vec<f64>,
    pub adversarial: Tensor,
    pub adversarial_labels: Vec<f64>,
}

impl ComposedBatch {
    pub fn len(&self) -> usize {
        self.standard_labels.len() + self.adversarial_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of clean samples, `⌈r·n⌉`, robust to representation error in `r·n`.
pub fn standard_count(r: f64, n: usize) -> usize {
    let exact = r * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    (k as usize).min(n)
}

/// Splits `batch` (already in shuffled order) and attacks the adversarial share
/// against the current `model`.
pub fn compose_batch<R: Rng>(
    model: &MlpModel,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ComposedBatch> {
    if batch.is_empty() {
        return Err(ArflError::Contract("compose_batch on an empty batch".into()));
    }
    let ns = standard_count(cfg.r, batch.len());
    let (std_idx, adv_idx) = batch.split_at(ns);
    let standard = data.batch_tensor(std_idx);
    let adversarial_labels = data.labels(adv_idx);
    let adversarial = if adv_idx.is_empty() {
        Tensor::zeros(data.dim(), 0)
    } else {
        let clean = data.batch_tensor(adv_idx);
        attacks::generate(model, &clean, &adversarial_labels, &cfg.attack, rng)?
    };
    Ok(ComposedBatch {
        standard,
        standard_labels: data.labels(std_idx),
        adversarial,
        adversarial_labels,
    })
}

fn concat_columns(a: &Tensor, b: &Tensor) -> Tensor {
    let (d, na) = a.shape();
    let nb = b.cols();
    let n = na + nb;
    let mut out = Tensor::zeros(d.max(b.rows()), n);
    let rows = out.rows();
    let data = out.data_mut();
    for r in 0..rows {
        if na > 0 {
            data[r * n..r * n + na].copy_from_slice(&a.data()[r * na..(r + 1) * na]);
        }
        if nb > 0 {
            data[r * n + na..(r + 1) * n].copy_from_slice(&b.data()[r * nb..(r + 1) * nb]);
        }
    }
    out
}

/// Batch objective built on shared parameter leaves `params`.
///
/// Clean samples contribute `bce + λ·robust` (ARFL on) or `bce`; adversarial
/// samples contribute `bce ± λ·robust` per `cfg.sign_mode` (ARFL on) or `bce`.
pub fn batch_objective(
    g: &mut Graph,
    model: &MlpModel,
    params: &[NodeId],
    batch: &ComposedBatch,
    cfg: &TrainConfig,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(ArflError::Contract("batch objective over an empty batch".into()));
    }
    let xs = concat_columns(&batch.standard, &batch.adversarial);
    let mut labels = batch.standard_labels.clone();
    labels.extend_from_slice(&batch.adversarial_labels);
    let x = g.constant(xs);
    let out = model.forward_with(g, params, x)?;
    let bce = losses::bce_terms(g, out.logits, &labels)?;
    let arfl = cfg.arfl();
    let terms = if arfl.lambda == 0.0 {
        bce
    } else {
        let adv_weight = match cfg.sign_mode {
            SignMode::Consistent => arfl.lambda,
            SignMode::LiteralEq5 => -arfl.lambda,
        };
        let mut weights = vec![arfl.lambda; batch.standard_labels.len()];
        weights.resize(labels.len(), adv_weight);
        let robust = losses::robust_terms(g, out.features, &labels)?;
        let w = g.constant(Tensor::row(weights));
        let weighted = g.mul(robust, w)?;
        g.add(bce, weighted)?
    };
    Ok(LossValue { node: g.mean(terms)? })
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean batch objective.
    pub objective: f64,
    pub clean_train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub log: Vec<EpochRecord>,
}

fn gradients(g: &Graph, params: &[NodeId]) -> Vec<Tensor> {
    params.iter().map(|&p| g.grad(p).clone()).collect()
}

/// Trains a freshly initialized model for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, train_set: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ArflError::Contract("training set is empty".into()));
    }
    let model = MlpModel::init(&cfg.layer_sizes, cfg.activation, cfg.seed)?;
    if model.input_dim() != train_set.dim() {
        return Err(ArflError::Dimension {
            op: "train",
            left: (model.input_dim(), 1),
            right: (train_set.dim(), 1),
        });
    }
    train_from(model, cfg, train_set)
}

/// Continues training an existing model; `cfg.epochs = 0` returns it unchanged.
pub fn train_from(mut model: MlpModel, cfg: &TrainConfig, train_set: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plan = batches(train_set.len(), cfg.batch_size, cfg.seed, epoch)?;
        let mut rng = rng_for(cfg.seed, stream::ATTACK + epoch as u64);
        let mut total = 0.0;
        for (bi, batch) in plan.iter().enumerate() {
            let mut g = Graph::new();
            let (loss, params) = if cfg.scheme == Scheme::Trades {
                let xs = train_set.batch_tensor(batch);
                let ys = train_set.labels(batch);
                let t = losses::trades_objective(&mut g, &model, &xs, &ys, cfg.trades_beta, &cfg.attack, &mut rng)?;
                (t.loss, t.params)
            } else {
                let composed = compose_batch(&model, train_set, batch, cfg, &mut rng)?;
                let params = model.param_leaves(&mut g, true);
                (batch_objective(&mut g, &model, &params, &composed, cfg)?, params)
            };
            let value = loss.value(&g);
            if !value.is_finite() {
                return Err(ArflError::NonFinite {
                    epoch,
                    batch: bi,
                    value,
                });
            }
            total += value * batch.len() as f64;
            g.backward(loss.node)?;
            let grads = gradients(&g, &params);
            opt.step(model.params_mut(), &grads)?;
        }
        let record = EpochRecord {
            epoch,
            objective: total / train_set.len() as f64,
            clean_train_accuracy: evaluation::accuracy(&model, train_set)?,
        };
        debug!(
            "epoch {} objective {:.6} train acc {:.4}",
            record.epoch, record.objective, record.clean_train_accuracy
        );
        log.push(record);
    }
    Ok(TrainOutcome { model, log })
}

/// `epoch,objective,clean_train_acc` with six decimals.
pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,objective,clean_train_acc\n");
    for r in log {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.epoch, r.objective, r.clean_train_accuracy);
    }
    out
}

pub fn write_log_csv(log: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, log_to_csv(log)).map_err(|e| ArflError::io(path, e))
}

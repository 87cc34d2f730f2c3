//! Accuracy, AUC, Mann-Whitney U, decision-boundary grids and input saliency.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::attacks::{self, AttackSpec, BceInput, InputLoss};
use crate::autodiff::{sigmoid, Tensor};
use crate::datasets::Dataset;
use crate::error::{ArflError, Result};
use crate::mlp::{label_from_logit, MlpModel};
use crate::seeding::{rng_for, stream};

/// Points evaluated per forward pass.
const EVAL_CHUNK: usize = 2048;

/// Standard and adversarial metric of one trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub standard_metric: f64,
    pub adversarial_metric: f64,
    pub mean_metric: f64,
}

impl EvalReport {
    pub fn new(standard_metric: f64, adversarial_metric: f64) -> Self {
        EvalReport {
            standard_metric,
            adversarial_metric,
            mean_metric: (standard_metric + adversarial_metric) / 2.0,
        }
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn count_correct(model: &MlpModel, xs: &Tensor, ys: &[f64]) -> Result<usize> {
    let logits = model.logits(xs)?;
    Ok(logits
        .iter()
        .zip(ys)
        .filter(|(&z, &y)| label_from_logit(z) == y)
        .count())
}

/// Fraction of samples the model labels correctly.
pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(ArflError::Contract("accuracy of an empty dataset".into()));
    }
    let mut correct = 0;
    for idx in chunks(data.len()) {
        correct += count_correct(model, &data.batch_tensor(&idx), &data.labels(&idx))?;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// White-box adversarial points for every sample, in dataset order (`d × n`).
pub fn adversarial_points(model: &MlpModel, data: &Dataset, spec: &AttackSpec, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = rng_for(seed, stream::EVAL_ATTACK);
    chunks(data.len())
        .map(|idx| attacks::generate(model, &data.batch_tensor(&idx), &data.labels(&idx), spec, &mut rng))
        .collect()
}

/// Accuracy on points attacked against `model` itself.
pub fn adversarial_accuracy(model: &MlpModel, data: &Dataset, spec: &AttackSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(ArflError::Contract("accuracy of an empty dataset".into()));
    }
    let adv = adversarial_points(model, data, spec, 0)?;
    let mut correct = 0;
    for (idx, xs) in chunks(data.len()).zip(&adv) {
        correct += count_correct(model, xs, &data.labels(&idx))?;
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn evaluate(model: &MlpModel, data: &Dataset, spec: &AttackSpec) -> Result<EvalReport> {
    Ok(EvalReport::new(
        accuracy(model, data)?,
        adversarial_accuracy(model, data, spec)?,
    ))
}

/// Average ranks (1-based) with ties sharing the mean rank, plus the tie-group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// `Σ_{i,j} [a_i > b_j] + ½[a_i = b_j]` computed from joint ranks.
fn u_statistic(a: &[f64], b: &[f64]) -> (f64, Vec<usize>) {
    let mut joint = a.to_vec();
    joint.extend_from_slice(b);
    let (ranks, ties) = average_ranks(&joint);
    let rank_sum: f64 = ranks[..a.len()].iter().sum();
    let n1 = a.len() as f64;
    (rank_sum - n1 * (n1 + 1.0) / 2.0, ties)
}

/// Probability that a random positive outscores a random negative (ties count ½).
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(ArflError::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (pos, neg): (Vec<(f64, f64)>, Vec<(f64, f64)>) =
        scores.iter().copied().zip(labels.iter().copied()).partition(|&(_, y)| y > 0.0);
    if pos.is_empty() || neg.is_empty() {
        return Err(ArflError::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let pos: Vec<f64> = pos.into_iter().map(|(s, _)| s).collect();
    let neg: Vec<f64> = neg.into_iter().map(|(s, _)| s).collect();
    let (u, _) = u_statistic(&pos, &neg);
    Ok(u / (pos.len() as f64 * neg.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U for the first sample.
    pub u: f64,
    /// Two-sided p from the tie-corrected normal approximation with continuity correction.
    pub p_two_sided: f64,
}

/// Mann-Whitney U test of `a` against `b`.
///
/// The normal approximation is only trustworthy from roughly eight samples per
/// group; below that the p-value is indicative.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(ArflError::Contract("Mann-Whitney U needs two non-empty samples".into()));
    }
    let (u, ties) = u_statistic(a, b);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let variance = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mean = n1 * n2 / 2.0;
    let p = if variance <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / variance.sqrt();
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
    };
    Ok(MannWhitney { u, p_two_sided: p })
}

/// Class-1 probabilities over an evenly spaced mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    pub nx: usize,
    pub ny: usize,
    pub bounds: (f64, f64, f64, f64),
    /// Row-major: `probs[j * nx + i]` is the cell at `(xs[i], ys[j])`.
    pub probs: Vec<f64>,
}

/// Default plotting window around the two moons.
pub const DEFAULT_BOUNDS: (f64, f64, f64, f64) = (-1.5, 2.5, -1.25, 1.75);

impl BoundaryGrid {
    pub fn x_at(&self, i: usize) -> f64 {
        let (x0, x1, _, _) = self.bounds;
        x0 + (x1 - x0) * i as f64 / (self.nx - 1) as f64
    }

    pub fn y_at(&self, j: usize) -> f64 {
        let (_, _, y0, y1) = self.bounds;
        y0 + (y1 - y0) * j as f64 / (self.ny - 1) as f64
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[j * self.nx + i]
    }

    /// `x,y,prob` rows with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,prob\n");
        for j in 0..self.ny {
            for i in 0..self.nx {
                let _ = writeln!(out, "{:.6},{:.6},{:.6}", self.x_at(i), self.y_at(j), self.prob(i, j));
            }
        }
        out
    }
}

pub fn decision_boundary_grid(
    model: &MlpModel,
    bounds: (f64, f64, f64, f64),
    resolution: (usize, usize),
) -> Result<BoundaryGrid> {
    let (x0, x1, y0, y1) = bounds;
    if !(x0 < x1 && y0 < y1) {
        return Err(ArflError::Config(format!("degenerate grid bounds {bounds:?}")));
    }
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return Err(ArflError::Config(format!("grid resolution must be at least 2x2, got {nx}x{ny}")));
    }
    if model.input_dim() != 2 {
        return Err(ArflError::Dimension {
            op: "decision grid",
            left: (model.input_dim(), 1),
            right: (2, 1),
        });
    }
    let mut grid = BoundaryGrid {
        nx,
        ny,
        bounds,
        probs: Vec::with_capacity(nx * ny),
    };
    let points: Vec<Vec<f64>> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| vec![grid.x_at(i), grid.y_at(j)])
        .collect();
    for chunk in points.chunks(EVAL_CHUNK) {
        let logits = model.logits(&Tensor::from_columns(chunk)?)?;
        grid.probs.extend(logits.into_iter().map(sigmoid));
    }
    Ok(grid)
}

/// Input-gradient saliency of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub grad: Vec<f64>,
    /// Min-max scaled into `[0, 1]`; all 0.5 when the gradient is constant.
    pub scaled: Vec<f64>,
    pub constant: bool,
}

impl Saliency {
    /// `dim,grad,scaled` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,grad,scaled\n");
        for (i, (g, s)) in self.grad.iter().zip(&self.scaled).enumerate() {
            let _ = writeln!(out, "{i},{g:.6},{s:.6}");
        }
        out
    }
}

/// `∇ₓ loss(model, x, y)` and its min-max scaling.
pub fn saliency(model: &MlpModel, x: &[f64], y: f64, loss: &dyn InputLoss) -> Result<Saliency> {
    let grad = attacks::input_gradient(model, loss, &Tensor::column(x.to_vec()), &[y])?.into_vec();
    let lo = grad.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let constant = !(hi > lo);
    let scaled = if constant {
        vec![0.5; grad.len()]
    } else {
        grad.iter().map(|g| (g - lo) / (hi - lo)).collect()
    };
    Ok(Saliency { grad, scaled, constant })
}

/// Saliency under binary cross-entropy.
pub fn bce_saliency(model: &MlpModel, x: &[f64], y: f64) -> Result<Saliency> {
    saliency(model, x, y, &BceInput)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

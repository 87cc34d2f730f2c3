//! L∞-bounded gradient-sign attacks (FGSM and PGD).
//!
//! Attacks operate on whole `d × B` batches at once. The objective being
//! maximized is summed over the batch, so each column's input gradient is
//! exactly the gradient of that sample's own loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{ArflError, Result};
use crate::losses::{self, ArflConfig};
use crate::mlp::MlpModel;

/// Standard deviation of the Gaussian start used when maximizing the KL term,
/// whose input gradient vanishes at the clean point.
pub const KL_START_STD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
}

/// Quantity the attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttackObjective {
    #[default]
    Bce,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    /// Iterations (PGD only).
    pub steps: usize,
    /// Per-iteration step (PGD only).
    pub step_size: f64,
    #[serde(default)]
    pub objective: AttackObjective,
    /// Start from a uniform point in the ball instead of the clean input.
    #[serde(default)]
    pub random_start: bool,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            objective: AttackObjective::Bce,
            random_start: false,
        }
    }

    /// PGD with the default step size `2.5·ε / steps`.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            family: AttackFamily::Pgd,
            epsilon,
            steps,
            step_size: default_step_size(epsilon, steps),
            objective: AttackObjective::Bce,
            random_start: false,
        }
    }

    pub fn with_objective(mut self, objective: AttackObjective) -> Self {
        self.objective = objective;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(ArflError::Config(format!(
                "attack epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.family == AttackFamily::Pgd {
            if self.steps == 0 {
                return Err(ArflError::Config("PGD needs at least one step".into()));
            }
            if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
                return Err(ArflError::Config(format!(
                    "PGD step size must be > 0, got {}",
                    self.step_size
                )));
            }
        }
        Ok(())
    }
}

pub fn default_step_size(epsilon: f64, steps: usize) -> f64 {
    2.5 * epsilon / steps.max(1) as f64
}

/// A scalar function of a model input that an attack can differentiate.
pub trait InputLoss {
    /// Builds the scalar on `g` for the `d × B` input node `x`.
    fn build(&self, g: &mut Graph, model: &MlpModel, x: NodeId, labels: &[f64]) -> Result<NodeId>;
}

/// Summed binary cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct BceInput;

impl InputLoss for BceInput {
    fn build(&self, g: &mut Graph, model: &MlpModel, x: NodeId, labels: &[f64]) -> Result<NodeId> {
        let out = model.forward_graph(g, x, false)?;
        let t = losses::bce_terms(g, out.logits, labels)?;
        Ok(g.sum(t))
    }
}

/// Summed `bce + λ·robust`.
#[derive(Debug, Clone, Copy)]
pub struct OverallInput(pub ArflConfig);

impl InputLoss for OverallInput {
    fn build(&self, g: &mut Graph, model: &MlpModel, x: NodeId, labels: &[f64]) -> Result<NodeId> {
        let out = model.forward_graph(g, x, false)?;
        let t = losses::overall_terms(g, out.logits, out.features, labels, &self.0)?;
        Ok(g.sum(t))
    }
}

/// Summed `KL(σ(clean logit) ‖ σ(f(x)))` with the clean logits held fixed.
#[derive(Debug, Clone)]
pub struct KlInput {
    pub clean_logits: Vec<f64>,
}

impl InputLoss for KlInput {
    fn build(&self, g: &mut Graph, model: &MlpModel, x: NodeId, _labels: &[f64]) -> Result<NodeId> {
        let out = model.forward_graph(g, x, false)?;
        let p = g.constant(Tensor::row(self.clean_logits.clone()));
        let t = losses::kl_terms(g, p, out.logits)?;
        Ok(g.sum(t))
    }
}

/// `∇ₓ loss` for every column of `x`; model parameters are not differentiated.
pub fn input_gradient(model: &MlpModel, loss: &dyn InputLoss, x: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone(), true);
    let root = loss.build(&mut g, model, xn, labels)?;
    g.backward(root)?;
    Ok(g.grad(xn).clone())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Coordinatewise clamp of `candidate` into `[center − ε, center + ε]`.
pub fn project_linf(candidate: &Tensor, center: &Tensor, epsilon: f64) -> Result<Tensor> {
    if candidate.shape() != center.shape() {
        return Err(ArflError::Dimension {
            op: "project_linf",
            left: candidate.shape(),
            right: center.shape(),
        });
    }
    let mut out = candidate.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(center.data()) {
        *o = o.clamp(c - epsilon, c + epsilon);
    }
    Ok(out)
}

/// One sign-gradient step of size `step` from `from`, projected onto the ball around `center`.
fn signed_step(
    model: &MlpModel,
    loss: &dyn InputLoss,
    from: &Tensor,
    center: &Tensor,
    labels: &[f64],
    step: f64,
    epsilon: f64,
) -> Result<Tensor> {
    let grad = input_gradient(model, loss, from, labels)?;
    let mut moved = from.clone();
    for (m, &gv) in moved.data_mut().iter_mut().zip(grad.data()) {
        *m += step * sign(gv);
    }
    project_linf(&moved, center, epsilon)
}

/// `x + ε·sign(∇ₓ loss)`, with `sign(0) = 0`.
pub fn fgsm(model: &MlpModel, loss: &dyn InputLoss, x: &Tensor, labels: &[f64], epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(ArflError::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    signed_step(model, loss, x, x, labels, epsilon, epsilon)
}

/// Projected sign-gradient ascent starting from `start` (the clean point when `None`).
pub fn pgd(
    model: &MlpModel,
    loss: &dyn InputLoss,
    x: &Tensor,
    labels: &[f64],
    spec: &AttackSpec,
    start: Option<Tensor>,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.family != AttackFamily::Pgd {
        return Err(ArflError::Config("pgd() called with a non-PGD spec".into()));
    }
    let mut cur = match start {
        Some(s) => project_linf(&s, x, spec.epsilon)?,
        None => x.clone(),
    };
    if spec.epsilon == 0.0 {
        return Ok(x.clone());
    }
    for _ in 0..spec.steps {
        cur = signed_step(model, loss, &cur, x, labels, spec.step_size, spec.epsilon)?;
    }
    Ok(cur)
}

/// Runs `spec` against `model` with the objective it names.
///
/// The KL objective always starts from a small Gaussian perturbation of the
/// clean point; otherwise `random_start` selects a uniform start in the ball.
/// `rng` is only drawn from when a random start is used.
pub fn generate<R: Rng>(
    model: &MlpModel,
    x: &Tensor,
    labels: &[f64],
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let kl;
    let loss: &dyn InputLoss = match spec.objective {
        AttackObjective::Bce => &BceInput,
        AttackObjective::Kl => {
            kl = KlInput {
                clean_logits: model.logits(x)?,
            };
            &kl
        }
    };
    let start = match spec.objective {
        AttackObjective::Kl => {
            let normal = Normal::new(0.0, KL_START_STD).expect("positive std");
            Some(x.map(|v| v + normal.sample(rng)))
        }
        AttackObjective::Bce if spec.random_start => {
            let e = spec.epsilon;
            Some(x.map(|v| v + rng.random_range(-e..=e)))
        }
        AttackObjective::Bce => None,
    };
    match (spec.family, start) {
        (AttackFamily::Fgsm, None) => fgsm(model, loss, x, labels, spec.epsilon),
        (AttackFamily::Fgsm, Some(s)) => {
            let s = project_linf(&s, x, spec.epsilon)?;
            signed_step(model, loss, &s, x, labels, spec.epsilon, spec.epsilon)
        }
        (AttackFamily::Pgd, start) => pgd(model, loss, x, labels, spec, start),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, TWO_MOON_LAYERS};
    use crate::seeding::rng_for;

    /// `Σ_columns w·x`, independent of the model.
    struct Linear(Vec<f64>);

    impl InputLoss for Linear {
        fn build(&self, g: &mut Graph, _m: &MlpModel, x: NodeId, _l: &[f64]) -> Result<NodeId> {
            let (d, b) = g.shape(x);
            let mut w = Tensor::zeros(d, b);
            for r in 0..d {
                for c in 0..b {
                    w.set(r, c, self.0[r]);
                }
            }
            let wn = g.constant(w);
            let p = g.mul(x, wn)?;
            Ok(g.sum(p))
        }
    }

    fn model() -> MlpModel {
        MlpModel::init(&TWO_MOON_LAYERS, Activation::Tanh, 1).unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let x = Tensor::column(vec![0.3, -0.2]);
        assert_eq!(fgsm(&model(), &BceInput, &x, &[1.0], 0.0).unwrap(), x);
        let mut rng = rng_for(0, 0);
        assert_eq!(generate(&model(), &x, &[1.0], &AttackSpec::pgd(0.0, 7), &mut rng).unwrap(), x);
    }

    #[test]
    fn fgsm_follows_gradient_sign() {
        let x = Tensor::column(vec![1.0, 2.0]);
        let adv = fgsm(&model(), &Linear(vec![3.0, -2.0]), &x, &[1.0], 0.1).unwrap();
        assert!((adv.data()[0] - 1.1).abs() < 1e-12);
        assert!((adv.data()[1] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn fgsm_zero_gradient_coordinate_untouched() {
        let x = Tensor::column(vec![1.0, 2.0]);
        let adv = fgsm(&model(), &Linear(vec![0.0, 5.0]), &x, &[1.0], 0.1).unwrap();
        assert_eq!(adv.data()[0], 1.0);
    }

    #[test]
    fn pgd_single_big_step_equals_fgsm() {
        let m = model();
        let x = Tensor::from_columns(&[vec![0.2, 0.5], vec![1.0, -0.4]]).unwrap();
        let ys = [1.0, -1.0];
        let spec = AttackSpec {
            steps: 1,
            step_size: 0.3,
            ..AttackSpec::pgd(0.1, 1)
        };
        let a = pgd(&m, &BceInput, &x, &ys, &spec, None).unwrap();
        let b = fgsm(&m, &BceInput, &x, &ys, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pgd_on_linear_loss_reaches_the_corner() {
        let x = Tensor::column(vec![0.7, -1.3, 2.0]);
        let w = vec![0.5, -4.0, 0.0];
        for steps in [1, 3, 7] {
            let spec = AttackSpec::pgd(0.05, steps);
            let spec = if steps == 1 {
                AttackSpec { step_size: 0.05, ..spec }
            } else {
                spec
            };
            let adv = pgd(&model(), &Linear(w.clone()), &x, &[1.0], &spec, None).unwrap();
            let expected: Vec<f64> = x.data().iter().zip(&w).map(|(&xi, &wi)| xi + 0.05 * sign(wi)).collect();
            assert_eq!(adv.data(), expected.as_slice(), "steps={steps}");
        }
    }

    #[test]
    fn projection_cases() {
        let c = Tensor::column(vec![0.0, 0.0]);
        let inside = Tensor::column(vec![0.2, -0.1]);
        assert_eq!(project_linf(&inside, &c, 0.5).unwrap(), inside);
        let out = project_linf(&Tensor::column(vec![10.0, -10.0]), &c, 0.5).unwrap();
        assert_eq!(out.data(), &[0.5, -0.5]);
        assert_eq!(project_linf(&out, &c, 0.5).unwrap(), out);
        assert!(project_linf(&Tensor::column(vec![1.0]), &c, 0.5).is_err());
    }

    #[test]
    fn paper_defense_defaults_for_pgd() {
        let spec = AttackSpec::pgd(0.01, 7);
        assert_eq!(spec.steps, 7);
        assert!((spec.step_size - 2.5 * 0.01 / 7.0).abs() < 1e-18);
        spec.validate().unwrap();
    }

    #[test]
    fn invalid_specs() {
        assert!(AttackSpec::fgsm(-0.1).validate().is_err());
        assert!(AttackSpec { steps: 0, ..AttackSpec::pgd(0.1, 7) }.validate().is_err());
        assert!(AttackSpec { step_size: 0.0, ..AttackSpec::pgd(0.1, 7) }.validate().is_err());
    }

    #[test]
    fn attack_leaves_model_untouched_and_is_deterministic() {
        let m = model();
        let before = m.clone();
        let x = Tensor::from_columns(&[vec![0.2, 0.5], vec![1.0, -0.4]]).unwrap();
        let spec = AttackSpec::pgd(0.2, 7);
        let a = generate(&m, &x, &[1.0, -1.0], &spec, &mut rng_for(0, 0)).unwrap();
        let b = generate(&m, &x, &[1.0, -1.0], &spec, &mut rng_for(9, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
    }

    #[test]
    fn random_starts_stay_in_ball() {
        let m = model();
        let x = Tensor::from_columns(&[vec![0.2, 0.5], vec![1.0, -0.4]]).unwrap();
        let mut rng = rng_for(3, 0);
        for spec in [
            AttackSpec { random_start: true, ..AttackSpec::pgd(0.1, 3) },
            AttackSpec { random_start: true, ..AttackSpec::fgsm(0.1) },
            AttackSpec::fgsm(0.1).with_objective(AttackObjective::Kl),
            AttackSpec::pgd(0.1, 5).with_objective(AttackObjective::Kl),
        ] {
            let adv = generate(&m, &x, &[1.0, -1.0], &spec, &mut rng).unwrap();
            for (a, c) in adv.data().iter().zip(x.data()) {
                assert!((a - c).abs() <= 0.1 + 1e-12);
            }
        }
    }

    #[test]
    fn kl_attack_moves_away_from_clean_point() {
        let m = model();
        let x = Tensor::column(vec![0.4, 0.1]);
        let spec = AttackSpec::pgd(0.1, 7).with_objective(AttackObjective::Kl);
        let adv = generate(&m, &x, &[1.0], &spec, &mut rng_for(1, 1)).unwrap();
        assert_ne!(adv, x);
    }
}

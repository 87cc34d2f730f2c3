//! Training objectives as graph builders, plus closed-form scalar evaluations.
//!
//! The `*_terms` builders return a `1 × B` node holding one loss per sample
//! column; the `*_loss` wrappers average those into a scalar [`LossValue`].
//! Labels are always `±1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackSpec};
use crate::autodiff::{sigmoid, softplus, Graph, NodeId, Tensor};
use crate::error::{ArflError, Result};
use crate::mlp::MlpModel;

/// Probability clamp applied before taking logs in the Bernoulli KL.
pub const KL_CLAMP: f64 = 1e-7;

/// Scalar objective attached to a live graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossValue {
    pub node: NodeId,
}

impl LossValue {
    pub fn value(&self, g: &Graph) -> f64 {
        g.value(self.node).item()
    }
}

/// Which activations feed the feature-correlation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArflConfig {
    pub lambda: f64,
    #[serde(default)]
    pub feature_source: FeatureSource,
}

impl ArflConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ArflError::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(ArflConfig {
            lambda,
            feature_source: FeatureSource::Penultimate,
        })
    }
}

fn label_row(g: &mut Graph, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
    let (r, c) = g.shape(logits);
    if r != 1 || c != labels.len() {
        return Err(ArflError::Dimension {
            op: "labels",
            left: (r, c),
            right: (1, labels.len()),
        });
    }
    Ok(g.constant(Tensor::row(labels.to_vec())))
}

/// Per-sample `log(1 + exp(−y·z))`.
pub fn bce_terms(g: &mut Graph, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
    let y = label_row(g, logits, labels)?;
    let margin = g.mul(logits, y)?;
    let neg = g.scale(margin, -1.0);
    Ok(g.softplus(neg))
}

/// Per-sample `−mean_j σ(|f_j · y|)` over the rows of an `H × B` feature node.
pub fn robust_terms(g: &mut Graph, features: NodeId, labels: &[f64]) -> Result<NodeId> {
    let (h, b) = g.shape(features);
    if h == 0 {
        return Err(ArflError::Contract("robust loss over an empty feature vector".into()));
    }
    if b != labels.len() {
        return Err(ArflError::Dimension {
            op: "robust labels",
            left: (h, b),
            right: (1, labels.len()),
        });
    }
    let mut tiled = Tensor::zeros(h, b);
    for r in 0..h {
        for (c, &y) in labels.iter().enumerate() {
            tiled.set(r, c, y);
        }
    }
    let y = g.constant(tiled);
    let prod = g.mul(features, y)?;
    let a = g.abs(prod);
    let s = g.sigmoid(a);
    let m = g.column_mean(s)?;
    Ok(g.scale(m, -1.0))
}

/// Per-sample Bernoulli `KL(p ‖ q)` with `p = σ(logits_p)`, `q = σ(logits_q)`, both clamped.
pub fn kl_terms(g: &mut Graph, logits_p: NodeId, logits_q: NodeId) -> Result<NodeId> {
    if g.shape(logits_p) != g.shape(logits_q) {
        return Err(ArflError::Dimension {
            op: "kl",
            left: g.shape(logits_p),
            right: g.shape(logits_q),
        });
    }
    let sp = g.sigmoid(logits_p);
    let p = g.clamp(sp, KL_CLAMP, 1.0 - KL_CLAMP);
    let sq = g.sigmoid(logits_q);
    let q = g.clamp(sq, KL_CLAMP, 1.0 - KL_CLAMP);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let one_minus_p = g.scale_shift(p, -1.0, 1.0);
    let one_minus_q = g.scale_shift(q, -1.0, 1.0);
    let ln_1p = g.ln(one_minus_p);
    let ln_1q = g.ln(one_minus_q);
    let d1 = g.sub(ln_p, ln_q)?;
    let d0 = g.sub(ln_1p, ln_1q)?;
    let t1 = g.mul(p, d1)?;
    let t0 = g.mul(one_minus_p, d0)?;
    g.add(t1, t0)
}

/// Per-sample `bce + λ·robust`.
pub fn overall_terms(
    g: &mut Graph,
    logits: NodeId,
    features: NodeId,
    labels: &[f64],
    cfg: &ArflConfig,
) -> Result<NodeId> {
    let bce = bce_terms(g, logits, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(bce);
    }
    let robust = robust_terms(g, features, labels)?;
    let weighted = g.scale(robust, cfg.lambda);
    g.add(bce, weighted)
}

fn mean_of(g: &mut Graph, terms: NodeId) -> Result<LossValue> {
    Ok(LossValue { node: g.mean(terms)? })
}

pub fn bce_loss(g: &mut Graph, logits: NodeId, labels: &[f64]) -> Result<LossValue> {
    let t = bce_terms(g, logits, labels)?;
    mean_of(g, t)
}

pub fn robust_loss(g: &mut Graph, features: NodeId, labels: &[f64]) -> Result<LossValue> {
    let t = robust_terms(g, features, labels)?;
    mean_of(g, t)
}

pub fn overall_loss(
    g: &mut Graph,
    logits: NodeId,
    features: NodeId,
    labels: &[f64],
    cfg: &ArflConfig,
) -> Result<LossValue> {
    let t = overall_terms(g, logits, features, labels, cfg)?;
    mean_of(g, t)
}

/// Result of [`trades_objective`]: the scalar loss, the shared parameter
/// leaves it was built on, and the inner-maximization points.
#[derive(Debug, Clone)]
pub struct TradesLoss {
    pub loss: LossValue,
    pub params: Vec<NodeId>,
    pub x_adv: Tensor,
}

/// Mean over the batch of `bce(f(x), y) + β·KL(σ(f(x)) ‖ σ(f(x′)))`.
///
/// `x′` maximizes the KL term inside the attack ball (the attack objective is
/// forced to KL). Parameter gradients flow through both the clean and the
/// perturbed branch.
pub fn trades_objective<R: Rng>(
    g: &mut Graph,
    model: &MlpModel,
    xs: &Tensor,
    labels: &[f64],
    beta: f64,
    attack: &AttackSpec,
    rng: &mut R,
) -> Result<TradesLoss> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(ArflError::Config(format!("TRADES beta must be finite and >= 0, got {beta}")));
    }
    let spec = attack.with_objective(attacks::AttackObjective::Kl);
    let x_adv = attacks::generate(model, xs, labels, &spec, rng)?;

    let params = model.param_leaves(g, true);
    let xc = g.constant(xs.clone());
    let clean = model.forward_with(g, &params, xc)?;
    let xa = g.constant(x_adv.clone());
    let adv = model.forward_with(g, &params, xa)?;
    let bce = bce_terms(g, clean.logits, labels)?;
    let terms = if beta == 0.0 {
        bce
    } else {
        let kl = kl_terms(g, clean.logits, adv.logits)?;
        let weighted = g.scale(kl, beta);
        g.add(bce, weighted)?
    };
    let loss = mean_of(g, terms)?;
    Ok(TradesLoss { loss, params, x_adv })
}

/// `log(1 + exp(−y·z))`.
pub fn bce_value(logit: f64, label: f64) -> f64 {
    softplus(-label * logit)
}

/// `−mean_j σ(|f_j · y|)`.
pub fn robust_value(features: &[f64], label: f64) -> Result<f64> {
    if features.is_empty() {
        return Err(ArflError::Contract("robust loss over an empty feature vector".into()));
    }
    let s: f64 = features.iter().map(|f| sigmoid((f * label).abs())).sum();
    Ok(-s / features.len() as f64)
}

pub fn overall_value(logit: f64, features: &[f64], label: f64, cfg: &ArflConfig) -> Result<f64> {
    Ok(bce_value(logit, label) + cfg.lambda * robust_value(features, label)?)
}

/// Bernoulli KL divergence with both probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let p = p.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    let q = q.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackSpec;
    use crate::mlp::{Activation, TWO_MOON_LAYERS};
    use crate::seeding::rng_for;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn scalar_graph_bce(logit: f64, y: f64) -> f64 {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(logit), true);
        let l = bce_loss(&mut g, z, &[y]).unwrap();
        l.value(&g)
    }

    #[test]
    fn bce_reference_points() {
        assert_abs_diff_eq!(scalar_graph_bce(0.0, 1.0), LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(scalar_graph_bce(0.0, -1.0), LN2, epsilon = 1e-15);
        // softplus(-20) = ln(1 + e^-20)
        let small = (-20f64).exp().ln_1p();
        assert_abs_diff_eq!(scalar_graph_bce(20.0, 1.0), small, epsilon = 1e-20);
        assert!((scalar_graph_bce(20.0, 1.0) - 2.06e-9).abs() < 1e-11);
        assert_abs_diff_eq!(scalar_graph_bce(20.0, -1.0), 20.0 + small, epsilon = 1e-12);
    }

    #[test]
    fn bce_matches_probability_form() {
        for &(z, y) in &[(0.3, 1.0), (-1.7, 1.0), (2.2, -1.0), (-0.4, -1.0)] {
            let t = (y + 1.0) / 2.0;
            let p = sigmoid(z);
            let classic = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert_abs_diff_eq!(bce_value(z, y), classic, epsilon = 1e-12);
        }
    }

    #[test]
    fn bce_sign_symmetry() {
        for &z in &[-3.0, -0.2, 0.0, 0.9, 14.0] {
            assert_eq!(bce_value(z, 1.0), bce_value(-z, -1.0));
        }
    }

    fn graph_robust(features: &[f64], y: f64) -> f64 {
        let mut g = Graph::new();
        let f = g.leaf(Tensor::column(features.to_vec()), true);
        robust_loss(&mut g, f, &[y]).unwrap().value(&g)
    }

    #[test]
    fn robust_reference_points() {
        assert_eq!(graph_robust(&[0.0; 10], 1.0), -0.5);
        let expected = -(sigmoid(1.0) + sigmoid(2.0)) / 2.0;
        assert_abs_diff_eq!(expected, -0.805928, epsilon = 1e-6);
        assert_abs_diff_eq!(graph_robust(&[1.0, -2.0], 1.0), expected, epsilon = 1e-15);
        assert_eq!(graph_robust(&[1.0, -2.0], 1.0), graph_robust(&[1.0, -2.0], -1.0));
        assert_abs_diff_eq!(robust_value(&[1.0, -2.0], -1.0).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn robust_rejects_empty_features() {
        assert!(matches!(robust_value(&[], 1.0), Err(ArflError::Contract(_))));
        let mut g = Graph::new();
        let f = g.leaf(Tensor::zeros(0, 1), true);
        assert!(matches!(robust_terms(&mut g, f, &[1.0]), Err(ArflError::Contract(_))));
    }

    fn graph_overall(logit: f64, features: &[f64], lambda: f64) -> f64 {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(logit), true);
        let f = g.leaf(Tensor::column(features.to_vec()), true);
        let cfg = ArflConfig::new(lambda).unwrap();
        overall_loss(&mut g, z, f, &[1.0], &cfg).unwrap().value(&g)
    }

    #[test]
    fn overall_reference_points() {
        assert_eq!(graph_overall(0.7, &[0.3, -0.1], 0.0), bce_value(0.7, 1.0));
        assert_abs_diff_eq!(graph_overall(0.0, &[0.0; 10], 10.0), LN2 - 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(graph_overall(0.0, &[0.0; 10], 10.0), -4.306853, epsilon = 1e-6);
        let v = graph_overall(0.0, &[1.0, -2.0], 0.5);
        assert_abs_diff_eq!(v, LN2 + 0.5 * robust_value(&[1.0, -2.0], 1.0).unwrap(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.290183, epsilon = 1e-6);
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(ArflConfig::new(-0.1).is_err());
        assert!(ArflConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn kl_reference_points() {
        assert_eq!(kl_bernoulli(0.3, 0.3), 0.0);
        let expected = 0.5 * (0.5f64 / 1e-7).ln() + 0.5 * (0.5f64 / (1.0 - 1e-7)).ln();
        assert_abs_diff_eq!(kl_bernoulli(0.5, 1e-7), expected, epsilon = 1e-12);
        assert!((kl_bernoulli(0.5, 1e-7) - 7.36).abs() < 0.01);
        // clamped: q = 0 behaves like q = 1e-7
        assert_eq!(kl_bernoulli(0.5, 0.0), kl_bernoulli(0.5, 1e-7));
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = rng_for(17, 0);
        for _ in 0..1000 {
            let p: f64 = rng.random();
            let q: f64 = rng.random();
            assert!(kl_bernoulli(p, q) >= 0.0, "p={p} q={q}");
        }
    }

    #[test]
    fn kl_graph_matches_scalar() {
        let mut g = Graph::new();
        let lp = g.leaf(Tensor::row(vec![0.3, -2.0, 4.0]), true);
        let lq = g.leaf(Tensor::row(vec![-1.0, -2.0, 0.5]), true);
        let kl = kl_terms(&mut g, lp, lq).unwrap();
        let vals = g.value(kl).data().to_vec();
        for (i, (a, b)) in [(0.3, -1.0), (-2.0, -2.0), (4.0, 0.5)].iter().enumerate() {
            assert_abs_diff_eq!(vals[i], kl_bernoulli(sigmoid(*a), sigmoid(*b)), epsilon = 1e-12);
        }
    }

    fn trades_value(beta: f64, eps: f64) -> (f64, f64) {
        let model = MlpModel::init(&TWO_MOON_LAYERS, Activation::Tanh, 2).unwrap();
        let xs = Tensor::from_columns(&[vec![0.2, 0.4], vec![1.1, -0.3], vec![-0.5, 0.9]]).unwrap();
        let ys = [1.0, -1.0, 1.0];
        let mut g = Graph::new();
        let mut rng = rng_for(0, 0);
        let t = trades_objective(&mut g, &model, &xs, &ys, beta, &AttackSpec::fgsm(eps), &mut rng).unwrap();
        let mut g2 = Graph::new();
        let xn = g2.constant(xs);
        let out = model.forward_graph(&mut g2, xn, false).unwrap();
        let bce = bce_loss(&mut g2, out.logits, &ys).unwrap().value(&g2);
        (t.loss.value(&g), bce)
    }

    #[test]
    fn trades_degenerate_cases() {
        let (v, bce) = trades_value(0.0, 0.05);
        assert_eq!(v, bce);
        let (v, bce) = trades_value(6.0, 0.0);
        assert_abs_diff_eq!(v, bce, epsilon = 1e-15);
        let (v, bce) = trades_value(6.0, 0.1);
        assert!(v >= bce);
        assert!(v > bce, "a nonzero ball should produce a positive KL term");
    }
}

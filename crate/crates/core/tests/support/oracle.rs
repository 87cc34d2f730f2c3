//! Plain-`f64` reference implementations used as test oracles.
//!
//! Nothing here touches the autodiff graph: the network is re-evaluated from
//! its raw weights with ordinary loops, so a gradient computed by finite
//! differences over these functions is independent of the code under test.

#![allow(dead_code)]

use arfl::{Activation, MlpModel};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Entries smaller than this in both gradients are compared absolutely;
/// central differences with `h = 1e-5` carry ~1e-10 of rounding noise.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Bce,
    Robust,
    Overall { lambda: f64 },
    Trades { beta: f64 },
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ln(1 + e^{−y·z})` without overflow.
pub fn bce(z: f64, y: f64) -> f64 {
    let m = -y * z;
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

pub fn robust(features: &[f64], y: f64) -> f64 {
    -features.iter().map(|f| sigmoid((f * y).abs())).sum::<f64>() / features.len() as f64
}

pub fn kl(zp: f64, zq: f64) -> f64 {
    let c = |v: f64| v.clamp(1e-7, 1.0 - 1e-7);
    let p = c(sigmoid(zp));
    let q = c(sigmoid(zq));
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

/// `(logit, penultimate activations)` from the raw layer tensors.
pub fn forward(model: &MlpModel, x: &[f64]) -> (f64, Vec<f64>) {
    let act = |v: f64| match model.activation() {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(0.0),
    };
    let layers = model.layers();
    let mut h = x.to_vec();
    for (li, layer) in layers.iter().enumerate() {
        let (rows, cols) = layer.weights.shape();
        let mut next = vec![0.0; rows];
        for (r, out) in next.iter_mut().enumerate() {
            let mut s = layer.biases.get(r, 0);
            for (c, hc) in h.iter().enumerate().take(cols) {
                s += layer.weights.get(r, c) * hc;
            }
            *out = if li + 1 < layers.len() { act(s) } else { s };
        }
        if li + 1 == layers.len() {
            return (next[0], h);
        }
        h = next;
    }
    unreachable!("model has at least one layer")
}

/// Batch-mean loss; `x_adv` is the fixed inner-maximization batch for TRADES.
pub fn loss(model: &MlpModel, kind: LossKind, xs: &[Vec<f64>], ys: &[f64], x_adv: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, (x, &y)) in xs.iter().zip(ys).enumerate() {
        let (z, f) = forward(model, x);
        total += match kind {
            LossKind::Bce => bce(z, y),
            LossKind::Robust => robust(&f, y),
            LossKind::Overall { lambda } => bce(z, y) + lambda * robust(&f, y),
            LossKind::Trades { beta } => bce(z, y) + beta * kl(z, forward(model, &x_adv[i]).0),
        };
    }
    total / xs.len() as f64
}

pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let plus = f(&probe);
            probe[i] = orig - FD_STEP;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Uniform points in `[-2, 2]²` with random `±1` labels.
pub fn random_batch<R: Rng>(rng: &mut R, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let xs = (0..n)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let ys = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    (xs, ys)
}

/// Brute-force `P(score⁺ > score⁻) + ½·P(tie)`.
pub fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] <= 0.0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] > 0.0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Brute-force Mann-Whitney U of sample `a`.
pub fn pairwise_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Worst relative errors of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub params: f64,
    /// `None` for TRADES, whose inner points are held fixed.
    pub input: Option<f64>,
}

/// Library gradients of `kind` at a fresh random `(x, θ)` versus central
/// differences of the reference loss.
pub fn gradient_check(kind: LossKind, seed: u64) -> GradCheck {
    use arfl::attacks::AttackSpec;
    use arfl::autodiff::{Graph, Tensor};
    use arfl::losses::{self, ArflConfig};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::init(&[2, 10, 10, 1], Activation::Tanh, rng.random()).unwrap();
    // spread the weights a little beyond the Glorot range
    let theta: Vec<f64> = model.flat_params().iter().map(|w| w * rng.random_range(0.5..2.0)).collect();
    model.set_flat_params(&theta).unwrap();
    let (xs, ys) = random_batch(&mut rng, 4);
    let batch = Tensor::from_columns(&xs).unwrap();

    let mut g = Graph::new();
    let (root, params, x_node, x_adv) = if let LossKind::Trades { beta } = kind {
        let t = losses::trades_objective(&mut g, &model, &batch, &ys, beta, &AttackSpec::pgd(0.1, 3), &mut rng)
            .unwrap();
        let adv: Vec<Vec<f64>> = (0..xs.len()).map(|c| t.x_adv.column_at(c)).collect();
        (t.loss.node, t.params, None, adv)
    } else {
        let params = model.param_leaves(&mut g, true);
        let x = g.leaf(batch.clone(), true);
        let out = model.forward_with(&mut g, &params, x).unwrap();
        let loss = match kind {
            LossKind::Bce => losses::bce_loss(&mut g, out.logits, &ys),
            LossKind::Robust => losses::robust_loss(&mut g, out.features, &ys),
            LossKind::Overall { lambda } => {
                losses::overall_loss(&mut g, out.logits, out.features, &ys, &ArflConfig::new(lambda).unwrap())
            }
            LossKind::Trades { .. } => unreachable!(),
        }
        .unwrap();
        (loss.node, params, Some(x), Vec::new())
    };
    g.backward(root).unwrap();
    let analytic_theta: Vec<f64> = params.iter().flat_map(|&p| g.grad(p).data().to_vec()).collect();

    let numeric_theta = central_difference(
        |t| {
            let mut m = model.clone();
            m.set_flat_params(t).unwrap();
            loss(&m, kind, &xs, &ys, &x_adv)
        },
        &theta,
    );
    let input = x_node.map(|x| {
        let analytic_x = g.grad(x).data().to_vec();
        // the batch tensor is d × B, stored row-major
        let flat: Vec<f64> = batch.data().to_vec();
        let numeric_x = central_difference(
            |v| {
                let cols: Vec<Vec<f64>> = (0..xs.len()).map(|c| vec![v[c], v[xs.len() + c]]).collect();
                loss(&model, kind, &cols, &ys, &x_adv)
            },
            &flat,
        );
        relative_error(&analytic_x, &numeric_x)
    });
    GradCheck {
        params: relative_error(&analytic_theta, &numeric_theta),
        input,
    }
}

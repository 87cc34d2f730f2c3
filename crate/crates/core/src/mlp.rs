//! Fully connected binary classifier exposing its logit and penultimate features.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Nonlinearity, Tensor};
use crate::error::{ArflError, Result};

/// Layer sizes of the two-moon classifier: 2 inputs, two hidden layers of 10, one logit.
pub const TWO_MOON_LAYERS: [usize; 4] = [2, 10, 10, 1];

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn nonlinearity(self) -> Nonlinearity {
        match self {
            Activation::Tanh => Nonlinearity::Tanh,
            Activation::Relu => Nonlinearity::Relu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(ArflError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: Tensor,
    /// `out × 1`
    pub biases: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Output of a single-point forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logit: f64,
    /// Post-activation values of the last hidden layer.
    pub features: Vec<f64>,
}

/// Node handles produced by [`MlpModel::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    /// `1 × B` logits.
    pub logits: NodeId,
    /// `H × B` penultimate-layer activations.
    pub features: NodeId,
    /// Parameter leaves in [`MlpModel::params`] order.
    pub params: Vec<NodeId>,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(ArflError::Config(format!(
            "an MLP needs at least two layer sizes, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(ArflError::Config(format!("zero-width layer in {sizes:?}")));
    }
    if *sizes.last().unwrap() != 1 {
        return Err(ArflError::Config(format!(
            "the final layer must emit exactly one logit, got {sizes:?}"
        )));
    }
    Ok(())
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases, fully determined by `seed`.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    weights: Tensor::from_vec(fan_out, fan_in, data).expect("sized by construction"),
                    biases: Tensor::zeros(fan_out, 1),
                }
            })
            .collect();
        Ok(MlpModel { layers, activation })
    }

    /// All parameters zero.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: Tensor::zeros(w[1], w[0]),
                biases: Tensor::zeros(w[1], 1),
            })
            .collect();
        Ok(MlpModel { layers, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(ArflError::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.shape() != (l.weights.rows(), 1) {
                return Err(ArflError::Dimension {
                    op: "layer bias",
                    left: l.weights.shape(),
                    right: l.biases.shape(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.weights.cols() != l.weights.rows() {
                    return Err(ArflError::Dimension {
                        op: "layer chain",
                        left: l.weights.shape(),
                        right: next.weights.shape(),
                    });
                }
            }
        }
        if layers.last().unwrap().weights.rows() != 1 {
            return Err(ArflError::Config(
                "the final layer must emit exactly one logit".into(),
            ));
        }
        Ok(MlpModel { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weights.cols()];
        sizes.extend(self.layers.iter().map(|l| l.weights.rows()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    /// Length of the penultimate feature vector.
    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Weights and biases, layer by layer (`w0, b0, w1, b1, ...`).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.biases])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.biases])
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(ArflError::Dimension {
                op: "set_flat_params",
                left: (self.param_count(), 1),
                right: (flat.len(), 1),
            });
        }
        let mut off = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Adds every parameter tensor to `g` as a leaf, in [`MlpModel::params`] order.
    pub fn param_leaves(&self, g: &mut Graph, track: bool) -> Vec<NodeId> {
        self.params()
            .into_iter()
            .map(|t| g.leaf(t.clone(), track))
            .collect()
    }

    /// Records the forward pass of a `d × B` input node on `g`.
    ///
    /// With `track_params` the parameter leaves require gradients; attacks pass
    /// `false` so only the input gradient is computed.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId, track_params: bool) -> Result<GraphForward> {
        let params = self.param_leaves(g, track_params);
        self.forward_with(g, &params, x)
    }

    /// Forward pass reusing parameter leaves from [`MlpModel::param_leaves`], so
    /// several inputs can share one set of parameter gradients.
    pub fn forward_with(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<GraphForward> {
        if params.len() != self.layers.len() * 2 {
            return Err(ArflError::Contract(format!(
                "expected {} parameter leaves, got {}",
                self.layers.len() * 2,
                params.len()
            )));
        }
        let (d, _) = g.shape(x);
        if d != self.input_dim() {
            return Err(ArflError::Dimension {
                op: "forward",
                left: (self.input_dim(), 1),
                right: g.shape(x),
            });
        }
        let mut h = x;
        let mut features = x;
        let last = self.layers.len() - 1;
        for (i, pair) in params.chunks(2).enumerate() {
            let z = g.affine(pair[0], pair[1], h)?;
            if i < last {
                h = g.elementwise(self.activation.nonlinearity(), z);
                features = h;
            } else {
                h = z;
            }
        }
        Ok(GraphForward {
            logits: h,
            features,
            params: params.to_vec(),
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let xn = g.constant(Tensor::column(x.to_vec()));
        let out = self.forward_graph(&mut g, xn, false)?;
        Ok(ForwardResult {
            logit: g.value(out.logits).item(),
            features: g.value(out.features).data().to_vec(),
        })
    }

    /// Logits for each column of a `d × B` batch.
    pub fn logits(&self, xs: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xn = g.constant(xs.clone());
        let out = self.forward_graph(&mut g, xn, false)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(label_from_logit(self.forward(x)?.logit))
    }

    /// Checkpoint text: a `# activation <name>` header, then one line per
    /// tensor as `name rows cols v11 v12 ...` with round-trip precision.
    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("# activation {}\n", self.activation.name());
        for (i, l) in self.layers.iter().enumerate() {
            for (kind, t) in [("weight", &l.weights), ("bias", &l.biases)] {
                let _ = write!(out, "layer{i}.{kind} {} {}", t.rows(), t.cols());
                for v in t.data() {
                    // `{:?}` keeps the shortest representation that round-trips
                    let _ = write!(out, " {v:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut activation = Activation::Tanh;
        let mut tensors = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut parts = meta.split_whitespace();
                if parts.next() == Some("activation") {
                    let name = parts.next().ok_or_else(|| ArflError::Parse {
                        line: line_no,
                        message: "missing activation name".into(),
                    })?;
                    activation = Activation::parse(name).map_err(|e| ArflError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let _name = parts.next();
            let parse_usize = |s: Option<&str>| -> Result<usize> {
                s.and_then(|v| v.parse().ok()).ok_or_else(|| ArflError::Parse {
                    line: line_no,
                    message: "expected tensor dimensions".into(),
                })
            };
            let rows = parse_usize(parts.next())?;
            let cols = parse_usize(parts.next())?;
            let data = parts
                .map(|v| {
                    v.parse::<f64>().map_err(|e| ArflError::Parse {
                        line: line_no,
                        message: format!("bad value '{v}': {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if data.len() != rows * cols {
                return Err(ArflError::Schema {
                    line: line_no,
                    message: format!("expected {} values, found {}", rows * cols, data.len()),
                });
            }
            tensors.push(Tensor::from_vec(rows, cols, data)?);
        }
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(ArflError::Schema {
                line: 0,
                message: format!("expected weight/bias pairs, found {} tensors", tensors.len()),
            });
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weights), Some(biases)) = (it.next(), it.next()) {
            layers.push(Layer { weights, biases });
        }
        MlpModel::from_layers(layers, activation)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| ArflError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArflError::io(path, e))?;
        MlpModel::from_checkpoint(&text)
    }
}

/// `+1` when the logit is non-negative (`sigmoid ≥ 0.5`), else `−1`.
pub fn label_from_logit(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

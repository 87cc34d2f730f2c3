//! Labeled point sets: the seeded two-moon generator, CSV ingestion and epoch batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{ArflError, Result};
use crate::seeding::{rng_for, stream};

/// Points with labels in `{+1, −1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    name: String,
}

impl Dataset {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(ArflError::Contract(format!(
                "{} points but {} labels",
                xs.len(),
                ys.len()
            )));
        }
        if let Some(bad) = ys.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(ArflError::Contract(format!("label {bad} is not +1 or -1")));
        }
        if let Some(first) = xs.first() {
            if let Some(p) = xs.iter().find(|p| p.len() != first.len()) {
                return Err(ArflError::Dimension {
                    op: "dataset",
                    left: (first.len(), 1),
                    right: (p.len(), 1),
                });
            }
        }
        Ok(Dataset {
            xs,
            ys,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.first().map_or(0, Vec::len)
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Columns of a `d × k` batch for the given sample indices.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let d = self.dim();
        let k = indices.len();
        let mut t = Tensor::zeros(d, k);
        let data = t.data_mut();
        for (j, &i) in indices.iter().enumerate() {
            for (r, v) in self.xs[i].iter().enumerate() {
                data[r * k + j] = *v;
            }
        }
        t
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.ys[i]).collect()
    }

    /// The whole dataset as one `d × n` batch.
    pub fn to_tensor(&self) -> Tensor {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch_tensor(&all)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            xs: indices.iter().map(|&i| self.xs[i].clone()).collect(),
            ys: self.labels(indices),
            name: self.name.clone(),
        }
    }

    pub fn count_label(&self, label: f64) -> usize {
        self.ys.iter().filter(|&&y| y == label).count()
    }
}

fn linspace_0_pi(count: usize) -> impl Iterator<Item = f64> {
    (0..count).map(move |k| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (count - 1) as f64
        }
    })
}

/// Two interleaving half circles.
///
/// `⌈n/2⌉` upper-moon points `(cos t, sin t)` labelled `+1` and `⌊n/2⌋`
/// lower-moon points `(1 − cos t, 0.5 − sin t)` labelled `−1`, with `t` on an
/// even grid over `[0, π]`. Gaussian noise of standard deviation `noise` is
/// added to every coordinate and the order is shuffled; all randomness comes
/// from `seed`.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(ArflError::Config(format!("make_moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(ArflError::Config(format!("noise must be a finite value >= 0, got {noise}")));
    }
    let n_upper = n.div_ceil(2);
    let n_lower = n / 2;
    let mut points: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    points.extend(linspace_0_pi(n_upper).map(|t| (vec![t.cos(), t.sin()], 1.0)));
    points.extend(linspace_0_pi(n_lower).map(|t| (vec![1.0 - t.cos(), 0.5 - t.sin()], -1.0)));

    let mut rng = rng_for(seed, stream::DATA);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("validated std");
        for (p, _) in &mut points {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    points.shuffle(&mut rng);
    let (xs, ys) = points.into_iter().unzip();
    Dataset::new(xs, ys, "two_moons")
}

fn parse_label(raw: &str, line: usize) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| ArflError::Parse {
        line,
        message: format!("label '{raw}' is not numeric"),
    })?;
    if v == 1.0 {
        Ok(1.0)
    } else if v == -1.0 || v == 0.0 {
        Ok(-1.0)
    } else {
        Err(ArflError::Parse {
            line,
            message: format!("label '{raw}' must be one of +1, -1, 0, 1"),
        })
    }
}

/// Reads `feature,...,feature,label` rows. Labels `0` map to `−1`.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => ArflError::io(path, io),
            other => ArflError::Parse {
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dim: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| ArflError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() < 2 {
            return Err(ArflError::Schema {
                line,
                message: "a row needs at least one feature and a label".into(),
            });
        }
        let d = record.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(ArflError::Schema {
                    line,
                    message: format!("expected {expected} features, found {d}"),
                })
            }
            _ => {}
        }
        let point = record
            .iter()
            .take(d)
            .map(|f| {
                f.parse::<f64>().map_err(|_| ArflError::Parse {
                    line,
                    message: format!("feature '{f}' is not numeric"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        xs.push(point);
        ys.push(parse_label(&record[d], line)?);
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(xs, ys, name)
}

/// One epoch's shuffled visiting order, split into fixed-size batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochBatches {
    order: Vec<usize>,
    batch_size: usize,
}

impl EpochBatches {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn iter(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }

    pub fn count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Deterministic per-epoch permutation of `0..n`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<EpochBatches> {
    if batch_size == 0 {
        return Err(ArflError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, stream::SHUFFLE + epoch as u64);
    order.shuffle(&mut rng);
    Ok(EpochBatches { order, batch_size })
}

//! Experiment orchestration: configs, multi-seed runs, sweeps and comparisons.
//!
//! A run trains every configured row (scheme × ARFL on/off) once per seed and
//! writes:
//!
//! ```text
//! <output_dir>/<name>/
//!     config.toml          the effective configuration
//!     results.csv          one aggregated line per row
//!     per_seed.csv         one line per (row, seed), including failures
//!     <row>/seed_<k>/      model.txt, train_log.csv, boundary.csv, saliency.csv, boundary.svg
//! ```
//!
//! `results.csv` columns: `row,scheme,arfl,r,seeds,std_metric_mean,std_metric_std,
//! adv_metric_mean,adv_metric_std,mean_metric`. Metrics are fractions in `[0, 1]`
//! printed with six decimals; stds are population standard deviations over the
//! successful seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::datasets::{load_csv, make_moons, Dataset};
use crate::error::{ArflError, Result};
use crate::evaluation::{self, auc, decision_boundary_grid, mann_whitney_u, mean_std, BoundaryGrid, EvalReport};
use crate::mlp::{label_from_logit, Activation, MlpModel};
use crate::seeding::{rng_for, stream};
use crate::training::{self, OptimizerSpec, Scheme, SignMode, TrainConfig};

/// Significance threshold used when flagging comparisons.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Number of test points drawn on the SVG boundary plot.
pub const SVG_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Fresh two-moon train and test sets per seed.
    TwoMoons { n_train: usize, n_test: usize, noise: f64 },
    /// Fixed train and test files; labels `0`/`-1` and `1`.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        header: bool,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons {
            n_train: 10_000,
            n_test: 1_000,
            noise: 0.2,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::TwoMoons { n_train, n_test, noise } => {
                if *n_train < 2 || *n_test < 2 {
                    return Err(ArflError::Config("two-moon sets need at least 2 samples each".into()));
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(ArflError::Config(format!("noise must be finite and >= 0, got {noise}")));
                }
                Ok(())
            }
            DatasetSpec::Csv { .. } => Ok(()),
        }
    }

    /// Train and test sets for one seed.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::TwoMoons { n_train, n_test, noise } => {
                let test_seed: u64 = rng_for(seed, stream::TEST_DATA).random();
                Ok((make_moons(*n_train, *noise, seed)?, make_moons(*n_test, *noise, test_seed)?))
            }
            DatasetSpec::Csv { train, test, header } => Ok((load_csv(train, *header)?, load_csv(test, *header)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Accuracy,
    Auc,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "auc" => Ok(Metric::Auc),
            other => Err(ArflError::Config(format!("unknown metric '{other}'"))),
        }
    }
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub label: String,
    pub scheme: Scheme,
    #[serde(default)]
    pub arfl: bool,
    /// Mixing ratio; the scheme's own ratio when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

impl RowSpec {
    pub fn new(label: &str, scheme: Scheme, arfl: bool) -> Self {
        RowSpec {
            label: label.to_string(),
            scheme,
            arfl,
            r: None,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.r.unwrap_or_else(|| self.scheme.default_ratio())
    }
}

/// Standard, adversarial and dual training, each without and with ARFL.
pub fn table_rows() -> Vec<RowSpec> {
    vec![
        RowSpec::new("A", Scheme::Standard, false),
        RowSpec::new("B", Scheme::Standard, true),
        RowSpec::new("C", Scheme::Adversarial, false),
        RowSpec::new("D", Scheme::Adversarial, true),
        RowSpec::new("E", Scheme::Dual, false),
        RowSpec::new("F", Scheme::Dual, true),
    ]
}

/// [`table_rows`] plus the TRADES baseline as row `G`.
pub fn table_rows_with_trades() -> Vec<RowSpec> {
    let mut rows = table_rows();
    rows.push(RowSpec::new("G", Scheme::Trades, false));
    rows
}

/// Training hyper-parameters shared by all rows of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lambda: f64,
    #[serde(default)]
    pub sign_mode: SignMode,
    /// Training-time attack (budget ε₁).
    pub attack: AttackSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub trades_beta: f64,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::two_moon(Scheme::Standard, false);
        TrainSettings {
            lambda: t.lambda,
            sign_mode: t.sign_mode,
            attack: t.attack,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            trades_beta: t.trades_beta,
            layer_sizes: t.layer_sizes,
            activation: t.activation,
        }
    }
}

impl TrainSettings {
    pub fn for_row(&self, row: &RowSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            scheme: row.scheme,
            use_arfl: row.arfl,
            r: row.ratio(),
            lambda: self.lambda,
            sign_mode: self.sign_mode,
            attack: self.attack,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
            trades_beta: self.trades_beta,
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
        }
    }
}

/// Which per-seed artifacts beyond the model and training log are written.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSettings {
    /// `boundary.csv` and `saliency.csv` (2-D inputs only).
    pub grids: bool,
    /// `boundary.svg`; implies the grid.
    pub svg: bool,
    /// Mesh size `(nx, ny)`.
    pub resolution: (usize, usize),
    /// `(xmin, xmax, ymin, ymax)`.
    pub bounds: (f64, f64, f64, f64),
}

impl Default for ArtifactSettings {
    fn default() -> Self {
        ArtifactSettings {
            grids: true,
            svg: false,
            resolution: (101, 76),
            bounds: evaluation::DEFAULT_BOUNDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metric: Metric,
    pub dataset: DatasetSpec,
    pub train: TrainSettings,
    /// Evaluation-time attack (budget ε₂).
    pub eval_attack: AttackSpec,
    #[serde(default = "table_rows")]
    pub rows: Vec<RowSpec>,
    #[serde(default)]
    pub artifacts: ArtifactSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "two_moon".into(),
            output_dir: PathBuf::from("out"),
            seeds: (0..5).collect(),
            metric: Metric::Accuracy,
            dataset: DatasetSpec::default(),
            train: TrainSettings::default(),
            eval_attack: AttackSpec::fgsm(0.2),
            rows: table_rows(),
            artifacts: ArtifactSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ArflError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ArflError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ArflError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Directory holding everything this run writes.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ArflError::Config(format!("invalid run name '{}'", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(ArflError::Config("at least one seed is required".into()));
        }
        if self.rows.is_empty() {
            return Err(ArflError::Config("at least one row is required".into()));
        }
        let mut labels: Vec<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.rows.len() || labels.iter().any(|l| l.is_empty() || l.contains(['/', '\\', ','])) {
            return Err(ArflError::Config("row labels must be unique, non-empty path-safe names".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(ArflError::Config("seeds must be distinct".into()));
        }
        self.dataset.validate()?;
        self.eval_attack.validate()?;
        for row in &self.rows {
            self.train.for_row(row, 0).validate()?;
        }
        let (nx, ny) = self.artifacts.resolution;
        if (self.artifacts.grids || self.artifacts.svg) && (nx < 2 || ny < 2) {
            return Err(ArflError::Config("grid resolution must be at least 2x2".into()));
        }
        Ok(())
    }

    fn want_grid(&self) -> bool {
        self.artifacts.grids || self.artifacts.svg
    }
}

/// Standard and adversarial metric of a model on `data`.
pub fn measure(model: &MlpModel, data: &Dataset, attack: &AttackSpec, metric: Metric, seed: u64) -> Result<EvalReport> {
    let adv = evaluation::adversarial_points(model, data, attack, seed)?;
    let mut clean_logits = Vec::with_capacity(data.len());
    let mut adv_logits = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    clean_logits.extend(model.logits(&data.batch_tensor(&all))?);
    for xs in &adv {
        adv_logits.extend(model.logits(xs)?);
    }
    let score = |logits: &[f64]| -> Result<f64> {
        match metric {
            Metric::Accuracy => {
                let hits = logits
                    .iter()
                    .zip(data.ys())
                    .filter(|(&z, &y)| label_from_logit(z) == y)
                    .count();
                Ok(hits as f64 / data.len() as f64)
            }
            Metric::Auc => auc(logits, data.ys()),
        }
    };
    Ok(EvalReport::new(score(&clean_logits)?, score(&adv_logits)?))
}

/// Outcome of one (row, seed) job.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub row: String,
    pub seed: u64,
    /// The error message when the job failed.
    pub outcome: std::result::Result<EvalReport, String>,
}

/// Aggregated line of a [`ResultsTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub spec: RowSpec,
    pub seeds: usize,
    pub std_mean: f64,
    pub std_std: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    /// Average of the two metric means.
    pub mean_metric: f64,
    /// Per-seed mean metric, in seed order.
    pub per_seed_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub metric: Metric,
    pub rows: Vec<TableRow>,
    pub per_seed: Vec<SeedResult>,
}

impl ResultsTable {
    fn aggregate(metric: Metric, specs: &[RowSpec], per_seed: Vec<SeedResult>) -> Self {
        let rows = specs
            .iter()
            .map(|spec| {
                let ok: Vec<EvalReport> = per_seed
                    .iter()
                    .filter(|s| s.row == spec.label)
                    .filter_map(|s| s.outcome.as_ref().ok().copied())
                    .collect();
                let std: Vec<f64> = ok.iter().map(|r| r.standard_metric).collect();
                let adv: Vec<f64> = ok.iter().map(|r| r.adversarial_metric).collect();
                let (std_mean, std_std) = mean_std(&std);
                let (adv_mean, adv_std) = mean_std(&adv);
                TableRow {
                    spec: spec.clone(),
                    seeds: ok.len(),
                    std_mean,
                    std_std,
                    adv_mean,
                    adv_std,
                    mean_metric: (std_mean + adv_mean) / 2.0,
                    per_seed_mean: ok.iter().map(|r| r.mean_metric).collect(),
                }
            })
            .collect();
        ResultsTable { metric, rows, per_seed }
    }

    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.spec.label == label)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SeedResult> {
        self.per_seed.iter().filter(|s| s.outcome.is_err())
    }

    pub fn is_complete(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,scheme,arfl,r,seeds,std_metric_mean,std_metric_std,adv_metric_mean,adv_metric_std,mean_metric\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.spec.label,
                r.spec.scheme.name(),
                r.spec.arfl,
                r.spec.ratio(),
                r.seeds,
                r.std_mean,
                r.std_std,
                r.adv_mean,
                r.adv_std,
                r.mean_metric
            );
        }
        out
    }

    /// `row,seed,status,std_metric,adv_metric,mean_metric`; failed jobs carry empty metrics.
    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("row,seed,status,std_metric,adv_metric,mean_metric\n");
        for s in &self.per_seed {
            match &s.outcome {
                Ok(r) => {
                    let _ = writeln!(
                        out,
                        "{},{},ok,{:.6},{:.6},{:.6}",
                        s.row, s.seed, r.standard_metric, r.adversarial_metric, r.mean_metric
                    );
                }
                Err(_) => {
                    let _ = writeln!(out, "{},{},failed,,,", s.row, s.seed);
                }
            }
        }
        out
    }

    /// Human-readable table in percent: `mean (std)` per metric column.
    pub fn render(&self) -> String {
        let name = match self.metric {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "AUC",
        };
        let describe = |r: &TableRow| {
            let base = match r.spec.scheme {
                Scheme::Standard => "Standard training",
                Scheme::Adversarial => "Adversarial training",
                Scheme::Dual => "Dual adversarial training",
                Scheme::Trades => "TRADES",
            };
            let mut s = format!("{}. {base}", r.spec.label);
            if r.spec.r.is_some() {
                let _ = write!(s, " (r={})", r.spec.ratio());
            }
            if r.spec.arfl {
                s.push_str(" + ARFL");
            }
            s
        };
        let width = self.rows.iter().map(|r| describe(r).len()).max().unwrap_or(0).max(15);
        let mut out = format!(
            "{:<width$} | {:>16} | {:>16} | {:>9}\n",
            "Training method",
            format!("Standard {name}"),
            format!("Adversarial {name}"),
            format!("Mean {name}"),
        );
        let _ = writeln!(out, "{}", "-".repeat(out.trim_end().chars().count()));
        let pct = |m: f64, s: f64| format!("{:.1} ({:.1})", 100.0 * m, 100.0 * s);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$} | {:>16} | {:>16} | {:>9.1}",
                describe(r),
                pct(r.std_mean, r.std_std),
                pct(r.adv_mean, r.adv_std),
                100.0 * r.mean_metric
            );
        }
        out
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| ArflError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| ArflError::io(path, e))
}

/// Heat map of class-`+1` probability with up to [`SVG_SAMPLES`] test points on top.
pub fn boundary_svg(grid: &BoundaryGrid, points: &Dataset, seed: u64) -> String {
    const W: f64 = 480.0;
    let (x0, x1, y0, y1) = grid.bounds;
    let h = W * (y1 - y0) / (x1 - x0);
    let px = |x: f64| (x - x0) / (x1 - x0) * W;
    let py = |y: f64| (y1 - y) / (y1 - y0) * h;
    let cw = W / (grid.nx - 1) as f64;
    let ch = h / (grid.ny - 1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {W:.0} {h:.0}\">\n"
    );
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let p = grid.prob(i, j);
            // blue (p = 0) through white to red (p = 1)
            let (r, g, b) = if p >= 0.5 {
                let t = (p - 0.5) * 2.0;
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                let t = (0.5 - p) * 2.0;
                (255.0 * (1.0 - t), 255.0 * (1.0 - t), 255.0)
            };
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({:.0},{:.0},{:.0})\"/>",
                px(grid.x_at(i)) - cw / 2.0,
                py(grid.y_at(j)) - ch / 2.0,
                cw,
                ch,
                r,
                g,
                b
            );
        }
    }
    let mut rng = rng_for(seed, stream::PLOT);
    let k = SVG_SAMPLES.min(points.len());
    let mut picks = sample(&mut rng, points.len(), k).into_vec();
    picks.sort_unstable();
    for i in picks {
        let x = &points.xs()[i];
        let (fill, stroke) = if points.ys()[i] > 0.0 {
            ("#b2182b", "#ffffff")
        } else {
            ("#2166ac", "#ffffff")
        };
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{fill}\" stroke=\"{stroke}\" stroke-width=\"1\"/>",
            px(x[0]),
            py(x[1])
        );
    }
    out.push_str("</svg>\n");
    out
}

fn run_job(cfg: &ExperimentConfig, row: &RowSpec, seed: u64, dir: &Path) -> Result<EvalReport> {
    create_dir(dir)?;
    let (train_set, test_set) = cfg.dataset.load(seed)?;
    let tc = cfg.train.for_row(row, seed);
    let outcome = training::train(&tc, &train_set)?;
    outcome.model.save(&dir.join("model.txt"))?;
    training::write_log_csv(&outcome.log, &dir.join("train_log.csv"))?;
    if cfg.want_grid() && outcome.model.input_dim() == 2 {
        let grid = decision_boundary_grid(&outcome.model, cfg.artifacts.bounds, cfg.artifacts.resolution)?;
        if cfg.artifacts.grids {
            write(&dir.join("boundary.csv"), &grid.to_csv())?;
            let sal = evaluation::bce_saliency(&outcome.model, &test_set.xs()[0], test_set.ys()[0])?;
            write(&dir.join("saliency.csv"), &sal.to_csv())?;
        }
        if cfg.artifacts.svg {
            write(&dir.join("boundary.svg"), &boundary_svg(&grid, &test_set, seed))?;
        }
    }
    measure(&outcome.model, &test_set, &cfg.eval_attack, cfg.metric, seed)
}

/// Trains and evaluates every (row, seed) pair and writes the run directory.
///
/// Jobs run in parallel, each inside its own `<row>/seed_<k>` directory; a
/// failed job is recorded in `per_seed.csv` and excluded from the aggregate,
/// so the returned table is complete only if [`ResultsTable::is_complete`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    let root = cfg.run_dir();
    create_dir(&root)?;
    write(&root.join("config.toml"), &cfg.to_toml()?)?;
    let jobs: Vec<(&RowSpec, u64)> = cfg
        .rows
        .iter()
        .flat_map(|row| cfg.seeds.iter().map(move |&s| (row, s)))
        .collect();
    info!("{}: {} jobs ({} rows x {} seeds)", cfg.name, jobs.len(), cfg.rows.len(), cfg.seeds.len());
    let per_seed: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(row, seed)| {
            let dir = root.join(&row.label).join(format!("seed_{seed}"));
            let outcome = run_job(cfg, row, seed, &dir).map_err(|e| {
                warn!("row {} seed {seed} failed: {e}", row.label);
                e.to_string()
            });
            SeedResult {
                row: row.label.clone(),
                seed,
                outcome,
            }
        })
        .collect();
    let table = ResultsTable::aggregate(cfg.metric, &cfg.rows, per_seed);
    write(&root.join("results.csv"), &table.to_csv())?;
    write(&root.join("per_seed.csv"), &table.per_seed_csv())?;
    Ok(table)
}

/// Hyper-parameter varied by [`run_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    /// Mixing ratio; the row's scheme follows from the value.
    R,
    Lambda,
    /// Training-time attack budget.
    Epsilon1,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::R => "r",
            SweepParam::Lambda => "lambda",
            SweepParam::Epsilon1 => "epsilon1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(SweepParam::R),
            "lambda" => Ok(SweepParam::Lambda),
            "epsilon1" | "eps1" => Ok(SweepParam::Epsilon1),
            other => Err(ArflError::Config(format!("unknown sweep parameter '{other}'"))),
        }
    }

    fn check(self, v: f64) -> Result<()> {
        let ok = v.is_finite()
            && match self {
                SweepParam::R => (0.0..=1.0).contains(&v),
                SweepParam::Lambda | SweepParam::Epsilon1 => v >= 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(ArflError::Config(format!("{v} is not a legal value for {}", self.name())))
        }
    }
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub row: TableRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    /// False if any seed of any point failed.
    pub complete: bool,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,std_metric_mean,std_metric_std,adv_metric_mean,adv_metric_std\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                p.value, p.row.std_mean, p.row.std_std, p.row.adv_mean, p.row.adv_std
            );
        }
        out
    }
}

/// Runs one experiment per value with `base` as the only row.
///
/// Every value is checked before the first run starts. Each point writes a
/// full run directory under `<run>/sweep_<param>/<value>/`; the summary goes to
/// `<run>/sweep_<param>.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, base: &RowSpec, param: SweepParam, values: &[f64]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(ArflError::Config("a sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            param.check(v)?;
            let mut point = cfg.clone();
            let mut row = base.clone();
            match param {
                SweepParam::R => {
                    row.scheme = Scheme::from_ratio(v);
                    row.r = Some(v);
                }
                SweepParam::Lambda => point.train.lambda = v,
                SweepParam::Epsilon1 => {
                    point.train.attack.epsilon = v;
                    if point.train.attack.family == crate::attacks::AttackFamily::Pgd {
                        point.train.attack.step_size =
                            crate::attacks::default_step_size(v, point.train.attack.steps);
                    } else {
                        point.train.attack.step_size = v;
                    }
                }
            }
            row.label = format!("{}", v);
            point.rows = vec![row];
            point.output_dir = cfg.run_dir().join(format!("sweep_{}", param.name()));
            point.name = format!("{v}");
            point.validate()?;
            Ok(point)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(values.len());
    let mut complete = true;
    for (point, &value) in configs.iter().zip(values) {
        let table = run_experiment(point)?;
        complete &= table.is_complete();
        points.push(SweepPoint {
            value,
            row: table.rows.into_iter().next().expect("one row per sweep point"),
        });
    }
    let table = SweepTable { param, points, complete };
    let root = cfg.run_dir();
    create_dir(&root)?;
    write(&root.join(format!("sweep_{}.csv", param.name())), &table.to_csv())?;
    Ok(table)
}

/// Significance report of two per-seed metric lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mann-Whitney U of sample `a`.
    pub u: f64,
    pub p_two_sided: f64,
    pub significant: bool,
}

impl Comparison {
    pub fn render(&self) -> String {
        format!(
            "n={} mean_a={:.6} mean_b={:.6} U={} p={:.6}{}",
            self.n,
            self.mean_a,
            self.mean_b,
            self.u,
            self.p_two_sided,
            if self.significant { " (p < 0.05)" } else { "" }
        )
    }
}

/// Mann-Whitney U test of per-seed results from two runs of the same seed protocol.
pub fn compare_runs(a: &[f64], b: &[f64]) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(ArflError::Comparison(format!(
            "seed counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(ArflError::Comparison("no per-seed values to compare".into()));
    }
    let mw = mann_whitney_u(a, b)?;
    Ok(Comparison {
        n: a.len(),
        mean_a: mean_std(a).0,
        mean_b: mean_std(b).0,
        u: mw.u,
        p_two_sided: mw.p_two_sided,
        significant: mw.p_two_sided < SIGNIFICANCE_LEVEL,
    })
}

/// Column of `per_seed.csv` to compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetricColumn {
    Std,
    Adv,
    #[default]
    Mean,
}

impl MetricColumn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "std" | "standard" => Ok(MetricColumn::Std),
            "adv" | "adversarial" => Ok(MetricColumn::Adv),
            "mean" => Ok(MetricColumn::Mean),
            other => Err(ArflError::Config(format!("unknown metric column '{other}'"))),
        }
    }

    fn header(self) -> &'static str {
        match self {
            MetricColumn::Std => "std_metric",
            MetricColumn::Adv => "adv_metric",
            MetricColumn::Mean => "mean_metric",
        }
    }
}

/// `(seed, value)` pairs of one row in a `per_seed.csv`, sorted by seed; failed seeds are skipped.
pub fn read_per_seed(path: &Path, row: &str, column: MetricColumn) -> Result<Vec<(u64, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(err) => ArflError::io(path, err),
        other => ArflError::Config(format!("{}: {other:?}", path.display())),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| ArflError::Schema { line: 1, message: e.to_string() })?
        .clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| ArflError::Schema {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let (ri, si, st, vi) = (find("row")?, find("seed")?, find("status")?, find(column.header())?);
    let mut out = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| ArflError::Parse { line, message: e.to_string() })?;
        if &rec[ri] != row || &rec[st] != "ok" {
            continue;
        }
        let parse_err = |what: &str, v: &str| ArflError::Parse {
            line,
            message: format!("bad {what} '{v}'"),
        };
        let seed = rec[si].parse().map_err(|_| parse_err("seed", &rec[si]))?;
        let value = rec[vi].parse().map_err(|_| parse_err("value", &rec[vi]))?;
        out.push((seed, value));
    }
    if out.is_empty() {
        return Err(ArflError::Comparison(format!("no results for row '{row}' in {}", path.display())));
    }
    out.sort_by_key(|&(s, _)| s);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            name: "tiny".into(),
            output_dir: dir.to_path_buf(),
            seeds: vec![3],
            dataset: DatasetSpec::TwoMoons {
                n_train: 64,
                n_test: 32,
                noise: 0.2,
            },
            ..Default::default()
        };
        cfg.train.epochs = 1;
        cfg.train.batch_size = 16;
        cfg.artifacts.resolution = (5, 4);
        cfg.artifacts.svg = true;
        cfg
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn csv_config_round_trips() {
        let mut cfg = ExperimentConfig {
            dataset: DatasetSpec::Csv {
                train: "a.csv".into(),
                test: "b.csv".into(),
                header: true,
            },
            metric: Metric::Auc,
            rows: vec![RowSpec {
                r: Some(0.25),
                ..RowSpec::new("q", Scheme::Dual, true)
            }],
            ..Default::default()
        };
        cfg.train.attack = AttackSpec::pgd(0.01, 7);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(ArflError::Config(_))));

        let mut cfg = ExperimentConfig::default();
        cfg.rows.push(RowSpec::new("A", Scheme::Trades, false));
        assert!(cfg.validate().is_err());

        let cfg = ExperimentConfig {
            rows: vec![RowSpec::new("T", Scheme::Trades, true)],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn smoke_run_writes_every_file() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let table = run_experiment(&cfg).unwrap();
        assert!(table.is_complete());
        assert_eq!(table.rows.len(), 6);
        let root = cfg.run_dir();
        for f in ["results.csv", "per_seed.csv", "config.toml"] {
            assert!(root.join(f).is_file(), "{f}");
        }
        for row in ["A", "B", "C", "D", "E", "F"] {
            let d = root.join(row).join("seed_3");
            for f in ["model.txt", "train_log.csv", "boundary.csv", "saliency.csv", "boundary.svg"] {
                assert!(d.join(f).is_file(), "{row}/{f}");
            }
        }
        let results = fs::read_to_string(root.join("results.csv")).unwrap();
        assert_eq!(results.lines().count(), 7);
        let grid = fs::read_to_string(root.join("A/seed_3/boundary.csv")).unwrap();
        assert_eq!(grid.lines().count(), 1 + 20);
        let svg = fs::read_to_string(root.join("A/seed_3/boundary.svg")).unwrap();
        assert_eq!(svg.matches("<circle").count(), 32);
        assert_eq!(svg.matches("<rect").count(), 20);
    }

    #[test]
    fn table_aggregates_population_std() {
        let specs = vec![RowSpec::new("A", Scheme::Standard, false)];
        let per_seed = vec![
            SeedResult {
                row: "A".into(),
                seed: 0,
                outcome: Ok(EvalReport::new(0.9, 0.7)),
            },
            SeedResult {
                row: "A".into(),
                seed: 1,
                outcome: Ok(EvalReport::new(1.0, 0.5)),
            },
            SeedResult {
                row: "A".into(),
                seed: 2,
                outcome: Err("boom".into()),
            },
        ];
        let t = ResultsTable::aggregate(Metric::Accuracy, &specs, per_seed);
        let r = &t.rows[0];
        assert_eq!(r.seeds, 2);
        assert!((r.std_mean - 0.95).abs() < 1e-12);
        assert!((r.std_std - 0.05).abs() < 1e-12);
        assert!((r.adv_std - 0.1).abs() < 1e-12);
        assert!((r.mean_metric - 0.775).abs() < 1e-12);
        assert!(!t.is_complete());
        assert!(t.per_seed_csv().contains("A,2,failed,,,"));
        assert!(t.render().contains("95.0 (5.0)"));
    }

    #[test]
    fn comparison_of_disjoint_lists() {
        let a = [0.9, 0.91, 0.92, 0.93, 0.94];
        let b = [0.5, 0.51, 0.52, 0.53, 0.54];
        let c = compare_runs(&a, &b).unwrap();
        assert_eq!(c.u, 25.0);
        assert!(c.significant);
        let same = compare_runs(&a, &a).unwrap();
        assert!(same.p_two_sided > 0.99);
        assert!(!same.significant);
        assert!(matches!(compare_runs(&a, &b[..4]), Err(ArflError::Comparison(_))));
    }

    #[test]
    fn sweep_rejects_illegal_values_before_running() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let base = RowSpec::new("F", Scheme::Dual, true);
        let err = run_sweep(&cfg, &base, SweepParam::R, &[0.5, 1.5]).unwrap_err();
        assert!(matches!(err, ArflError::Config(_)));
        assert!(!cfg.run_dir().exists());
    }

    #[test]
    fn per_seed_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("per_seed.csv");
        fs::write(
            &path,
            "row,seed,status,std_metric,adv_metric,mean_metric\nF,1,ok,0.9,0.8,0.85\nF,0,ok,0.8,0.6,0.7\nE,0,ok,1,1,1\nF,2,failed,,,\n",
        )
        .unwrap();
        let v = read_per_seed(&path, "F", MetricColumn::Mean).unwrap();
        assert_eq!(v, vec![(0, 0.7), (1, 0.85)]);
        assert!(read_per_seed(&path, "Z", MetricColumn::Mean).is_err());
    }
}

//! `arfl` — run, sweep and compare robustness experiments from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 run failure, 4 comparison error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use arfl::attacks::{default_step_size, AttackFamily, AttackSpec, BceInput, InputLoss, OverallInput};
use arfl::evaluation::{decision_boundary_grid, saliency};
use arfl::harness::{
    compare_runs, read_per_seed, run_experiment, run_sweep, DatasetSpec, ExperimentConfig, Metric,
    MetricColumn, RowSpec, SweepParam,
};
use arfl::training::{OptimizerKind, OptimizerSpec};
use arfl::{Activation, ArflConfig, ArflError, MlpModel, Scheme, SignMode};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "arfl", version, about = "Feature-label correlation regularized adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every row over every seed and write the results table.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Repeat a run for each value of one hyper-parameter.
    Sweep {
        /// `r`, `lambda` or `epsilon1`.
        param: String,
        /// Comma-separated values, e.g. `0.25,0.5,0.75`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Scheme of the swept row (ignored for `r`, which implies it).
        #[arg(long, default_value = "dual")]
        scheme: String,
        /// Disable ARFL on the swept row.
        #[arg(long)]
        no_arfl: bool,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Mann-Whitney U test between two rows of `per_seed.csv` files.
    Compare {
        /// First `per_seed.csv`.
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        row_a: String,
        /// Second `per_seed.csv` (defaults to the first).
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        row_b: String,
        /// `std`, `adv` or `mean`.
        #[arg(long, default_value = "mean")]
        column: String,
    },
    /// Export the probability grid of a saved model as `x,y,prob` CSV.
    Boundary {
        #[arg(long)]
        model: PathBuf,
        /// `xmin,xmax,ymin,ymax`.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        bounds: Option<Vec<f64>>,
        /// `nx,ny`.
        #[arg(long, value_delimiter = ',', default_values_t = [101, 76])]
        resolution: Vec<usize>,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Input-gradient saliency of one point as `dim,grad,scaled` CSV.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        /// Input coordinates, comma-separated.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        x: Vec<f64>,
        /// Label, `1` or `-1` (`0` is read as `-1`).
        #[arg(long, allow_negative_numbers = true)]
        y: f64,
        /// `bce` or `overall`.
        #[arg(long, default_value = "bce")]
        loss: String,
        /// Weight of the feature-correlation term for `--loss overall`.
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Every experiment setting; flags override the config file, which overrides defaults.
#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Root of all run directories.
    #[arg(long, env = "ARFL_OUT")]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `accuracy` or `auc`.
    #[arg(long)]
    metric: Option<String>,
    /// Rows as `LABEL:scheme[+arfl][@r]`, comma-separated (e.g. `F:dual+arfl@0.5`).
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<String>>,
    /// Append the TRADES baseline as row G.
    #[arg(long)]
    with_trades: bool,

    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Train on a CSV file instead of generated moons (requires --test-csv).
    #[arg(long, requires = "test_csv")]
    train_csv: Option<PathBuf>,
    #[arg(long, requires = "train_csv")]
    test_csv: Option<PathBuf>,
    /// The CSV files start with a header line.
    #[arg(long)]
    header: bool,

    #[arg(long)]
    lambda: Option<f64>,
    /// `consistent` or `literal-eq5`.
    #[arg(long)]
    sign_mode: Option<String>,
    /// Training attack family, `fgsm` or `pgd`.
    #[arg(long)]
    attack: Option<String>,
    /// Training attack budget.
    #[arg(long)]
    epsilon1: Option<f64>,
    #[arg(long)]
    pgd_steps: Option<usize>,
    #[arg(long)]
    pgd_step_size: Option<f64>,
    #[arg(long)]
    pgd_random_start: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `adam` or `sgd`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    trades_beta: Option<f64>,
    /// Comma-separated layer widths, e.g. `2,10,10,1`.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// `tanh` or `relu`.
    #[arg(long)]
    activation: Option<String>,

    /// Evaluation attack family, `fgsm` or `pgd`.
    #[arg(long)]
    eval_attack: Option<String>,
    /// Evaluation attack budget.
    #[arg(long)]
    epsilon2: Option<f64>,
    #[arg(long)]
    eval_pgd_steps: Option<usize>,

    /// Skip boundary.csv / saliency.csv.
    #[arg(long)]
    no_grids: bool,
    /// Also write boundary.svg.
    #[arg(long)]
    svg: bool,
    /// Grid size `nx,ny`.
    #[arg(long, value_delimiter = ',')]
    resolution: Option<Vec<usize>>,
    /// Grid bounds `xmin,xmax,ymin,ymax`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    bounds: Option<Vec<f64>>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn parse_family(s: &str) -> Result<AttackFamily, ArflError> {
    match s {
        "fgsm" => Ok(AttackFamily::Fgsm),
        "pgd" => Ok(AttackFamily::Pgd),
        other => Err(ArflError::Config(format!("unknown attack '{other}'"))),
    }
}

/// Applies family / budget / step overrides, keeping the default step size in sync with ε.
fn override_attack(
    spec: &mut AttackSpec,
    family: Option<&str>,
    epsilon: Option<f64>,
    steps: Option<usize>,
    step_size: Option<f64>,
) -> Result<(), ArflError> {
    let default_step = spec.family == AttackFamily::Pgd && spec.step_size == default_step_size(spec.epsilon, spec.steps);
    if let Some(f) = family {
        let family = parse_family(f)?;
        if family != spec.family {
            let (eps, objective, random_start) = (spec.epsilon, spec.objective, spec.random_start);
            *spec = match family {
                AttackFamily::Fgsm => AttackSpec::fgsm(eps),
                AttackFamily::Pgd => AttackSpec::pgd(eps, 7),
            };
            spec.objective = objective;
            spec.random_start = random_start;
        }
    }
    let default_step = default_step || (family.is_some() && spec.family == AttackFamily::Pgd);
    if let Some(e) = epsilon {
        spec.epsilon = e;
    }
    if let Some(s) = steps {
        spec.steps = s;
    }
    match spec.family {
        AttackFamily::Fgsm => {
            spec.steps = 1;
            spec.step_size = spec.epsilon;
        }
        AttackFamily::Pgd => {
            if let Some(s) = step_size {
                spec.step_size = s;
            } else if default_step {
                spec.step_size = default_step_size(spec.epsilon, spec.steps);
            }
        }
    }
    Ok(())
}

fn pair(v: &[usize]) -> Result<(usize, usize), ArflError> {
    match v {
        [a, b] => Ok((*a, *b)),
        _ => Err(ArflError::Config(format!("expected two values 'nx,ny', got {}", v.len()))),
    }
}

fn quad(v: &[f64]) -> Result<(f64, f64, f64, f64), ArflError> {
    match v {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(ArflError::Config(format!(
            "expected four values 'xmin,xmax,ymin,ymax', got {}",
            v.len()
        ))),
    }
}

fn parse_row(s: &str) -> Result<RowSpec, ArflError> {
    let bad = || ArflError::Config(format!("row '{s}' is not LABEL:scheme[+arfl][@r]"));
    let (label, rest) = s.split_once(':').ok_or_else(bad)?;
    let (body, r) = match rest.split_once('@') {
        Some((b, r)) => (b, Some(r.parse::<f64>().map_err(|_| bad())?)),
        None => (rest, None),
    };
    let (scheme, arfl) = match body.strip_suffix("+arfl") {
        Some(sch) => (sch, true),
        None => (body, false),
    };
    Ok(RowSpec {
        label: label.to_string(),
        scheme: Scheme::parse(scheme)?,
        arfl,
        r,
    })
}

impl ExperimentArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.name {
            cfg.name = v.clone();
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = &self.metric {
            cfg.metric = Metric::parse(v)?;
        }
        if let Some(rows) = &self.rows {
            cfg.rows = rows.iter().map(|r| parse_row(r)).collect::<Result<_, _>>()?;
        }
        if self.with_trades && !cfg.rows.iter().any(|r| r.scheme == Scheme::Trades) {
            cfg.rows.push(RowSpec::new("G", Scheme::Trades, false));
        }

        if let (Some(train), Some(test)) = (&self.train_csv, &self.test_csv) {
            cfg.dataset = DatasetSpec::Csv {
                train: train.clone(),
                test: test.clone(),
                header: self.header,
            };
        } else if self.header {
            if let DatasetSpec::Csv { header, .. } = &mut cfg.dataset {
                *header = true;
            }
        }
        if self.n_train.is_some() || self.n_test.is_some() || self.noise.is_some() {
            let (mut n_train, mut n_test, mut noise) = match cfg.dataset {
                DatasetSpec::TwoMoons { n_train, n_test, noise } => (n_train, n_test, noise),
                DatasetSpec::Csv { .. } => bail!(ArflError::Config(
                    "--n-train/--n-test/--noise only apply to generated two-moon data".into()
                )),
            };
            n_train = self.n_train.unwrap_or(n_train);
            n_test = self.n_test.unwrap_or(n_test);
            noise = self.noise.unwrap_or(noise);
            cfg.dataset = DatasetSpec::TwoMoons { n_train, n_test, noise };
        }

        let t = &mut cfg.train;
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if let Some(v) = &self.sign_mode {
            t.sign_mode = SignMode::parse(v)?;
        }
        override_attack(
            &mut t.attack,
            self.attack.as_deref(),
            self.epsilon1,
            self.pgd_steps,
            self.pgd_step_size,
        )?;
        if self.pgd_random_start {
            t.attack.random_start = true;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = &self.optimizer {
            let lr = t.optimizer.learning_rate;
            t.optimizer = match v.as_str() {
                "adam" => OptimizerSpec::adam(lr),
                "sgd" => OptimizerSpec::sgd(lr, t.optimizer.momentum),
                other => bail!(ArflError::Config(format!("unknown optimizer '{other}'"))),
            };
        }
        if let Some(v) = self.learning_rate {
            t.optimizer.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            if t.optimizer.kind != OptimizerKind::Sgd {
                bail!(ArflError::Config("--momentum only applies to sgd".into()));
            }
            t.optimizer.momentum = v;
        }
        if let Some(v) = self.trades_beta {
            t.trades_beta = v;
        }
        if let Some(v) = &self.layers {
            t.layer_sizes = v.clone();
        }
        if let Some(v) = &self.activation {
            t.activation = Activation::parse(v)?;
        }

        override_attack(
            &mut cfg.eval_attack,
            self.eval_attack.as_deref(),
            self.epsilon2,
            self.eval_pgd_steps,
            None,
        )?;

        if self.no_grids {
            cfg.artifacts.grids = false;
        }
        if self.svg {
            cfg.artifacts.svg = true;
        }
        if let Some(v) = &self.resolution {
            cfg.artifacts.resolution = pair(v)?;
        }
        if let Some(v) = &self.bounds {
            cfg.artifacts.bounds = quad(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Marks a run that finished but lost one or more seeds.
#[derive(Debug)]
struct PartialRun(usize);

impl std::fmt::Display for PartialRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} seed run(s) failed; partial results written", self.0)
    }
}

impl std::error::Error for PartialRun {}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { exp } => {
            let cfg = exp.resolve()?;
            if exp.print_config {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            info!("writing to {}", cfg.run_dir().display());
            let table = run_experiment(&cfg)?;
            print!("{}", table.render());
            let failed = table.failures().count();
            for f in table.failures() {
                eprintln!("row {} seed {}: {}", f.row, f.seed, f.outcome.as_ref().unwrap_err());
            }
            if failed > 0 {
                bail!(PartialRun(failed));
            }
        }
        Command::Sweep {
            param,
            values,
            scheme,
            no_arfl,
            exp,
        } => {
            let cfg = exp.resolve()?;
            let param = SweepParam::parse(&param)?;
            let base = RowSpec::new("sweep", Scheme::parse(&scheme)?, !no_arfl);
            if exp.print_config {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            let table = run_sweep(&cfg, &base, param, &values)?;
            print!("{}", table.to_csv());
            if !table.complete {
                bail!(PartialRun(1));
            }
        }
        Command::Compare {
            a,
            row_a,
            b,
            row_b,
            column,
        } => {
            let column = MetricColumn::parse(&column)?;
            let b = b.unwrap_or_else(|| a.clone());
            let xs = read_per_seed(&a, &row_a, column)?;
            let ys = read_per_seed(&b, &row_b, column)?;
            let seeds_a: Vec<u64> = xs.iter().map(|p| p.0).collect();
            let seeds_b: Vec<u64> = ys.iter().map(|p| p.0).collect();
            if seeds_a.len() == seeds_b.len() && seeds_a != seeds_b {
                bail!(ArflError::Comparison(format!(
                    "seed lists differ: {seeds_a:?} vs {seeds_b:?}"
                )));
            }
            let xs: Vec<f64> = xs.into_iter().map(|p| p.1).collect();
            let ys: Vec<f64> = ys.into_iter().map(|p| p.1).collect();
            let c = compare_runs(&xs, &ys)?;
            println!("{row_a} vs {row_b}: {}", c.render());
        }
        Command::Boundary {
            model,
            bounds,
            resolution,
            out,
        } => {
            let model = MlpModel::load(&model)?;
            let bounds = match bounds {
                Some(b) => quad(&b)?,
                None => arfl::evaluation::DEFAULT_BOUNDS,
            };
            let grid = decision_boundary_grid(&model, bounds, pair(&resolution)?)?;
            write_or_print(out.as_deref(), &grid.to_csv())?;
        }
        Command::Saliency {
            model,
            x,
            y,
            loss,
            lambda,
            out,
        } => {
            let model = MlpModel::load(&model)?;
            let y = if y > 0.0 { 1.0 } else { -1.0 };
            let loss: Box<dyn InputLoss> = match loss.as_str() {
                "bce" => Box::new(BceInput),
                "overall" => Box::new(OverallInput(ArflConfig::new(lambda)?)),
                other => bail!(ArflError::Config(format!("unknown loss '{other}'"))),
            };
            let s = saliency(&model, &x, y, loss.as_ref())?;
            if s.constant {
                eprintln!("warning: constant gradient, scaled map set to 0.5");
            }
            write_or_print(out.as_deref(), &s.to_csv())?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<PartialRun>().is_some() {
        return 3;
    }
    match err.downcast_ref::<ArflError>() {
        Some(ArflError::Config(_) | ArflError::Parse { .. } | ArflError::Schema { .. }) => 2,
        Some(ArflError::Comparison(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_syntax() {
        assert_eq!(parse_row("F:dual+arfl").unwrap(), RowSpec::new("F", Scheme::Dual, true));
        let r = parse_row("q:dual@0.25").unwrap();
        assert_eq!(r.r, Some(0.25));
        assert!(!r.arfl);
        assert!(parse_row("nolabel").is_err());
        assert!(parse_row("x:bogus").is_err());
    }

    #[test]
    fn attack_overrides_keep_default_step() {
        let mut spec = AttackSpec::fgsm(0.05);
        override_attack(&mut spec, Some("pgd"), Some(0.01), Some(7), None).unwrap();
        assert_eq!(spec.family, AttackFamily::Pgd);
        assert_eq!(spec.step_size, default_step_size(0.01, 7));
        override_attack(&mut spec, None, Some(0.1), None, None).unwrap();
        assert_eq!(spec.step_size, default_step_size(0.1, 7));
        override_attack(&mut spec, None, None, None, Some(0.003)).unwrap();
        assert_eq!(spec.step_size, 0.003);
        override_attack(&mut spec, None, Some(0.2), None, None).unwrap();
        assert_eq!(spec.step_size, 0.003);
    }

    #[test]
    fn flags_override_defaults() {
        let args = ExperimentArgs {
            seeds: Some(vec![7, 8]),
            epochs: Some(3),
            epsilon1: Some(0.1),
            with_trades: true,
            ..Default::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.attack.epsilon, 0.1);
        assert_eq!(cfg.train.attack.step_size, 0.1);
        assert_eq!(cfg.rows.len(), 7);
        assert_eq!(arfl::harness::table_rows_with_trades(), cfg.rows);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emq::data::{LabelColumn, SyntheticKind};
use emq::error::{EmqError, Result};
use emq::model::serialize::{load_model, LoadedModel};
use emq::quant::{emqw_weights, normal_quantile, pinball_loss, QuantileGrid};
use emq::run::{
    benchmark, evaluate_run, train_single, DatasetSpec, GridSpec, RunConfig, Variant,
};

#[derive(Parser)]
#[command(name = "emq", about = "Ensemble multi-quantile conditional distribution models", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with one label column and numeric features
    #[arg(long, conflicts_with = "synthetic")]
    csv: Option<PathBuf>,
    /// Label column name (or index with --label-index)
    #[arg(long, requires = "csv")]
    label: Option<String>,
    /// Interpret --label as a zero-based column index
    #[arg(long, requires = "label")]
    label_index: bool,
    /// CSV has no header row
    #[arg(long, requires = "csv")]
    no_header: bool,
    /// Synthetic generator: hetero-gaussian, skewed, or bimodal
    #[arg(long)]
    synthetic: Option<String>,
    /// Sample count for --synthetic
    #[arg(long, default_value_t = 10_000)]
    n: usize,
}

impl DataArgs {
    fn spec(&self) -> Result<DatasetSpec> {
        match (&self.csv, &self.synthetic) {
            (Some(path), None) => {
                let label = self
                    .label
                    .clone()
                    .ok_or_else(|| EmqError::Config("--csv requires --label".into()))?;
                let label = if self.label_index {
                    let idx = label.parse().map_err(|_| {
                        EmqError::Config(format!("--label {label:?} is not a column index"))
                    })?;
                    LabelColumn::Index(idx)
                } else {
                    LabelColumn::Name(label)
                };
                Ok(DatasetSpec::Csv {
                    path: path.clone(),
                    label,
                    header: !self.no_header,
                })
            }
            (None, Some(kind)) => Ok(DatasetSpec::Synthetic {
                kind: SyntheticKind::parse(kind)?,
                n: self.n,
            }),
            _ => Err(EmqError::Config(
                "specify exactly one of --csv or --synthetic".into(),
            )),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model variant: emq0, emq, emqw, vanilla-qr, qrw, or interval-score
    #[arg(long, default_value = "emq")]
    variant: String,
    /// Quantile grid: percent99, uniform(K), or comma-separated levels
    #[arg(long, default_value = "percent99")]
    grid: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    /// Maximum number of ensemble update steps
    #[arg(long, default_value_t = 40)]
    t_max: usize,
    /// Earliest step the stop rule may fire at (set above --t-max to
    /// explore every step and rely on the argmin alone)
    #[arg(long, default_value_t = 10)]
    t1: usize,
    /// Recent-window length for the stop rule
    #[arg(long, default_value_t = 5)]
    t2: usize,
    /// Validation metric for step selection: ece-grid or eice
    #[arg(long, default_value = "ece-grid")]
    adaptive_metric: String,
    /// Output directory for model.emqm, manifest.json, and trace.csv
    #[arg(long, short)]
    out: PathBuf,
}

fn parse_grid(s: &str) -> GridSpec {
    if s.contains(',') {
        GridSpec::Levels(
            s.split(',')
                .filter_map(|t| t.trim().parse().ok())
                .collect(),
        )
    } else {
        GridSpec::Named(s.to_string())
    }
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut train = emq::nn::TrainConfig::default();
        train.max_epochs = self.max_epochs;
        train.patience = self.patience;
        train.seed = self.seed;
        let mut adaptive = emq::model::emq::AdaptiveTConfig::default();
        adaptive.t_max = self.t_max;
        adaptive.t1 = self.t1;
        adaptive.t2 = self.t2;
        adaptive.metric = match self.adaptive_metric.as_str() {
            "ece-grid" => emq::model::AdaptiveMetric::EceGrid,
            "eice" => emq::model::AdaptiveMetric::Eice,
            other => {
                return Err(EmqError::Config(format!(
                    "unknown adaptive metric {other:?} (expected ece-grid or eice)"
                )))
            }
        };
        let cfg = RunConfig {
            dataset: self.data.spec()?,
            variant: Variant::parse(&self.variant)?,
            grid: parse_grid(&self.grid),
            train,
            step: Default::default(),
            adaptive,
            seeds: vec![self.seed],
            test_fraction: self.test_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write it with its manifest and trace
    Train(TrainArgs),
    /// Evaluate a trained run directory on one data fold
    Evaluate {
        /// Run directory produced by `emq train`
        run_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Permit evaluation on the training fold
        #[arg(long)]
        allow_train_eval: bool,
    },
    /// Train and evaluate several variants on shared splits
    Benchmark {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated variant list
        #[arg(long, default_value = "emq0,emq,emqw,vanilla-qr,qrw,interval-score")]
        variants: String,
        /// Comma-separated seed list (overrides --seed)
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Export the implied density of a trained model at one input point
    Density {
        /// Run directory produced by `emq train`
        run_dir: PathBuf,
        /// Comma-separated raw feature values
        #[arg(long)]
        at: String,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the analytic pinball-loss weights for a grid
    Weights {
        #[arg(long, default_value = "percent99")]
        grid: String,
        /// Cross-check each weight against Monte-Carlo pinball losses
        #[arg(long)]
        verify: bool,
        /// Draw count per level for --verify
        #[arg(long, default_value_t = 10_000_000)]
        draws: usize,
    },
}

fn cmd_evaluate(run_dir: &Path, split: &str, allow_train_eval: bool) -> Result<()> {
    let report = evaluate_run(run_dir, split, allow_train_eval)?;
    println!(
        "dataset={} split={} n={}",
        report.dataset, report.split, report.n_samples
    );
    println!("EICE  {:.6}  (x100: {:.4})", report.eice, report.eice_x100);
    println!("EIS   {:.6}  (x100: {:.4})", report.eis, report.eis_x100);
    println!("TICE  {:.6}  (x100: {:.4})", report.tice, report.tice_x100);
    Ok(())
}

fn cmd_density(run_dir: &Path, at: &str, out: Option<&PathBuf>) -> Result<()> {
    let x: Vec<f64> = at
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| EmqError::Config(format!("bad feature value {t:?} in --at")))
        })
        .collect::<Result<_>>()?;
    let x = emq::linalg::Matrix::from_vec(1, x.len(), x)?;
    let model = load_model(&run_dir.join("model.emqm"))?;
    let grid: QuantileGrid = model.grid().clone();
    let mut csv = String::from("curve,midpoint,density,finite\n");
    let mut append = |tag: &str, fan: &[f64]| -> Result<()> {
        let (cells, valid) = emq::metrics::implied_density(fan, &grid)?;
        if !valid {
            log::warn!("{tag} fan has non-increasing adjacent quantiles; density cells flagged");
        }
        for c in &cells {
            csv.push_str(&format!("{tag},{},{},{}\n", c.midpoint, c.density, c.finite));
        }
        Ok(())
    };
    match &model {
        LoadedModel::Emq(m) => {
            let x_norm = m.norm.normalize_features(&x)?;
            let initial = m.predict_initial_norm(&x_norm)?;
            let initial: Vec<f64> = initial
                .row(0)
                .iter()
                .map(|&v| m.norm.denormalize_label(v))
                .collect();
            append("initial", &initial)?;
            let fan = m.predict_quantiles(&x)?;
            append("final", fan.row(0))?;
        }
        LoadedModel::Direct(m) => {
            let fan = m.predict_quantiles(&x, true)?;
            append("final", fan.row(0))?;
        }
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_weights(grid: &str, verify: bool, draws: usize) -> Result<()> {
    let grid = parse_grid(grid).build()?;
    let weights = emqw_weights(&grid);
    if verify {
        println!("tau,weight,mc_weight,rel_err");
    } else {
        println!("tau,weight");
    }
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let samples: Vec<f64> = if verify {
        (0..draws).map(|_| normal.sample(&mut rng)).collect()
    } else {
        Vec::new()
    };
    for (k, &tau) in grid.levels().iter().enumerate() {
        let w = weights.values()[k];
        if verify {
            let q = normal_quantile(tau)?;
            let mean_loss: f64 =
                samples.iter().map(|&y| pinball_loss(y, q, tau)).sum::<f64>() / draws as f64;
            let mc = 1.0 / mean_loss;
            println!("{tau},{w},{mc},{}", (mc - w).abs() / w);
        } else {
            println!("{tau},{w}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = args.config()?;
            let manifest = train_single(&config, args.seed, &args.out)?;
            println!(
                "trained {} seed={} t_ada={} -> {}",
                config.variant.as_str(),
                manifest.seed,
                manifest.t_ada,
                args.out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            run_dir,
            split,
            allow_train_eval,
        } => cmd_evaluate(&run_dir, &split, allow_train_eval),
        Command::Benchmark {
            train,
            variants,
            seeds,
        } => {
            let mut config = train.config()?;
            if let Some(seeds) = seeds {
                config.seeds = seeds
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| EmqError::Config(format!("bad seed {s:?}")))
                    })
                    .collect::<Result<_>>()?;
            }
            let variants: Vec<Variant> = variants
                .split(',')
                .map(|s| Variant::parse(s.trim()))
                .collect::<Result<_>>()?;
            let (_, table) = benchmark(&config, &variants, &train.out)?;
            print!("{table}");
            Ok(())
        }
        Command::Density { run_dir, at, out } => cmd_density(&run_dir, &at, out.as_ref()),
        Command::Weights {
            grid,
            verify,
            draws,
        } => cmd_weights(&grid, verify, draws),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Run orchestration shared by the CLI and the acceptance suite: config
//! parsing, deterministic dataset preparation, training runs with manifests
//! and traces, evaluation reports, and benchmark aggregation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    fit_interval_score_model, fit_qrw, fit_vanilla_qr, DirectQuantileModel,
};
use crate::data::{
    load_csv, nested_split, standardize, synthesize, Dataset, LabelColumn, NestedSplit,
    SyntheticKind,
};
use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::metrics::EvalReport;
use crate::model::emq::{fit_emq, AdaptiveTConfig, EmqVariant, EnsembleStepConfig};
use crate::model::serialize::{load_model, save_direct_model, save_emq_model, LoadedModel};
use crate::nn::TrainConfig;
use crate::quant::QuantileGrid;

/// Where the data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        label: LabelColumn,
        #[serde(default = "default_true")]
        header: bool,
    },
    Synthetic {
        kind: SyntheticKind,
        n: usize,
    },
}

fn default_true() -> bool {
    true
}

/// Grid selection in config files: "percent99", "uniform(K)", or an
/// explicit level list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Named(String),
    Levels(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Named("percent99".into())
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<QuantileGrid> {
        match self {
            GridSpec::Levels(levels) => QuantileGrid::new(levels.clone()),
            GridSpec::Named(name) => {
                if name == "percent99" {
                    Ok(QuantileGrid::percent99())
                } else if let Some(rest) = name.strip_prefix("uniform(") {
                    let k: usize = rest
                        .strip_suffix(')')
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| {
                            EmqError::Config(format!("cannot parse grid spec {name:?}"))
                        })?;
                    QuantileGrid::uniform(k)
                } else {
                    Err(EmqError::Config(format!(
                        "unknown grid spec {name:?} (use \"percent99\", \"uniform(K)\", or a level list)"
                    )))
                }
            }
        }
    }
}

/// Every trainable model variant the CLI knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Emq0,
    Emq,
    Emqw,
    VanillaQr,
    Qrw,
    IntervalScore,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Emq0 => "emq0",
            Variant::Emq => "emq",
            Variant::Emqw => "emqw",
            Variant::VanillaQr => "vanilla-qr",
            Variant::Qrw => "qrw",
            Variant::IntervalScore => "interval-score",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "emq0" => Ok(Variant::Emq0),
            "emq" => Ok(Variant::Emq),
            "emqw" => Ok(Variant::Emqw),
            "vanilla-qr" => Ok(Variant::VanillaQr),
            "qrw" => Ok(Variant::Qrw),
            "interval-score" => Ok(Variant::IntervalScore),
            other => Err(EmqError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub variant: Variant,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub step: EnsembleStepConfig,
    #[serde(default)]
    pub adaptive: AdaptiveTConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(EmqError::Config("seeds list must be non-empty".into()));
        }
        self.grid.build()?;
        self.train.validate()?;
        self.step.validate()?;
        self.adaptive.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(EmqError::Config("test_fraction must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| EmqError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| EmqError::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash over the canonical JSON encoding; identical hashes mean
    /// identical configurations.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config always serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Manifest written next to every trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub split: NestedSplit,
    pub t_ada: usize,
    pub stop_step: usize,
    pub e_trace: Vec<f64>,
}

/// Dataset prepared for one seed: normalized folds plus raw copies.
pub struct PreparedData {
    pub split: NestedSplit,
    pub train_x: Matrix,
    pub train_y: Vec<f64>,
    pub val_x: Matrix,
    pub val_y: Vec<f64>,
    pub test_x: Matrix,
    pub test_y: Vec<f64>,
    pub norm: crate::data::NormStats,
    pub source_id: String,
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Csv {
            path,
            label,
            header,
        } => load_csv(path, label, *header),
        DatasetSpec::Synthetic { kind, n } => Ok(synthesize(*kind, *n, seed)?.0),
    }
}

/// Split and standardize deterministically for (dataset, seed). Stats come
/// from the training fold only and are applied to all three folds.
pub fn prepare(spec: &DatasetSpec, seed: u64, test_fraction: f64, val_fraction: f64) -> Result<PreparedData> {
    let dataset = load_dataset(spec, seed)?;
    let split = nested_split(dataset.n(), test_fraction, val_fraction, seed)?;
    let train = dataset.subset(&split.train);
    let val = dataset.subset(&split.val);
    let test = dataset.subset(&split.test);
    let (norm, train_n, others) = standardize(&train, &[&val, &test])?;
    let mut others = others.into_iter();
    let val_n = others.next().unwrap();
    let test_n = others.next().unwrap();
    Ok(PreparedData {
        split,
        train_x: train_n.features,
        train_y: train_n.labels,
        val_x: val_n.features,
        val_y: val_n.labels,
        test_x: test_n.features,
        test_y: test_n.labels,
        norm,
        source_id: dataset.source_id,
    })
}

/// Both model kinds a run can produce, with their training traces.
pub enum TrainedModel {
    Emq {
        model: crate::model::emq::EmqModel,
        e_trace: Vec<f64>,
        stop_step: usize,
    },
    Direct(DirectQuantileModel),
}

pub fn train_model(config: &RunConfig, seed: u64, data: &PreparedData) -> Result<TrainedModel> {
    let grid = config.grid.build()?;
    let cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    match config.variant {
        Variant::Emq0 | Variant::Emq | Variant::Emqw => {
            let variant = match config.variant {
                Variant::Emq0 => EmqVariant::Emq0,
                Variant::Emq => EmqVariant::Emq,
                _ => EmqVariant::Emqw,
            };
            let fit = fit_emq(
                &data.train_x,
                &data.train_y,
                &data.val_x,
                &data.val_y,
                &grid,
                &cfg,
                &config.step,
                &config.adaptive,
                variant,
                data.norm.clone(),
            )?;
            Ok(TrainedModel::Emq {
                model: fit.model,
                e_trace: fit.e_trace,
                stop_step: fit.stop_step,
            })
        }
        Variant::VanillaQr => {
            let (m, _) = fit_vanilla_qr(
                &data.train_x,
                &data.train_y,
                &data.val_x,
                &data.val_y,
                &grid,
                &cfg,
                data.norm.clone(),
            )?;
            Ok(TrainedModel::Direct(m))
        }
        Variant::Qrw => {
            let (m, _) = fit_qrw(
                &data.train_x,
                &data.train_y,
                &data.val_x,
                &data.val_y,
                &grid,
                &cfg,
                data.norm.clone(),
                None,
            )?;
            Ok(TrainedModel::Direct(m))
        }
        Variant::IntervalScore => {
            let (m, _) = fit_interval_score_model(
                &data.train_x,
                &data.train_y,
                &data.val_x,
                &data.val_y,
                &grid,
                &cfg,
                data.norm.clone(),
            )?;
            Ok(TrainedModel::Direct(m))
        }
    }
}

/// Train one (config, seed) cell and write `manifest.json`, `model.emqm`,
/// and `trace.csv` into `out_dir`. Returns the manifest.
pub fn train_single(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let data = prepare(
        &config.dataset,
        seed,
        config.test_fraction,
        config.train.val_fraction,
    )?;
    let trained = train_model(config, seed, &data)?;

    let model_path = out_dir.join("model.emqm");
    let (t_ada, stop_step, e_trace) = match &trained {
        TrainedModel::Emq {
            model,
            e_trace,
            stop_step,
        } => {
            save_emq_model(model, &model_path)?;
            (model.t_ada(), *stop_step, e_trace.clone())
        }
        TrainedModel::Direct(model) => {
            save_direct_model(model, &model_path)?;
            (0, 0, Vec::new())
        }
    };

    let manifest = RunManifest {
        config: config.clone(),
        config_hash: config.config_hash(),
        seed,
        split: data.split,
        t_ada,
        stop_step,
        e_trace: e_trace.clone(),
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut trace_csv = String::from("t,ece_val\n");
    for (t, e) in e_trace.iter().enumerate() {
        trace_csv.push_str(&format!("{t},{e}\n"));
    }
    fs::write(out_dir.join("trace.csv"), trace_csv)?;
    Ok(manifest)
}

/// Evaluate the model in `run_dir` on one fold of its manifest dataset,
/// in normalized-label units. Writes `report.json` and `report.csv`.
pub fn evaluate_run(run_dir: &Path, split: &str, allow_train_eval: bool) -> Result<EvalReport> {
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json"))?)?;
    if split == "train" && !allow_train_eval {
        return Err(EmqError::Config(
            "evaluating on the training fold requires --allow-train-eval".into(),
        ));
    }
    let data = prepare(
        &manifest.config.dataset,
        manifest.seed,
        manifest.config.test_fraction,
        manifest.config.train.val_fraction,
    )?;
    let (x, y) = match split {
        "test" => (&data.test_x, &data.test_y),
        "val" => (&data.val_x, &data.val_y),
        "train" => (&data.train_x, &data.train_y),
        other => {
            return Err(EmqError::Config(format!(
                "unknown split {other:?} (expected train, val, or test)"
            )))
        }
    };
    let model = load_model(&run_dir.join("model.emqm"))?;
    let fans = match &model {
        LoadedModel::Emq(m) => m.predict_norm(x)?,
        LoadedModel::Direct(m) => m.predict_norm(x)?,
    };
    let report = EvalReport::compute(
        &fans,
        y,
        model.grid(),
        data.source_id,
        manifest.config_hash.clone(),
        manifest.seed,
        split.to_string(),
    )?;
    fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    fs::write(run_dir.join("report.csv"), report.to_csv())?;
    Ok(report)
}

/// One benchmark cell result (possibly failed).
#[derive(Debug, Serialize)]
pub struct BenchmarkCell {
    pub variant: String,
    pub seed: u64,
    pub eice: Option<f64>,
    pub eis: Option<f64>,
    pub tice: Option<f64>,
    pub error: Option<String>,
}

/// Train and evaluate every (variant, seed) pair on identical per-seed
/// splits; write per-cell run dirs plus `aggregate.csv` (rows = variants,
/// mean metrics). Per-cell failures are recorded, not fatal.
pub fn benchmark(
    base: &RunConfig,
    variants: &[Variant],
    out_dir: &Path,
) -> Result<(Vec<BenchmarkCell>, String)> {
    if variants.is_empty() {
        return Err(EmqError::Config("benchmark needs at least one variant".into()));
    }
    base.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    for &variant in variants {
        let config = RunConfig {
            variant,
            ..base.clone()
        };
        for &seed in &base.seeds {
            let cell_dir = out_dir.join(variant.as_str()).join(format!("seed-{seed}"));
            let outcome = train_single(&config, seed, &cell_dir)
                .and_then(|_| evaluate_run(&cell_dir, "test", false));
            match outcome {
                Ok(report) => cells.push(BenchmarkCell {
                    variant: variant.as_str().into(),
                    seed,
                    eice: Some(report.eice),
                    eis: Some(report.eis),
                    tice: Some(report.tice),
                    error: None,
                }),
                Err(e) => cells.push(BenchmarkCell {
                    variant: variant.as_str().into(),
                    seed,
                    eice: None,
                    eis: None,
                    tice: None,
                    error: Some(e.to_string()),
                }),
            }
        }
    }

    let mut table = String::from(
        "variant,seeds_ok,seeds_failed,mean_eice,mean_eis,mean_tice,mean_eice_x100,mean_eis_x100,mean_tice_x100\n",
    );
    for &variant in variants {
        let ok: Vec<&BenchmarkCell> = cells
            .iter()
            .filter(|c| c.variant == variant.as_str() && c.error.is_none())
            .collect();
        let failed = base.seeds.len() - ok.len();
        if ok.is_empty() {
            table.push_str(&format!(
                "{},0,{},FAILED,FAILED,FAILED,FAILED,FAILED,FAILED\n",
                variant.as_str(),
                failed
            ));
            continue;
        }
        let mean = |f: fn(&BenchmarkCell) -> Option<f64>| -> f64 {
            ok.iter().map(|c| f(c).unwrap()).sum::<f64>() / ok.len() as f64
        };
        let (me, ms, mt) = (mean(|c| c.eice), mean(|c| c.eis), mean(|c| c.tice));
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            variant.as_str(),
            ok.len(),
            failed,
            me,
            ms,
            mt,
            me * 100.0,
            ms * 100.0,
            mt * 100.0
        ));
    }
    fs::write(out_dir.join("aggregate.csv"), &table)?;
    Ok((cells, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(variant: Variant) -> RunConfig {
        RunConfig {
            dataset: DatasetSpec::Synthetic {
                kind: SyntheticKind::HeteroGaussian,
                n: 400,
            },
            variant,
            grid: GridSpec::default(),
            train: TrainConfig {
                max_epochs: 4,
                patience: 2,
                ..TrainConfig::default()
            },
            step: EnsembleStepConfig::default(),
            adaptive: AdaptiveTConfig {
                t_max: 2,
                t1: 3,
                t2: 1,
                ..AdaptiveTConfig::default()
            },
            seeds: vec![1],
            test_fraction: 0.2,
        }
    }

    #[test]
    fn grid_spec_parsing() {
        assert_eq!(GridSpec::Named("percent99".into()).build().unwrap().len(), 99);
        assert_eq!(GridSpec::Named("uniform(9)".into()).build().unwrap().len(), 9);
        assert!(GridSpec::Named("weird".into()).build().is_err());
        assert_eq!(GridSpec::Levels(vec![0.1, 0.9]).build().unwrap().len(), 2);
    }

    #[test]
    fn config_hash_distinguishes_configs() {
        let a = small_config(Variant::Emq0);
        let mut b = small_config(Variant::Emq0);
        assert_eq!(a.config_hash(), b.config_hash());
        b.test_fraction = 0.3;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn train_evaluate_round_trip_emq0() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(Variant::Emq0);
        let manifest = train_single(&config, 1, dir.path()).unwrap();
        assert_eq!(manifest.t_ada, 0);
        assert_eq!(manifest.e_trace.len(), 1); // trace has exactly t=0
        let report = evaluate_run(dir.path(), "test", false).unwrap();
        assert!(report.eice >= 0.0 && report.eice <= 1.0);
        assert!(dir.path().join("report.json").exists());
        // Training-fold evaluation is refused without the explicit flag.
        assert!(evaluate_run(dir.path(), "train", false).is_err());
        assert!(evaluate_run(dir.path(), "train", true).is_ok());
    }

    #[test]
    fn trace_length_bounded_by_tmax() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(Variant::Emq);
        let manifest = train_single(&config, 1, dir.path()).unwrap();
        assert!(manifest.e_trace.len() <= config.adaptive.t_max + 1);
        assert!(manifest.t_ada <= config.adaptive.t_max);
    }

    #[test]
    fn benchmark_cells_share_split_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(Variant::Emq0);
        config.seeds = vec![1, 2];
        let (cells, table) =
            benchmark(&config, &[Variant::Emq0, Variant::VanillaQr], dir.path()).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(table.lines().count() >= 3);
        // Identical split indices across variants for the same seed.
        for seed in [1u64, 2] {
            let m1: RunManifest = serde_json::from_str(
                &fs::read_to_string(dir.path().join("emq0").join(format!("seed-{seed}")).join("manifest.json")).unwrap(),
            )
            .unwrap();
            let m2: RunManifest = serde_json::from_str(
                &fs::read_to_string(dir.path().join("vanilla-qr").join(format!("seed-{seed}")).join("manifest.json")).unwrap(),
            )
            .unwrap();
            assert_eq!(m1.split.test, m2.split.test);
            assert_eq!(m1.split.train, m2.split.train);
        }
    }
}

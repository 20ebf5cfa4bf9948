//! The EMQ/EMQW estimator: Gaussian initial step, boosted
//! monotonicity-preserving quantile updates, and the adaptive-T stopping
//! rule.

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::metrics::{ece, eice};
use crate::model::loss::{EnsembleStepLoss, GaussianHeadLoss, SIGMA_FLOOR};
use crate::model::transform::{g_transform_unchecked, gaussian_head_quantiles, lambda_head};
use crate::nn::{train_with_early_stopping, Activation, FitReport, Mlp, TrainConfig};
use crate::quant::{emqw_weights, LossWeights, QuantileGrid};

/// Hidden-size multipliers for the initial learner F₀ (sizes [8,16,4]·d).
pub const F0_HIDDEN_MULTIPLIERS: [usize; 3] = [8, 16, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmqVariant {
    /// Gaussian head only (T_max forced to 0).
    Emq0,
    /// Unweighted multi-quantile loss at every step.
    Emq,
    /// EMQW: weighted loss at every step, including t = 0.
    Emqw,
}

impl EmqVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmqVariant::Emq0 => "emq0",
            EmqVariant::Emq => "emq",
            EmqVariant::Emqw => "emqw",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleStepConfig {
    /// Stand-in for the infinite support ends; must exceed any |quantile|
    /// seen in training (warned about post-fit otherwise).
    pub boundary_b: f64,
    /// Hidden sizes of the weak learners (the cubic head has 4 outputs).
    pub weak_hidden_sizes: Vec<usize>,
}

impl Default for EnsembleStepConfig {
    fn default() -> Self {
        EnsembleStepConfig {
            boundary_b: 10.0,
            weak_hidden_sizes: vec![16, 8],
        }
    }
}

impl EnsembleStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.boundary_b > 0.0) {
            return Err(EmqError::Config("boundary_b must be positive".into()));
        }
        if self.weak_hidden_sizes.iter().any(|&s| s == 0) {
            return Err(EmqError::Config("weak hidden sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Validation metric tracked by the adaptive-T rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveMetric {
    /// Mean over grid levels of |τ_k - empirical freq(y <= q_k)|.
    EceGrid,
    /// Expected interval calibration error over centered pairs.
    Eice,
}

impl Default for AdaptiveMetric {
    fn default() -> Self {
        AdaptiveMetric::EceGrid
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveTConfig {
    pub t_max: usize,
    /// Window parameters of the stop rule; t1 > t2 >= 1. Setting t1 beyond
    /// t_max disables the early exit, so all t_max steps are explored and
    /// only the argmin selection remains.
    pub t1: usize,
    pub t2: usize,
    #[serde(default)]
    pub metric: AdaptiveMetric,
}

impl Default for AdaptiveTConfig {
    fn default() -> Self {
        AdaptiveTConfig {
            t_max: 40,
            t1: 10,
            t2: 5,
            metric: AdaptiveMetric::EceGrid,
        }
    }
}

impl AdaptiveTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t2 < 1 || self.t1 <= self.t2 {
            return Err(EmqError::Config(format!(
                "adaptive-T windows need t1 > t2 >= 1, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        Ok(())
    }
}

/// Trained EMQ/EMQW model: strong learner F₀ plus T_ada weak learners, all
/// fixed transform parameters, and the training normalization stats.
#[derive(Debug, Clone)]
pub struct EmqModel {
    pub grid: QuantileGrid,
    pub f0: Mlp,
    pub weak_learners: Vec<Mlp>,
    pub step_config: EnsembleStepConfig,
    pub variant: EmqVariant,
    pub norm: NormStats,
}

impl EmqModel {
    pub fn t_ada(&self) -> usize {
        self.weak_learners.len()
    }

    /// Quantile fan in normalized-label units for one normalized input row.
    pub fn predict_fan_norm(&self, x_norm: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, x_norm.len(), x_norm.to_vec())?;
        Ok(self.predict_norm(&x)?.row(0).to_vec())
    }

    /// Quantile fans in normalized-label units, one row per input row.
    pub fn predict_norm(&self, x_norm: &Matrix) -> Result<Matrix> {
        if x_norm.cols() != self.f0.input_dim() {
            return Err(EmqError::Dimension(format!(
                "input has {} columns, model expects {}",
                x_norm.cols(),
                self.f0.input_dim()
            )));
        }
        let z_grid = self.grid.normal_quantiles();
        let head = self.f0.forward(x_norm)?;
        let mut fans = Matrix::zeros(x_norm.rows(), self.grid.len());
        for i in 0..x_norm.rows() {
            let mu = head.at(i, 0);
            let sigma = head.at(i, 1) + SIGMA_FLOOR;
            let fan = gaussian_head_quantiles(mu, sigma, &z_grid)?;
            fans.row_mut(i).copy_from_slice(&fan);
        }
        for learner in &self.weak_learners {
            let coeffs = learner.forward(x_norm)?;
            for i in 0..x_norm.rows() {
                let a = [
                    coeffs.at(i, 0),
                    coeffs.at(i, 1),
                    coeffs.at(i, 2),
                    coeffs.at(i, 3),
                ];
                let lambdas = lambda_head(&a, &self.grid);
                let updated =
                    g_transform_unchecked(fans.row(i), &lambdas, self.step_config.boundary_b);
                fans.row_mut(i).copy_from_slice(&updated);
            }
        }
        Ok(fans)
    }

    /// Quantile fans in original label units for raw feature rows; features
    /// are normalized with the stored stats, labels denormalized back.
    pub fn predict_quantiles(&self, x_raw: &Matrix) -> Result<Matrix> {
        let x_norm = self.norm.normalize_features(x_raw)?;
        let mut fans = self.predict_norm(&x_norm)?;
        for v in fans.data_mut() {
            *v = self.norm.denormalize_label(*v);
        }
        Ok(fans)
    }

    /// Gaussian-head fans only (the t = 0 predictions), normalized units.
    pub fn predict_initial_norm(&self, x_norm: &Matrix) -> Result<Matrix> {
        let z_grid = self.grid.normal_quantiles();
        let head = self.f0.forward(x_norm)?;
        let mut fans = Matrix::zeros(x_norm.rows(), self.grid.len());
        for i in 0..x_norm.rows() {
            let fan =
                gaussian_head_quantiles(head.at(i, 0), head.at(i, 1) + SIGMA_FLOOR, &z_grid)?;
            fans.row_mut(i).copy_from_slice(&fan);
        }
        Ok(fans)
    }
}

fn f0_layer_sizes(d: usize) -> Vec<usize> {
    let mut sizes = vec![d];
    sizes.extend(F0_HIDDEN_MULTIPLIERS.iter().map(|m| m * d));
    sizes.push(2);
    sizes
}

fn derive_seed(master: u64, salt: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .rotate_left(17)
}

/// Train the initial learner F₀: hidden [8,16,4]·d with tanh, linear μ and
/// softplus σ outputs, multi-quantile loss routed through the Gaussian head.
pub fn fit_initial(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    grid: &QuantileGrid,
    weights: Option<&LossWeights>,
    cfg: &TrainConfig,
) -> Result<(Mlp, FitReport)> {
    let d = train_x.cols();
    let mut mlp = Mlp::init(
        &f0_layer_sizes(d),
        Activation::Tanh,
        vec![false, true],
        derive_seed(cfg.seed, 0),
    )?;
    let w = weights.map(|w| w.values());
    let loss = GaussianHeadLoss::new(grid, w);
    let net_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 1),
        ..cfg.clone()
    };
    let report = train_with_early_stopping(
        &mut mlp, train_x, train_y, val_x, val_y, &loss, &loss, &net_cfg,
    )?;
    Ok((mlp, report))
}

/// Train one weak learner Fₜ against cached Q^{t-1} fans. The cache rows
/// are constants; gradients flow only through λ head and g.
#[allow(clippy::too_many_arguments)]
pub fn fit_ensemble_step(
    train_x: &Matrix,
    train_y: &[f64],
    train_fans: &Matrix,
    val_x: &Matrix,
    val_y: &[f64],
    val_fans: &Matrix,
    grid: &QuantileGrid,
    weights: Option<&LossWeights>,
    step_cfg: &EnsembleStepConfig,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Mlp, FitReport)> {
    step_cfg.validate()?;
    let d = train_x.cols();
    let mut sizes = vec![d];
    sizes.extend_from_slice(&step_cfg.weak_hidden_sizes);
    sizes.push(4);
    let mut mlp = Mlp::init(
        &sizes,
        Activation::Tanh,
        vec![false; 4],
        derive_seed(cfg.seed, 100 + step as u64),
    )?;
    let w = weights.map(|w| w.values());
    let train_loss = EnsembleStepLoss::new(grid, train_fans, step_cfg.boundary_b, w)?;
    let val_loss = EnsembleStepLoss::new(grid, val_fans, step_cfg.boundary_b, w)?;
    let net_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 200 + step as u64),
        ..cfg.clone()
    };
    let report = train_with_early_stopping(
        &mut mlp, train_x, train_y, val_x, val_y, &train_loss, &val_loss, &net_cfg,
    )?;
    Ok((mlp, report))
}

/// Adaptive stop rule evaluated on the error history e_0..e_t
/// (t = history length - 1): at t >= t1, stop iff the mean of the most
/// recent t2 errors strictly exceeds the mean of the preceding t1 - t2.
/// Returns Some(t) (the stop step t') when the rule fires.
pub fn adaptive_stop_check(e_history: &[f64], t1: usize, t2: usize) -> Result<Option<usize>> {
    if t2 < 1 || t1 <= t2 {
        return Err(EmqError::Config(format!(
            "adaptive stop needs t1 > t2 >= 1, got t1={t1} t2={t2}"
        )));
    }
    if e_history.is_empty() {
        return Ok(None);
    }
    let t = e_history.len() - 1;
    if t < t1 {
        return Ok(None);
    }
    let recent = &e_history[t - t2 + 1..=t];
    let older = &e_history[t - t1 + 1..=t - t2];
    let recent_mean = recent.iter().sum::<f64>() / recent.len() as f64;
    let older_mean = older.iter().sum::<f64>() / older.len() as f64;
    if recent_mean > older_mean {
        Ok(Some(t))
    } else {
        Ok(None)
    }
}

/// Everything produced by one EMQ training run.
#[derive(Debug, Clone)]
pub struct EmqFit {
    pub model: EmqModel,
    /// Validation ECE per step, e_0..e_{t'}.
    pub e_trace: Vec<f64>,
    /// The step at which the rule fired (= last explored step otherwise).
    pub stop_step: usize,
}

pub fn update_fans(
    fans: &mut Matrix,
    learner: &Mlp,
    x: &Matrix,
    grid: &QuantileGrid,
    boundary_b: f64,
) -> Result<()> {
    let coeffs = learner.forward(x)?;
    for i in 0..x.rows() {
        let a = [
            coeffs.at(i, 0),
            coeffs.at(i, 1),
            coeffs.at(i, 2),
            coeffs.at(i, 3),
        ];
        let lambdas = lambda_head(&a, grid);
        let updated = g_transform_unchecked(fans.row(i), &lambdas, boundary_b);
        if updated.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(EmqError::Numeric(
                "ensemble step produced a non-increasing fan".into(),
            ));
        }
        fans.row_mut(i).copy_from_slice(&updated);
    }
    Ok(())
}

/// Full training loop: fit F₀, run ensemble steps up to T_max or the
/// adaptive stop, then keep exactly T_ada = argmin_{t <= t'} e_t weak
/// learners (ties break toward the smallest t).
#[allow(clippy::too_many_arguments)]
pub fn fit_emq(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    grid: &QuantileGrid,
    train_cfg: &TrainConfig,
    step_cfg: &EnsembleStepConfig,
    adaptive_cfg: &AdaptiveTConfig,
    variant: EmqVariant,
    norm: NormStats,
) -> Result<EmqFit> {
    if train_y.is_empty() || val_y.is_empty() {
        return Err(EmqError::Data("empty training or validation set".into()));
    }
    train_cfg.validate()?;
    step_cfg.validate()?;
    adaptive_cfg.validate()?;

    let weights = match variant {
        EmqVariant::Emqw => Some(emqw_weights(grid)),
        _ => None,
    };
    let t_max = match variant {
        EmqVariant::Emq0 => 0,
        _ => adaptive_cfg.t_max,
    };

    let (f0, _) = fit_initial(train_x, train_y, val_x, val_y, grid, weights.as_ref(), train_cfg)?;

    let mut model = EmqModel {
        grid: grid.clone(),
        f0,
        weak_learners: Vec::new(),
        step_config: step_cfg.clone(),
        variant,
        norm,
    };

    // Q^0 fans cached per row; each step rewrites them in place.
    let mut train_fans = model.predict_initial_norm(train_x)?;
    let mut val_fans = model.predict_initial_norm(val_x)?;

    // The adaptive-T metric is unweighted for every variant.
    let eval_metric = |fans: &Matrix| -> Result<f64> {
        match adaptive_cfg.metric {
            AdaptiveMetric::EceGrid => ece(fans, val_y, grid),
            AdaptiveMetric::Eice => eice(fans, val_y, grid),
        }
    };
    let mut e_trace = vec![eval_metric(&val_fans)?];
    let mut stop_step = 0usize;

    for step in 1..=t_max {
        let (learner, _) = fit_ensemble_step(
            train_x,
            train_y,
            &train_fans,
            val_x,
            val_y,
            &val_fans,
            grid,
            weights.as_ref(),
            step_cfg,
            train_cfg,
            step,
        )?;
        update_fans(&mut train_fans, &learner, train_x, grid, step_cfg.boundary_b)?;
        update_fans(&mut val_fans, &learner, val_x, grid, step_cfg.boundary_b)?;
        model.weak_learners.push(learner);
        e_trace.push(eval_metric(&val_fans)?);
        stop_step = step;
        if adaptive_stop_check(&e_trace, adaptive_cfg.t1, adaptive_cfg.t2)?.is_some() {
            break;
        }
    }

    // T_ada = argmin over explored steps, smallest index on ties.
    let t_ada = e_trace
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    model.weak_learners.truncate(t_ada);

    // Post-fit boundary sanity: B must dominate every training quantile.
    let max_q = train_fans
        .data()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if max_q >= step_cfg.boundary_b {
        log::warn!(
            "boundary B = {} does not exceed the largest training quantile magnitude {max_q}",
            step_cfg.boundary_b
        );
    }

    Ok(EmqFit {
        model,
        e_trace,
        stop_step,
    })
}

//! Quantile-regression baselines sharing the nn engine: Vanilla QR, QRW,
//! and Interval Score. Each is a single MLP emitting all K quantiles
//! directly, with no monotonicity guarantee (crossing is possible and is
//! part of what the metrics expose).

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::model::emq::F0_HIDDEN_MULTIPLIERS;
use crate::model::loss::{DirectQuantileLoss, IntervalScoreLoss};
use crate::nn::{train_with_early_stopping, Activation, BatchLoss, FitReport, Mlp, TrainConfig};
use crate::quant::{emqw_weights, LossWeights, QuantileGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineLoss {
    Vanilla,
    Weighted,
    IntervalScore,
}

impl BaselineLoss {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineLoss::Vanilla => "vanilla",
            BaselineLoss::Weighted => "weighted",
            BaselineLoss::IntervalScore => "interval-score",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DirectQuantileModel {
    pub mlp: Mlp,
    pub grid: QuantileGrid,
    pub loss_tag: BaselineLoss,
    pub norm: NormStats,
}

impl DirectQuantileModel {
    /// Raw network outputs in normalized-label units; rows may cross.
    pub fn predict_norm(&self, x_norm: &Matrix) -> Result<Matrix> {
        self.mlp.forward(x_norm)
    }

    /// Quantile fans in original label units for raw feature rows.
    /// `resort` optionally sorts each row (ablation only; default is to
    /// report crossing fans as-is).
    pub fn predict_quantiles(&self, x_raw: &Matrix, resort: bool) -> Result<Matrix> {
        let x_norm = self.norm.normalize_features(x_raw)?;
        let mut fans = self.predict_norm(&x_norm)?;
        if resort {
            for i in 0..fans.rows() {
                fans.row_mut(i)
                    .sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
        }
        for v in fans.data_mut() {
            *v = self.norm.denormalize_label(*v);
        }
        Ok(fans)
    }
}

fn baseline_layer_sizes(d: usize, k: usize) -> Vec<usize> {
    let mut sizes = vec![d];
    sizes.extend(F0_HIDDEN_MULTIPLIERS.iter().map(|m| m * d));
    sizes.push(k);
    sizes
}

fn fit_direct(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    grid: &QuantileGrid,
    loss: &dyn BatchLoss,
    loss_tag: BaselineLoss,
    cfg: &TrainConfig,
    norm: NormStats,
) -> Result<(DirectQuantileModel, FitReport)> {
    let mut mlp = Mlp::init(
        &baseline_layer_sizes(train_x.cols(), grid.len()),
        Activation::Relu,
        vec![false; grid.len()],
        cfg.seed,
    )?;
    let report =
        train_with_early_stopping(&mut mlp, train_x, train_y, val_x, val_y, loss, loss, cfg)?;
    Ok((
        DirectQuantileModel {
            mlp,
            grid: grid.clone(),
            loss_tag,
            norm,
        },
        report,
    ))
}

/// Vanilla QR: unweighted multi-quantile loss on K direct outputs.
pub fn fit_vanilla_qr(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    grid: &QuantileGrid,
    cfg: &TrainConfig,
    norm: NormStats,
) -> Result<(DirectQuantileModel, FitReport)> {
    let loss = DirectQuantileLoss::new(grid, None);
    fit_direct(
        train_x,
        train_y,
        val_x,
        val_y,
        grid,
        &loss,
        BaselineLoss::Vanilla,
        cfg,
        norm,
    )
}

/// QRW: Vanilla QR with the EMQW weights. `weights_override` exists for the
/// identity-weights construction test; production callers pass None.
#[allow(clippy::too_many_arguments)]
pub fn fit_qrw(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    grid: &QuantileGrid,
    cfg: &TrainConfig,
    norm: NormStats,
    weights_override: Option<&LossWeights>,
) -> Result<(DirectQuantileModel, FitReport)> {
    let default_w;
    let w = match weights_override {
        Some(w) => w,
        None => {
            default_w = emqw_weights(grid);
            &default_w
        }
    };
    let loss = DirectQuantileLoss::new(grid, Some(w.values()));
    fit_direct(
        train_x,
        train_y,
        val_x,
        val_y,
        grid,
        &loss,
        BaselineLoss::Weighted,
        cfg,
        norm,
    )
}

/// Interval Score baseline: trained with the centered-pair interval score
/// plus the median pinball term; requires a symmetric odd-K grid.
pub fn fit_interval_score_model(
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    grid: &QuantileGrid,
    cfg: &TrainConfig,
    norm: NormStats,
) -> Result<(DirectQuantileModel, FitReport)> {
    if !grid.is_symmetric() || grid.median_index().is_none() {
        return Err(EmqError::Config(
            "interval-score training requires a symmetric grid with a median level".into(),
        ));
    }
    let loss = IntervalScoreLoss::new(grid)?;
    fit_direct(
        train_x,
        train_y,
        val_x,
        val_y,
        grid,
        &loss,
        BaselineLoss::IntervalScore,
        cfg,
        norm,
    )
}

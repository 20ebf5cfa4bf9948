//! Mini-batch training with validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::nn::adam::AdamState;
use crate::nn::mlp::Mlp;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; must be >= 1.
    pub patience: usize,
    /// Fraction of the training set carved out as validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 0.01,
            max_epochs: 1000,
            patience: 20,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(EmqError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EmqError::Config("learning_rate must be > 0".into()));
        }
        if self.patience < 1 {
            return Err(EmqError::Config("patience must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(EmqError::Config("val_fraction must lie in (0,1)".into()));
        }
        if self.max_epochs < 1 {
            return Err(EmqError::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// A differentiable batch loss on network outputs.
///
/// `rows` are the indices of the batch rows within the originating set, so
/// that losses with per-row cached context (the ensemble-step loss) can look
/// it up. When `grad` is given it must be filled with d(loss)/d(outputs),
/// including any 1/batch normalization.
pub trait BatchLoss {
    fn loss(
        &self,
        outputs: &Matrix,
        labels: &[f64],
        rows: &[usize],
        grad: Option<&mut Matrix>,
    ) -> Result<f64>;
}

/// Plain mean-squared error on a single output; used in engine-level tests.
pub struct MseLoss;

impl BatchLoss for MseLoss {
    fn loss(
        &self,
        outputs: &Matrix,
        labels: &[f64],
        _rows: &[usize],
        grad: Option<&mut Matrix>,
    ) -> Result<f64> {
        let n = outputs.rows();
        let mut total = 0.0;
        for i in 0..n {
            let d = outputs.at(i, 0) - labels[i];
            total += d * d;
        }
        if let Some(g) = grad {
            g.fill(0.0);
            for i in 0..n {
                *g.at_mut(i, 0) = 2.0 * (outputs.at(i, 0) - labels[i]) / n as f64;
            }
        }
        Ok(total / n as f64)
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub val_loss_trace: Vec<f64>,
}

fn eval_loss(
    mlp: &Mlp,
    x: &Matrix,
    y: &[f64],
    loss: &dyn BatchLoss,
) -> Result<f64> {
    let out = mlp.forward(x)?;
    let rows: Vec<usize> = (0..x.rows()).collect();
    loss.loss(&out, y, &rows, None)
}

/// Train `mlp` with Adam, seeded per-epoch shuffling, and early stopping on
/// validation loss. The best-validation parameters are restored on return;
/// epoch 0 (the untouched initialization) is a candidate too, so the result
/// is never worse on validation than any state visited.
#[allow(clippy::too_many_arguments)]
pub fn train_with_early_stopping(
    mlp: &mut Mlp,
    train_x: &Matrix,
    train_y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    train_loss: &dyn BatchLoss,
    val_loss: &dyn BatchLoss,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    if train_x.rows() == 0 || val_x.rows() == 0 {
        return Err(EmqError::Data("empty training or validation set".into()));
    }
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() {
        return Err(EmqError::Dimension(
            "feature/label row counts disagree".into(),
        ));
    }

    let mut adam = AdamState::new(mlp);
    let mut best_val = eval_loss(mlp, val_x, val_y, val_loss)?;
    let mut best_params = mlp.flat_params();
    let mut best_epoch = 0usize;
    let mut val_trace = vec![best_val];
    let mut since_best = 0usize;

    let n = train_x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs {
        // Shuffle reseeded per epoch from the master seed.
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            let bx = train_x.gather_rows(chunk);
            let by: Vec<f64> = chunk.iter().map(|&i| train_y[i]).collect();
            let (out, cache) = mlp.forward_cached(&bx)?;
            let mut grad = Matrix::zeros(out.rows(), out.cols());
            let loss = train_loss.loss(&out, &by, chunk, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(EmqError::Numeric(format!(
                    "non-finite training loss at epoch {epoch}; aborting"
                )));
            }
            let grads = mlp.backward(&cache, &grad)?;
            adam.step(mlp, &grads, cfg.learning_rate)?;
        }

        epochs_run = epoch;
        let vl = eval_loss(mlp, val_x, val_y, val_loss)?;
        if !vl.is_finite() {
            return Err(EmqError::Numeric(format!(
                "non-finite validation loss at epoch {epoch}; aborting"
            )));
        }
        val_trace.push(vl);
        if vl < best_val {
            best_val = vl;
            best_params = mlp.flat_params();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    mlp.set_flat_params(&best_params)?;
    Ok(FitReport {
        best_epoch,
        best_val_loss: best_val,
        epochs_run,
        val_loss_trace: val_trace,
    })
}

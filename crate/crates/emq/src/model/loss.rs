//! Differentiable loss heads that route the multi-quantile loss through the
//! fixed transforms, so gradients reach the network outputs analytically.

use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::model::transform::{g_slope, LAMBDA_CAP};
use crate::nn::BatchLoss;
use crate::quant::{pinball_grad_q, pinball_loss, QuantileGrid};

pub(crate) const SIGMA_FLOOR: f64 = 1e-6;

/// Multi-quantile loss through the Gaussian head. Network outputs are
/// (μ, softplus(z_σ)); a small floor keeps σ away from zero on
/// near-deterministic targets.
pub struct GaussianHeadLoss<'a> {
    z_grid: Vec<f64>,
    taus: &'a [f64],
    weights: Option<&'a [f64]>,
}

impl<'a> GaussianHeadLoss<'a> {
    pub fn new(grid: &'a QuantileGrid, weights: Option<&'a [f64]>) -> Self {
        GaussianHeadLoss {
            z_grid: grid.normal_quantiles(),
            taus: grid.levels(),
            weights,
        }
    }
}

impl BatchLoss for GaussianHeadLoss<'_> {
    fn loss(
        &self,
        outputs: &Matrix,
        labels: &[f64],
        _rows: &[usize],
        mut grad: Option<&mut Matrix>,
    ) -> Result<f64> {
        if outputs.cols() != 2 {
            return Err(EmqError::Dimension(
                "gaussian head expects 2 network outputs".into(),
            ));
        }
        let n = outputs.rows();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let mu = outputs.at(i, 0);
            let sigma = outputs.at(i, 1) + SIGMA_FLOOR;
            let y = labels[i];
            let (mut dmu, mut dsp) = (0.0, 0.0);
            for k in 0..self.taus.len() {
                let q = mu + sigma * self.z_grid[k];
                let w = self.weights.map_or(1.0, |w| w[k]);
                total += w * pinball_loss(y, q, self.taus[k]);
                if grad.is_some() {
                    let dq = w * pinball_grad_q(y, q, self.taus[k]) * inv_n;
                    dmu += dq;
                    dsp += dq * self.z_grid[k];
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                *g.at_mut(i, 0) = dmu;
                *g.at_mut(i, 1) = dsp;
            }
        }
        Ok(total * inv_n)
    }
}

/// Multi-quantile loss for one ensemble step: network outputs a₀..a₃ feed
/// the tanh-cubic λ head, then the piecewise-linear g update of the cached
/// Q^{t-1} fan. The cached fans are constants (stage-wise boosting).
pub struct EnsembleStepLoss<'a> {
    taus: &'a [f64],
    /// Cached Q^{t-1} fans for every row of the originating set.
    fans: &'a Matrix,
    boundary_b: f64,
    weights: Option<&'a [f64]>,
}

impl<'a> EnsembleStepLoss<'a> {
    pub fn new(
        grid: &'a QuantileGrid,
        fans: &'a Matrix,
        boundary_b: f64,
        weights: Option<&'a [f64]>,
    ) -> Result<Self> {
        if fans.cols() != grid.len() {
            return Err(EmqError::Dimension(
                "fan cache width does not match grid".into(),
            ));
        }
        Ok(EnsembleStepLoss {
            taus: grid.levels(),
            fans,
            boundary_b,
            weights,
        })
    }
}

impl BatchLoss for EnsembleStepLoss<'_> {
    fn loss(
        &self,
        outputs: &Matrix,
        labels: &[f64],
        rows: &[usize],
        mut grad: Option<&mut Matrix>,
    ) -> Result<f64> {
        if outputs.cols() != 4 {
            return Err(EmqError::Dimension(
                "ensemble step expects 4 network outputs (a0..a3)".into(),
            ));
        }
        if rows.len() != outputs.rows() {
            return Err(EmqError::Dimension(
                "row index list does not match batch".into(),
            ));
        }
        let n = outputs.rows();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        for (i, &row) in rows.iter().enumerate() {
            if row >= self.fans.rows() {
                return Err(EmqError::State(format!(
                    "row {row} outside the cached fan table"
                )));
            }
            let a = [
                outputs.at(i, 0),
                outputs.at(i, 1),
                outputs.at(i, 2),
                outputs.at(i, 3),
            ];
            let prev = self.fans.row(row);
            let y = labels[i];
            let mut da = [0.0; 4];
            for (k, &tau) in self.taus.iter().enumerate() {
                let p = a[0] + tau * (a[1] + tau * (a[2] + tau * a[3]));
                let lambda = p.tanh().clamp(-LAMBDA_CAP, LAMBDA_CAP);
                let slope = g_slope(prev, k, lambda, self.boundary_b);
                let q = prev[k] + slope * lambda;
                let w = self.weights.map_or(1.0, |w| w[k]);
                total += w * pinball_loss(y, q, tau);
                if grad.is_some() {
                    // dq/dp = slope · (1 - λ²); slope is piecewise constant.
                    let dq = w * pinball_grad_q(y, q, tau) * inv_n;
                    let dp = dq * slope * (1.0 - lambda * lambda);
                    let mut t_pow = 1.0;
                    for d in da.iter_mut() {
                        *d += dp * t_pow;
                        t_pow *= tau;
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (c, &d) in da.iter().enumerate() {
                    *g.at_mut(i, c) = d;
                }
            }
        }
        Ok(total * inv_n)
    }
}

/// Unweighted or weighted multi-quantile loss on direct K-output networks
/// (Vanilla QR / QRW baselines).
pub struct DirectQuantileLoss<'a> {
    taus: &'a [f64],
    weights: Option<&'a [f64]>,
}

impl<'a> DirectQuantileLoss<'a> {
    pub fn new(grid: &'a QuantileGrid, weights: Option<&'a [f64]>) -> Self {
        DirectQuantileLoss {
            taus: grid.levels(),
            weights,
        }
    }
}

impl BatchLoss for DirectQuantileLoss<'_> {
    fn loss(
        &self,
        outputs: &Matrix,
        labels: &[f64],
        _rows: &[usize],
        mut grad: Option<&mut Matrix>,
    ) -> Result<f64> {
        if outputs.cols() != self.taus.len() {
            return Err(EmqError::Dimension(
                "network output width does not match grid".into(),
            ));
        }
        let n = outputs.rows();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let y = labels[i];
            for (k, &tau) in self.taus.iter().enumerate() {
                let q = outputs.at(i, k);
                let w = self.weights.map_or(1.0, |w| w[k]);
                total += w * pinball_loss(y, q, tau);
                if let Some(g) = grad.as_deref_mut() {
                    *g.at_mut(i, k) = w * pinball_grad_q(y, q, tau) * inv_n;
                }
            }
        }
        Ok(total * inv_n)
    }
}

/// Interval-score training loss over the centered pairs of a symmetric
/// odd-K grid, plus the pinball loss at the median output so every output
/// receives gradient.
pub struct IntervalScoreLoss {
    taus: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    median: usize,
}

impl IntervalScoreLoss {
    pub fn new(grid: &QuantileGrid) -> Result<Self> {
        let pairs = grid.centered_pairs()?;
        let median = grid.median_index().ok_or_else(|| {
            EmqError::Config("interval-score training needs an odd symmetric grid".into())
        })?;
        Ok(IntervalScoreLoss {
            taus: grid.levels().to_vec(),
            pairs,
            median,
        })
    }
}

impl BatchLoss for IntervalScoreLoss {
    fn loss(
        &self,
        outputs: &Matrix,
        labels: &[f64],
        _rows: &[usize],
        mut grad: Option<&mut Matrix>,
    ) -> Result<f64> {
        if outputs.cols() != self.taus.len() {
            return Err(EmqError::Dimension(
                "network output width does not match grid".into(),
            ));
        }
        let n = outputs.rows();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let inv_n = 1.0 / n as f64;
        let inv_pairs = 1.0 / self.pairs.len() as f64;
        let mut total = 0.0;
        for i in 0..n {
            let y = labels[i];
            for &(lo, hi) in &self.pairs {
                let l = outputs.at(i, lo);
                let u = outputs.at(i, hi);
                // Pair (τ_k, τ_{100-k}) is the (1 - 2τ_k) interval, so the
                // interval-score τ is 2τ_k.
                let tau_pair = 2.0 * self.taus[lo];
                let mut s = u - l;
                let (mut dl, mut du) = (-1.0, 1.0);
                if y < l {
                    s += 2.0 / tau_pair * (l - y);
                    dl += 2.0 / tau_pair;
                }
                if y > u {
                    s += 2.0 / tau_pair * (y - u);
                    du -= 2.0 / tau_pair;
                }
                total += s * inv_pairs;
                if let Some(g) = grad.as_deref_mut() {
                    *g.at_mut(i, lo) += dl * inv_pairs * inv_n;
                    *g.at_mut(i, hi) += du * inv_pairs * inv_n;
                }
            }
            let qm = outputs.at(i, self.median);
            let tau_m = self.taus[self.median];
            total += pinball_loss(y, qm, tau_m);
            if let Some(g) = grad.as_deref_mut() {
                *g.at_mut(i, self.median) += pinball_grad_q(y, qm, tau_m) * inv_n;
            }
        }
        Ok(total * inv_n)
    }
}

//! Calibration and sharpness metrics over predicted quantile fans.

use serde::{Deserialize, Serialize};

use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::quant::QuantileGrid;

fn check_shapes(q: &Matrix, y: &[f64], grid: &QuantileGrid) -> Result<()> {
    if q.cols() != grid.len() {
        return Err(EmqError::Dimension(format!(
            "fan matrix has {} columns, grid has {} levels",
            q.cols(),
            grid.len()
        )));
    }
    if q.rows() != y.len() {
        return Err(EmqError::Dimension(format!(
            "fan matrix has {} rows, {} labels given",
            q.rows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(EmqError::Data("metrics need at least one sample".into()));
    }
    Ok(())
}

/// Empirical coverage of the centered interval (lo, hi); strict
/// inequalities, ties count as non-covered.
fn pair_coverage(q: &Matrix, y: &[f64], lo: usize, hi: usize) -> f64 {
    let n = y.len();
    let covered = (0..n)
        .filter(|&i| q.at(i, lo) < y[i] && y[i] < q.at(i, hi))
        .count();
    covered as f64 / n as f64
}

/// Expected interval calibration error: mean over centered pairs of
/// |(1 - 2τ_k) - empirical coverage|.
pub fn eice(q: &Matrix, y: &[f64], grid: &QuantileGrid) -> Result<f64> {
    check_shapes(q, y, grid)?;
    let pairs = grid.centered_pairs()?;
    if pairs.is_empty() {
        return Err(EmqError::Config("grid has no centered pairs".into()));
    }
    let taus = grid.levels();
    let total: f64 = pairs
        .iter()
        .map(|&(lo, hi)| {
            let nominal = 1.0 - 2.0 * taus[lo];
            (nominal - pair_coverage(q, y, lo, hi)).abs()
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Expected interval sharpness: mean over centered pairs of the mean
/// absolute interval width.
pub fn eis(q: &Matrix, grid: &QuantileGrid) -> Result<f64> {
    if q.cols() != grid.len() {
        return Err(EmqError::Dimension(
            "fan matrix column count does not match grid".into(),
        ));
    }
    if q.rows() == 0 {
        return Err(EmqError::Data("metrics need at least one sample".into()));
    }
    let pairs = grid.centered_pairs()?;
    if pairs.is_empty() {
        return Err(EmqError::Config("grid has no centered pairs".into()));
    }
    let n = q.rows();
    let total: f64 = pairs
        .iter()
        .map(|&(lo, hi)| {
            (0..n).map(|i| (q.at(i, hi) - q.at(i, lo)).abs()).sum::<f64>() / n as f64
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

pub const DEFAULT_TAIL_LEVELS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

/// Tail interval calibration error over the given tail levels (default
/// {0.05, 0.10, 0.15, 0.20}).
pub fn tice(q: &Matrix, y: &[f64], grid: &QuantileGrid, tail_levels: &[f64]) -> Result<f64> {
    check_shapes(q, y, grid)?;
    let taus = grid.levels();
    let mut total = 0.0;
    for &tau in tail_levels {
        let lo = taus
            .iter()
            .position(|&t| (t - tau).abs() < 1e-9)
            .ok_or_else(|| {
                EmqError::Config(format!("tail level {tau} not present in the grid"))
            })?;
        let hi = taus
            .iter()
            .position(|&t| (t - (1.0 - tau)).abs() < 1e-9)
            .ok_or_else(|| {
                EmqError::Config(format!("tail level {} not present in the grid", 1.0 - tau))
            })?;
        let nominal = 1.0 - 2.0 * tau;
        total += (nominal - pair_coverage(q, y, lo, hi)).abs();
    }
    Ok(total / tail_levels.len() as f64)
}

/// Per-level empirical frequency of y_i <= q_{τ_k}(x_i).
pub fn calibration_curve(q: &Matrix, y: &[f64], grid: &QuantileGrid) -> Result<Vec<f64>> {
    check_shapes(q, y, grid)?;
    let n = y.len();
    Ok((0..grid.len())
        .map(|k| {
            (0..n).filter(|&i| y[i] <= q.at(i, k)).count() as f64 / n as f64
        })
        .collect())
}

/// The expected calibration error consumed by the adaptive-T rule:
/// mean over levels of |τ_k - calibration_curve_k|.
pub fn ece(q: &Matrix, y: &[f64], grid: &QuantileGrid) -> Result<f64> {
    let curve = calibration_curve(q, y, grid)?;
    let taus = grid.levels();
    Ok(curve
        .iter()
        .zip(taus)
        .map(|(c, t)| (t - c).abs())
        .sum::<f64>()
        / taus.len() as f64)
}

/// One implied-density cell between consecutive quantiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityCell {
    pub midpoint: f64,
    pub density: f64,
    /// False when the cell is degenerate (equal quantiles, infinite density).
    pub finite: bool,
}

/// Finite-difference density implied by a quantile fan:
/// (τ_{k+1} - τ_k) / (q_{k+1} - q_k) at the cell midpoint. Crossing fans
/// yield negative densities, reported verbatim; the second return value is
/// false when any cell is non-positive or non-finite.
pub fn implied_density(fan: &[f64], grid: &QuantileGrid) -> Result<(Vec<DensityCell>, bool)> {
    if fan.len() != grid.len() {
        return Err(EmqError::Dimension(
            "fan length does not match grid".into(),
        ));
    }
    if fan.len() < 2 {
        return Err(EmqError::Config("implied density needs K >= 2".into()));
    }
    let taus = grid.levels();
    let mut cells = Vec::with_capacity(fan.len() - 1);
    let mut valid = true;
    for k in 0..fan.len() - 1 {
        let dq = fan[k + 1] - fan[k];
        let dt = taus[k + 1] - taus[k];
        let (density, finite) = if dq == 0.0 {
            (f64::INFINITY, false)
        } else {
            (dt / dq, true)
        };
        if !finite || density <= 0.0 {
            valid = false;
        }
        cells.push(DensityCell {
            midpoint: 0.5 * (fan[k] + fan[k + 1]),
            density,
            finite,
        });
    }
    Ok((cells, valid))
}

/// Full evaluation report for one (model, split) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub eice: f64,
    pub eis: f64,
    pub tice: f64,
    pub eice_x100: f64,
    pub eis_x100: f64,
    pub tice_x100: f64,
    pub per_pair_nominal: Vec<f64>,
    pub per_pair_coverage: Vec<f64>,
    pub per_pair_width: Vec<f64>,
    pub per_level_calibration: Vec<f64>,
    pub dataset: String,
    pub model_id: String,
    pub seed: u64,
    pub split: String,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn compute(
        q: &Matrix,
        y: &[f64],
        grid: &QuantileGrid,
        dataset: String,
        model_id: String,
        seed: u64,
        split: String,
    ) -> Result<EvalReport> {
        let pairs = grid.centered_pairs()?;
        let taus = grid.levels();
        let n = y.len();
        let per_pair_nominal: Vec<f64> = pairs.iter().map(|&(lo, _)| 1.0 - 2.0 * taus[lo]).collect();
        let per_pair_coverage: Vec<f64> = pairs
            .iter()
            .map(|&(lo, hi)| pair_coverage(q, y, lo, hi))
            .collect();
        let per_pair_width: Vec<f64> = pairs
            .iter()
            .map(|&(lo, hi)| {
                (0..n).map(|i| (q.at(i, hi) - q.at(i, lo)).abs()).sum::<f64>() / n as f64
            })
            .collect();
        let eice_v = eice(q, y, grid)?;
        let eis_v = eis(q, grid)?;
        let tice_v = tice(q, y, grid, &DEFAULT_TAIL_LEVELS)?;
        Ok(EvalReport {
            eice: eice_v,
            eis: eis_v,
            tice: tice_v,
            eice_x100: eice_v * 100.0,
            eis_x100: eis_v * 100.0,
            tice_x100: tice_v * 100.0,
            per_pair_nominal,
            per_pair_coverage,
            per_pair_width,
            per_level_calibration: calibration_curve(q, y, grid)?,
            dataset,
            model_id,
            seed,
            split,
            n_samples: n,
        })
    }

    /// One-row CSV (header + row) suitable for aggregation.
    pub fn to_csv(&self) -> String {
        format!(
            "dataset,model_id,seed,split,n_samples,eice,eis,tice,eice_x100,eis_x100,tice_x100\n{},{},{},{},{},{},{},{},{},{},{}\n",
            self.dataset,
            self.model_id,
            self.seed,
            self.split,
            self.n_samples,
            self.eice,
            self.eis,
            self.tice,
            self.eice_x100,
            self.eis_x100,
            self.tice_x100
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::normal_quantile;

    fn single_point_fan(values: Vec<f64>) -> Matrix {
        Matrix::from_vec(1, values.len(), values).unwrap()
    }

    fn percent99_oracle_fan(mu: f64, sigma: f64) -> Vec<f64> {
        QuantileGrid::percent99()
            .levels()
            .iter()
            .map(|&t| mu + sigma * normal_quantile(t).unwrap())
            .collect()
    }

    #[test]
    fn eice_single_point_inside_all_intervals() {
        // Point inside all 49 intervals -> EICE = (1/49) Σ 2τ_k = 0.5.
        let grid = QuantileGrid::percent99();
        let fan = single_point_fan(percent99_oracle_fan(0.0, 1.0));
        let v = eice(&fan, &[0.0], &grid).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn eice_single_point_outside_all_intervals() {
        let grid = QuantileGrid::percent99();
        let fan = single_point_fan(percent99_oracle_fan(0.0, 1.0));
        let v = eice(&fan, &[100.0], &grid).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn eis_constant_widths() {
        // All pairs with width exactly c -> EIS = c.
        let grid = QuantileGrid::percent99();
        let c = 3.0;
        let fan: Vec<f64> = (0..99)
            .map(|k| {
                if k < 49 {
                    -c / 2.0 - (49 - k) as f64 * 1e-9
                } else if k == 49 {
                    0.0
                } else {
                    c / 2.0 + (k - 49) as f64 * 1e-9
                }
            })
            .collect();
        let v = eis(&single_point_fan(fan), &grid).unwrap();
        assert!((v - c).abs() < 1e-6, "{v}");
        // Degenerate fan -> 0.
        let v0 = eis(&single_point_fan(vec![1.0; 99]), &grid).unwrap();
        assert_eq!(v0, 0.0);
    }

    #[test]
    fn eis_standard_normal_oracle_fan() {
        // (1/49) Σ 2 Φ⁻¹(τ_{100-k}) ≈ 1.56819.
        let grid = QuantileGrid::percent99();
        let fan = single_point_fan(percent99_oracle_fan(0.0, 1.0));
        let v = eis(&fan, &grid).unwrap();
        let expected: f64 = (1..=49)
            .map(|k| 2.0 * normal_quantile(1.0 - k as f64 / 100.0).unwrap())
            .sum::<f64>()
            / 49.0;
        assert!((v - expected).abs() < 1e-10);
        assert!((v - 1.568_19).abs() < 2e-5, "{v}");
    }

    #[test]
    fn tice_hand_values() {
        let grid = QuantileGrid::percent99();
        let fan = single_point_fan(percent99_oracle_fan(0.0, 1.0));
        // Inside all four tail intervals -> mean of 2τ = 0.25.
        let v = tice(&fan, &[0.0], &grid, &DEFAULT_TAIL_LEVELS).unwrap();
        assert!((v - 0.25).abs() < 1e-12, "{v}");
        // Missing tail level -> configuration error.
        assert!(tice(&fan, &[0.0], &grid, &[0.055]).is_err());
    }

    #[test]
    fn calibration_curve_extremes() {
        let grid = QuantileGrid::new(vec![0.25, 0.75]).unwrap();
        let q = Matrix::from_vec(2, 2, vec![10.0, 20.0, 10.0, 20.0]).unwrap();
        let curve = calibration_curve(&q, &[0.0, 0.0], &grid).unwrap();
        assert_eq!(curve, vec![1.0, 1.0]);
        let curve2 = calibration_curve(&q, &[100.0, 100.0], &grid).unwrap();
        assert_eq!(curve2, vec![0.0, 0.0]);
    }

    #[test]
    fn metrics_permutation_invariant() {
        let grid = QuantileGrid::percent99();
        let base = percent99_oracle_fan(0.0, 1.0);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| base.iter().map(|&q| q + i as f64 * 0.3).collect())
            .collect();
        let y: Vec<f64> = (0..6).map(|i| i as f64 * 0.29).collect();
        let q = Matrix::from_rows(&rows).unwrap();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let qp = q.gather_rows(&perm);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        assert!((eice(&q, &y, &grid).unwrap() - eice(&qp, &yp, &grid).unwrap()).abs() < 1e-15);
        assert!((tice(&q, &y, &grid, &DEFAULT_TAIL_LEVELS).unwrap()
            - tice(&qp, &yp, &grid, &DEFAULT_TAIL_LEVELS).unwrap())
        .abs()
            < 1e-15);
    }

    #[test]
    fn implied_density_uniform_fan() {
        let grid = QuantileGrid::percent99();
        let fan: Vec<f64> = grid.levels().to_vec();
        let (cells, valid) = implied_density(&fan, &grid).unwrap();
        assert!(valid);
        for c in &cells {
            assert!((c.density - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn implied_density_normal_fan_near_zero() {
        let grid = QuantileGrid::percent99();
        let fan = percent99_oracle_fan(0.0, 1.0);
        let (cells, valid) = implied_density(&fan, &grid).unwrap();
        assert!(valid);
        let near0 = cells
            .iter()
            .min_by(|a, b| a.midpoint.abs().partial_cmp(&b.midpoint.abs()).unwrap())
            .unwrap();
        let phi0 = 0.398_942_280_401_432_7;
        assert!(
            ((near0.density - phi0) / phi0).abs() < 0.02,
            "{}",
            near0.density
        );
    }

    #[test]
    fn implied_density_telescoping_integral() {
        let grid = QuantileGrid::percent99();
        let fan = percent99_oracle_fan(0.7, 1.8);
        let (cells, valid) = implied_density(&fan, &grid).unwrap();
        assert!(valid);
        let integral: f64 = cells
            .iter()
            .zip(fan.windows(2))
            .map(|(c, w)| c.density * (w[1] - w[0]))
            .sum();
        assert!((integral - 0.98).abs() < 1e-12);
    }

    #[test]
    fn implied_density_flags_degenerate_cells() {
        let grid = QuantileGrid::new(vec![0.25, 0.5, 0.75]).unwrap();
        let (cells, valid) = implied_density(&[1.0, 1.0, 2.0], &grid).unwrap();
        assert!(!valid);
        assert!(!cells[0].finite);
        assert!(cells[1].finite);
    }
}

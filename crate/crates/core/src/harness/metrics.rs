//! Estimation quality metrics and per-cell summaries.

use crate::error::{Error, Result};
use crate::modem::FrameSpec;
use crate::numerics::{one_sided_bounds_95, CMat, C64};

/// `||H_est - H_true||^2 / ||H_true||^2`.
pub fn nmse(h_est: &CMat, h_true: &CMat) -> Result<f64> {
    if h_est.shape() != h_true.shape() {
        return Err(Error::dims(
            format!("{}x{}", h_true.rows(), h_true.cols()),
            format!("{}x{}", h_est.rows(), h_est.cols()),
        ));
    }
    let denom = h_true.fro_norm_sqr();
    if !(denom > 0.0) {
        return Err(Error::ZeroChannel);
    }
    Ok((h_est - h_true).fro_norm_sqr() / denom)
}

/// Fraction of data subcarriers whose decided symbol differs from the sent
/// one. Pilots are excluded.
pub fn symbol_error_rate(x_est: &[C64], x_true: &[C64], spec: &FrameSpec) -> Result<f64> {
    if x_est.len() != x_true.len() || x_true.len() != spec.n_car() {
        return Err(Error::dims(spec.n_car(), x_est.len()));
    }
    let data = spec.data_indices();
    if data.is_empty() {
        return Ok(0.0);
    }
    let wrong = data.iter().filter(|&&i| x_est[i] != x_true[i]).count();
    Ok(wrong as f64 / data.len() as f64)
}

/// One-sided 95% bounds `(lower, upper)` for the mean of the paired
/// differences `a_i - b_i`.
pub fn paired_bounds_95(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidConfig("paired comparison needs at least two frames".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(one_sided_bounds_95(&d))
}

//! Closed-form softmax saturation: how large a logit gap must become for
//! one key to absorb nearly all attention, and what update results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Above this gap the weights are evaluated in the log domain.
const LOG_DOMAIN_ABOVE: f64 = 30.0;

/// Softmax over `[M, 0, …, 0]` of length `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationPoint {
    pub m: f64,
    pub n: usize,
    pub a_star: f64,
    pub a_other: f64,
}

impl SaturationPoint {
    pub fn ratio(&self) -> f64 {
        self.a_star / self.a_other
    }
}

/// `A* = e^M/(e^M + n − 1)` and `A_other = 1/(e^M + n − 1)`.
pub fn saturation_weight(m: f64, n: usize) -> Result<SaturationPoint> {
    if n < 2 || !m.is_finite() {
        return Err(Error::Contract(format!("saturation needs n >= 2 and finite M, got n={n}, M={m}")));
    }
    let rest = (n - 1) as f64;
    let (a_star, a_other) = if m > LOG_DOMAIN_ABOVE {
        // log(e^M + n − 1) = M + log1p((n − 1)·e^−M)
        let lse = m + (rest * (-m).exp()).ln_1p();
        ((m - lse).exp(), (-lse).exp())
    } else {
        let e = m.exp();
        (e / (e + rest), 1.0 / (e + rest))
    };
    Ok(SaturationPoint { m, n, a_star, a_other })
}

/// `‖Σ_j w_j·V_j‖₂` for attention weights `w` over the rows of `V`.
pub fn zero_update_residual<T: Scalar>(weights: &[f64], v: &Tensor<T>) -> Result<f64> {
    if v.ndim() != 2 || v.rows() != weights.len() {
        return Err(Error::shape("zero_update_residual", &[weights.len()], v.shape()));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Contract("attention weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("attention weights sum to {total}, not 1")));
    }
    let mut acc = vec![0.0; v.last_dim()];
    for (r, &w) in weights.iter().enumerate() {
        for (a, x) in acc.iter_mut().zip(v.row(r)) {
            *a += w * x.as_f64();
        }
    }
    Ok(acc.iter().map(|a| a * a).sum::<f64>().sqrt())
}

/// Default gap grid `0, 1, …, 30`.
pub fn default_m_grid() -> Vec<f64> {
    (0..=30).map(f64::from).collect()
}

pub fn default_n_grid() -> Vec<usize> {
    vec![16, 256, 2048]
}

/// Every `(M, n)` pair, `M` outer.
pub fn dynamic_range_sweep(ms: &[f64], ns: &[usize]) -> Result<Vec<SaturationPoint>> {
    if ms.is_empty() || ns.is_empty() {
        return Err(Error::Contract("sweep grids must be nonempty".into()));
    }
    ms.iter()
        .flat_map(|&m| ns.iter().map(move |&n| saturation_weight(m, n)))
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "M,n,a_star,a_other,ratio";

pub fn sweep_csv(points: &[SaturationPoint]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{}", p.m, p.n, p.a_star, p.a_other, p.ratio());
    }
    s
}

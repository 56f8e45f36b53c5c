//! Long-run variance estimation.
//!
//! Two estimators are provided: the Bartlett-kernel Newey–West estimator used
//! for penalty loadings, and the non-overlapping block-sum estimator used for
//! score variances. Both center their input at the full-sample mean.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{config, Error, Result};

/// Relative floor applied to variance estimates before taking square roots.
pub const VARIANCE_FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HacOptions {
    /// Bartlett bandwidth `p_n`.
    pub bandwidth: usize,
}

impl HacOptions {
    /// `floor(4 (n/100)^{2/9})`.
    pub fn automatic(n: usize) -> Self {
        Self {
            bandwidth: default_bandwidth(n),
        }
    }

    pub fn resolve(bandwidth: Option<usize>, n: usize) -> Self {
        match bandwidth {
            Some(b) => Self { bandwidth: b },
            None => Self::automatic(n),
        }
    }
}

pub fn default_bandwidth(n: usize) -> usize {
    (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Non-overlapping blocks of `block_size` observations; the trailing
/// `n - block_size * block_count` observations are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockScheme {
    pub block_size: usize,
    pub block_count: usize,
}

impl BlockScheme {
    pub fn new(block_size: usize, n: usize) -> Result<Self> {
        if block_size == 0 || block_size > n {
            return config(format!("block size {block_size} must lie in 1..={n}"));
        }
        Ok(Self {
            block_size,
            block_count: n / block_size,
        })
    }

    /// Observations actually used, `b_n * l_n`.
    pub fn used(&self) -> usize {
        self.block_size * self.block_count
    }

    /// Block sums of `series` over the used observations.
    pub fn block_sums(&self, series: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..self.block_count)
            .map(|i| {
                let start = i * self.block_size;
                (start..start + self.block_size).map(&series).sum()
            })
            .collect()
    }
}

fn centered(series: &[f64]) -> Vec<f64> {
    let m = series.iter().sum::<f64>() / series.len() as f64;
    series.iter().map(|v| v - m).collect()
}

/// Newey–West long-run variance with Bartlett weights `1 - ℓ/(p_n + 1)`.
///
/// Autocovariances are taken about the sample mean with divisor `n`. The
/// result is not clipped; callers floor it.
pub fn newey_west_lvar(series: &[f64], opts: &HacOptions) -> Result<f64> {
    let n = series.len();
    if n == 0 {
        return config("empty series");
    }
    if opts.bandwidth >= n {
        return config(format!("bandwidth {} must be smaller than n = {n}", opts.bandwidth));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in long-run variance input".into()));
    }
    let u = centered(series);
    let nf = n as f64;
    let autocov = |lag: usize| -> f64 { (lag..n).map(|t| u[t] * u[t - lag]).sum::<f64>() / nf };
    let mut total = autocov(0);
    let denom = (opts.bandwidth + 1) as f64;
    for lag in 1..=opts.bandwidth {
        total += 2.0 * (1.0 - lag as f64 / denom) * autocov(lag);
    }
    Ok(total)
}

/// Clips at zero and applies `floor`, reporting whether the floor bound.
pub fn floor_variance(v: f64, floor: f64) -> (f64, bool) {
    let v = v.max(0.0);
    if v < floor {
        (floor, true)
    } else {
        (v, false)
    }
}

/// Floor derived from the largest unfloored estimate.
pub fn variance_floor(raw: impl IntoIterator<Item = f64>) -> f64 {
    let max = raw.into_iter().fold(0.0f64, |m, v| m.max(v));
    VARIANCE_FLOOR_REL * if max > 0.0 { max } else { 1.0 }
}

/// Penalty loadings `Ψ_jk`, one row per equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingMatrix {
    pub values: Vec<Vec<f64>>,
    pub floor_applied: Vec<Vec<bool>>,
    pub bandwidth: usize,
}

impl LoadingMatrix {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn any_floored(&self) -> bool {
        self.floor_applied.iter().flatten().any(|&f| f)
    }

    pub fn floored_count(&self) -> usize {
        self.floor_applied.iter().flatten().filter(|&&f| f).count()
    }
}

/// Unfloored Newey–West variances of `x_k * e` for every design column.
pub fn score_variances(x: &DMatrix<f64>, e: &[f64], opts: &HacOptions) -> Result<Vec<f64>> {
    if x.nrows() != e.len() {
        return config("residual length does not match the design");
    }
    let mut prod = vec![0.0; e.len()];
    (0..x.ncols())
        .map(|k| {
            for (t, p) in prod.iter_mut().enumerate() {
                *p = x[(t, k)] * e[t];
            }
            newey_west_lvar(&prod, opts)
        })
        .collect()
}

/// `Ψ_jk = sqrt(max(lvar(X_jk ε_j), floor))`, with the floor shared across
/// all `(j, k)`.
pub fn compute_loadings(data: &PanelDataset, residuals: &[Vec<f64>], opts: &HacOptions) -> Result<LoadingMatrix> {
    if residuals.len() != data.num_equations() {
        return config(format!(
            "{} residual series for {} equations",
            residuals.len(),
            data.num_equations()
        ));
    }
    let raw = (0..data.num_equations())
        .map(|j| score_variances(data.design(j).x(), &residuals[j], opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(floor_loadings(raw, opts.bandwidth))
}

/// Turns raw variances into loadings with a common floor.
pub fn floor_loadings(raw: Vec<Vec<f64>>, bandwidth: usize) -> LoadingMatrix {
    let floor = variance_floor(raw.iter().flatten().copied());
    let mut values = Vec::with_capacity(raw.len());
    let mut flags = Vec::with_capacity(raw.len());
    for row in raw {
        let (v, f): (Vec<f64>, Vec<bool>) = row
            .into_iter()
            .map(|v| {
                let (v, hit) = floor_variance(v, floor);
                (v.sqrt(), hit)
            })
            .unzip();
        values.push(v);
        flags.push(f);
    }
    LoadingMatrix {
        values,
        floor_applied: flags,
        bandwidth,
    }
}

/// Block-sum long-run covariance of the columns of `scores` (n × m):
/// `(1/(b_n l_n)) Σ_i s_i s_i'` with `s_i` the within-block sums of the
/// mean-centered series.
pub fn block_sum_lrcov(scores: &DMatrix<f64>, scheme: &BlockScheme) -> Result<DMatrix<f64>> {
    let (n, m) = scores.shape();
    if m == 0 {
        return config("no score components");
    }
    if scheme.block_size > n || scheme.used() > n {
        return config(format!("block size {} exceeds n = {n}", scheme.block_size));
    }
    let means: Vec<f64> = (0..m).map(|c| scores.column(c).mean()).collect();
    let sums = DMatrix::from_fn(scheme.block_count, m, |i, c| {
        let start = i * scheme.block_size;
        (start..start + scheme.block_size).map(|t| scores[(t, c)] - means[c]).sum::<f64>()
    });
    let mut cov = sums.tr_mul(&sums) / scheme.used() as f64;
    // Exact symmetry.
    for a in 0..m {
        for b in 0..a {
            let v = 0.5 * (cov[(a, b)] + cov[(b, a)]);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Floored scalar long-run variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Omega {
    pub value: f64,
    pub floored: bool,
}

/// Long-run variance `ω_jk` of one score series by block sums.
pub fn omega_jk(score: &[f64], scheme: &BlockScheme) -> Result<Omega> {
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite score".into()));
    }
    let m = DMatrix::from_column_slice(score.len(), 1, score);
    let raw = block_sum_lrcov(&m, scheme)?[(0, 0)];
    let (value, floored) = floor_variance(raw, variance_floor([raw]));
    Ok(Omega { value, floored })
}

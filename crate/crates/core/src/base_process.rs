//! Time-changed Wiener process `W_{phi(t)}`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time_change::TimeChangeKind;

const LN_2PI: f64 = 1.8378770664093453;

/// Strictly increasing, nonnegative observation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidInput("time grid is empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times[0] < 0.0 {
            return Err(Error::InvalidInput("grid times must be finite and >= 0".into()));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "grid not strictly increasing at index {}: {} -> {}",
                i + 1,
                times[i],
                times[i + 1]
            )));
        }
        Ok(Self { times })
    }

    /// `n` uniform points on `(0, t_max]`.
    pub fn uniform(n: usize, t_max: f64) -> Result<Self> {
        if n == 0 || !(t_max > 0.0) {
            return Err(Error::InvalidInput(format!("uniform grid needs n > 0 and t_max > 0, got {n}, {t_max}")));
        }
        Self::new((1..=n).map(|i| t_max * i as f64 / n as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

/// Conditional law of one increment: mean `W_{phi(t_{i-1})}`, variance
/// `phi(t_i) - phi(t_{i-1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussIncrementStats {
    pub mean: f64,
    pub variance: f64,
}

/// Increment variances `phi(t_i) - phi(t_{i-1})`, with `phi(t_0) = phi(0) = 0`
/// ahead of the first grid point.
pub fn increment_variances(kind: &TimeChangeKind, grid: &TimeGrid) -> Result<Vec<f64>> {
    let taus = kind.phi_many(grid.times())?;
    variances_from_taus(grid, &taus, false)
}

/// With `allow_origin`, a first grid point at `t = 0` gets variance 0
/// (`W_{phi(0)} = 0` exactly); likelihood evaluation leaves it off since
/// the point mass has no density.
pub(crate) fn variances_from_taus(grid: &TimeGrid, taus: &[f64], allow_origin: bool) -> Result<Vec<f64>> {
    let mut prev_t = 0.0;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(taus.len());
    for (i, (&t, &tau)) in grid.times().iter().zip(taus).enumerate() {
        let var = tau - prev;
        if allow_origin && i == 0 && t == 0.0 && tau == 0.0 {
            out.push(0.0);
            continue;
        }
        if !(var > 0.0) {
            return Err(Error::DegenerateVariance { t_prev: prev_t, t, variance: var });
        }
        out.push(var);
        prev_t = t;
        prev = tau;
    }
    Ok(out)
}

/// Like [`increment_variances`] but a grid starting at `t = 0` is allowed.
pub fn sampling_variances(kind: &TimeChangeKind, grid: &TimeGrid) -> Result<Vec<f64>> {
    let taus = kind.phi_many(grid.times())?;
    variances_from_taus(grid, &taus, true)
}

/// RNG stream for one path: independent of how many other paths are drawn
/// or in which order.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Draws `W_{phi(t_i)}` on the grid from pre-computed increment variances.
pub fn sample_with_variances(variances: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w = 0.0;
    variances
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            w += v.sqrt() * z;
            w
        })
        .collect()
}

/// One path of `W_{phi(t)}` on `grid`, deterministic in `seed`.
pub fn sample_path(kind: &TimeChangeKind, grid: &TimeGrid, seed: u64) -> Result<Vec<f64>> {
    let vars = sampling_variances(kind, grid)?;
    Ok(sample_with_variances(&vars, &mut path_rng(seed, 0)))
}

/// `n_paths` paths with per-path streams derived from `(seed, index)`.
pub fn sample_paths(kind: &TimeChangeKind, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let vars = sampling_variances(kind, grid)?;
    Ok((0..n_paths)
        .map(|i| sample_with_variances(&vars, &mut path_rng(seed, i as u64)))
        .collect())
}

/// `log N(w_curr; w_prev, var)`.
pub fn conditional_logpdf(w_curr: f64, w_prev: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::DegenerateVariance { t_prev: f64::NAN, t: f64::NAN, variance: var });
    }
    Ok(gauss_logpdf(w_curr - w_prev, var))
}

/// Log density of a centred Gaussian with variance `var` at `dw`.
pub fn gauss_logpdf<S: crate::grad::Scalar>(dw: S, var: S) -> S {
    -((var.ln() + LN_2PI) * 0.5) - dw * dw / (var * 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logpdf_examples() {
        assert_relative_eq!(conditional_logpdf(0.0, 0.0, 1.0).unwrap(), -0.9189385332046727, max_relative = 1e-15);
        assert_relative_eq!(conditional_logpdf(1.0, 0.0, 0.5).unwrap(), -1.5723649429247000, max_relative = 1e-14);
        let v = 2.7;
        assert_relative_eq!(
            conditional_logpdf(4.2, 4.2, v).unwrap(),
            -0.5 * (2.0 * std::f64::consts::PI * v).ln(),
            max_relative = 1e-15
        );
        assert!(matches!(conditional_logpdf(0.0, 0.0, 0.0), Err(Error::DegenerateVariance { .. })));
    }

    #[test]
    fn logpdf_integrates_to_one() {
        let (prev, var) = (0.4, 0.3);
        let sd = f64::sqrt(var);
        let n = 20_000;
        let (lo, hi) = (prev - 10.0 * sd, prev + 10.0 * sd);
        let h = (hi - lo) / n as f64;
        // composite Simpson
        let mut acc = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * conditional_logpdf(lo + i as f64 * h, prev, var).unwrap().exp();
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.1, 0.1]).is_err());
        assert!(TimeGrid::new(vec![-0.1, 0.5]).is_err());
        assert!(TimeGrid::new(vec![]).is_err());
        let g = TimeGrid::uniform(30, 1.5).unwrap();
        assert_eq!(g.len(), 30);
        assert_eq!(g.last(), 1.5);
    }

    #[test]
    fn first_increment_anchored_at_zero() {
        let g = TimeGrid::new(vec![0.5, 1.0]).unwrap();
        let v = increment_variances(&TimeChangeKind::Identity, &g).unwrap();
        assert_eq!(v, vec![0.5, 0.5]);
        let g0 = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        assert!(increment_variances(&TimeChangeKind::Identity, &g0).is_err());
        let w = sample_path(&TimeChangeKind::Identity, &g0, 3).unwrap();
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let g = TimeGrid::uniform(10, 1.0).unwrap();
        let a = sample_path(&TimeChangeKind::Identity, &g, 9).unwrap();
        let b = sample_path(&TimeChangeKind::Identity, &g, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_path(&TimeChangeKind::Identity, &g, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn increments_uncorrelated() {
        let g = TimeGrid::uniform(3, 1.0).unwrap();
        let paths = sample_paths(&TimeChangeKind::ParametricExp { a: 0.7 }, &g, 10_000, 4).unwrap();
        let d1: Vec<f64> = paths.iter().map(|p| p[1] - p[0]).collect();
        let d2: Vec<f64> = paths.iter().map(|p| p[2] - p[1]).collect();
        let r = crate::stats::correlation(&d1, &d2);
        assert!(r.abs() < 0.05, "{r}");
    }
}

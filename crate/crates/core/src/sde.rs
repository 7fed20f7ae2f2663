//! Toy SDEs: simulators and closed-form marginals.
//!
//! * `ToyOU`:      `dX = -theta (X - mu) dt + sigma dW`
//! * `ToyOUSqrtT`: `dX = -theta (X - mu) dt + sigma sqrt(t) dW`
//! * `ToyGBM`:     `dX = mu X dt + sigma X dW`

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_process::{path_rng, sample_with_variances, TimeGrid};
use crate::error::{Error, Result};
use crate::stats::NORMAL_Q3;
use crate::time_change::TimeChangeKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sde", rename_all = "kebab-case")]
pub enum SdeSpec {
    ToyOu { theta: f64, mu: f64, sigma: f64, x0: f64 },
    ToyOuSqrtT { theta: f64, mu: f64, sigma: f64, x0: f64 },
    ToyGbm { mu: f64, sigma: f64, x0: f64 },
}

impl SdeSpec {
    pub fn toy_ou() -> Self {
        SdeSpec::ToyOu { theta: 2.0, mu: 1.0, sigma: 0.5, x0: 0.0 }
    }

    pub fn toy_ou_sqrt_t() -> Self {
        SdeSpec::ToyOuSqrtT { theta: 2.0, mu: 1.0, sigma: 0.5, x0: 0.0 }
    }

    pub fn toy_gbm() -> Self {
        SdeSpec::ToyGbm { mu: 0.3, sigma: 0.5, x0: 1.0 }
    }

    /// `toy-ou`, `toy-ou-sqrt-t` or `toy-gbm` with default parameters.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy-ou" => Ok(Self::toy_ou()),
            "toy-ou-sqrt-t" => Ok(Self::toy_ou_sqrt_t()),
            "toy-gbm" => Ok(Self::toy_gbm()),
            other => Err(Error::InvalidInput(format!(
                "unknown sde {other:?} (expected toy-ou, toy-ou-sqrt-t, toy-gbm)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SdeSpec::ToyOu { .. } => "toy-ou",
            SdeSpec::ToyOuSqrtT { .. } => "toy-ou-sqrt-t",
            SdeSpec::ToyGbm { .. } => "toy-gbm",
        }
    }

    pub fn x0(&self) -> f64 {
        match *self {
            SdeSpec::ToyOu { x0, .. } | SdeSpec::ToyOuSqrtT { x0, .. } | SdeSpec::ToyGbm { x0, .. } => x0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SdeSpec::ToyOu { theta, mu, sigma, x0 } | SdeSpec::ToyOuSqrtT { theta, mu, sigma, x0 } => {
                theta > 0.0 && sigma >= 0.0 && mu.is_finite() && x0.is_finite() && theta.is_finite() && sigma.is_finite()
            }
            SdeSpec::ToyGbm { mu, sigma, x0 } => {
                x0 > 0.0 && sigma >= 0.0 && mu.is_finite() && sigma.is_finite() && x0.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid sde parameters: {self:?}")))
        }
    }

    fn drift(&self, x: f64) -> f64 {
        match *self {
            SdeSpec::ToyOu { theta, mu, .. } | SdeSpec::ToyOuSqrtT { theta, mu, .. } => -theta * (x - mu),
            SdeSpec::ToyGbm { mu, .. } => mu * x,
        }
    }

    fn diffusion(&self, x: f64, t: f64) -> f64 {
        match *self {
            SdeSpec::ToyOu { sigma, .. } => sigma,
            SdeSpec::ToyOuSqrtT { sigma, .. } => sigma * t.sqrt(),
            SdeSpec::ToyGbm { sigma, .. } => sigma * x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMeta {
    Sde(SdeSpec),
    External,
}

/// Observed paths sharing one time grid; `values[path][time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub grid: TimeGrid,
    pub values: Vec<Vec<f64>>,
    pub meta: PathMeta,
}

impl PathSet {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>, meta: PathMeta) -> Result<Self> {
        for (i, row) in values.iter().enumerate() {
            if row.len() != grid.len() {
                return Err(Error::Dataset(format!(
                    "path {i} has {} values, grid has {}",
                    row.len(),
                    grid.len()
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("path {i} has a non-finite value at t = {}", grid.times()[j])));
            }
        }
        if let PathMeta::Sde(SdeSpec::ToyGbm { .. }) = meta {
            if values.iter().flatten().any(|&v| v <= 0.0) {
                return Err(Error::Dataset("GBM paths must stay positive".into()));
            }
        }
        Ok(Self { grid, values, meta })
    }

    pub fn n_paths(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of every path at time index `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    /// Paths `range` as a new set.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            grid: self.grid.clone(),
            values: idx.iter().map(|&i| self.values[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }
}

fn check_common(spec: &SdeSpec, n_paths: usize) -> Result<()> {
    spec.validate()?;
    if n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be positive".into()));
    }
    Ok(())
}

/// Euler-Maruyama from `x0` at `t = 0`, with `substeps` uniform steps between
/// consecutive grid points; values recorded at grid points only.
pub fn euler_maruyama(spec: &SdeSpec, grid: &TimeGrid, substeps: usize, n_paths: usize, seed: u64) -> Result<PathSet> {
    check_common(spec, n_paths)?;
    if substeps == 0 {
        return Err(Error::InvalidInput("substeps must be >= 1".into()));
    }
    let times = grid.times();
    let rows: Result<Vec<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut x = spec.x0();
            let mut t = 0.0;
            let mut row = Vec::with_capacity(times.len());
            for &t_next in times {
                let h = (t_next - t) / substeps as f64;
                let sh = h.sqrt();
                for k in 0..substeps {
                    let tk = t + k as f64 * h;
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x += spec.drift(x) * h + spec.diffusion(x, tk) * sh * z;
                }
                if !x.is_finite() {
                    return Err(Error::Numeric(format!("path {p} overflowed before t = {t_next}")));
                }
                t = t_next;
                row.push(x);
            }
            Ok(row)
        })
        .collect();
    Ok(PathSet { grid: grid.clone(), values: rows?, meta: PathMeta::Sde(*spec) })
}

/// `integral_{t0}^{t1} exp(-2 theta (t1 - s)) s ds`.
fn sqrt_t_transition_integral(theta: f64, t0: f64, t1: f64) -> f64 {
    let k = 2.0 * theta;
    let dt = t1 - t0;
    // (k t1 - 1 - e^{-k dt} (k t0 - 1)) / k^2, arranged to avoid cancellation at small dt
    (k * dt + (-k * dt).exp_m1() * (1.0 - k * t0)) / (k * k)
}

/// Marginal variance of `ToyOUSqrtT` started from a point:
/// `sigma^2 (t / (2 theta) - 1 / (4 theta^2) + exp(-2 theta t) / (4 theta^2))`.
pub fn ou_sqrt_t_variance(theta: f64, sigma: f64, t: f64) -> f64 {
    let k = 2.0 * theta;
    sigma * sigma * ((-k * t).exp_m1() + k * t) / (k * k)
}

/// Exact Gaussian-transition sampler, for both OU variants.
pub fn ou_exact_sample(spec: &SdeSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    check_common(spec, n_paths)?;
    let times = grid.times();
    let step = |x: f64, t0: f64, t1: f64, z: f64| -> f64 {
        match *spec {
            SdeSpec::ToyOu { theta, mu, sigma, .. } => {
                let d = t1 - t0;
                let var = sigma * sigma * -(-2.0 * theta * d).exp_m1() / (2.0 * theta);
                mu + (x - mu) * (-theta * d).exp() + var.sqrt() * z
            }
            SdeSpec::ToyOuSqrtT { theta, mu, sigma, .. } => {
                let var = sigma * sigma * sqrt_t_transition_integral(theta, t0, t1);
                mu + (x - mu) * (-theta * (t1 - t0)).exp() + var.max(0.0).sqrt() * z
            }
            SdeSpec::ToyGbm { .. } => unreachable!(),
        }
    };
    if let SdeSpec::ToyGbm { .. } = spec {
        return Err(Error::InvalidInput("ou_exact_sample needs an OU spec".into()));
    }
    let values = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut x = spec.x0();
            let mut t = 0.0;
            times
                .iter()
                .map(|&t1| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x = step(x, t, t1, z);
                    t = t1;
                    x
                })
                .collect()
        })
        .collect();
    Ok(PathSet { grid: grid.clone(), values, meta: PathMeta::Sde(*spec) })
}

/// OU through its time-change representation:
/// `x0 e^{-at} + mu (1 - e^{-at}) + sigma e^{-at} / sqrt(2a) * W_{e^{2at} - 1}`.
pub fn ou_timechange_sample(spec: &SdeSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    check_common(spec, n_paths)?;
    let SdeSpec::ToyOu { theta, mu, sigma, x0 } = *spec else {
        return Err(Error::InvalidInput("ou_timechange_sample needs a ToyOU spec".into()));
    };
    let clock = TimeChangeKind::ParametricExp { a: theta };
    let taus = clock.phi_many(grid.times())?;
    let vars = crate::base_process::variances_from_taus(grid, &taus, true)?;
    let decay: Vec<f64> = grid.times().iter().map(|&t| (-theta * t).exp()).collect();
    let scale = sigma / (2.0 * theta).sqrt();
    let values = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let w = sample_with_variances(&vars, &mut path_rng(seed, p as u64));
            w.iter()
                .zip(&decay)
                .map(|(&wi, &g)| x0 * g + mu * (1.0 - g) + scale * g * wi)
                .collect()
        })
        .collect();
    Ok(PathSet { grid: grid.clone(), values, meta: PathMeta::Sde(*spec) })
}

/// Exact lognormal transitions for GBM; paths stay positive.
pub fn gbm_exact_sample(spec: &SdeSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    check_common(spec, n_paths)?;
    let SdeSpec::ToyGbm { mu, sigma, x0 } = *spec else {
        return Err(Error::InvalidInput("gbm_exact_sample needs a ToyGBM spec".into()));
    };
    let times = grid.times();
    let values = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut log_x = x0.ln();
            let mut t = 0.0;
            times
                .iter()
                .map(|&t1| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let d = t1 - t;
                    log_x += (mu - 0.5 * sigma * sigma) * d + sigma * d.sqrt() * z;
                    t = t1;
                    log_x.exp()
                })
                .collect()
        })
        .collect();
    PathSet::new(grid.clone(), values, PathMeta::Sde(*spec))
}

/// Training-data generator: exact transitions for every toy process.
pub fn simulate_exact(spec: &SdeSpec, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathSet> {
    match spec {
        SdeSpec::ToyGbm { .. } => gbm_exact_sample(spec, grid, n_paths, seed),
        _ => ou_exact_sample(spec, grid, n_paths, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMoments {
    pub mean: f64,
    pub std: f64,
    pub q1: f64,
    pub q3: f64,
}

impl OracleMoments {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("oracle evaluated at t = {t}")));
    }
    Ok(())
}

/// Closed-form mean, standard deviation and quartiles of `X_t`.
pub fn oracle_moments(spec: &SdeSpec, t: f64) -> Result<OracleMoments> {
    check_t(t)?;
    spec.validate()?;
    Ok(match *spec {
        SdeSpec::ToyOu { theta, mu, sigma, x0 } => {
            let mean = mu + (x0 - mu) * (-theta * t).exp();
            let std = (sigma * sigma * -(-2.0 * theta * t).exp_m1() / (2.0 * theta)).sqrt();
            gaussian_moments(mean, std)
        }
        SdeSpec::ToyOuSqrtT { theta, mu, sigma, x0 } => {
            let mean = mu + (x0 - mu) * (-theta * t).exp();
            gaussian_moments(mean, ou_sqrt_t_variance(theta, sigma, t).sqrt())
        }
        SdeSpec::ToyGbm { mu, sigma, x0 } => {
            let mean = x0 * (mu * t).exp();
            let std = mean * (sigma * sigma * t).exp_m1().sqrt();
            let loc = (mu - 0.5 * sigma * sigma) * t;
            let spread = NORMAL_Q3 * sigma * t.sqrt();
            OracleMoments { mean, std, q1: x0 * (loc - spread).exp(), q3: x0 * (loc + spread).exp() }
        }
    })
}

fn gaussian_moments(mean: f64, std: f64) -> OracleMoments {
    OracleMoments { mean, std, q1: mean - NORMAL_Q3 * std, q3: mean + NORMAL_Q3 * std }
}

/// Closed-form density of `X_t`, `t > 0`.
pub fn oracle_density(spec: &SdeSpec, x: f64, t: f64) -> Result<f64> {
    check_t(t)?;
    if t == 0.0 {
        return Err(Error::Domain("X_0 is a point mass; density undefined at t = 0".into()));
    }
    let norm = |z: f64, s: f64| (-0.5 * z * z / (s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    Ok(match *spec {
        SdeSpec::ToyGbm { mu, sigma, x0 } => {
            if x <= 0.0 {
                return Ok(0.0);
            }
            let s = sigma * t.sqrt();
            norm((x / x0).ln() - (mu - 0.5 * sigma * sigma) * t, s) / x
        }
        _ => {
            let m = oracle_moments(spec, t)?;
            norm(x - m.mean, m.std)
        }
    })
}

/// Quantile of `X_t` at probability `p` (used for density-grid ranges).
pub fn oracle_quantile(spec: &SdeSpec, t: f64, p: f64) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let z = Normal::standard().inverse_cdf(p);
    let m = oracle_moments(spec, t)?;
    Ok(match *spec {
        SdeSpec::ToyGbm { mu, sigma, x0 } => x0 * ((mu - 0.5 * sigma * sigma) * t + z * sigma * t.sqrt()).exp(),
        _ => m.mean + z * m.std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_two_sample, mean, variance};

    #[test]
    fn deterministic_limit() {
        let spec = SdeSpec::ToyOu { theta: 1.0, mu: 0.0, sigma: 0.0, x0: 1.0 };
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let p = euler_maruyama(&spec, &grid, 1000, 1, 0).unwrap();
        assert!((p.values[0][0] - (-1.0f64).exp()).abs() < 2e-3);
    }

    #[test]
    fn euler_is_deterministic() {
        let grid = TimeGrid::uniform(5, 1.0).unwrap();
        for spec in [SdeSpec::toy_ou(), SdeSpec::toy_ou_sqrt_t(), SdeSpec::toy_gbm()] {
            let a = euler_maruyama(&spec, &grid, 4, 1, 17).unwrap();
            let b = euler_maruyama(&spec, &grid, 4, 1, 17).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn oracle_at_zero_and_iqr() {
        let m = oracle_moments(&SdeSpec::toy_ou(), 0.0).unwrap();
        assert_eq!((m.mean, m.std, m.q1, m.q3), (0.0, 0.0, 0.0, 0.0));
        let m = oracle_moments(&SdeSpec::toy_ou(), 0.8).unwrap();
        assert!((m.iqr() - 1.3489795003921634 * m.std).abs() < 1e-14);
        assert!(oracle_moments(&SdeSpec::toy_ou(), -1.0).is_err());
        assert!(oracle_density(&SdeSpec::toy_ou(), 0.0, 0.0).is_err());
    }

    #[test]
    fn stationary_and_mean_reversion_limits() {
        let spec = SdeSpec::ToyOu { theta: 1.0, mu: 0.0, sigma: 2f64.sqrt(), x0: 3.0 };
        let m = oracle_moments(&spec, 50.0).unwrap();
        assert!((m.std - 1.0).abs() < 1e-12);
        assert!(m.mean.abs() < 1e-12);
    }

    #[test]
    fn sqrt_t_variance_matches_direct_formula() {
        let (th, s, t) = (2.0f64, 0.5, 0.9);
        let direct = s * s * (t / (2.0 * th) - 1.0 / (4.0 * th * th) + (-2.0 * th * t).exp() / (4.0 * th * th));
        assert!((ou_sqrt_t_variance(th, s, t) - direct).abs() < 1e-15);
        // transition from 0 equals marginal variance
        assert!((sqrt_t_transition_integral(th, 0.0, t) * s * s - direct).abs() < 1e-15);
    }

    #[test]
    fn sqrt_t_transition_composes() {
        // Var(X_t2) = e^{-2 th (t2 - t1)} Var(X_t1) + transition variance
        let (th, s) = (2.0, 0.5);
        let (t1, t2) = (0.4, 1.1);
        let lhs = ou_sqrt_t_variance(th, s, t2);
        let rhs = (-2.0 * th * (t2 - t1)).exp() * ou_sqrt_t_variance(th, s, t1)
            + s * s * sqrt_t_transition_integral(th, t1, t2);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn gbm_density_integrates() {
        let spec = SdeSpec::toy_gbm();
        let n = 40_000;
        let hi = 20.0;
        let h = hi / n as f64;
        let total: f64 = (1..=n).map(|i| oracle_density(&spec, (i as f64 - 0.5) * h, 1.0).unwrap() * h).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn timechange_starts_at_x0() {
        let spec = SdeSpec::ToyOu { theta: 1.5, mu: 2.0, sigma: 0.7, x0: 0.3 };
        let grid = TimeGrid::new(vec![0.0, 0.5]).unwrap();
        let p = ou_timechange_sample(&spec, &grid, 50, 1).unwrap();
        for row in &p.values {
            assert_eq!(row[0], 0.3);
        }
    }

    #[test]
    fn exact_and_timechange_agree_small() {
        let spec = SdeSpec::toy_ou();
        let grid = TimeGrid::new(vec![0.25, 0.75, 1.5]).unwrap();
        let a = ou_exact_sample(&spec, &grid, 4000, 1).unwrap();
        let b = ou_timechange_sample(&spec, &grid, 4000, 2).unwrap();
        for j in 0..3 {
            let (_, p) = ks_two_sample(&a.column(j), &b.column(j));
            assert!(p > 0.01, "slice {j}: p = {p}");
        }
        let m = oracle_moments(&spec, 1.5).unwrap();
        assert!((mean(&a.column(2)) - m.mean).abs() < 0.03);
        assert!((variance(&b.column(2)).sqrt() - m.std).abs() < 0.02);
    }

    #[test]
    fn gbm_positive() {
        let p = gbm_exact_sample(&SdeSpec::toy_gbm(), &TimeGrid::uniform(30, 1.5).unwrap(), 200, 3).unwrap();
        assert!(p.values.iter().flatten().all(|&x| x > 0.0));
    }
}

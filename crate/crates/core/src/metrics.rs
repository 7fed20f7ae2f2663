//! Monte Carlo moment errors, grid density errors and real-data reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_process::TimeGrid;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sde::{oracle_density, oracle_moments, oracle_quantile, OracleMoments, PathSet, SdeSpec};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub n_paths: usize,
    pub n_iterations: usize,
    /// Time slices on `(0, t_max]` at which sample moments are compared.
    pub n_slices: usize,
    pub n_space: usize,
    pub n_time: usize,
    pub t_max: f64,
    /// Overrides the default spatial range of the density grid.
    pub x_range: Option<(f64, f64)>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { n_paths: 1000, n_iterations: 100, n_slices: 50, n_space: 1000, n_time: 500, t_max: 1.5, x_range: None }
    }
}

impl EvalProtocol {
    /// 1000 paths over 1000 iterations.
    pub fn full() -> Self {
        Self { n_iterations: 1000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 || self.n_iterations == 0 || self.n_slices == 0 || self.n_space < 2 || self.n_time == 0 {
            return Err(Error::InvalidInput(
                "protocol needs n_paths >= 2, n_space >= 2 and positive iterations, slices and n_time".into(),
            ));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(Error::InvalidInput(format!("t_max must be positive, got {}", self.t_max)));
        }
        if let Some((lo, hi)) = self.x_range {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!("bad x_range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn slice_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.n_slices, self.t_max)
    }

    /// Density-grid times `t_max * j / n_time`, `j = 1..=n_time`.
    pub fn density_times(&self) -> Vec<f64> {
        (1..=self.n_time).map(|j| self.t_max * j as f64 / self.n_time as f64).collect()
    }

    /// Spatial range: mean +/- 6 std at `t_max`, or for GBM the positive
    /// range between the 1e-6 and 1 - 1e-6 quantiles.
    pub fn x_range_for(&self, spec: &SdeSpec) -> Result<(f64, f64)> {
        if let Some(r) = self.x_range {
            return Ok(r);
        }
        match spec {
            SdeSpec::ToyGbm { .. } => {
                Ok((oracle_quantile(spec, self.t_max, 1e-6)?, oracle_quantile(spec, self.t_max, 1.0 - 1e-6)?))
            }
            _ => {
                let m = oracle_moments(spec, self.t_max)?;
                Ok((m.mean - 6.0 * m.std, m.mean + 6.0 * m.std))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    fn push(&mut self, metric: &str, per_iter: &[f64]) {
        let value = stats::mean(per_iter);
        let sd = if per_iter.len() > 1 { stats::std_dev(per_iter) } else { 0.0 };
        self.rows.push(MetricRow { metric: metric.into(), value, sd });
    }

    pub fn merge(mut self, other: EvalReport) -> Self {
        self.rows.extend(other.rows);
        self.flags.extend(other.flags);
        self
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,sd\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.metric, r.value, r.sd);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{:<14} {:.6} (sd {:.6})", r.metric, r.value, r.sd);
        }
        for f in &self.flags {
            let _ = writeln!(s, "flag: {f}");
        }
        s
    }
}

/// Per-iteration seed; iterations never share streams.
pub fn iteration_seed(seed: u64, iter: usize) -> u64 {
    seed ^ (iter as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Sample mean, std and type-7 quartiles of one time slice.
pub fn slice_moments(xs: &[f64]) -> OracleMoments {
    let s = stats::sorted(xs);
    OracleMoments {
        mean: stats::mean(xs),
        std: stats::std_dev(xs),
        q1: stats::quantile_sorted(&s, 0.25),
        q3: stats::quantile_sorted(&s, 0.75),
    }
}

fn columns(paths: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|j| paths.iter().map(|p| p[j]).collect()).collect()
}

/// MAE of model sample mean / std / IQR against the oracle, averaged over
/// iterations of fresh model samples.
pub fn moment_mae(model: &Model, spec: &SdeSpec, protocol: &EvalProtocol, seed: u64) -> Result<EvalReport> {
    protocol.validate()?;
    let grid = protocol.slice_grid()?;
    let oracle: Vec<OracleMoments> = grid.times().iter().map(|&t| oracle_moments(spec, t)).collect::<Result<_>>()?;
    let mut errs = [Vec::new(), Vec::new(), Vec::new()];
    for it in 0..protocol.n_iterations {
        let paths = model.sample_paths(&grid, protocol.n_paths, iteration_seed(seed, it))?;
        let mut acc = [0.0; 3];
        for (col, o) in columns(&paths, grid.len()).iter().zip(&oracle) {
            let m = slice_moments(col);
            acc[0] += (m.mean - o.mean).abs();
            acc[1] += (m.std - o.std).abs();
            acc[2] += (m.iqr() - o.iqr()).abs();
        }
        for k in 0..3 {
            errs[k].push(acc[k] / grid.len() as f64);
        }
    }
    let mut r = EvalReport::default();
    r.push("mean_mae", &errs[0]);
    r.push("std_mae", &errs[1]);
    r.push("iqr_mae", &errs[2]);
    Ok(r)
}

/// `|model density - oracle density|` on the protocol's grid, by time.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityErrorGrid {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl DensityErrorGrid {
    pub fn mean(&self) -> f64 {
        let total: f64 = self.values.iter().map(|row| row.iter().sum::<f64>()).sum();
        total / (self.times.len() * self.xs.len()) as f64
    }
}

pub fn density_error_grid(model: &Model, spec: &SdeSpec, protocol: &EvalProtocol) -> Result<DensityErrorGrid> {
    protocol.validate()?;
    let (lo, hi) = protocol.x_range_for(spec)?;
    let xs: Vec<f64> = (0..protocol.n_space)
        .map(|i| lo + (hi - lo) * i as f64 / (protocol.n_space - 1) as f64)
        .collect();
    let times = protocol.density_times();
    let values = times
        .par_iter()
        .map(|&t| {
            let tau = model.phi(t)?;
            let map = model.bijection.at(tau)?;
            xs.iter()
                .map(|&x| Ok((model.density_with(&map, tau, x)? - oracle_density(spec, x, t)?).abs()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DensityErrorGrid { times, xs, values })
}

/// Mean of `|model density - oracle density|` over the protocol's
/// `n_space x n_time` grid.
pub fn density_mae(model: &Model, spec: &SdeSpec, protocol: &EvalProtocol) -> Result<f64> {
    Ok(density_error_grid(model, spec, protocol)?.mean())
}

/// Moment MAE plus density MAE against a toy process.
pub fn oracle_report(model: &Model, spec: &SdeSpec, protocol: &EvalProtocol, seed: u64) -> Result<EvalReport> {
    let mut r = moment_mae(model, spec, protocol, seed)?;
    let d = density_mae(model, spec, protocol)?;
    r.rows.push(MetricRow { metric: "density_mae".into(), value: d, sd: 0.0 });
    Ok(r)
}

/// Per-slice moment errors of `samples` against the empirical moments of
/// `test` (same grid). Relative mode divides by the empirical moment and
/// skips slices where it is below 1e-12.
pub fn sample_vs_empirical(samples: &[Vec<f64>], test: &PathSet, relative: bool) -> Result<(Vec<(String, f64)>, Vec<String>)> {
    if test.is_empty() {
        return Err(Error::InvalidInput("test set is empty".into()));
    }
    let n = test.grid.len();
    let prefix = if relative { "mre" } else { "mae" };
    let emp: Vec<OracleMoments> = columns(&test.values, n).iter().map(|c| slice_moments(c)).collect();
    let got: Vec<OracleMoments> = columns(samples, n).iter().map(|c| slice_moments(c)).collect();
    let mut flags = Vec::new();
    let mut out = Vec::new();
    let spread_ok = test.n_paths() > 1;
    if !spread_ok {
        flags.push("std and iqr undefined: test set has one path".to_string());
    }
    let moments: [(&str, fn(&OracleMoments) -> f64, bool); 3] =
        [("mean", |m| m.mean, true), ("std", |m| m.std, spread_ok), ("iqr", |m| m.iqr(), spread_ok)];
    for (name, get, ok) in moments {
        if !ok {
            continue;
        }
        let mut acc = 0.0;
        let mut used = 0usize;
        for (j, (e, g)) in emp.iter().zip(&got).enumerate() {
            let (ev, gv) = (get(e), get(g));
            if relative {
                if ev.abs() < 1e-12 {
                    flags.push(format!("{name}: slice t = {} excluded (empirical moment below 1e-12)", test.grid.times()[j]));
                    continue;
                }
                acc += ((gv - ev) / ev).abs();
            } else {
                acc += (gv - ev).abs();
            }
            used += 1;
        }
        if used > 0 {
            out.push((format!("{name}_{prefix}"), acc / used as f64));
        } else {
            flags.push(format!("{name}: every slice excluded"));
        }
    }
    Ok((out, flags))
}

/// Model-vs-data moment errors on the test set's grid.
pub fn real_data_report(model: &Model, test: &PathSet, relative: bool, protocol: &EvalProtocol, seed: u64) -> Result<EvalReport> {
    protocol.validate()?;
    let mut per_metric: Vec<(String, Vec<f64>)> = Vec::new();
    let mut flags = Vec::new();
    for it in 0..protocol.n_iterations {
        let samples = model.sample_paths(&test.grid, protocol.n_paths, iteration_seed(seed, it))?;
        let (vals, f) = sample_vs_empirical(&samples, test, relative)?;
        if it == 0 {
            flags = f;
            per_metric = vals.iter().map(|(k, _)| (k.clone(), Vec::new())).collect();
        }
        for ((_, acc), (_, v)) in per_metric.iter_mut().zip(vals) {
            acc.push(v);
        }
    }
    let mut r = EvalReport { rows: Vec::new(), flags };
    for (k, v) in per_metric {
        r.push(&k, &v);
    }
    Ok(r)
}

/// `max_t |phi(t)/phi(T) - t/T|` on `n` uniform points of `[0, T]`.
pub fn phi_shape_deviation(model: &Model, t_max: f64, n: usize) -> Result<f64> {
    let end = model.phi(t_max)?;
    if !(end > 0.0) {
        return Err(Error::Domain(format!("phi({t_max}) = {end} is not positive")));
    }
    let mut worst = 0.0f64;
    for i in 0..=n {
        let t = t_max * i as f64 / n as f64;
        worst = worst.max((model.phi(t)? / end - t / t_max).abs());
    }
    Ok(worst)
}

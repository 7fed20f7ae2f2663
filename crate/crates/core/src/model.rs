//! TCNF model `X_t = f(W_{phi(t)}, phi(t))` and its exact path likelihood.
//!
//! For a path `x_1..x_n` on a grid shared by the whole dataset,
//!
//! ```text
//! w_i = f^{-1}(x_i, phi(t_i))
//! NLL = -sum_i [ log N(w_i; w_{i-1}, phi(t_i) - phi(t_{i-1})) - log f'(w_i, phi(t_i)) ]
//! ```
//!
//! with `w_0 = 0` at `t_0 = 0`.
//!
//! Gradients are computed in two stages. Everything that depends only on
//! time (the clock values and the per-time flow coefficients) is recorded
//! once per batch on a shared tape. Each path is then differentiated on its
//! own tape whose leaves are those per-time quantities; the summed leaf
//! adjoints seed the reverse sweep of the shared tape.
//!
//! The inverse is differentiated implicitly. With `w*` solved numerically,
//! the recorded value is `w* - (f(w*) - x) / f'(w*)` where `w*` and `f'(w*)`
//! are constants, which has the value of `w*` (to solver precision) and the
//! gradient `-(df/dparams) / f'(w*)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_process::{gauss_logpdf, path_rng, sample_with_variances, sampling_variances, TimeGrid};
use crate::error::{Error, Result};
use crate::flow::{map_from_flat, BlockMap, Bijection, FlowConfig, FlowParams, MonotoneMap, OracleMap};
use crate::grad::{Fault, Objective, ParamStore, Scalar, Tape, Var};
use crate::sde::SdeSpec;
use crate::time_change::{mmgn_eval, MmgnParams, TimeChangeKind, DEFAULT_EPS_SLOPE, DEFAULT_MODULES, DEFAULT_WIDTH};

pub const MMGN_SEGMENT: &str = "mmgn";
pub const FLOW_SEGMENT: &str = "flow";

/// Which clock the model uses and whether it is learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeChangeConfig {
    /// Fixed `phi(t) = t`: the CTFP baseline.
    Identity,
    /// Fixed `phi(t) = exp(2 a t) - 1`.
    ParametricExp { a: f64 },
    /// Learned M-MGN clock.
    Mmgn {
        #[serde(default = "default_modules")]
        modules: usize,
        #[serde(default = "default_width")]
        width: usize,
        #[serde(default = "default_eps_slope")]
        eps_slope: f64,
    },
}

fn default_modules() -> usize {
    DEFAULT_MODULES
}

fn default_width() -> usize {
    DEFAULT_WIDTH
}

fn default_eps_slope() -> f64 {
    DEFAULT_EPS_SLOPE
}

impl TimeChangeConfig {
    pub fn mmgn_default() -> Self {
        TimeChangeConfig::Mmgn { modules: DEFAULT_MODULES, width: DEFAULT_WIDTH, eps_slope: DEFAULT_EPS_SLOPE }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TimeChangeConfig::Identity => "identity",
            TimeChangeConfig::ParametricExp { .. } => "parametric_exp",
            TimeChangeConfig::Mmgn { .. } => "mmgn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FlowChoice {
    Neural(FlowConfig),
    Oracle(OracleMap),
}

/// A time-change and bijection with their parameters in place.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub time_change: TimeChangeKind,
    pub bijection: Bijection,
}

impl Model {
    /// Closed-form model that reproduces the toy process's marginals exactly
    /// (and its full path law for OU and GBM).
    pub fn oracle(spec: &SdeSpec) -> Self {
        match *spec {
            SdeSpec::ToyOu { theta, mu, sigma, x0 } => Model {
                time_change: TimeChangeKind::ParametricExp { a: theta },
                bijection: Bijection::Oracle(OracleMap::OuAffine { theta, mu, sigma, x0 }),
            },
            SdeSpec::ToyOuSqrtT { theta, mu, sigma, x0 } => Model {
                time_change: TimeChangeKind::Identity,
                bijection: Bijection::Oracle(OracleMap::OuSqrtTMarginal { theta, mu, sigma, x0 }),
            },
            SdeSpec::ToyGbm { mu, sigma, x0 } => Model {
                time_change: TimeChangeKind::Identity,
                bijection: Bijection::Oracle(OracleMap::GbmExp { mu, sigma, x0 }),
            },
        }
    }

    /// Freshly initialized parameters for `config`.
    pub fn init(tc: &TimeChangeConfig, flow: &FlowChoice, seed: u64) -> Result<Self> {
        let time_change = match *tc {
            TimeChangeConfig::Identity => TimeChangeKind::Identity,
            TimeChangeConfig::ParametricExp { a } => TimeChangeKind::ParametricExp { a },
            TimeChangeConfig::Mmgn { modules, width, eps_slope } => {
                TimeChangeKind::Mmgn { params: MmgnParams::init(modules, width, seed), eps_slope }
            }
        };
        let bijection = match flow {
            FlowChoice::Neural(cfg) => Bijection::Neural(FlowParams::init(*cfg, seed.wrapping_add(1))?),
            FlowChoice::Oracle(o) => Bijection::Oracle(*o),
        };
        let m = Model { time_change, bijection };
        m.time_change.validate()?;
        Ok(m)
    }

    /// Trainable parameters as a flat store (`mmgn`, then `flow`).
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        if let TimeChangeKind::Mmgn { params, .. } = &self.time_change {
            store
                .push_segment(MMGN_SEGMENT, vec![params.n_params()], &params.to_flat())
                .expect("fresh store");
        }
        if let Bijection::Neural(f) = &self.bijection {
            store.push_segment(FLOW_SEGMENT, vec![f.weights.len()], &f.weights).expect("fresh store");
        }
        store
    }

    /// Rebuilds a model of the given configuration from stored parameters.
    pub fn from_store(tc: &TimeChangeConfig, flow: &FlowChoice, store: &ParamStore) -> Result<Self> {
        let time_change = match *tc {
            TimeChangeConfig::Identity => TimeChangeKind::Identity,
            TimeChangeConfig::ParametricExp { a } => TimeChangeKind::ParametricExp { a },
            TimeChangeConfig::Mmgn { modules, width, eps_slope } => {
                let flat = store
                    .slice(MMGN_SEGMENT)
                    .ok_or_else(|| Error::InvalidInput("parameter store has no mmgn segment".into()))?;
                TimeChangeKind::Mmgn { params: MmgnParams::from_flat(modules, width, flat)?, eps_slope }
            }
        };
        let bijection = match flow {
            FlowChoice::Neural(cfg) => {
                let w = store
                    .slice(FLOW_SEGMENT)
                    .ok_or_else(|| Error::InvalidInput("parameter store has no flow segment".into()))?;
                let f = FlowParams { config: *cfg, weights: w.to_vec() };
                f.validate()?;
                Bijection::Neural(f)
            }
            FlowChoice::Oracle(o) => Bijection::Oracle(*o),
        };
        time_change.validate()?;
        Ok(Model { time_change, bijection })
    }

    pub fn phi(&self, t: f64) -> Result<f64> {
        self.time_change.phi(t)
    }

    /// Negative log-likelihood of one path observed on `grid`.
    pub fn path_nll(&self, grid: &TimeGrid, x: &[f64]) -> Result<f64> {
        Ok(self.batch_nll(grid, &[x.to_vec()])?[0])
    }

    /// Per-path NLLs, sharing the per-time work across the batch.
    pub fn batch_nll(&self, grid: &TimeGrid, paths: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_paths(grid, paths)?;
        match &self.bijection {
            Bijection::Neural(flow) => {
                let (mm, mm_shape) = mmgn_slice(&self.time_change);
                let frame = TimeFrame::build(&self.time_change, &flow.config, mm.as_deref(), mm_shape, &flow.weights, grid)?;
                let numeric = frame.numeric();
                paths.iter().map(|x| path_nll_generic(&numeric, &frame.vars, &frame.maps, x)).collect()
            }
            Bijection::Oracle(_) => {
                let taus = self.time_change.phi_many(grid.times())?;
                let vars = crate::base_process::variances_from_taus(grid, &taus, false)?;
                let maps: Vec<_> = taus.iter().map(|&tau| self.bijection.at(tau)).collect::<Result<_>>()?;
                paths
                    .iter()
                    .map(|x| {
                        let mut prev = 0.0;
                        let mut nll = 0.0;
                        for i in 0..x.len() {
                            let w = maps[i].inverse(x[i])?;
                            nll -= gauss_logpdf(w - prev, vars[i]) - maps[i].log_abs_deriv(w)?;
                            prev = w;
                        }
                        Ok(nll)
                    })
                    .collect()
            }
        }
    }

    /// Samples `n_paths` model paths on `grid`: base paths pushed through the
    /// bijection at `phi(t_i)`.
    pub fn sample_paths(&self, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let vars = sampling_variances(&self.time_change, grid)?;
        let taus = self.time_change.phi_many(grid.times())?;
        let maps: Vec<_> = taus.iter().map(|&tau| self.bijection.at(tau)).collect::<Result<_>>()?;
        (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let w = sample_with_variances(&vars, &mut path_rng(seed, p as u64));
                w.iter().zip(&maps).map(|(&wi, m)| m.forward(wi)).collect()
            })
            .collect()
    }

    /// Marginal density of `X_t` by change of variables; `t` must have
    /// `phi(t) > 0`.
    pub fn density(&self, x: f64, t: f64) -> Result<f64> {
        let tau = self.phi(t)?;
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("X_t is a point mass at t = {t} (phi = {tau})")));
        }
        let map = self.bijection.at(tau)?;
        self.density_with(&map, tau, x)
    }

    pub(crate) fn density_with(&self, map: &crate::flow::FixedMap, tau: f64, x: f64) -> Result<f64> {
        if !map.in_support(x) {
            return Ok(0.0);
        }
        let w = map.inverse(x)?;
        Ok((gauss_logpdf(w, tau) - map.log_abs_deriv(w)?).exp())
    }
}

fn mmgn_slice(kind: &TimeChangeKind) -> (Option<Vec<f64>>, (usize, usize, f64)) {
    match kind {
        TimeChangeKind::Mmgn { params, eps_slope } => (Some(params.to_flat()), (params.modules, params.width, *eps_slope)),
        _ => (None, (0, 0, 0.0)),
    }
}

fn check_paths(grid: &TimeGrid, paths: &[Vec<f64>]) -> Result<()> {
    for (i, x) in paths.iter().enumerate() {
        if x.len() != grid.len() {
            return Err(Error::InvalidInput(format!("path {i} has {} values, grid has {}", x.len(), grid.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("path {i} has non-finite values")));
        }
    }
    Ok(())
}

/// Everything on the shared grid that does not depend on the observed
/// values: increment variances and the bijection at each `phi(t_i)`.
struct TimeFrame<S> {
    vars: Vec<S>,
    maps: Vec<MonotoneMap<S>>,
}

impl<S: Scalar> TimeFrame<S> {
    fn build(
        kind: &TimeChangeKind,
        flow_cfg: &FlowConfig,
        mmgn: Option<&[S]>,
        mmgn_shape: (usize, usize, f64),
        flow: &[S],
        grid: &TimeGrid,
    ) -> Result<Self> {
        let anchor = flow[0];
        let taus: Vec<S> = match (kind, mmgn) {
            (TimeChangeKind::Mmgn { .. }, Some(theta)) => {
                let (k, l, eps) = mmgn_shape;
                let base = mmgn_eval(theta, k, l, 0.0);
                grid.times().iter().map(|&t| (mmgn_eval(theta, k, l, t) - base) + eps * t).collect()
            }
            _ => kind.phi_many(grid.times())?.into_iter().map(|v| anchor.lift(v)).collect(),
        };
        let mut vars = Vec::with_capacity(taus.len());
        for (i, tau) in taus.iter().enumerate() {
            let var = if i == 0 { *tau } else { *tau - taus[i - 1] };
            if !(var.value() > 0.0) || !var.value().is_finite() {
                let t_prev = if i == 0 { 0.0 } else { grid.times()[i - 1] };
                return Err(Error::DegenerateVariance { t_prev, t: grid.times()[i], variance: var.value() });
            }
            if tau.value() < 0.0 {
                return Err(Error::Domain(format!("negative clock value {} at t = {}", tau.value(), grid.times()[i])));
            }
            vars.push(var);
        }
        let maps = taus.iter().map(|&tau| map_from_flat(flow_cfg, flow, tau)).collect();
        Ok(TimeFrame { vars, maps })
    }

    fn numeric(&self) -> TimeFrame<f64> {
        TimeFrame {
            vars: self.vars.iter().map(|v| v.value()).collect(),
            maps: self.maps.iter().map(map_values).collect(),
        }
    }
}

fn map_values<S: Scalar>(m: &MonotoneMap<S>) -> MonotoneMap<f64> {
    let v = |xs: &[S]| xs.iter().map(|x| x.value()).collect::<Vec<f64>>();
    MonotoneMap {
        blocks: m
            .blocks
            .iter()
            .map(|b| BlockMap {
                shift: b.shift.value(),
                scale: b.scale.value(),
                amp: v(&b.amp),
                slope: v(&b.slope),
                offset: v(&b.offset),
            })
            .collect(),
    }
}

/// Flat coefficient order used for per-path leaves.
fn flatten_map<S: Scalar>(m: &MonotoneMap<S>, out: &mut Vec<S>) {
    for b in &m.blocks {
        out.push(b.shift);
        out.push(b.scale);
        out.extend_from_slice(&b.amp);
        out.extend_from_slice(&b.slope);
        out.extend_from_slice(&b.offset);
    }
}

fn rebuild_map<S: Scalar>(template: &MonotoneMap<f64>, flat: &[S]) -> MonotoneMap<S> {
    let mut at = 0;
    let mut take = |n: usize| {
        let s = flat[at..at + n].to_vec();
        at += n;
        s
    };
    MonotoneMap {
        blocks: template
            .blocks
            .iter()
            .map(|b| {
                let j = b.amp.len();
                let head = take(2);
                BlockMap { shift: head[0], scale: head[1], amp: take(j), slope: take(j), offset: take(j) }
            })
            .collect(),
    }
}

/// NLL of one path given the per-time frame. `numeric` supplies the
/// solver-side values (inverse and derivative constants).
fn path_nll_generic<S: Scalar>(numeric: &TimeFrame<f64>, vars: &[S], maps: &[MonotoneMap<S>], x: &[f64]) -> Result<S> {
    let mut prev: Option<S> = None;
    let mut total: Option<S> = None;
    for i in 0..x.len() {
        let w_star = numeric.maps[i].inverse(x[i])?;
        let slope = numeric.maps[i].derivative(w_star);
        let anchor = vars[i].lift(w_star);
        let resid = maps[i].forward(anchor) - x[i];
        let w = resid * (-1.0 / slope) + w_star;
        let dw = match prev {
            None => w,
            Some(p) => w - p,
        };
        let ll = gauss_logpdf(dw, vars[i]) - maps[i].log_abs_deriv(w);
        total = Some(match total {
            None => -ll,
            Some(t) => t - ll,
        });
        prev = Some(w);
    }
    let nll = total.ok_or_else(|| Error::InvalidInput("empty path".into()))?;
    if !nll.value().is_finite() {
        return Err(Error::Numeric(format!("non-finite path NLL {}", nll.value())));
    }
    Ok(nll)
}

/// Mean batch NLL as a differentiable objective over the flat parameter
/// vector of [`Model::to_store`].
pub struct TcnfObjective<'a> {
    pub time_change: TimeChangeConfig,
    pub flow: FlowConfig,
    pub grid: &'a TimeGrid,
    pub paths: Vec<&'a [f64]>,
    pub fault: Option<Fault>,
}

impl<'a> TcnfObjective<'a> {
    pub fn new(time_change: TimeChangeConfig, flow: FlowConfig, grid: &'a TimeGrid, paths: Vec<&'a [f64]>) -> Self {
        Self { time_change, flow, grid, paths, fault: None }
    }

    /// Injects a wrong partial into every tape this objective records.
    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    fn kind_and_split<'p, S: Scalar>(&self, params: &'p [S]) -> Result<(TimeChangeKind, Option<&'p [S]>, (usize, usize, f64), &'p [S])> {
        let flow_len = self.flow.n_params();
        match self.time_change {
            TimeChangeConfig::Mmgn { modules, width, eps_slope } => {
                let m = MmgnParams::flat_len(modules, width);
                if params.len() != m + flow_len {
                    return Err(self.len_error(params.len(), m + flow_len));
                }
                // the kind only selects the code path; its parameters are unused
                let kind = TimeChangeKind::Mmgn { params: MmgnParams::zeros(modules, width), eps_slope };
                Ok((kind, Some(&params[..m]), (modules, width, eps_slope), &params[m..]))
            }
            TimeChangeConfig::Identity => {
                if params.len() != flow_len {
                    return Err(self.len_error(params.len(), flow_len));
                }
                Ok((TimeChangeKind::Identity, None, (0, 0, 0.0), params))
            }
            TimeChangeConfig::ParametricExp { a } => {
                if params.len() != flow_len {
                    return Err(self.len_error(params.len(), flow_len));
                }
                Ok((TimeChangeKind::ParametricExp { a }, None, (0, 0, 0.0), params))
            }
        }
    }

    fn len_error(&self, got: usize, expected: usize) -> Error {
        Error::InvalidInput(format!("objective expects {expected} parameters, got {got}"))
    }

    /// Per-path NLLs at `params`.
    pub fn path_values(&self, params: &[f64]) -> Result<Vec<f64>> {
        let (kind, mm, shape, flow) = self.kind_and_split(params)?;
        let frame = TimeFrame::build(&kind, &self.flow, mm, shape, flow, self.grid)?;
        self.paths
            .iter()
            .map(|x| path_nll_generic(&frame, &frame.vars, &frame.maps, x))
            .collect()
    }
}

impl Objective for TcnfObjective<'_> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        let per_path = self.path_values(params)?;
        Ok(per_path.iter().sum::<f64>() / per_path.len() as f64)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        if self.paths.is_empty() {
            return Err(Error::InvalidInput("objective has no paths".into()));
        }
        let shared = Tape::with_fault(self.fault);
        let leaves = shared.vars(params);
        let (kind, mm, shape, flow) = self.kind_and_split(&leaves)?;
        let frame = TimeFrame::build(&kind, &self.flow, mm, shape, flow, self.grid)?;
        let numeric = frame.numeric();

        // shared outputs, in per-path leaf order: vars, then each map
        let mut outputs: Vec<Var<'_>> = frame.vars.clone();
        for m in &frame.maps {
            flatten_map(m, &mut outputs);
        }
        let mut leaf_values: Vec<f64> = numeric.vars.clone();
        for m in &numeric.maps {
            flatten_map(m, &mut leaf_values);
        }
        let n_times = self.grid.len();
        let per_map = (leaf_values.len() - n_times) / n_times;
        let weight = 1.0 / self.paths.len() as f64;
        let fault = self.fault;

        let per_path: Vec<Result<(f64, Vec<f64>)>> = self
            .paths
            .par_iter()
            .map_init(
                || Tape::with_fault(fault),
                |tape, x| {
                    tape.clear();
                    let inputs = tape.vars(&leaf_values);
                    let vars = &inputs[..n_times];
                    let maps: Vec<MonotoneMap<Var<'_>>> = (0..n_times)
                        .map(|i| {
                            let lo = n_times + i * per_map;
                            rebuild_map(&numeric.maps[i], &inputs[lo..lo + per_map])
                        })
                        .collect();
                    let nll = path_nll_generic(&numeric, vars, &maps, x)?;
                    let adj = tape.adjoints(&[(nll.index(), weight)]);
                    Ok((nll.value(), inputs.iter().map(|v| adj[v.index() as usize]).collect()))
                },
            )
            .collect();

        let mut total = 0.0;
        let mut seed_adj = vec![0.0; leaf_values.len()];
        for r in per_path {
            let (v, a) = r?;
            total += v;
            for (s, g) in seed_adj.iter_mut().zip(&a) {
                *s += g;
            }
        }
        let seeds: Vec<(u32, f64)> = outputs.iter().zip(&seed_adj).map(|(o, &a)| (o.index(), a)).collect();
        let adj = shared.adjoints(&seeds);
        let grad = leaves.iter().map(|v| adj[v.index() as usize]).collect();
        Ok((total / self.paths.len() as f64, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_process::conditional_logpdf;
    use crate::flow::BlockSpec;
    use crate::grad::{finite_diff_check, OpKind};
    use approx::assert_relative_eq;

    fn tiny_flow() -> FlowConfig {
        FlowConfig { blocks: 2, units: 3, hidden: 4 }
    }

    fn tiny_tc() -> TimeChangeConfig {
        TimeChangeConfig::Mmgn { modules: 2, width: 3, eps_slope: DEFAULT_EPS_SLOPE }
    }

    /// Model with non-trivial coefficients in every parameter group.
    fn perturbed(tc: TimeChangeConfig, seed: u64) -> Model {
        use rand::{Rng, SeedableRng};
        let mut m = Model::init(&tc, &FlowChoice::Neural(tiny_flow()), seed).unwrap();
        let mut store = m.to_store();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        for v in store.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        m = Model::from_store(&tc, &FlowChoice::Neural(tiny_flow()), &store).unwrap();
        m
    }

    #[test]
    fn identity_everything_is_brownian_nll() {
        let m = Model {
            time_change: TimeChangeKind::Identity,
            bijection: Bijection::Neural(FlowParams::identity(tiny_flow()).unwrap()),
        };
        let grid = TimeGrid::new(vec![0.3, 0.7, 1.0, 1.6]).unwrap();
        let x = [0.2, -0.4, 0.1, 0.9];
        let mut expected = 0.0;
        let mut prev = (0.0, 0.0);
        for (t, xi) in grid.times().iter().zip(&x) {
            expected -= conditional_logpdf(*xi, prev.1, t - prev.0).unwrap();
            prev = (*t, *xi);
        }
        assert!((m.path_nll(&grid, &x).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn affine_flow_single_observation() {
        let spec = BlockSpec { shift: 0.0, scale: 2.0, units: vec![] };
        let cfg = FlowConfig { blocks: 1, units: 1, hidden: 2 };
        let m = Model {
            time_change: TimeChangeKind::Identity,
            bijection: Bijection::Neural(FlowParams::constant(cfg, &[spec]).unwrap()),
        };
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let x1 = 0.8;
        let expected = -conditional_logpdf(x1 / 2.0, 0.0, 1.0).unwrap() + std::f64::consts::LN_2;
        assert_relative_eq!(m.path_nll(&grid, &[x1]).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn batch_is_mean_of_paths() {
        let m = perturbed(tiny_tc(), 1);
        let grid = TimeGrid::uniform(5, 1.5).unwrap();
        let paths = m.sample_paths(&grid, 6, 2).unwrap();
        let store = m.to_store();
        let obj = TcnfObjective::new(tiny_tc(), tiny_flow(), &grid, paths.iter().map(|p| p.as_slice()).collect());
        let mean = obj.value(store.values()).unwrap();
        let single: f64 = paths.iter().map(|p| m.path_nll(&grid, p).unwrap()).sum::<f64>() / 6.0;
        assert!((mean - single).abs() < 1e-12);
    }

    #[test]
    fn tape_value_matches_primal_bitwise() {
        let m = perturbed(tiny_tc(), 4);
        let grid = TimeGrid::uniform(4, 1.5).unwrap();
        let paths = m.sample_paths(&grid, 3, 5).unwrap();
        let obj = TcnfObjective::new(tiny_tc(), tiny_flow(), &grid, paths.iter().map(|p| p.as_slice()).collect());
        let p = m.to_store();
        let (v, _) = obj.value_and_grad(p.values()).unwrap();
        assert_eq!(v.to_bits(), obj.value(p.values()).unwrap().to_bits());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for tc in [tiny_tc(), TimeChangeConfig::Identity] {
            let m = perturbed(tc, 7);
            let grid = TimeGrid::new(vec![0.4, 1.1]).unwrap();
            let paths = m.sample_paths(&grid, 2, 8).unwrap();
            let obj = TcnfObjective::new(tc, tiny_flow(), &grid, paths.iter().map(|p| p.as_slice()).collect());
            let store = m.to_store();
            let err = finite_diff_check(&obj, &store, store.len(), 1e-5, 9).unwrap();
            assert!(err < 1e-4, "{tc:?}: {err}");
        }
    }

    #[test]
    fn corrupted_partial_is_detected() {
        let m = perturbed(tiny_tc(), 7);
        let grid = TimeGrid::new(vec![0.4, 1.1]).unwrap();
        let paths = m.sample_paths(&grid, 2, 8).unwrap();
        let store = m.to_store();
        let obj = TcnfObjective::new(tiny_tc(), tiny_flow(), &grid, paths.iter().map(|p| p.as_slice()).collect())
            .with_fault(Fault { kind: OpKind::Tanh, scale: 1.3 });
        let err = finite_diff_check(&obj, &store, store.len(), 1e-5, 9).unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn nll_depends_on_clock_through_increments_only() {
        let flow = FlowParams::init(tiny_flow(), 3).unwrap();
        let a = 0.8;
        let grid = TimeGrid::new(vec![0.2, 0.5, 1.3]).unwrap();
        let clock = TimeChangeKind::ParametricExp { a };
        let warped = TimeGrid::new(clock.phi_many(grid.times()).unwrap()).unwrap();
        let with_clock = Model { time_change: clock, bijection: Bijection::Neural(flow.clone()) };
        let plain = Model { time_change: TimeChangeKind::Identity, bijection: Bijection::Neural(flow) };
        let x = [0.3, -0.2, 1.4];
        assert_eq!(with_clock.path_nll(&grid, &x).unwrap(), plain.path_nll(&warped, &x).unwrap());
    }

    #[test]
    fn store_round_trip() {
        let m = perturbed(tiny_tc(), 2);
        let back = Model::from_store(&tiny_tc(), &FlowChoice::Neural(tiny_flow()), &m.to_store()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn oracle_density_matches_sde() {
        for spec in [SdeSpec::toy_ou(), SdeSpec::toy_ou_sqrt_t(), SdeSpec::toy_gbm()] {
            let m = Model::oracle(&spec);
            for &(x, t) in &[(0.4, 0.3), (1.1, 1.5), (0.9, 0.05)] {
                let a = m.density(x, t).unwrap();
                let b = crate::sde::oracle_density(&spec, x, t).unwrap();
                assert!((a - b).abs() < 1e-10 * b.max(1.0), "{spec:?} {x} {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn density_rejects_time_zero() {
        let m = Model::oracle(&SdeSpec::toy_ou());
        assert!(m.density(0.0, 0.0).is_err());
    }
}

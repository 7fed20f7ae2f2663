//! Admissible time-changes `phi`: positive, increasing, anchored at zero.
//!
//! The learned variant is a scalar monotone gradient network (M-MGN):
//!
//! ```text
//! z_k(t)   = W_k t + b_k
//! mmgn(t)  = a + (V'V) t + sum_k s_k(z_k) * (W_k' tanh(z_k))
//! s_k(z)   = sum_j log cosh(z_j)
//! phi(t)   = mmgn(t) - mmgn(0) + eps * t
//! ```
//!
//! `s_k >= 0` and `tanh' >= 0`, so every term of `mmgn'` is nonnegative and
//! `phi' >= eps > 0` holds for any parameter values.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{log_cosh, Scalar};

pub const DEFAULT_MODULES: usize = 3;
pub const DEFAULT_WIDTH: usize = 16;
pub const DEFAULT_EPS_SLOPE: f64 = 1e-4;

/// Parameters of a scalar M-MGN with `modules` blocks of hidden width `width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmgnParams {
    pub modules: usize,
    pub width: usize,
    pub a: f64,
    pub v: Vec<f64>,
    /// `modules` rows of `width` weights.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl MmgnParams {
    pub fn zeros(modules: usize, width: usize) -> Self {
        Self {
            modules,
            width,
            a: 0.0,
            v: vec![0.0; width],
            w: vec![vec![0.0; width]; modules],
            b: vec![vec![0.0; width]; modules],
        }
    }

    /// `W_k`, `V` uniform in `[-0.5, 0.5] / sqrt(width)`, `b_k = 0`, `a = 0`.
    pub fn init(modules: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (width as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-0.5..0.5) * scale).collect()
        };
        let v = draw(width);
        let w = (0..modules).map(|_| draw(width)).collect();
        Self { modules, width, a: 0.0, v, w, b: vec![vec![0.0; width]; modules] }
    }

    pub fn n_params(&self) -> usize {
        Self::flat_len(self.modules, self.width)
    }

    pub fn flat_len(modules: usize, width: usize) -> usize {
        1 + width + 2 * modules * width
    }

    /// Layout: `[a, V, W_1..W_K, b_1..b_K]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.push(self.a);
        out.extend_from_slice(&self.v);
        for row in &self.w {
            out.extend_from_slice(row);
        }
        for row in &self.b {
            out.extend_from_slice(row);
        }
        out
    }

    pub fn from_flat(modules: usize, width: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::flat_len(modules, width) {
            return Err(Error::InvalidInput(format!(
                "mmgn with K={modules}, l={width} needs {} values, got {}",
                Self::flat_len(modules, width),
                flat.len()
            )));
        }
        let v = flat[1..1 + width].to_vec();
        let wb = &flat[1 + width..];
        let rows = |base: usize| -> Vec<Vec<f64>> {
            (0..modules)
                .map(|k| wb[base + k * width..base + (k + 1) * width].to_vec())
                .collect()
        };
        Ok(Self { modules, width, a: flat[0], v, w: rows(0), b: rows(modules * width) })
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules != self.w.len()
            || self.modules != self.b.len()
            || self.v.len() != self.width
            || self.w.iter().chain(&self.b).any(|r| r.len() != self.width)
        {
            return Err(Error::InvalidInput("mmgn dimensions are inconsistent".into()));
        }
        let finite = self.a.is_finite()
            && self.v.iter().chain(self.w.iter().flatten()).chain(self.b.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidInput("mmgn parameters must be finite".into()));
        }
        Ok(())
    }
}

/// `mmgn(t)` over a flat parameter slice laid out as in [`MmgnParams::to_flat`].
pub fn mmgn_eval<S: Scalar>(flat: &[S], modules: usize, width: usize, t: f64) -> S {
    let v = &flat[1..1 + width];
    let w = &flat[1 + width..1 + width + modules * width];
    let b = &flat[1 + width + modules * width..];

    let mut vtv = v[0] * v[0];
    for vj in &v[1..] {
        vtv = vtv + *vj * *vj;
    }
    let mut out = flat[0] + vtv * t;
    for k in 0..modules {
        let wk = &w[k * width..(k + 1) * width];
        let bk = &b[k * width..(k + 1) * width];
        let mut s = None;
        let mut proj = None;
        for j in 0..width {
            let z = wk[j] * t + bk[j];
            let lc = z.log_cosh();
            let wt = wk[j] * z.tanh();
            s = Some(match s {
                None => lc,
                Some(acc) => acc + lc,
            });
            proj = Some(match proj {
                None => wt,
                Some(acc) => acc + wt,
            });
        }
        if let (Some(s), Some(proj)) = (s, proj) {
            out = out + s * proj;
        }
    }
    out
}

/// Anchored time-change over a flat M-MGN parameter slice.
pub fn mmgn_phi<S: Scalar>(flat: &[S], modules: usize, width: usize, eps_slope: f64, t: f64) -> S {
    (mmgn_eval(flat, modules, width, t) - mmgn_eval(flat, modules, width, 0.0)) + eps_slope * t
}

/// Evaluates the raw network output. Errors on non-finite input.
pub fn mmgn_forward(params: &MmgnParams, t: f64) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("t = {t}")));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("time-change evaluated at negative t = {t}")));
    }
    params.validate()?;
    Ok(mmgn_eval(&params.to_flat(), params.modules, params.width, t))
}

fn mmgn_slope(p: &MmgnParams, t: f64) -> f64 {
    let mut d: f64 = p.v.iter().map(|x| x * x).sum();
    for (wk, bk) in p.w.iter().zip(&p.b) {
        let mut s = 0.0;
        let mut proj = 0.0;
        let mut curv = 0.0;
        for (&w, &b) in wk.iter().zip(bk) {
            let z = w * t + b;
            let th = z.tanh();
            s += log_cosh(z);
            proj += w * th;
            curv += w * w * (1.0 - th * th);
        }
        d += proj * proj + s * curv;
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeChangeKind {
    /// `phi(t) = t`; the base process is plain Brownian motion.
    Identity,
    /// `phi(t) = exp(2 a t) - 1`, the clock of an OU process with rate `a`.
    ParametricExp { a: f64 },
    /// Learned M-MGN clock with a minimum slope `eps_slope`.
    Mmgn { params: MmgnParams, eps_slope: f64 },
}

impl TimeChangeKind {
    pub fn mmgn(params: MmgnParams) -> Self {
        TimeChangeKind::Mmgn { params, eps_slope: DEFAULT_EPS_SLOPE }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TimeChangeKind::Identity => Ok(()),
            TimeChangeKind::ParametricExp { a } => {
                if *a > 0.0 && a.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!("parametric exp rate must be > 0, got {a}")))
                }
            }
            TimeChangeKind::Mmgn { params, eps_slope } => {
                if !(*eps_slope > 0.0 && eps_slope.is_finite()) {
                    return Err(Error::InvalidInput(format!("eps_slope must be > 0, got {eps_slope}")));
                }
                params.validate()
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TimeChangeKind::Identity)
    }

    /// Time-change value at `t >= 0`.
    pub fn phi(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        self.validate()?;
        Ok(self.phi_unchecked(t))
    }

    pub(crate) fn phi_unchecked(&self, t: f64) -> f64 {
        match self {
            TimeChangeKind::Identity => t,
            TimeChangeKind::ParametricExp { a } => (2.0 * a * t).exp_m1(),
            TimeChangeKind::Mmgn { params, eps_slope } => {
                mmgn_phi(&params.to_flat(), params.modules, params.width, *eps_slope, t)
            }
        }
    }

    /// Analytic `phi'(t)`.
    pub fn phi_derivative(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        self.validate()?;
        Ok(match self {
            TimeChangeKind::Identity => 1.0,
            TimeChangeKind::ParametricExp { a } => 2.0 * a * (2.0 * a * t).exp(),
            TimeChangeKind::Mmgn { params, eps_slope } => mmgn_slope(params, t) + eps_slope,
        })
    }

    /// `phi` at each time, for a batch of times.
    pub fn phi_many(&self, ts: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        ts.iter()
            .map(|&t| {
                check_time(t)?;
                Ok(self.phi_unchecked(t))
            })
            .collect()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("t = {t}")));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("time-change evaluated at negative t = {t}")));
    }
    Ok(())
}

/// True iff `phi` is nonnegative and strictly increasing on a uniform grid of
/// `n_grid` points over `[0, t_max]`.
pub fn audit_monotone(kind: &TimeChangeKind, t_max: f64, n_grid: usize) -> Result<bool> {
    if n_grid < 2 {
        return Err(Error::InvalidInput("audit grid needs at least 2 points".into()));
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::InvalidInput(format!("t_max must be positive, got {t_max}")));
    }
    let step = t_max / (n_grid - 1) as f64;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..n_grid {
        let t = if i + 1 == n_grid { t_max } else { i as f64 * step };
        let v = match kind {
            // corrupted parameters still get audited, not rejected
            TimeChangeKind::Mmgn { params, eps_slope } if params.validate().is_ok() => {
                mmgn_phi(&params.to_flat(), params.modules, params.width, *eps_slope, t)
            }
            _ => kind.phi(t)?,
        };
        if !(v >= 0.0) || v <= prev {
            return Ok(false);
        }
        prev = v;
    }
    Ok(true)
}

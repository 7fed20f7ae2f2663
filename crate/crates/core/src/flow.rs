//! Time-indexed monotone bijection `f(., tau)`.
//!
//! A flow is a stack of blocks, each a strictly increasing scalar map
//!
//! ```text
//! y -> s * y + m + sum_j u_j * tanh(v_j * y + c_j)
//! s  = sum_j |u_j * v_j| + softplus(s_raw) + 1e-6
//! ```
//!
//! whose coefficients are produced from `(tau, log(1 + tau))` by a
//! one-hidden-layer tanh conditioner. The choice of `s` bounds the block
//! derivative below by `softplus(s_raw) + 1e-6`, and the affine term
//! dominates at both ends so every block is onto the real line.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{softplus_inv, Scalar};

pub const SCALE_FLOOR: f64 = 1e-6;
pub const MAX_DOUBLINGS: usize = 1000;
pub const INVERSE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    pub units: usize,
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { blocks: 4, units: 8, hidden: 32 }
    }
}

impl FlowConfig {
    /// Coefficients per block: shift, raw scale, then `units` each of
    /// amplitude, slope and offset.
    pub fn coeffs_per_block(&self) -> usize {
        2 + 3 * self.units
    }

    pub fn n_outputs(&self) -> usize {
        self.blocks * self.coeffs_per_block()
    }

    /// Conditioner layout: `[W1 (hidden x 2), b1, W2 (outputs x hidden), b2]`.
    pub fn n_params(&self) -> usize {
        3 * self.hidden + self.n_outputs() * (self.hidden + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 {
            return Err(Error::InvalidInput("flow needs at least one block and one hidden unit".into()));
        }
        Ok(())
    }
}

/// Raw coefficients of one block as emitted by the conditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlockCoeffs<S> {
    pub shift: S,
    pub raw_scale: S,
    pub amp: Vec<S>,
    pub slope: Vec<S>,
    pub offset: Vec<S>,
}

impl<S: Scalar> FlowBlockCoeffs<S> {
    fn from_slice(c: &[S], units: usize) -> Self {
        Self {
            shift: c[0],
            raw_scale: c[1],
            amp: c[2..2 + units].to_vec(),
            slope: c[2 + units..2 + 2 * units].to_vec(),
            offset: c[2 + 2 * units..2 + 3 * units].to_vec(),
        }
    }

    /// Resolves the effective scale.
    pub fn block(&self) -> BlockMap<S> {
        let mut scale = self.raw_scale.softplus() + SCALE_FLOOR;
        for (u, v) in self.amp.iter().zip(&self.slope) {
            scale = scale + (*u * *v).abs();
        }
        BlockMap {
            shift: self.shift,
            scale,
            amp: self.amp.clone(),
            slope: self.slope.clone(),
            offset: self.offset.clone(),
        }
    }
}

/// One block at a fixed time index, with its effective scale resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMap<S> {
    pub shift: S,
    pub scale: S,
    pub amp: Vec<S>,
    pub slope: Vec<S>,
    pub offset: Vec<S>,
}

impl<S: Scalar> BlockMap<S> {
    pub fn forward(&self, y: S) -> S {
        let mut out = self.scale * y + self.shift;
        for j in 0..self.amp.len() {
            out = out + self.amp[j] * (self.slope[j] * y + self.offset[j]).tanh();
        }
        out
    }

    pub fn derivative(&self, y: S) -> S {
        let mut d = self.scale;
        for j in 0..self.amp.len() {
            let th = (self.slope[j] * y + self.offset[j]).tanh();
            d = d + self.amp[j] * self.slope[j] * (-(th * th) + 1.0);
        }
        d
    }

    /// Forward value and `log f'(y)` sharing the tanh evaluations.
    pub fn forward_log_deriv(&self, y: S) -> (S, S) {
        let mut out = self.scale * y + self.shift;
        let mut d = self.scale;
        for j in 0..self.amp.len() {
            let th = (self.slope[j] * y + self.offset[j]).tanh();
            out = out + self.amp[j] * th;
            d = d + self.amp[j] * self.slope[j] * (-(th * th) + 1.0);
        }
        (out, d.ln())
    }
}

impl BlockMap<f64> {
    fn amp_bound(&self) -> f64 {
        self.amp.iter().map(|u| u.abs()).sum()
    }

    fn value_and_derivative(&self, y: f64) -> (f64, f64) {
        let mut out = self.scale * y + self.shift;
        let mut d = self.scale;
        for j in 0..self.amp.len() {
            let th = (self.slope[j] * y + self.offset[j]).tanh();
            out += self.amp[j] * th;
            d += self.amp[j] * self.slope[j] * (1.0 - th * th);
        }
        (out, d)
    }

    /// Solves `forward(y) = x`: geometric bracket expansion, then Newton
    /// steps that fall back to bisection whenever they leave the bracket.
    pub fn inverse(&self, x: f64) -> Result<f64> {
        let y0 = (x - self.shift) / self.scale;
        if !y0.is_finite() {
            return Err(Error::InversionFailure { x, tau: f64::NAN });
        }
        let mut lo = y0;
        let mut hi = y0;
        let mut step = 1.0f64.max(self.amp_bound() / self.scale);
        let mut doublings = 0;
        while self.forward(lo) > x {
            lo = y0 - step;
            step *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::InversionFailure { x, tau: f64::NAN });
            }
        }
        step = 1.0f64.max(self.amp_bound() / self.scale);
        while self.forward(hi) < x {
            hi = y0 + step;
            step *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::InversionFailure { x, tau: f64::NAN });
            }
        }

        let floor = 4.0 * f64::EPSILON * (x.abs() + self.shift.abs() + self.amp_bound());
        let mut y = y0.clamp(lo, hi);
        for _ in 0..200 {
            let (fy, dy) = self.value_and_derivative(y);
            let r = fy - x;
            if r == 0.0 {
                return Ok(y);
            }
            if r < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let newton = y - r / dy;
            let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (next - y).abs() <= f64::EPSILON * y.abs().max(1e-300) || hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()) {
                return Ok(next);
            }
            if r.abs() <= floor && (next - y).abs() <= 1e-15 * (1.0 + y.abs()) {
                return Ok(next);
            }
            y = next;
        }
        Ok(y)
    }
}

/// The bijection at one time index: blocks applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneMap<S> {
    pub blocks: Vec<BlockMap<S>>,
}

impl<S: Scalar> MonotoneMap<S> {
    pub fn forward(&self, w: S) -> S {
        self.blocks.iter().fold(w, |y, b| b.forward(y))
    }

    pub fn log_abs_deriv(&self, w: S) -> S {
        self.forward_log_deriv(w).1
    }

    pub fn forward_log_deriv(&self, w: S) -> (S, S) {
        let mut y = w;
        let mut total: Option<S> = None;
        for b in &self.blocks {
            let (next, ld) = b.forward_log_deriv(y);
            total = Some(match total {
                None => ld,
                Some(t) => t + ld,
            });
            y = next;
        }
        (y, total.unwrap_or_else(|| w.lift(0.0)))
    }

    /// `df/dw` as a plain product of block derivatives.
    pub fn derivative(&self, w: S) -> S {
        let mut y = w;
        let mut d = w.lift(1.0);
        for b in &self.blocks {
            d = d * b.derivative(y);
            y = b.forward(y);
        }
        d
    }
}

impl MonotoneMap<f64> {
    /// Forward pass reporting the first block that produced a non-finite value.
    pub fn forward_checked(&self, w: f64) -> Result<f64> {
        let mut y = w;
        for (i, b) in self.blocks.iter().enumerate() {
            y = b.forward(y);
            if !y.is_finite() {
                return Err(Error::FlowOverflow { block: i });
            }
        }
        Ok(y)
    }

    pub fn log_abs_deriv_checked(&self, w: f64) -> Result<f64> {
        let mut y = w;
        let mut total = 0.0;
        for (i, b) in self.blocks.iter().enumerate() {
            let (next, ld) = b.forward_log_deriv(y);
            if !next.is_finite() || !ld.is_finite() {
                return Err(Error::FlowOverflow { block: i });
            }
            total += ld;
            y = next;
        }
        Ok(total)
    }

    pub fn inverse(&self, x: f64) -> Result<f64> {
        let mut y = x;
        for b in self.blocks.iter().rev() {
            y = b.inverse(y)?;
        }
        Ok(y)
    }
}

/// Conditioner: `(tau, log(1 + tau))` through one tanh layer to every
/// block's raw coefficients.
pub fn conditioner_eval<S: Scalar>(cfg: &FlowConfig, flat: &[S], tau: S) -> Vec<S> {
    let h = cfg.hidden;
    let n_out = cfg.n_outputs();
    let w1 = &flat[..2 * h];
    let b1 = &flat[2 * h..3 * h];
    let w2 = &flat[3 * h..3 * h + n_out * h];
    let b2 = &flat[3 * h + n_out * h..];

    let log_tau = (tau + 1.0).ln();
    let hidden: Vec<S> = (0..h)
        .map(|i| (w1[2 * i] * tau + w1[2 * i + 1] * log_tau + b1[i]).tanh())
        .collect();
    (0..n_out)
        .map(|o| {
            let row = &w2[o * h..(o + 1) * h];
            let mut acc = b2[o];
            for (w, z) in row.iter().zip(&hidden) {
                acc = acc + *w * *z;
            }
            acc
        })
        .collect()
}

/// Builds the bijection at `tau` from a flat conditioner parameter slice.
pub fn map_from_flat<S: Scalar>(cfg: &FlowConfig, flat: &[S], tau: S) -> MonotoneMap<S> {
    let out = conditioner_eval(cfg, flat, tau);
    let per = cfg.coeffs_per_block();
    MonotoneMap {
        blocks: out
            .chunks(per)
            .map(|c| FlowBlockCoeffs::from_slice(c, cfg.units).block())
            .collect(),
    }
}

/// Hand-specified block used to build constant-in-time flows.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub shift: f64,
    pub scale: f64,
    /// `(amplitude, slope, offset)` per unit.
    pub units: Vec<(f64, f64, f64)>,
}

/// Learnable conditioner weights plus their shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub config: FlowConfig,
    pub weights: Vec<f64>,
}

impl FlowParams {
    fn offsets(cfg: &FlowConfig) -> (usize, usize) {
        let h = cfg.hidden;
        (3 * h, 3 * h + cfg.n_outputs() * h)
    }

    /// Output-layer biases reproducing `spec` with zero output weights.
    fn biases_for(cfg: &FlowConfig, specs: &[BlockSpec]) -> Result<Vec<f64>> {
        if specs.len() != cfg.blocks || specs.iter().any(|s| s.units.len() > cfg.units) {
            return Err(Error::InvalidInput("block specs do not fit the flow config".into()));
        }
        let mut b2 = Vec::with_capacity(cfg.n_outputs());
        for s in specs {
            let mut units = s.units.clone();
            units.resize(cfg.units, (0.0, 0.0, 0.0));
            let spread: f64 = units.iter().map(|(u, v, _)| (u * v).abs()).sum();
            let raw = s.scale - spread - SCALE_FLOOR;
            if !(raw > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "block scale {} must exceed sum |u v| + {SCALE_FLOOR}",
                    s.scale
                )));
            }
            b2.push(s.shift);
            b2.push(softplus_inv(raw));
            b2.extend(units.iter().map(|u| u.0));
            b2.extend(units.iter().map(|u| u.1));
            b2.extend(units.iter().map(|u| u.2));
        }
        Ok(b2)
    }

    /// A flow that ignores `tau` and applies the given blocks.
    pub fn constant(config: FlowConfig, specs: &[BlockSpec]) -> Result<Self> {
        config.validate()?;
        let b2 = Self::biases_for(&config, specs)?;
        let (_, b2_off) = Self::offsets(&config);
        let mut weights = vec![0.0; config.n_params()];
        weights[b2_off..].copy_from_slice(&b2);
        Ok(Self { config, weights })
    }

    /// `f(w, tau) = w` up to rounding in the scale.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        let spec = BlockSpec { shift: 0.0, scale: 1.0, units: vec![] };
        Self::constant(config, &vec![spec; config.blocks])
    }

    /// Near-identity start: hidden layer random, output weights small, and
    /// unit offsets spread over `[-2, 2]` so the saturating units see
    /// distinct regions of the input.
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let (b1_end, b2_off) = Self::offsets(&config);
        let mut weights = vec![0.0; config.n_params()];
        let s1 = 1.0 / 2f64.sqrt();
        for w in &mut weights[..b1_end] {
            *w = rng.random_range(-s1..s1);
        }
        let s2 = 0.05 / (h as f64).sqrt();
        for w in &mut weights[b1_end..b2_off] {
            *w = rng.random_range(-s2..s2);
        }
        let j = config.units;
        let units: Vec<(f64, f64, f64)> = (0..j)
            .map(|k| {
                let c = if j > 1 { -2.0 + 4.0 * k as f64 / (j - 1) as f64 } else { 0.0 };
                (0.0, 1.0, c)
            })
            .collect();
        let spec = BlockSpec { shift: 0.0, scale: 1.0, units };
        let b2 = Self::biases_for(&config, &vec![spec; config.blocks])?;
        weights[b2_off..].copy_from_slice(&b2);
        Ok(Self { config, weights })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.weights.len() != self.config.n_params() {
            return Err(Error::InvalidInput(format!(
                "flow expects {} weights, got {}",
                self.config.n_params(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("flow weights must be finite".into()));
        }
        Ok(())
    }

    pub fn map_at(&self, tau: f64) -> Result<MonotoneMap<f64>> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::InvalidInput(format!("flow time index tau = {tau}")));
        }
        Ok(map_from_flat(&self.config, &self.weights, tau))
    }

    pub fn forward(&self, w: f64, tau: f64) -> Result<f64> {
        finite(w)?;
        self.map_at(tau)?.forward_checked(w)
    }

    pub fn inverse(&self, x: f64, tau: f64) -> Result<f64> {
        finite(x)?;
        self.map_at(tau)?.inverse(x).map_err(|e| with_tau(e, tau))
    }

    pub fn log_abs_deriv(&self, w: f64, tau: f64) -> Result<f64> {
        finite(w)?;
        self.map_at(tau)?.log_abs_deriv_checked(w)
    }
}

fn finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite flow input {v}")))
    }
}

fn with_tau(e: Error, tau: f64) -> Error {
    match e {
        Error::InversionFailure { x, .. } => Error::InversionFailure { x, tau },
        other => other,
    }
}

/// Closed-form maps that turn the model into a known process exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleMap {
    /// OU solution on the clock `tau = exp(2 theta t) - 1`:
    /// `mu + (x0 - mu) g + sigma g w / sqrt(2 theta)`, `g = (1 + tau)^(-1/2)`.
    OuAffine { theta: f64, mu: f64, sigma: f64, x0: f64 },
    /// Marginal-exact map for OU with `sigma * sqrt(t)` diffusion on the
    /// identity clock: `m(t) + sqrt(v(t) / t) w`. Path law is not reproduced.
    OuSqrtTMarginal { theta: f64, mu: f64, sigma: f64, x0: f64 },
    /// GBM on the identity clock: `x0 exp((mu - sigma^2 / 2) tau + sigma w)`.
    GbmExp { mu: f64, sigma: f64, x0: f64 },
}

impl OracleMap {
    /// `(shift, scale)` for the affine variants.
    fn affine(&self, tau: f64) -> Option<(f64, f64)> {
        match *self {
            OracleMap::OuAffine { theta, mu, sigma, x0 } => {
                let g = 1.0 / (1.0 + tau).sqrt();
                Some((mu + (x0 - mu) * g, sigma * g / (2.0 * theta).sqrt()))
            }
            OracleMap::OuSqrtTMarginal { theta, mu, sigma, x0 } => {
                let var = crate::sde::ou_sqrt_t_variance(theta, sigma, tau);
                Some((mu + (x0 - mu) * (-theta * tau).exp(), (var / tau).sqrt()))
            }
            OracleMap::GbmExp { .. } => None,
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        match self {
            OracleMap::GbmExp { .. } => x > 0.0,
            _ => true,
        }
    }

    pub fn forward(&self, w: f64, tau: f64) -> f64 {
        match (*self, self.affine(tau)) {
            (_, Some((m, s))) => m + s * w,
            (OracleMap::GbmExp { mu, sigma, x0 }, None) => x0 * ((mu - 0.5 * sigma * sigma) * tau + sigma * w).exp(),
            _ => unreachable!(),
        }
    }

    pub fn inverse(&self, x: f64, tau: f64) -> Result<f64> {
        match (*self, self.affine(tau)) {
            (_, Some((m, s))) => Ok((x - m) / s),
            (OracleMap::GbmExp { mu, sigma, x0 }, None) => {
                if x <= 0.0 {
                    return Err(Error::Domain(format!("GBM map is onto (0, inf), got x = {x}")));
                }
                Ok(((x / x0).ln() - (mu - 0.5 * sigma * sigma) * tau) / sigma)
            }
            _ => unreachable!(),
        }
    }

    pub fn log_abs_deriv(&self, w: f64, tau: f64) -> f64 {
        match (*self, self.affine(tau)) {
            (_, Some((_, s))) => s.ln(),
            (OracleMap::GbmExp { sigma, .. }, None) => sigma.ln() + self.forward(w, tau).ln(),
            _ => unreachable!(),
        }
    }
}

/// The model's bijection: learned or closed-form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Bijection {
    Neural(FlowParams),
    Oracle(OracleMap),
}

/// A bijection frozen at one time index.
#[derive(Debug, Clone)]
pub enum FixedMap {
    Neural(MonotoneMap<f64>),
    Oracle(OracleMap, f64),
}

impl FixedMap {
    pub fn forward(&self, w: f64) -> Result<f64> {
        match self {
            FixedMap::Neural(m) => m.forward_checked(w),
            FixedMap::Oracle(o, tau) => Ok(o.forward(w, *tau)),
        }
    }

    pub fn inverse(&self, x: f64) -> Result<f64> {
        match self {
            FixedMap::Neural(m) => m.inverse(x),
            FixedMap::Oracle(o, tau) => o.inverse(x, *tau),
        }
    }

    pub fn log_abs_deriv(&self, w: f64) -> Result<f64> {
        match self {
            FixedMap::Neural(m) => m.log_abs_deriv_checked(w),
            FixedMap::Oracle(o, tau) => Ok(o.log_abs_deriv(w, *tau)),
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        match self {
            FixedMap::Neural(_) => true,
            FixedMap::Oracle(o, _) => o.in_support(x),
        }
    }
}

impl Bijection {
    pub fn at(&self, tau: f64) -> Result<FixedMap> {
        match self {
            Bijection::Neural(p) => Ok(FixedMap::Neural(p.map_at(tau)?)),
            Bijection::Oracle(o) => Ok(FixedMap::Oracle(*o, tau)),
        }
    }

    pub fn forward(&self, w: f64, tau: f64) -> Result<f64> {
        self.at(tau)?.forward(w)
    }

    pub fn inverse(&self, x: f64, tau: f64) -> Result<f64> {
        self.at(tau)?.inverse(x).map_err(|e| with_tau(e, tau))
    }

    pub fn log_abs_deriv(&self, w: f64, tau: f64) -> Result<f64> {
        self.at(tau)?.log_abs_deriv(w)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Bijection::Neural(p) => p.validate(),
            Bijection::Oracle(_) => Ok(()),
        }
    }
}

//! Minibatch Adam on the exact path NLL, with validation-based checkpoint
//! selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_process::TimeGrid;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::grad::{Objective, ParamStore};
use crate::model::{FlowChoice, Model, TcnfObjective, TimeChangeConfig};
use crate::sde::{PathSet, SdeSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub validation_fraction: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            epochs: 200,
            clip_norm: 10.0,
            validation_fraction: 0.1,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(format!("optimizer: {what}")));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub time_change: TimeChangeConfig,
    pub flow: FlowChoice,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tcnf()
    }
}

impl ModelConfig {
    /// Learned clock and default-size flow.
    pub fn tcnf() -> Self {
        Self {
            time_change: TimeChangeConfig::mmgn_default(),
            flow: FlowChoice::Neural(FlowConfig::default()),
            optimizer: OptimizerSettings::default(),
            seed: 0,
        }
    }

    /// Identity clock (CTFP) with the same flow.
    pub fn ctfp() -> Self {
        Self { time_change: TimeChangeConfig::Identity, ..Self::tcnf() }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        match self.time_change {
            TimeChangeConfig::Mmgn { modules, width, eps_slope } => {
                if modules == 0 || width == 0 {
                    return Err(Error::InvalidInput("mmgn needs modules > 0 and width > 0".into()));
                }
                if !(eps_slope > 0.0) || !eps_slope.is_finite() {
                    return Err(Error::InvalidInput(format!("eps_slope must be > 0, got {eps_slope}")));
                }
            }
            TimeChangeConfig::ParametricExp { a } if !(a > 0.0) || !a.is_finite() => {
                return Err(Error::InvalidInput(format!("parametric clock needs a > 0, got {a}")));
            }
            _ => {}
        }
        if let FlowChoice::Neural(f) = &self.flow {
            f.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], s: &OptimizerSettings) {
    state.step += 1;
    let c1 = 1.0 - s.beta1.powi(state.step as i32);
    let c2 = 1.0 - s.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = s.beta1 * state.m[i] + (1.0 - s.beta1) * g;
        state.v[i] = s.beta2 * state.v[i] + (1.0 - s.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
}

/// Rescales `g` so its Euclidean norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= k);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// Trained (or closed-form) model on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub grid: Option<TimeGrid>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn from_model(config: ModelConfig, model: &Model) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            params: model.to_store(),
            grid: None,
            history: Vec::new(),
            best_epoch: None,
        }
    }

    /// Closed-form model of a toy process; no training involved.
    pub fn oracle(spec: &SdeSpec) -> Self {
        let model = Model::oracle(spec);
        let time_change = match model.time_change {
            crate::time_change::TimeChangeKind::ParametricExp { a } => TimeChangeConfig::ParametricExp { a },
            _ => TimeChangeConfig::Identity,
        };
        let flow = match model.bijection {
            crate::flow::Bijection::Oracle(o) => FlowChoice::Oracle(o),
            crate::flow::Bijection::Neural(_) => unreachable!("oracle models are closed-form"),
        };
        let config = ModelConfig { time_change, flow, optimizer: OptimizerSettings::default(), seed: 0 };
        Self::from_model(config, &model)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_store(&self.config.time_change, &self.config.flow, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("format_version").and_then(|x| x.as_u64());
        match found {
            Some(f) if f == FORMAT_VERSION as u64 => {}
            Some(f) => return Err(Error::VersionMismatch { found: f as u32, expected: FORMAT_VERSION }),
            None => return Err(Error::InvalidInput("checkpoint has no format_version".into())),
        }
        let ck: Checkpoint = serde_json::from_value(v)?;
        ck.config.validate()?;
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Deterministic train/validation split of `n` paths.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001));
    let n_val = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).min(n - 1) };
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn mean_nll(model: &Model, grid: &TimeGrid, paths: &[Vec<f64>]) -> Result<f64> {
    let v = model.batch_nll(grid, paths)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains a neural model on `data`. Returns the checkpoint of the epoch with
/// the lowest validation NLL (training NLL when there is no validation set).
pub fn train(config: &ModelConfig, data: &PathSet) -> Result<Checkpoint> {
    train_with(config, data, |_| {})
}

/// [`train`] with a per-epoch callback.
pub fn train_with(config: &ModelConfig, data: &PathSet, on_epoch: impl FnMut(&EpochRecord)) -> Result<Checkpoint> {
    train_from(config, data, None, on_epoch)
}

/// Training that starts from `init` (same configuration) instead of a fresh
/// initialization.
pub fn train_from(
    config: &ModelConfig,
    data: &PathSet,
    init: Option<&ParamStore>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    let flow_cfg = match config.flow {
        FlowChoice::Neural(f) => f,
        FlowChoice::Oracle(_) => return Err(Error::InvalidInput("closed-form models have nothing to train".into())),
    };
    if data.n_paths() == 0 {
        return Err(Error::InvalidInput("no training paths".into()));
    }
    let opt = &config.optimizer;
    let grid = &data.grid;
    let template = match init {
        Some(p) => {
            Model::from_store(&config.time_change, &config.flow, p)?;
            let fresh = Model::init(&config.time_change, &config.flow, config.seed)?.to_store();
            if fresh.segments() != p.segments() {
                return Err(Error::InvalidInput("initial parameters do not match the model configuration".into()));
            }
            p.clone()
        }
        None => Model::init(&config.time_change, &config.flow, config.seed)?.to_store(),
    };
    let mut params = template.values().to_vec();
    let mut adam = AdamState::new(params.len());

    let (train_idx, val_idx) = split_indices(data.n_paths(), opt.validation_fraction, config.seed);
    let val_paths: Vec<Vec<f64>> = val_idx.iter().map(|&i| data.values[i].clone()).collect();
    let mut order = train_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a11));

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(opt.batch_size).enumerate() {
            let paths: Vec<&[f64]> = chunk.iter().map(|&i| data.values[i].as_slice()).collect();
            let obj = TcnfObjective::new(config.time_change, flow_cfg, grid, paths);
            let (loss, mut g) = match obj.value_and_grad(&params) {
                Ok(r) if r.0.is_finite() && r.1.iter().all(|x| x.is_finite()) => r,
                _ => return Err(non_finite(&obj, &params, chunk, b)),
            };
            clip_grad_norm(&mut g, opt.clip_norm);
            adam_step(&mut adam, &mut params, &g, opt);
            sum += loss * chunk.len() as f64;
        }
        let model = Model::from_store(&config.time_change, &config.flow, &template.with_values(params.clone())?)?;
        let train_nll = sum / order.len() as f64;
        let val_nll = if val_paths.is_empty() { train_nll } else { mean_nll(&model, grid, &val_paths)? };
        let rec = EpochRecord { epoch, train_nll, val_nll };
        on_epoch(&rec);
        history.push(rec);
        if val_nll.is_finite() && best.as_ref().is_none_or(|(v, _, _)| val_nll < *v) {
            best = Some((val_nll, epoch, params.clone()));
        }
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (Some(e), p),
        None => (None, params),
    };
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        config: *config,
        params: template.with_values(best_params)?,
        grid: Some(grid.clone()),
        history,
        best_epoch,
    })
}

/// Names the first path of a failing batch whose NLL cannot be evaluated.
fn non_finite(obj: &TcnfObjective<'_>, params: &[f64], chunk: &[usize], batch: usize) -> Error {
    let path = match obj.path_values(params) {
        Ok(v) => v.iter().position(|x| !x.is_finite()).map(|i| chunk[i]),
        Err(_) => chunk
            .iter()
            .zip(&obj.paths)
            .find(|(_, p)| {
                let single = TcnfObjective::new(obj.time_change, obj.flow, obj.grid, vec![p]);
                single.value(params).map_or(true, |v| !v.is_finite())
            })
            .map(|(&i, _)| i),
    };
    Error::NonFiniteLoss { batch, path: path.unwrap_or(chunk[0]) }
}

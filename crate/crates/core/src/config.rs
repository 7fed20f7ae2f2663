//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/ou"
//!
//! [data]
//! sde = "toy-ou"
//! n_paths = 2000
//!
//! [model.time_change]
//! kind = "mmgn"
//!
//! [model.optimizer]
//! epochs = 50
//!
//! [eval]
//! n_iterations = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::base_process::TimeGrid;
use crate::dataset;
use crate::error::{Error, Result};
use crate::metrics::EvalProtocol;
use crate::sde::{simulate_exact, PathMeta, PathSet, SdeSpec};
use crate::trainer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
}

/// Either a toy process (by name or with explicit parameters) or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sde: Option<String>,
    pub process: Option<SdeSpec>,
    pub csv: Option<PathBuf>,
    pub log_returns: bool,
    pub n_paths: usize,
    pub n_times: usize,
    pub t_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { sde: None, process: None, csv: None, log_returns: false, n_paths: 2000, n_times: 30, t_max: 1.5 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills derived fields so the result reproduces the run on its own:
    /// a named process becomes its full parameter set and the model seed
    /// follows the run seed.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(name) = self.data.sde.take() {
            if self.data.process.is_some() {
                return Err(Error::Config("give either data.sde or data.process, not both".into()));
            }
            self.data.process = Some(SdeSpec::by_name(&name).map_err(|e| Error::Config(e.to_string()))?);
        }
        match (&self.data.process, &self.data.csv) {
            (Some(_), Some(_)) => return Err(Error::Config("give either a process or a csv file, not both".into())),
            (None, None) => return Err(Error::Config("data needs sde, process or csv".into())),
            _ => {}
        }
        if let Some(p) = &self.data.process {
            p.validate()?;
            if self.data.n_paths == 0 || self.data.n_times == 0 || !(self.data.t_max > 0.0) {
                return Err(Error::Config("data needs n_paths > 0, n_times > 0 and t_max > 0".into()));
            }
            if self.data.log_returns {
                return Err(Error::Config("log_returns applies to csv data only".into()));
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a signed 64-bit integer", self.seed)));
        }
        self.model.seed = self.seed;
        self.model.validate()?;
        self.eval.validate()?;
        Ok(self)
    }

    /// Makes a relative CSV path relative to `base` instead.
    pub fn rebase(mut self, base: &Path) -> Self {
        if let Some(p) = &self.data.csv {
            if p.is_relative() {
                self.data.csv = Some(base.join(p));
            }
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads or simulates the training data. Relative CSV paths resolve
    /// against `base`.
    pub fn load_data(&self, base: &Path) -> Result<PathSet> {
        if let Some(spec) = &self.data.process {
            let grid = TimeGrid::uniform(self.data.n_times, self.data.t_max)?;
            let set = simulate_exact(spec, &grid, self.data.n_paths, self.seed)?;
            return PathSet::new(set.grid, set.values, PathMeta::Sde(*spec));
        }
        let path = self.data.csv.as_ref().ok_or_else(|| Error::Config("no data source".into()))?;
        let full = if path.is_absolute() { path.clone() } else { base.join(path) };
        let set = dataset::read_path(&full)?;
        if self.data.log_returns {
            dataset::log_returns(&set)
        } else {
            Ok(set)
        }
    }
}

//! Files written by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use spatial_dbcd::covkernel::MaternParams;
use spatial_dbcd::linalg::{Mat, Vector};
use spatial_dbcd::objective::{ModelParams, VariationalState};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub gamma: Vec<f64>,
    pub delta: f64,
    pub sigma: f64,
    pub beta: f64,
    pub nu: f64,
}

impl Estimate {
    pub fn from_params(p: &ModelParams) -> Self {
        Estimate {
            gamma: p.gamma.iter().copied().collect(),
            delta: p.delta,
            sigma: p.theta.sigma,
            beta: p.theta.beta,
            nu: p.theta.nu,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        let theta = MaternParams::new(self.sigma, self.beta, self.nu)?;
        Ok(ModelParams::new(Vector::from_vec(self.gamma.clone()), self.delta, theta)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `decentralized` or `centralized`.
    pub kind: String,
    pub machines: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub m: usize,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_log_rel_err: Option<f64>,
    pub gossip_rounds: u64,
    pub messages: u64,
    pub floats_sent: u64,
}

/// Variational moments of the knot-level latent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mu: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl Posterior {
    pub fn from_state(v: &VariationalState) -> Self {
        let cov = (0..v.sigma.nrows()).map(|i| v.sigma.row(i).iter().copied().collect()).collect();
        Posterior { mu: v.mu.iter().copied().collect(), cov }
    }

    pub fn to_state(&self) -> Result<VariationalState> {
        let m = self.mu.len();
        if self.cov.len() != m || self.cov.iter().any(|r| r.len() != m) {
            bail!("posterior covariance is not {m}×{m}");
        }
        let sigma = Mat::from_fn(m, m, |i, j| self.cov[i][j]);
        Ok(VariationalState::new(Vector::from_vec(self.mu.clone()), sigma)?)
    }
}

/// `fit.toml`: the estimate used downstream (machine 0's), every machine's
/// final parameters, machine 0's posterior moments and the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub summary: Summary,
    pub estimate: Estimate,
    pub machine: Vec<Estimate>,
    pub posterior: Posterior,
    pub config: ExperimentConfig,
}

impl FitReport {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            bail!("missing fit artifact {}: run `fit` or `fit-central` first", path.display());
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing fit report {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Serialize)]
struct ConfigSection<'a> {
    config: &'a ExperimentConfig,
}

/// The resolved configuration as a `[config]` table.
pub fn config_section(cfg: &ExperimentConfig) -> String {
    toml::to_string(&ConfigSection { config: cfg }).expect("configuration is serializable")
}

/// Output files staged under hidden names and renamed into place only when
/// the whole command has succeeded. Anything staged is deleted otherwise.
pub struct Outputs {
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), staged: Vec::new() })
    }

    /// A staging path for `name`; the caller writes the file there.
    pub fn stage(&mut self, name: &str) -> PathBuf {
        let tmp = self.dir.join(format!(".{name}.partial"));
        self.staged.push((tmp.clone(), self.dir.join(name)));
        tmp
    }

    pub fn text(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.stage(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let staged = std::mem::take(&mut self.staged);
        let mut done = Vec::with_capacity(staged.len());
        for (tmp, dest) in staged {
            fs::rename(&tmp, &dest).with_context(|| format!("moving {} into place", dest.display()))?;
            done.push(dest);
        }
        Ok(done)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
    }
}

//! Experiment configuration: built-in defaults, overridden by a flat TOML
//! file, overridden by command-line flags. The resolved value is written
//! next to every output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use spatial_dbcd::covkernel::MaternParams;
use spatial_dbcd::dbcd::{RunConfig, StepRule};
use spatial_dbcd::geo::{PartitionScheme, PartitionSpec, TrueModel};
use spatial_dbcd::objective::DerivMode;

/// Every key is optional in the file; missing keys take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Locations use `seed`, knots `seed + 1`, the simulated
    /// responses `seed + 2`, the partition `seed + 3` and the random graph
    /// `seed + 4`.
    pub seed: u64,

    /// Number of simulated observations (ignored when `input` is set).
    pub n: usize,
    /// Dataset CSV to read instead of simulating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub spacing: f64,
    pub jitter_frac: f64,
    /// Number of covariates; must equal the length of `gamma` when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    pub gamma: Vec<f64>,
    pub tau: f64,
    pub sigma: f64,
    pub beta: f64,
    pub nu: f64,

    /// Knot count, used when no knot file is available.
    pub m: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots: Option<PathBuf>,

    pub machines: usize,
    /// `random`, `area` or `random+neighbors`.
    pub partition: String,
    /// Neighbours per seed point for `random+neighbors`.
    pub neighbors: usize,
    /// `er:<p>` for an Erdős–Rényi graph, `complete`, or an edge-list file.
    pub topology: String,

    #[serde(rename = "T")]
    pub iterations: usize,
    #[serde(rename = "K")]
    pub rounds: usize,
    #[serde(rename = "S")]
    pub newton_steps: usize,
    pub newton_tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_tol: Option<f64>,
    pub init_iterations: usize,
    pub init_tol: f64,
    pub jitter: f64,
    /// `analytic` or `fd`.
    pub derivatives: String,

    pub level: f64,
    pub nu_candidates: Vec<f64>,
    /// Sites for `predict`; defaults to `<out_dir>/predict_sites.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predict_input: Option<PathBuf>,
    /// Fit report used by `predict` and `ci`; defaults to `<out_dir>/fit.toml`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<PathBuf>,

    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// `none` or `central`.
    pub reference: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        ExperimentConfig {
            seed: 1,
            n: 10_000,
            input: None,
            spacing: 0.02,
            jitter_frac: 0.4,
            p: None,
            gamma: vec![-1.0, 2.0, 3.0, -2.0, 1.0],
            tau: 2.0,
            sigma: 1.0,
            beta: 0.1,
            nu: 0.5,
            m: 100,
            knots: None,
            machines: 10,
            partition: "random".into(),
            neighbors: 9,
            topology: "er:0.5".into(),
            iterations: run.iterations,
            rounds: run.rounds,
            newton_steps: run.newton_steps,
            newton_tol: run.newton_tol,
            outer_tol: None,
            init_iterations: run.init_iterations,
            init_tol: run.init_tol,
            jitter: run.jitter,
            derivatives: "analytic".into(),
            level: 0.95,
            nu_candidates: (2..=9).map(|k| k as f64 / 10.0).collect(),
            predict_input: None,
            fit: None,
            out_dir: PathBuf::from("out"),
            workers: None,
            reference: "none".into(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub machines: Option<usize>,
    pub topology: Option<String>,
    pub rounds: Option<usize>,
    pub iterations: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub reference: Option<String>,
}

/// The network layout requested by `topology`.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    ErdosRenyi(f64),
    Complete,
    File(PathBuf),
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        let o = overrides.clone();
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.machines {
            cfg.machines = v;
        }
        if let Some(v) = o.topology {
            cfg.topology = v;
        }
        if let Some(v) = o.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = o.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = o.out_dir {
            cfg.out_dir = v;
        }
        if o.workers.is_some() {
            cfg.workers = o.workers;
        }
        if let Some(v) = o.reference {
            cfg.reference = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.p {
            if p != self.gamma.len() {
                bail!("p = {p} but gamma has {} entries", self.gamma.len());
            }
        }
        if self.machines == 0 {
            bail!("machines must be at least 1");
        }
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        if !matches!(self.reference.as_str(), "none" | "central") {
            bail!("reference must be `none` or `central`, got `{}`", self.reference);
        }
        self.partition_scheme()?;
        self.topology_spec()?;
        self.run_config()?.validate()?;
        self.true_model()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is serializable")
    }

    pub fn true_model(&self) -> Result<TrueModel> {
        let theta = MaternParams::new(self.sigma, self.beta, self.nu)?;
        Ok(TrueModel::new(self.gamma.clone(), self.tau, theta)?)
    }

    pub fn partition_scheme(&self) -> Result<PartitionScheme> {
        Ok(match self.partition.as_str() {
            "random" => PartitionScheme::Random,
            "area" | "area_based" => PartitionScheme::AreaBased,
            "random+neighbors" | "random_plus_neighbors" => PartitionScheme::RandomPlusNeighbors(self.neighbors),
            other => bail!("unknown partition scheme `{other}` (random, area, random+neighbors)"),
        })
    }

    pub fn partition_spec(&self) -> Result<PartitionSpec> {
        Ok(PartitionSpec { scheme: self.partition_scheme()?, machines: self.machines, seed: self.seed.wrapping_add(3) })
    }

    pub fn topology_spec(&self) -> Result<TopologySpec> {
        let t = self.topology.trim();
        if let Some(p) = t.strip_prefix("er:") {
            let p: f64 = p.parse().with_context(|| format!("bad edge probability in `{t}`"))?;
            if !(0.0..=1.0).contains(&p) {
                bail!("edge probability must lie in [0, 1], got {p}");
            }
            return Ok(TopologySpec::ErdosRenyi(p));
        }
        if t == "complete" {
            return Ok(TopologySpec::Complete);
        }
        if t.is_empty() {
            bail!("empty topology");
        }
        Ok(TopologySpec::File(PathBuf::from(t)))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let deriv_mode = match self.derivatives.as_str() {
            "analytic" => DerivMode::Analytic,
            "fd" => DerivMode::FiniteDifference,
            other => bail!("derivatives must be `analytic` or `fd`, got `{other}`"),
        };
        Ok(RunConfig {
            iterations: self.iterations,
            rounds: self.rounds,
            newton_steps: self.newton_steps,
            newton_tol: self.newton_tol,
            step: StepRule::default(),
            seed: self.seed,
            nu: self.nu,
            jitter: self.jitter,
            outer_tol: self.outer_tol,
            init_iterations: self.init_iterations,
            init_tol: self.init_tol,
            deriv_mode,
            ..RunConfig::default()
        })
    }

    pub fn fit_path(&self) -> PathBuf {
        self.fit.clone().unwrap_or_else(|| self.out_dir.join("fit.toml"))
    }
}

//! The subcommands. Each one stages its outputs and commits them only once
//! every step has succeeded.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use log::{info, warn};

use spatial_dbcd::dbcd::{run, Reference, RunOutput};
use spatial_dbcd::geo::{
    generate_n_locations, partition, read_dataset_csv, read_knots_csv, read_points_csv, simulate_dataset,
    write_dataset_csv, write_knots_csv, DatasetFile, KnotSet, SpatialDataset,
};
use spatial_dbcd::inference::{confidence_intervals, estimate_nu, estimate_variances, fit_centralized, predict_jittered, Assembly};
use spatial_dbcd::linalg::Vector;
use spatial_dbcd::network::{erdos_renyi, Network, Topology};
use spatial_dbcd::objective::ModelParams;
use spatial_dbcd::par::Execution;

use crate::artifacts::{config_section, Estimate, FitReport, Outputs, Posterior, Summary};
use crate::config::{ExperimentConfig, TopologySpec};

fn finish(cmd: &str, cfg: &ExperimentConfig, mut out: Outputs) -> Result<()> {
    out.text(&format!("{cmd}.config.toml"), &cfg.to_toml())?;
    for path in out.commit()? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let model = cfg.true_model()?;
    let locs = generate_n_locations(cfg.n, cfg.spacing, cfg.jitter_frac, cfg.seed)?;
    let knots = KnotSet::sample_from(&locs, cfg.m, cfg.seed.wrapping_add(1))?;
    let data = simulate_dataset(&locs, &knots, &model, model.gamma.len(), cfg.seed.wrapping_add(2))?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    write_dataset_csv(&out.stage("data.csv"), &DatasetFile::unassigned(data))?;
    write_knots_csv(&out.stage("knots.csv"), &knots)?;
    finish("gen-data", cfg, out)
}

/// The configured input, else the partitioned or raw dataset of an earlier
/// run in the output directory.
fn load_data(cfg: &ExperimentConfig) -> Result<DatasetFile> {
    let path = match &cfg.input {
        Some(p) => p.clone(),
        None => {
            let partitioned = cfg.out_dir.join("partitioned.csv");
            if partitioned.exists() {
                partitioned
            } else {
                cfg.out_dir.join("data.csv")
            }
        }
    };
    if !path.exists() {
        bail!("no dataset at {}: run `gen-data` first or set `input`", path.display());
    }
    info!("reading data from {}", path.display());
    Ok(read_dataset_csv(&path)?)
}

fn load_knots(cfg: &ExperimentConfig, data: &SpatialDataset) -> Result<KnotSet> {
    let path = cfg.knots.clone().unwrap_or_else(|| cfg.out_dir.join("knots.csv"));
    if path.exists() {
        return Ok(read_knots_csv(&path)?);
    }
    if cfg.knots.is_some() {
        bail!("knot file {} does not exist", path.display());
    }
    info!("no knot file; sampling {} knots from the data", cfg.m);
    Ok(KnotSet::sample_from(&data.locations, cfg.m, cfg.seed.wrapping_add(1))?)
}

/// Machine datasets: the file's own labels when they match the configured
/// machine count, a fresh partition otherwise.
fn machine_data(cfg: &ExperimentConfig, file: &DatasetFile) -> Result<Vec<SpatialDataset>> {
    if file.is_partitioned() {
        let parts = file.split()?;
        if parts.len() == cfg.machines {
            return Ok(parts);
        }
        warn!("dataset is split over {} machines but {} were requested; repartitioning", parts.len(), cfg.machines);
    }
    Ok(partition(&file.data, &cfg.partition_spec()?)?)
}

fn network(cfg: &ExperimentConfig, machines: usize) -> Result<Network> {
    let topo = match cfg.topology_spec()? {
        TopologySpec::ErdosRenyi(p) => erdos_renyi(machines, p, cfg.seed.wrapping_add(4))?,
        TopologySpec::Complete => Topology::complete(machines)?,
        TopologySpec::File(path) => Topology::read_edge_list(&path, Some(machines))?,
    };
    Network::new(topo, cfg.rounds, Execution::Parallel).context("building the communication network")
}

/// The configured true parameters, used to scale relative errors when they
/// match the data's shape.
fn error_scale(cfg: &ExperimentConfig, p: usize) -> Result<Option<ModelParams>> {
    let model = cfg.true_model()?;
    if model.gamma.len() != p || model.gamma.contains(&0.0) {
        return Ok(None);
    }
    Ok(Some(ModelParams::new(Vector::from_vec(model.gamma.clone()), model.delta(), model.theta)?))
}

fn report(kind: &str, cfg: &ExperimentConfig, out: &RunOutput, n: usize, m: usize) -> FitReport {
    let first = &out.states[0];
    FitReport {
        summary: Summary {
            kind: kind.into(),
            machines: out.states.len(),
            n,
            m,
            iterations: out.iterations,
            final_log_rel_err: out.trace.final_log_rel_err(),
            gossip_rounds: out.comm.rounds,
            messages: out.comm.messages,
            floats_sent: out.comm.floats,
        },
        estimate: Estimate::from_params(&first.params),
        machine: out.states.iter().map(|s| Estimate::from_params(&s.params)).collect(),
        posterior: Posterior::from_state(&first.v),
        config: cfg.clone(),
    }
}

fn write_fit(cmd: &str, cfg: &ExperimentConfig, kind: &str, out: &RunOutput, n: usize, m: usize) -> Result<()> {
    let mut files = Outputs::new(&cfg.out_dir)?;
    files.text("trace.csv", &out.trace.to_csv())?;
    files.text("fit.toml", &report(kind, cfg, out, n, m).to_toml()?)?;
    info!("{kind} fit finished after {} iterations", out.iterations);
    finish(cmd, cfg, files)
}

pub fn partition_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let file = load_data(cfg)?;
    let parts = partition(&file.data, &cfg.partition_spec()?)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    write_dataset_csv(&out.stage("partitioned.csv"), &DatasetFile::from_parts(&parts)?)?;
    finish("partition", cfg, out)
}

pub fn fit_central(cfg: &ExperimentConfig) -> Result<()> {
    let file = load_data(cfg)?;
    let knots = load_knots(cfg, &file.data)?;
    let out = fit_centralized(&file.data, &knots, &cfg.run_config()?)?;
    write_fit("fit", cfg, "centralized", &out, file.data.len(), knots.len())
}

pub fn fit(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.machines == 1 {
        return fit_central(cfg);
    }
    let file = load_data(cfg)?;
    let knots = load_knots(cfg, &file.data)?;
    let parts = machine_data(cfg, &file)?;
    let run_cfg = cfg.run_config()?;
    let central = if cfg.reference == "central" {
        info!("fitting the centralized reference");
        Some(fit_centralized(&file.data, &knots, &run_cfg)?.states[0].params.clone())
    } else {
        None
    };
    let scale = error_scale(cfg, file.data.n_covariates())?;
    let reference = central.as_ref().map(|estimate| Reference { estimate, scale: scale.as_ref().unwrap_or(estimate) });
    let mut net = network(cfg, parts.len())?;
    let out = run(&parts, &knots, &mut net, &run_cfg, reference)?;
    let n = parts.iter().map(SpatialDataset::len).sum();
    write_fit("fit", cfg, "decentralized", &out, n, knots.len())
}

pub fn predict_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let fit = FitReport::read(&cfg.fit_path())?;
    let params = fit.estimate.to_params()?;
    let v = fit.posterior.to_state()?;
    let knots_path = fit.config.knots.clone().unwrap_or_else(|| fit.config.out_dir.join("knots.csv"));
    let knots = match cfg.knots.clone().or(Some(knots_path)).filter(|p| p.exists()) {
        Some(p) => read_knots_csv(&p)?,
        None => bail!("the knot file used by the fit is missing"),
    };
    if knots.len() != v.mu.len() {
        bail!("fit report has {} latent dimensions but the knot file has {} knots", v.mu.len(), knots.len());
    }
    let sites: PathBuf = cfg.predict_input.clone().unwrap_or_else(|| cfg.out_dir.join("predict_sites.csv"));
    if !sites.exists() {
        bail!("no prediction sites at {}: set `predict_input`", sites.display());
    }
    let (locs, x) = read_points_csv(&sites)?;
    let pred = predict_jittered(&locs, &x, &knots, &params, &v, fit.config.jitter)?;
    let sd = pred.marginal_std();
    let mut csv = String::from("s1,s2,mean,std\n");
    for (i, l) in locs.iter().enumerate() {
        csv.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e}\n", l.coords[0], l.coords[1], pred.mean[i], sd[i]));
    }
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.text("predictions.csv", &csv)?;
    finish("predict", cfg, out)
}

pub fn ci(cfg: &ExperimentConfig) -> Result<()> {
    let fit = FitReport::read(&cfg.fit_path())?;
    let params = fit.estimate.to_params()?;
    let file = load_data(cfg)?;
    let knots = load_knots(cfg, &file.data)?;
    let parts = if fit.summary.machines > 1 { machine_data(cfg, &file)? } else { vec![file.data.clone()] };
    let vars = if parts.len() > 1 {
        let mut net = network(cfg, parts.len())?;
        estimate_variances(&parts, &knots, &params, fit.config.jitter, Assembly::Consensus(&mut net))?
    } else {
        estimate_variances(&parts, &knots, &params, fit.config.jitter, Assembly::Direct)?
    };
    let intervals = confidence_intervals(&vars, &params, file.data.len(), knots.len(), cfg.level)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.text("ci.toml", &format!("{}\n{}", intervals.to_report(), config_section(cfg)))?;
    finish("ci", cfg, out)
}

pub fn estimate_nu_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let file = load_data(cfg)?;
    let knots = load_knots(cfg, &file.data)?;
    let search = estimate_nu(&file.data, &knots, &cfg.nu_candidates, &cfg.run_config()?)?;
    let mut csv = String::from("nu,nll,iterations,status\n");
    for row in &search.table {
        match &row.outcome {
            Ok(f) => csv.push_str(&format!("{},{:.16e},{},ok\n", row.nu, f.nll, f.iterations)),
            Err(e) => csv.push_str(&format!("{},nan,0,\"failed: {}\"\n", row.nu, e.replace('"', "'"))),
        }
    }
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.text("nu.csv", &csv)?;
    out.text("nu.toml", &format!("nu_hat = {}\n\n{}", search.nu_hat, config_section(cfg)))?;
    finish("estimate-nu", cfg, out)
}

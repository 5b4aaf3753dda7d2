//! The simulation benchmark: recovery of the oracle effect clusters across
//! methods, noise levels and replications.
//!
//! Replication `r` draws its images and heterogeneity scores from
//! `(seed, r)`, so every method and noise level sees the same pool and the
//! same oracle. Outcome noise comes from `(seed, r, nu)` and each fit from
//! `(seed, method, nu, r)`.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimands::{cluster_recovery_r2, diff_in_means_ate, prediction_cluster_cate};
use crate::inference::{fit, fit_tarnet, scoring_pool, summarize, tarnet_predict, OptimizerKind, SamplingMode, TrainConfig};
use crate::models::arm::CnnArmConfig;
use crate::models::image_model::{ModelConfig, ModelKind};
use crate::rng::{derive_seed, tag};
use crate::sim::{simulate, SimConfig};
use crate::stats::{mean, sample_sd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClusterModel,
    DifferentialModel,
    TarnetPosthoc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ClusterModel, Method::DifferentialModel, Method::TarnetPosthoc];

    pub fn name(self) -> &'static str {
        match self {
            Self::ClusterModel => "cluster_model",
            Self::DifferentialModel => "differential_model",
            Self::TarnetPosthoc => "tarnet_posthoc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?} (expected cluster_model, differential_model or tarnet_posthoc)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub sim: SimConfig,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub arm: CnnArmConfig,
    pub train: TrainConfig,
    /// Fill the `wall_seconds` column (makes the CSV machine-dependent).
    pub timing: bool,
}

impl Default for BenchmarkConfig {
    /// Desk scale: narrower convolutions and a shorter Adam schedule than the
    /// library training defaults so the full grid runs in under an hour on
    /// one core.
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            methods: Method::ALL.to_vec(),
            replications: 10,
            arm: CnnArmConfig {
                filters_per_layer: 8,
                ..CnnArmConfig::default()
            },
            train: TrainConfig {
                mc_draws: 1,
                steps: 300,
                prefit_steps: 100,
                learning_rate: 0.01,
                optimizer: OptimizerKind::Adam,
                sampling: SamplingMode::Reparam,
                summary_draws: 8,
                ..TrainConfig::default()
            },
            timing: false,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.arm.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() || self.replications == 0 {
            return Err(Error::invalid("benchmark: need at least one method and one replication"));
        }
        Ok(())
    }
}

/// One benchmark cell. Diagnostics are `None` when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub nu: f64,
    pub replication: usize,
    pub k: usize,
    pub recovery_r2: Option<f64>,
    pub tau_hat: Option<Vec<f64>>,
    pub oracle_centers: Option<Vec<f64>>,
    pub implied_ate: Option<f64>,
    /// Posterior sd of the implied ATE (probabilistic models only).
    pub implied_ate_sd: Option<f64>,
    pub dim_ate: Option<f64>,
    pub dim_se: Option<f64>,
    pub elbo_final: Option<f64>,
    pub wall_seconds: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub nu: f64,
    pub completed: usize,
    pub failed: usize,
    pub mean_recovery_r2: Option<f64>,
    /// Standard error of the mean over replications.
    pub se_recovery_r2: Option<f64>,
    pub mean_implied_ate: Option<f64>,
    pub mean_dim_ate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResults {
    /// Canonical order: method, then nu in grid order, then replication.
    pub cells: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
}

pub const CSV_HEADER: &str = "method,nu,replication,K,recovery_r2,implied_ate,dim_ate,elbo_final,wall_seconds";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

impl BenchmarkResults {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.method.name(),
                c.nu,
                c.replication,
                c.k,
                opt(c.recovery_r2),
                opt(c.implied_ate),
                opt(c.dim_ate),
                opt(c.elbo_final),
                opt(c.wall_seconds)
            );
        }
        s
    }

    pub fn cell_summary(&self, method: Method, nu: f64) -> Option<&CellSummary> {
        self.summary.iter().find(|s| s.method == method && s.nu == nu)
    }
}

fn method_tag(m: Method) -> u64 {
    tag(m.name())
}

/// Seed of the fit in cell `(method, nu, replication)`.
pub fn cell_seed(master: u64, method: Method, nu: f64, replication: usize) -> u64 {
    derive_seed(master, &[tag("cell"), method_tag(method), nu.to_bits(), replication as u64])
}

/// Seed of replication `r`'s simulated pool.
pub fn replication_seed(master: u64, replication: usize) -> u64 {
    derive_seed(master, &[tag("replication"), replication as u64])
}

/// Runs one cell; failures come back as `Err` for the caller to record.
pub fn run_cell(config: &BenchmarkConfig, method: Method, nu: f64, replication: usize) -> Result<CellResult> {
    let start = Instant::now();
    let k = config.sim.k;
    let sim = simulate(&config.sim, nu, replication_seed(config.sim.seed, replication))?;
    let ds = &sim.dataset;
    let seed = cell_seed(config.sim.seed, method, nu, replication);
    let train = TrainConfig { seed, ..config.train.clone() };
    let (tau_hat, implied_ate, implied_ate_sd, elbo_final) = match method {
        Method::ClusterModel | Method::DifferentialModel => {
            let kind = if method == Method::ClusterModel {
                ModelKind::Cluster
            } else {
                ModelKind::Differential
            };
            let mc = ModelConfig {
                kind,
                k,
                arm: config.arm.clone(),
                shared_effect_trunk: false,
            };
            let post = fit(ds, &mc, &train)?;
            let s = summarize(&post, ds, train.summary_draws, derive_seed(seed, &[tag("summary")]))?;
            (s.tau_hat, s.implied_ate, Some(s.implied_ate_sd), Some(s.elbo_final))
        }
        Method::TarnetPosthoc => {
            let t = fit_tarnet(ds, &config.arm, &train)?;
            let out = tarnet_predict(&t.model, ds)?;
            let clusters = prediction_cluster_cate(&out.tau, k, derive_seed(seed, &[tag("posthoc")]))?;
            (clusters.centers, mean(&out.tau), None, None)
        }
    };
    let recovery = cluster_recovery_r2(&tau_hat, &sim.oracle.centers)?;
    Ok(CellResult {
        method,
        nu,
        replication,
        k,
        recovery_r2: Some(recovery),
        tau_hat: Some(tau_hat),
        oracle_centers: Some(sim.oracle.centers.clone()),
        implied_ate: Some(implied_ate),
        implied_ate_sd,
        dim_ate: Some(diff_in_means_ate(&ds.y, &ds.t)?),
        dim_se: Some(crate::estimands::diff_in_means_se(&ds.y, &ds.t)?),
        elbo_final,
        wall_seconds: config.timing.then(|| start.elapsed().as_secs_f64()),
        error: None,
    })
}

fn summarize_cells(cells: &[CellResult], methods: &[Method], nus: &[f64]) -> Vec<CellSummary> {
    let mut out = Vec::new();
    for &method in methods {
        for &nu in nus {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.method == method && c.nu == nu).collect();
            let ok: Vec<&CellResult> = group.iter().copied().filter(|c| c.error.is_none()).collect();
            let r2: Vec<f64> = ok.iter().filter_map(|c| c.recovery_r2).collect();
            let avg = |xs: Vec<f64>| (!xs.is_empty()).then(|| mean(&xs));
            out.push(CellSummary {
                method,
                nu,
                completed: ok.len(),
                failed: group.len() - ok.len(),
                mean_recovery_r2: avg(r2.clone()),
                se_recovery_r2: (r2.len() >= 2).then(|| sample_sd(&r2) / (r2.len() as f64).sqrt()),
                mean_implied_ate: avg(ok.iter().filter_map(|c| c.implied_ate).collect()),
                mean_dim_ate: avg(ok.iter().filter_map(|c| c.dim_ate).collect()),
            });
        }
    }
    out
}

/// Runs every `(method, nu, replication)` cell, in parallel up to
/// `HETFX_THREADS`, and reports them in canonical order. A failing cell is
/// logged and recorded; the rest still run.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResults> {
    config.validate()?;
    let nus = config.sim.nu_grid.clone();
    let mut keys = Vec::new();
    for &m in &config.methods {
        for &nu in &nus {
            for r in 0..config.replications {
                keys.push((m, nu, r));
            }
        }
    }
    let cells: Vec<CellResult> = scoring_pool()?.install(|| {
        keys.par_iter()
            .map(|&(method, nu, replication)| {
                let cell = run_cell(config, method, nu, replication);
                if let Ok(c) = &cell {
                    log::info!("benchmark cell {} nu={nu} rep={replication}: R2 {:?}", method.name(), c.recovery_r2);
                }
                cell.unwrap_or_else(|e| {
                    log::warn!("benchmark cell {} nu={nu} rep={replication} failed: {e}", method.name());
                    CellResult {
                        method,
                        nu,
                        replication,
                        k: config.sim.k,
                        recovery_r2: None,
                        tau_hat: None,
                        oracle_centers: None,
                        implied_ate: None,
                        implied_ate_sd: None,
                        dim_ate: None,
                        dim_se: None,
                        elbo_final: None,
                        wall_seconds: None,
                        error: Some(e.to_string()),
                    }
                })
            })
            .collect()
    });
    let summary = summarize_cells(&cells, &config.methods, &nus);
    Ok(BenchmarkResults { cells, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchmarkConfig {
        BenchmarkConfig {
            sim: SimConfig {
                n: 40,
                height: 8,
                width: 8,
                channels: 1,
                filter_size: 3,
                nu_grid: vec![0.01, 1.0],
                ..SimConfig::default()
            },
            replications: 2,
            arm: CnnArmConfig {
                conv_layers: 1,
                filter_size: 3,
                filters_per_layer: 2,
                head_dims: vec![4, 1],
                ..CnnArmConfig::default()
            },
            train: TrainConfig {
                steps: 10,
                prefit_steps: 5,
                batch_size: 10,
                ..BenchmarkConfig::default().train
            },
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn grid_is_complete_ordered_and_reproducible() {
        let c = tiny();
        let a = run_benchmark(&c).unwrap();
        assert_eq!(a.cells.len(), 3 * 2 * 2);
        let keys: Vec<(Method, f64, usize)> = a.cells.iter().map(|c| (c.method, c.nu, c.replication)).collect();
        assert_eq!(keys[0], (Method::ClusterModel, 0.01, 0));
        assert_eq!(keys[3], (Method::ClusterModel, 1.0, 1));
        assert_eq!(keys[11], (Method::TarnetPosthoc, 1.0, 1));
        assert!(a.cells.iter().all(|c| c.error.is_none()), "{:?}", a.cells.iter().find_map(|c| c.error.clone()));
        let b = run_benchmark(&c).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let csv = a.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.lines().skip(1).all(|l| l.ends_with(',') && l.split(',').count() == 9));
        assert_eq!(a.summary.len(), 6);
        assert_eq!(a.cell_summary(Method::TarnetPosthoc, 0.01).unwrap().completed, 2);
    }

    #[test]
    fn oracle_is_shared_across_methods_and_noise() {
        let c = tiny();
        let a = run_cell(&c, Method::TarnetPosthoc, 0.01, 1).unwrap();
        let b = run_cell(&c, Method::ClusterModel, 1.0, 1).unwrap();
        assert_eq!(a.oracle_centers, b.oracle_centers);
        assert_ne!(cell_seed(0, Method::ClusterModel, 0.01, 0), cell_seed(0, Method::ClusterModel, 0.01, 1));
        assert_ne!(cell_seed(0, Method::ClusterModel, 0.01, 0), cell_seed(0, Method::TarnetPosthoc, 0.01, 0));
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let mut c = tiny();
        c.sim.treat_prob = 1.0;
        c.methods = vec![Method::TarnetPosthoc];
        c.sim.nu_grid = vec![0.1];
        let r = run_benchmark(&c).unwrap();
        assert_eq!(r.cells.len(), 2);
        assert!(r.cells.iter().all(|c| c.error.is_some() && c.recovery_r2.is_none()));
        assert_eq!(r.summary[0].failed, 2);
        assert!(r.to_csv().lines().nth(1).unwrap().starts_with("tarnet_posthoc,0.1,0,2,,"));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("forest".parse::<Method>().is_err());
    }
}

//! Command-line surface.
//!
//! Every subcommand takes `--seed`, `--config`, `--out` and `--force`, writes
//! its outputs plus a `run.json` into `--out`, and is byte-reproducible for a
//! fixed seed. A `run.json` is itself accepted as `--config`, which replays the
//! recorded configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::benchmark::{run_benchmark, BenchmarkConfig};
use crate::dataset::TrialDataset;
use crate::error::{Error, Result};
use crate::estimands::{orthogonalize, CovariateSpec};
use crate::inference::{fit, fit_tarnet, score_images, scoring_pool, summarize, target_policy, tarnet_predict, PredictiveMode, TrainConfig};
use crate::io::{
    decode_artifact, encode_posterior, encode_tarnet, grid_csv, load_dataset, load_grid, predictions_csv, read_file, read_text, save_dataset, save_grid,
    score_grid, tarnet_csv, trace_csv, write_salience, Artifact, GridSpec, OutputDir, TauSummary,
};
use crate::models::image_model::{ImageModel, ModelConfig};
use crate::rng::{derive_seed, tag};
use crate::salience::{salience, SalienceMap, DEFAULT_SALIENCE_DRAWS};
use crate::sim::{simulate, synth_images, SimConfig};

#[derive(Parser, Debug)]
#[command(name = "hetfx", version, about = "Image-based treatment effect heterogeneity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master seed (overrides the config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config for the subcommand, or a run.json to replay.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a trial dataset from the image data-generating process.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Noise level; defaults to the first entry of the config's grid.
        #[arg(long)]
        nu: Option<f64>,
        /// Also write an out-of-sample tile grid, e.g. `4x4`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Fit a cluster, differential or TARNet model.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// cluster, differential or tarnet (overrides the config).
        #[arg(long)]
        kind: Option<String>,
        /// Number of image types (overrides the config).
        #[arg(long)]
        k: Option<usize>,
        /// Residualize outcomes on treatment and tabular covariates first.
        #[arg(long)]
        orthogonalize: bool,
    },
    /// Per-image predictive summaries from a fitted model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        draws: usize,
        /// effect_mean or unit_effect.
        #[arg(long, default_value = "effect_mean")]
        mode: String,
        /// Treat the top-`budget` units by predicted mean effect.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Salience maps per image and cluster.
    Salience {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// 1-based cluster; all clusters when omitted.
        #[arg(long)]
        cluster: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SALIENCE_DRAWS)]
        draws: usize,
        /// Comma-separated 0-based image indices; all images when omitted.
        #[arg(long)]
        images: Option<String>,
    },
    /// Run the simulation benchmark.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Replications per cell (overrides the config).
        #[arg(long)]
        replications: Option<usize>,
        /// Record wall-clock seconds per cell.
        #[arg(long)]
        timing: bool,
    },
    /// Score an out-of-sample tile grid.
    MapScore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Grid manifest.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value = "effect_mean")]
        mode: String,
    },
}

/// Model and training settings for `fit`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// `cluster`, `differential` or `tarnet`.
    pub kind: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Design used by `--orthogonalize`; defaults to every tabular column
    /// plus its interaction with treatment.
    pub covariates: Option<CovariateSpec>,
    pub orthogonalize: bool,
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    hetfx_run: &'a str,
    version: &'a str,
    command: &'a str,
    seed: u64,
    inputs: Vec<(String, String)>,
    config: &'a C,
    args: serde_json::Value,
    outputs: Vec<(String, String)>,
}

/// Reads a config file; a run.json contributes its recorded `config`.
fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let value: serde_json::Value = serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let value = match value.get("hetfx_run") {
        Some(_) => value.get("config").cloned().unwrap_or_default(),
        None => value,
    };
    serde_json::from_value(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Seed for the scoring commands: `--seed`, else the `seed` recorded in a
/// `--config` run.json or config file, else 0.
fn scoring_seed(common: &Common) -> Result<u64> {
    if let Some(s) = common.seed {
        return Ok(s);
    }
    let Some(path) = &common.config else { return Ok(0) };
    let value: serde_json::Value = serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    Ok(value.get("seed").and_then(|v| v.as_u64()).unwrap_or(0))
}

/// Input path with the checksum of its bytes.
fn input(path: &Path) -> Result<(String, String)> {
    Ok((path.display().to_string(), crate::io::sha256_hex(&read_file(path)?)))
}

fn finish<C: Serialize>(out: &mut OutputDir, command: &str, seed: u64, inputs: Vec<(String, String)>, config: &C, args: serde_json::Value) -> Result<()> {
    let record = RunRecord {
        hetfx_run: "1",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        inputs,
        config,
        args,
        outputs: out.written().to_vec(),
    };
    out.write_json("run.json", &record)?;
    Ok(())
}

fn parse_grid(spec: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("--grid expects ROWSxCOLS, got {spec:?}"));
    let (r, c) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let (r, c): (usize, usize) = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

fn cmd_simulate(common: &Common, nu: Option<f64>, grid: Option<&str>) -> Result<()> {
    let mut config: SimConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    config.validate()?;
    let nu = nu.unwrap_or(config.nu_grid[0]);
    if !(nu > 0.0) {
        return Err(Error::invalid("--nu must be positive"));
    }
    let sim = simulate(&config, nu, config.seed)?;
    let mut out = OutputDir::create(&common.out, common.force)?;
    save_dataset(&mut out, &sim.dataset)?;
    let mut truth = String::from("id,h,tau,eps,oracle_cluster\n");
    for i in 0..sim.dataset.len() {
        let _ = writeln!(
            truth,
            "{},{},{},{},{}",
            sim.dataset.ids[i],
            sim.h[i],
            sim.h_plus[i],
            sim.eps[i],
            sim.oracle.labels[i] + 1
        );
    }
    out.write("truth.csv", truth.as_bytes())?;
    out.write_json("oracle.json", &serde_json::json!({ "k": config.k, "centers": sim.oracle.centers, "nu": nu }))?;
    if let Some(g) = grid {
        let (rows, cols) = parse_grid(g)?;
        let n = rows * cols;
        let densities = vec![config.pattern_density; n];
        let images = synth_images(n, config.dims(), config.filter_size, &densities, derive_seed(config.seed, &[tag("grid")]))?;
        let images = images.into_iter().map(|v| f64::from(v as f32)).collect();
        let coords = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        save_grid(&mut out, &GridSpec::new(config.dims(), coords, images)?)?;
    }
    let args = serde_json::json!({ "nu": nu, "grid": grid });
    finish(&mut out, "simulate", config.seed, Vec::new(), &config, args)
}

fn cmd_fit(common: &Common, data: &Path, kind: Option<&str>, k: Option<usize>, ortho: bool) -> Result<()> {
    let mut config: FitConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.train.seed = s;
    }
    if let Some(kind) = kind {
        config.kind = Some(kind.to_string());
    }
    if let Some(k) = k {
        config.model.k = k;
    }
    config.orthogonalize |= ortho;
    let ortho = config.orthogonalize;
    let kind = config.kind.get_or_insert_with(|| "cluster".into()).clone();
    let raw = load_dataset(data)?;
    let (ds, ortho_fit): (TrialDataset, _) = if ortho {
        let spec = match (&config.covariates, &raw.tabular) {
            (Some(s), _) => s.clone(),
            (None, Some(tab)) => CovariateSpec::full(tab),
            (None, None) => CovariateSpec::default(),
        };
        let (d, f) = orthogonalize(&raw, &spec, None)?;
        (d, Some(f))
    } else {
        (raw, None)
    };
    let mut out = OutputDir::create(&common.out, common.force)?;
    if kind == "tarnet" {
        let t = fit_tarnet(&ds, &config.model.arm, &config.train)?;
        out.write("model.bin", &encode_tarnet(&t.model)?)?;
        let mut trace = String::from("step,mse\n");
        for (i, v) in t.trace.iter().enumerate() {
            let _ = writeln!(trace, "{i},{v}");
        }
        out.write("trace.csv", trace.as_bytes())?;
        let pred = tarnet_predict(&t.model, &ds)?;
        let clusters = crate::estimands::prediction_cluster_cate(&pred.tau, config.model.k, derive_seed(config.train.seed, &[tag("posthoc")]))?;
        out.write_json(
            "summary.json",
            &serde_json::json!({ "kind": "tarnet", "k": config.model.k, "tau_hat": clusters.centers, "mean_tau": crate::stats::mean(&pred.tau) }),
        )?;
    } else {
        config.model.kind = kind.parse()?;
        let post = fit(&ds, &config.model, &config.train)?;
        out.write("model.bin", &encode_posterior(&post)?)?;
        out.write("trace.csv", trace_csv(&post.trace).as_bytes())?;
        let s = summarize(&post, &ds, config.train.summary_draws, derive_seed(config.train.seed, &[tag("summary")]))?;
        out.write_json("summary.json", &s)?;
    }
    if let Some(f) = &ortho_fit {
        out.write_json(
            "orthogonalization.json",
            &serde_json::json!({ "columns": f.columns, "coefficients": f.coefficients }),
        )?;
    }
    finish(&mut out, "fit", config.train.seed, vec![input(data)?], &config, serde_json::Value::Null)
}

fn load_image_model(path: &Path) -> Result<Artifact> {
    decode_artifact(path, &read_file(path)?)
}

fn image_model(art: &Artifact, path: &Path) -> Result<ImageModel> {
    match art {
        Artifact::Image(p) => Ok(p.model.clone()),
        Artifact::Tarnet(_) => Err(Error::invalid(format!("{}: a TARNet artifact has no cluster probabilities", path.display()))),
    }
}

fn check_data_dims(model: &ImageModel, ds: &TrialDataset) -> Result<()> {
    if model.dims != ds.input_dims() {
        return Err(Error::invalid(format!(
            "dataset dims {:?} do not match the model's {:?}",
            ds.input_dims(),
            model.dims
        )));
    }
    Ok(())
}

fn cmd_predict(common: &Common, model_path: &Path, data: &Path, draws: usize, mode: &str, budget: Option<usize>) -> Result<()> {
    let seed = scoring_seed(common)?;
    let mode: PredictiveMode = mode.parse()?;
    let art = load_image_model(model_path)?;
    let ds = load_dataset(data)?;
    let mut out = OutputDir::create(&common.out, common.force)?;
    match &art {
        Artifact::Tarnet(t) => {
            let p = tarnet_predict(t, &ds)?;
            out.write("predictions.csv", tarnet_csv(&ds.ids, &p.y0, &p.y1, &p.tau).as_bytes())?;
        }
        Artifact::Image(post) => {
            check_data_dims(&post.model, &ds)?;
            let scored = score_images(&post.model, &ds.images, ds.tabular.as_ref().map(|t| t.values.as_slice()), draws, seed)?;
            out.write("predictions.csv", predictions_csv(&ds.ids, &scored, post.model.k(), mode).as_bytes())?;
            if let Some(b) = budget {
                let means: Vec<f64> = scored.iter().map(|d| TauSummary::from_draws(d.tau(mode)).mean).collect();
                let policy = target_policy(&means, b)?;
                let mut csv = String::from("id,tau_mean,treat\n");
                for i in 0..ds.len() {
                    let _ = writeln!(csv, "{},{},{}", ds.ids[i], means[i], policy[i]);
                }
                out.write("policy.csv", csv.as_bytes())?;
            }
        }
    }
    let args = serde_json::json!({ "draws": draws, "mode": mode, "budget": budget });
    finish(
        &mut out,
        "predict",
        seed,
        vec![input(model_path)?, input(data)?],
        &serde_json::Value::Null,
        args,
    )
}

fn parse_indices(spec: Option<&str>, n: usize) -> Result<Vec<usize>> {
    let Some(spec) = spec else { return Ok((0..n).collect()) };
    spec.split(',')
        .map(|s| {
            let i: usize = s.trim().parse().map_err(|_| Error::invalid(format!("--images: {s:?} is not an index")))?;
            if i >= n {
                return Err(Error::invalid(format!("--images: index {i} out of range for {n} images")));
            }
            Ok(i)
        })
        .collect()
}

fn cmd_salience(common: &Common, model_path: &Path, data: &Path, cluster: Option<usize>, draws: usize, images: Option<&str>) -> Result<()> {
    let seed = scoring_seed(common)?;
    let art = load_image_model(model_path)?;
    let model = image_model(&art, model_path)?;
    let ds = load_dataset(data)?;
    check_data_dims(&model, &ds)?;
    let idx = parse_indices(images, ds.len())?;
    let clusters: Vec<usize> = match cluster {
        Some(c) if c == 0 || c > model.k() => return Err(Error::invalid(format!("--cluster must lie in 1..={}", model.k()))),
        Some(c) => vec![c - 1],
        None => (0..model.k()).collect(),
    };
    let mut out = OutputDir::create(&common.out, common.force)?;
    for &k in &clusters {
        // Streams follow the original image index so subsets reproduce full runs.
        let maps: Vec<SalienceMap> = scoring_pool()?.install(|| {
            idx.par_iter()
                .map(|&i| {
                    salience(
                        &model,
                        ds.image(i),
                        ds.tabular.as_ref().map(|t| t.row(i)),
                        k,
                        draws,
                        derive_seed(seed, &[i as u64]),
                    )
                })
                .collect::<Result<_>>()
        })?;
        for (map, &i) in maps.iter().zip(&idx) {
            write_salience(&mut out, &format!("salience/image{i}_cluster{}", k + 1), &ds.ids[i], map)?;
        }
    }
    let args = serde_json::json!({ "draws": draws, "clusters": clusters.iter().map(|k| k + 1).collect::<Vec<_>>(), "images": idx });
    finish(
        &mut out,
        "salience",
        seed,
        vec![input(model_path)?, input(data)?],
        &serde_json::Value::Null,
        args,
    )
}

fn cmd_evaluate(common: &Common, replications: Option<usize>, timing: bool) -> Result<()> {
    let mut config: BenchmarkConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.sim.seed = s;
    }
    if let Some(r) = replications {
        config.replications = r;
    }
    config.timing |= timing;
    let results = run_benchmark(&config)?;
    let mut out = OutputDir::create(&common.out, common.force)?;
    out.write("benchmark.csv", results.to_csv().as_bytes())?;
    let mut results_json = results.clone();
    if !config.timing {
        results_json.cells.iter_mut().for_each(|c| c.wall_seconds = None);
    }
    out.write_json("benchmark_summary.json", &results_json)?;
    for s in &results.summary {
        log::info!(
            "{} nu={}: mean R2 {:?} (se {:?}), {} ok / {} failed",
            s.method.name(),
            s.nu,
            s.mean_recovery_r2,
            s.se_recovery_r2,
            s.completed,
            s.failed
        );
    }
    finish(&mut out, "evaluate", config.sim.seed, Vec::new(), &config, serde_json::Value::Null)
}

fn cmd_map_score(common: &Common, model_path: &Path, grid_path: &Path, draws: usize, mode: &str) -> Result<()> {
    let seed = scoring_seed(common)?;
    let mode: PredictiveMode = mode.parse()?;
    let art = load_image_model(model_path)?;
    let model = image_model(&art, model_path)?;
    let grid = load_grid(grid_path)?;
    let rows = score_grid(&model, &grid, draws, mode, seed)?;
    let mut out = OutputDir::create(&common.out, common.force)?;
    out.write("map_scores.csv", grid_csv(&rows, model.k()).as_bytes())?;
    let args = serde_json::json!({ "draws": draws, "mode": mode });
    finish(
        &mut out,
        "map-score",
        seed,
        vec![input(model_path)?, input(grid_path)?],
        &serde_json::Value::Null,
        args,
    )
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { common, nu, grid } => cmd_simulate(common, *nu, grid.as_deref()),
        Command::Fit {
            common,
            data,
            kind,
            k,
            orthogonalize,
        } => cmd_fit(common, data, kind.as_deref(), *k, *orthogonalize),
        Command::Predict {
            common,
            model,
            data,
            draws,
            mode,
            budget,
        } => cmd_predict(common, model, data, *draws, mode, *budget),
        Command::Salience {
            common,
            model,
            data,
            cluster,
            draws,
            images,
        } => cmd_salience(common, model, data, *cluster, *draws, images.as_deref()),
        Command::Evaluate { common, replications, timing } => cmd_evaluate(common, *replications, *timing),
        Command::MapScore {
            common,
            model,
            grid,
            draws,
            mode,
        } => cmd_map_score(common, model, grid, *draws, mode),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 for validation or runtime failures, 2 for usage errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            1
        }
    }
}

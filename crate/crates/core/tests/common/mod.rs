//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SIM_CONFIG: &str = r#"{"n": 40, "height": 12, "width": 12, "channels": 1, "filter_size": 3}"#;

pub const FIT_CONFIG: &str = r#"{
  "model": {"arm": {"conv_layers": 2, "filter_size": 3, "filters_per_layer": 3, "head_dims": [8, 1]}},
  "train": {"steps": 30, "prefit_steps": 10, "mc_draws": 1, "sampling": "reparam",
            "optimizer": "adam", "learning_rate": 0.01, "summary_draws": 4}
}"#;

/// Runs the CLI with `args` (without the program name), panicking on a
/// nonzero exit code.
pub fn run(args: &[&str]) {
    let code = run_code(args);
    assert_eq!(code, 0, "hetfx {} exited with {code}", args.join(" "));
}

pub fn run_code(args: &[&str]) -> i32 {
    hetfx::cli::run_cli(std::iter::once("hetfx").chain(args.iter().copied()))
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes the tiny simulation and fit configs into `dir`.
pub fn write_configs(dir: &Path) -> (PathBuf, PathBuf) {
    let sim = dir.join("sim.json");
    let fit = dir.join("fit.json");
    std::fs::write(&sim, SIM_CONFIG).unwrap();
    std::fs::write(&fit, FIT_CONFIG).unwrap();
    (sim, fit)
}

/// Relative path to file contents for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Every subcommand on the tiny fixture, writing one directory per command
/// under `root`. Inputs are read from `inputs`, so two pipelines sharing
/// `inputs` see identical input paths.
pub fn pipeline(inputs: &Path, root: &Path) {
    let (sim, fit) = write_configs(inputs);
    let data = inputs.join("sim");
    if !data.join("manifest.json").exists() {
        run(&["simulate", "--config", p(&sim), "--seed", "7", "--grid", "4x4", "--out", p(&data)]);
    }
    let manifest = data.join("manifest.json");
    let model = inputs.join("fit");
    if !model.join("model.bin").exists() {
        run(&["fit", "--config", p(&fit), "--data", p(&manifest), "--seed", "3", "--out", p(&model)]);
    }
    let model_bin = model.join("model.bin");
    let o = |name: &str| root.join(name);
    run(&["simulate", "--config", p(&sim), "--seed", "7", "--grid", "4x4", "--out", p(&o("simulate"))]);
    run(&["fit", "--config", p(&fit), "--data", p(&manifest), "--seed", "3", "--out", p(&o("fit"))]);
    run(&[
        "fit",
        "--config",
        p(&fit),
        "--kind",
        "tarnet",
        "--data",
        p(&manifest),
        "--seed",
        "3",
        "--out",
        p(&o("tarnet")),
    ]);
    run(&[
        "predict",
        "--model",
        p(&model_bin),
        "--data",
        p(&manifest),
        "--draws",
        "20",
        "--budget",
        "10",
        "--seed",
        "1",
        "--out",
        p(&o("predict")),
    ]);
    run(&[
        "salience",
        "--model",
        p(&model_bin),
        "--data",
        p(&manifest),
        "--cluster",
        "2",
        "--draws",
        "3",
        "--images",
        "0,5",
        "--seed",
        "1",
        "--out",
        p(&o("salience")),
    ]);
    run(&[
        "map-score",
        "--model",
        p(&model_bin),
        "--grid",
        p(&data.join("grid.json")),
        "--draws",
        "20",
        "--seed",
        "1",
        "--out",
        p(&o("map")),
    ]);
}

pub const BENCH_CONFIG: &str = r#"{
  "sim": {"n": 40, "height": 12, "width": 12, "channels": 1, "filter_size": 3, "nu_grid": [0.1]},
  "replications": 1,
  "arm": {"conv_layers": 2, "filter_size": 3, "filters_per_layer": 3, "head_dims": [8, 1]},
  "train": {"steps": 20, "prefit_steps": 10, "mc_draws": 1, "sampling": "reparam",
            "optimizer": "adam", "learning_rate": 0.01, "summary_draws": 4}
}"#;

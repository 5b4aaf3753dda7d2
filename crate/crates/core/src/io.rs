//! On-disk formats: datasets, scoring grids, model artifacts and run outputs.
//!
//! Images are flat little-endian `f32` in NHWC order next to a JSON manifest
//! that records dims and SHA-256 checksums. Model artifacts are a `u64` LE
//! header length, a JSON header, then raw `f64` LE parameter blocks in
//! declaration order. CSVs are plain comma-separated text without quoting.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ImageDims, Tabular, TrialDataset};
use crate::error::{Error, Result};
use crate::inference::{score_images, ImageDraws, Phase, Posterior, PredictiveMode, TraceRow, TrainConfig};
use crate::models::arm::{CnnArmConfig, InputDims};
use crate::models::image_model::{ImageModel, ModelConfig};
use crate::models::params::{BnRunning, ParamStore};
use crate::models::tarnet::TarnetModel;
use crate::salience::{raw_f64le, render_pgm16, SalienceMap};
use crate::stats::{mean, population_sd, quantile_sorted};
use crate::tensor::Tensor;
use crate::variational::GaussianPrior;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRID_FILE: &str = "grid.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Output directory that refuses to replace existing files unless forced and
/// remembers what it wrote.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    force: bool,
    written: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>, force: bool) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            force,
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if path.exists() && !self.force {
            return Err(Error::WouldOverwrite(path));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push((name.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// `(file name, sha256)` of everything written so far, in write order.
    pub fn written(&self) -> &[(String, String)] {
        &self.written
    }
}

/// Splits a headed CSV, checking the header and the field count of every row.
fn parse_csv<'a>(path: &Path, text: &'a str, expected_header: Option<&[&str]>) -> Result<(Vec<&'a str>, Vec<Vec<&'a str>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| format_err(path, "empty file"))?.split(',').map(str::trim).collect();
    if let Some(want) = expected_header {
        if header != want {
            return Err(format_err(path, format!("expected header {:?}, found {header:?}", want.join(","))));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.contains('"') {
            return Err(format_err(path, format!("row {i}: quoted fields are not supported")));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(format_err(path, format!("row {i}: expected {} fields, found {}", header.len(), fields.len())));
        }
        rows.push(fields);
    }
    Ok((header, rows))
}

fn parse_f64(path: &Path, row: usize, field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| format_err(path, format!("row {row}: {what} {field:?} is not a number")))
}

fn f32le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

fn f32le_values(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect()
}

/// Reads an f32 image file, checking its length before its checksum.
fn read_images(path: &Path, expected_values: usize, checksum: Option<&String>) -> Result<Vec<f64>> {
    let bytes = read_file(path)?;
    let expected = expected_values as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    verify(path, &bytes, checksum)?;
    Ok(f32le_values(&bytes))
}

fn verify(path: &Path, bytes: &[u8], checksum: Option<&String>) -> Result<()> {
    match checksum {
        Some(want) if *want == sha256_hex(bytes) => Ok(()),
        Some(_) => Err(Error::ChecksumMismatch { path: path.to_path_buf() }),
        None => Err(format_err(path, "no checksum recorded in the manifest")),
    }
}

fn check_layout(path: &Path, dtype: &str, layout: &str) -> Result<()> {
    if dtype != "f32le" || layout != "NHWC" {
        return Err(format_err(path, format!("unsupported image encoding {dtype}/{layout} (expected f32le/NHWC)")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub image_file: String,
    pub image_dtype: String,
    pub layout: String,
    /// CSV `id,y,t`.
    pub outcomes_file: String,
    /// CSV `id,<columns...>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabular_file: Option<String>,
    /// SHA-256 per file name.
    pub checksums: BTreeMap<String, String>,
}

/// Writes images, outcomes, optional tabular covariates (on their original
/// scale) and `manifest.json`. Image values are stored as `f32`.
pub fn save_dataset(out: &mut OutputDir, ds: &TrialDataset) -> Result<DatasetManifest> {
    ds.validate()?;
    let mut checksums = BTreeMap::new();
    let images = f32le_bytes(&ds.images);
    out.write("images.f32", &images)?;
    checksums.insert("images.f32".to_string(), sha256_hex(&images));
    let mut csv = String::from("id,y,t\n");
    for i in 0..ds.len() {
        let _ = writeln!(csv, "{},{},{}", ds.ids[i], ds.y[i], ds.t[i]);
    }
    out.write("outcomes.csv", csv.as_bytes())?;
    checksums.insert("outcomes.csv".to_string(), sha256_hex(csv.as_bytes()));
    let tabular_file = match &ds.tabular {
        Some(tab) => {
            let mut csv = format!("id,{}\n", tab.names.join(","));
            for i in 0..ds.len() {
                csv.push_str(&ds.ids[i]);
                for (v, tr) in tab.row(i).iter().zip(&tab.transform) {
                    let raw = if tr.sd > 0.0 { v * tr.sd + tr.mean } else { v + tr.mean };
                    let _ = write!(csv, ",{raw}");
                }
                csv.push('\n');
            }
            out.write("tabular.csv", csv.as_bytes())?;
            checksums.insert("tabular.csv".to_string(), sha256_hex(csv.as_bytes()));
            Some("tabular.csv".to_string())
        }
        None => None,
    };
    let manifest = DatasetManifest {
        n: ds.len(),
        height: ds.dims.height,
        width: ds.dims.width,
        channels: ds.dims.channels,
        image_file: "images.f32".into(),
        image_dtype: "f32le".into(),
        layout: "NHWC".into(),
        outcomes_file: "outcomes.csv".into(),
        tabular_file,
        checksums,
    };
    out.write_json(MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

/// Loads and validates a dataset; tabular columns are standardized with the
/// transform recorded.
pub fn load_dataset(manifest_path: &Path) -> Result<TrialDataset> {
    let manifest: DatasetManifest = serde_json::from_str(&read_text(manifest_path)?).map_err(|e| format_err(manifest_path, e.to_string()))?;
    check_layout(manifest_path, &manifest.image_dtype, &manifest.layout)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let dims = ImageDims {
        height: manifest.height,
        width: manifest.width,
        channels: manifest.channels,
    };
    let image_path = dir.join(&manifest.image_file);
    let images = read_images(&image_path, manifest.n * dims.pixels(), manifest.checksums.get(&manifest.image_file))?;

    let out_path = dir.join(&manifest.outcomes_file);
    let text = read_text(&out_path)?;
    verify(&out_path, text.as_bytes(), manifest.checksums.get(&manifest.outcomes_file))?;
    let (_, rows) = parse_csv(&out_path, &text, Some(&["id", "y", "t"]))?;
    if rows.len() != manifest.n {
        return Err(format_err(&out_path, format!("expected {} rows, found {}", manifest.n, rows.len())));
    }
    let mut ids = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    let mut t = Vec::with_capacity(rows.len());
    let mut seen = HashSet::new();
    for (row, f) in rows.iter().enumerate() {
        if !seen.insert(f[0]) {
            return Err(Error::DuplicateId(f[0].to_string()));
        }
        ids.push(f[0].to_string());
        y.push(parse_f64(&out_path, row, f[1], "outcome")?);
        t.push(match f[2] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::NonBinaryTreatment { row, value: other.to_string() }),
        });
    }

    let tabular = match &manifest.tabular_file {
        Some(name) => {
            let path = dir.join(name);
            let text = read_text(&path)?;
            verify(&path, text.as_bytes(), manifest.checksums.get(name))?;
            let (header, rows) = parse_csv(&path, &text, None)?;
            if header.first() != Some(&"id") || header.len() < 2 {
                return Err(format_err(&path, "header must be id followed by at least one column"));
            }
            if rows.len() != ids.len() {
                return Err(format_err(&path, format!("expected {} rows, found {}", ids.len(), rows.len())));
            }
            let mut values = Vec::with_capacity(rows.len() * (header.len() - 1));
            for (row, f) in rows.iter().enumerate() {
                if f[0] != ids[row] {
                    return Err(format_err(
                        &path,
                        format!("row {row}: id {:?} does not align with outcomes id {:?}", f[0], ids[row]),
                    ));
                }
                for (v, name) in f[1..].iter().zip(&header[1..]) {
                    values.push(parse_f64(&path, row, v, name)?);
                }
            }
            Some(Tabular::standardize(header[1..].iter().map(|s| s.to_string()).collect(), values)?)
        }
        None => None,
    };
    let ds = TrialDataset {
        dims,
        images,
        y,
        t,
        tabular,
        ids,
    };
    ds.validate()?;
    Ok(ds)
}

/// Out-of-sample tiles at grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: ImageDims,
    pub coords: Vec<(usize, usize)>,
    /// `n x H x W x C`, row-major.
    pub images: Vec<f64>,
}

impl GridSpec {
    pub fn new(dims: ImageDims, coords: Vec<(usize, usize)>, images: Vec<f64>) -> Result<Self> {
        if images.len() != coords.len() * dims.pixels() {
            return Err(Error::shape("grid", "tile values", coords.len() * dims.pixels(), images.len()));
        }
        let mut seen = HashSet::new();
        for c in &coords {
            if !seen.insert(*c) {
                return Err(Error::invalid(format!("grid: duplicate tile coordinate ({}, {})", c.0, c.1)));
            }
        }
        Ok(Self { dims, coords, images })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridManifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(row, col)` of each tile in file order.
    pub coords: Vec<(usize, usize)>,
    pub image_file: String,
    pub image_dtype: String,
    pub layout: String,
    pub checksums: BTreeMap<String, String>,
}

pub fn save_grid(out: &mut OutputDir, grid: &GridSpec) -> Result<GridManifest> {
    let bytes = f32le_bytes(&grid.images);
    out.write("grid.f32", &bytes)?;
    let manifest = GridManifest {
        height: grid.dims.height,
        width: grid.dims.width,
        channels: grid.dims.channels,
        coords: grid.coords.clone(),
        image_file: "grid.f32".into(),
        image_dtype: "f32le".into(),
        layout: "NHWC".into(),
        checksums: BTreeMap::from([("grid.f32".to_string(), sha256_hex(&bytes))]),
    };
    out.write_json(GRID_FILE, &manifest)?;
    Ok(manifest)
}

pub fn load_grid(path: &Path) -> Result<GridSpec> {
    let m: GridManifest = serde_json::from_str(&read_text(path)?).map_err(|e| format_err(path, e.to_string()))?;
    check_layout(path, &m.image_dtype, &m.layout)?;
    let dims = ImageDims {
        height: m.height,
        width: m.width,
        channels: m.channels,
    };
    let image_path = path.parent().unwrap_or(Path::new(".")).join(&m.image_file);
    let images = read_images(&image_path, m.coords.len() * dims.pixels(), m.checksums.get(&m.image_file))?;
    GridSpec::new(dims, m.coords, images)
}

/// Monte Carlo summary of predictive effect draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSummary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

impl TauSummary {
    pub fn from_draws(draws: &[f64]) -> Self {
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: mean(draws),
            sd: population_sd(draws),
            q05: quantile_sorted(&sorted, 0.05),
            q50: quantile_sorted(&sorted, 0.5),
            q95: quantile_sorted(&sorted, 0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub row: usize,
    pub col: usize,
    pub mean_prob: Vec<f64>,
    pub sd_prob: Vec<f64>,
    pub tau: TauSummary,
}

fn check_tile_dims(model: &ImageModel, dims: ImageDims, first: Option<(usize, usize)>) -> Result<()> {
    let m = model.dims;
    if (m.height, m.width, m.channels) != (dims.height, dims.width, dims.channels) {
        let (r, c) = first.unwrap_or((0, 0));
        return Err(Error::invalid(format!(
            "tile ({r}, {c}): dims {}x{}x{} do not match the model's {}x{}x{}",
            dims.height, dims.width, dims.channels, m.height, m.width, m.channels
        )));
    }
    if m.tabular != 0 {
        return Err(Error::invalid("grid scoring needs a model without tabular inputs"));
    }
    Ok(())
}

/// Cluster probability summaries and predictive effect quantiles per tile;
/// tile `i` uses the stream `(seed, i)`.
pub fn score_grid(model: &ImageModel, grid: &GridSpec, draws: usize, mode: PredictiveMode, seed: u64) -> Result<Vec<GridRow>> {
    if draws < 2 {
        return Err(Error::invalid("score_grid: draws must be at least 2"));
    }
    check_tile_dims(model, grid.dims, grid.coords.first().copied())?;
    let scored = score_images(model, &grid.images, None, draws, seed)?;
    Ok(grid
        .coords
        .iter()
        .zip(&scored)
        .map(|(&(row, col), d)| {
            let s = d.cluster_summary();
            GridRow {
                row,
                col,
                mean_prob: s.mean,
                sd_prob: s.sd,
                tau: TauSummary::from_draws(d.tau(mode)),
            }
        })
        .collect())
}

fn prob_header(k: usize) -> String {
    let means: Vec<String> = (1..=k).map(|z| format!("mean_prob_{z}")).collect();
    let sds: Vec<String> = (1..=k).map(|z| format!("sd_prob_{z}")).collect();
    format!("{},{}", means.join(","), sds.join(","))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn grid_csv(rows: &[GridRow], k: usize) -> String {
    let mut s = format!("row,col,{},tau_q05,tau_q50,tau_q95\n", prob_header(k));
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.row,
            r.col,
            join(&r.mean_prob),
            join(&r.sd_prob),
            r.tau.q05,
            r.tau.q50,
            r.tau.q95
        );
    }
    s
}

/// Per-image predictive summaries: cluster probabilities and effect draws.
pub fn predictions_csv(ids: &[String], draws: &[ImageDraws], k: usize, mode: PredictiveMode) -> String {
    let mut s = format!("id,{},tau_mean,tau_sd,tau_q05,tau_q50,tau_q95\n", prob_header(k));
    for (id, d) in ids.iter().zip(draws) {
        let c = d.cluster_summary();
        let t = TauSummary::from_draws(d.tau(mode));
        let _ = writeln!(s, "{id},{},{},{},{},{},{},{}", join(&c.mean), join(&c.sd), t.mean, t.sd, t.q05, t.q50, t.q95);
    }
    s
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,phase,elbo,loglik,kl\n");
    for r in trace {
        let phase = match r.phase {
            Phase::Prefit => "prefit",
            Phase::Vi => "vi",
        };
        let _ = writeln!(s, "{},{phase},{},{},{}", r.step, r.elbo, r.loglik, r.kl);
    }
    s
}

/// TARNet per-unit predictions.
pub fn tarnet_csv(ids: &[String], y0: &[f64], y1: &[f64], tau: &[f64]) -> String {
    let mut s = String::from("id,y0_hat,y1_hat,tau_hat\n");
    for i in 0..ids.len() {
        let _ = writeln!(s, "{},{},{},{}", ids[i], y0[i], y1[i], tau[i]);
    }
    s
}

/// Writes the raw map, its 16-bit rendering and a JSON sidecar for both the
/// direction and the magnitude of one image/cluster pair.
pub fn write_salience(out: &mut OutputDir, stem: &str, image_id: &str, map: &SalienceMap) -> Result<()> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        image_id: &'a str,
        kind: &'a str,
        height: usize,
        width: usize,
        cluster: usize,
        mc_draws: usize,
        seed: u64,
        dtype: &'a str,
        raw_file: String,
        pgm_file: String,
    }
    for (kind, values) in [("direction", &map.direction), ("magnitude", &map.magnitude)] {
        let base = format!("{stem}_{kind}");
        out.write(&format!("{base}.f64"), &raw_f64le(values))?;
        out.write(&format!("{base}.pgm"), &render_pgm16(values, map.height, map.width)?)?;
        out.write_json(
            &format!("{base}.json"),
            &Sidecar {
                image_id,
                kind,
                height: map.height,
                width: map.width,
                cluster: map.cluster + 1,
                mc_draws: map.mc_draws,
                seed: map.seed,
                dtype: "f64le",
                raw_file: format!("{base}.f64"),
                pgm_file: format!("{base}.pgm"),
            },
        )?;
    }
    Ok(())
}

const ARTIFACT_FORMAT: &str = "hetfx-model";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum ArtifactModel {
    Image {
        config: ModelConfig,
        dims: InputDims,
        train: TrainConfig,
        n_train: usize,
    },
    Tarnet {
        config: CnnArmConfig,
        dims: InputDims,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArtifactHeader {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: ArtifactModel,
    blocks: Vec<BlockSpec>,
}

/// A loaded model artifact.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    /// Fitted posterior; the training trace is not part of the artifact.
    Image(Posterior),
    Tarnet(TarnetModel),
}

fn collect_blocks(store: &ParamStore, running: &[BnRunning], priors: &[GaussianPrior]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = store
        .names()
        .iter()
        .zip(store.values())
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (i, p) in priors.iter().enumerate() {
        blocks.push((format!("prior.{i}.mean"), vec![p.mean.len()], p.mean.clone()));
        blocks.push((format!("prior.{i}.sigma"), vec![p.sigma.len()], p.sigma.clone()));
    }
    for (i, r) in running.iter().enumerate() {
        blocks.push((format!("bn.{i}.mean"), vec![r.mean.len()], r.mean.clone()));
        blocks.push((format!("bn.{i}.var"), vec![r.var.len()], r.var.clone()));
    }
    blocks
}

fn encode(model: ArtifactModel, blocks: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Vec<u8>> {
    let header = ArtifactHeader {
        format: ARTIFACT_FORMAT.into(),
        version: ARTIFACT_VERSION,
        model,
        blocks: blocks
            .iter()
            .map(|(n, s, _)| BlockSpec {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * blocks.iter().map(|b| b.2.len()).sum::<usize>());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &blocks {
        out.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

pub fn encode_posterior(post: &Posterior) -> Result<Vec<u8>> {
    let m = &post.model;
    encode(
        ArtifactModel::Image {
            config: m.config.clone(),
            dims: m.dims,
            train: post.train.clone(),
            n_train: post.n_train,
        },
        collect_blocks(&m.store, &m.running, &m.priors),
    )
}

pub fn encode_tarnet(model: &TarnetModel) -> Result<Vec<u8>> {
    encode(
        ArtifactModel::Tarnet {
            config: model.arm_config.clone(),
            dims: model.dims,
        },
        collect_blocks(&model.store, &model.running, &[]),
    )
}

/// Overwrites a freshly built model's parameters from `blocks`, checking
/// names and shapes against the rebuilt architecture.
fn restore(path: &Path, blocks: &[(BlockSpec, Vec<f64>)], store: &mut ParamStore, running: &mut [BnRunning], priors: &mut [GaussianPrior]) -> Result<()> {
    let expected = collect_blocks(store, running, priors);
    if expected.len() != blocks.len() {
        return Err(format_err(
            path,
            format!("expected {} parameter blocks, found {}", expected.len(), blocks.len()),
        ));
    }
    for ((name, shape, _), (spec, _)) in expected.iter().zip(blocks) {
        if *name != spec.name || *shape != spec.shape {
            return Err(format_err(
                path,
                format!("block {:?} {:?} does not match architecture block {name:?} {shape:?}", spec.name, spec.shape),
            ));
        }
    }
    let n_store = store.len();
    for (i, (spec, data)) in blocks.iter().take(n_store).enumerate() {
        *store.get_mut(i) = Tensor::new(spec.shape.clone(), data.clone())?;
    }
    let mut rest = blocks[n_store..].iter().map(|(_, d)| d.clone());
    for p in priors.iter_mut() {
        p.mean = rest.next().expect("checked count");
        p.sigma = rest.next().expect("checked count");
    }
    for r in running.iter_mut() {
        r.mean = rest.next().expect("checked count");
        r.var = rest.next().expect("checked count");
    }
    Ok(())
}

pub fn decode_artifact(path: &Path, bytes: &[u8]) -> Result<Artifact> {
    let short = || format_err(path, "truncated model artifact");
    let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes.get(8..8usize.checked_add(len).ok_or_else(short)?).ok_or_else(short)?;
    let header: ArtifactHeader = serde_json::from_slice(header_bytes).map_err(|e| format_err(path, e.to_string()))?;
    if header.format != ARTIFACT_FORMAT || header.version != ARTIFACT_VERSION {
        return Err(format_err(path, format!("unsupported artifact {} v{}", header.format, header.version)));
    }
    let mut body = &bytes[8 + len..];
    let total: usize = header.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
    if body.len() != total * 8 {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: (8 + len + total * 8) as u64,
            found: bytes.len() as u64,
        });
    }
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for spec in header.blocks {
        let n: usize = spec.shape.iter().product();
        let data = body[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        body = &body[n * 8..];
        blocks.push((spec, data));
    }
    match header.model {
        ArtifactModel::Image { config, dims, train, n_train } => {
            let mut model = ImageModel::new(config, dims, 0)?;
            let (store, running, priors) = (&mut model.store, &mut model.running, &mut model.priors);
            restore(path, &blocks, store, running, priors)?;
            Ok(Artifact::Image(Posterior {
                model,
                train,
                trace: Vec::new(),
                n_train,
            }))
        }
        ArtifactModel::Tarnet { config, dims } => {
            let mut model = TarnetModel::new(config, dims, 0)?;
            restore(path, &blocks, &mut model.store, &mut model.running, &mut [])?;
            Ok(Artifact::Tarnet(model))
        }
    }
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    decode_artifact(path, &read_file(path)?)
}

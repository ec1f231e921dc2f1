//! Band-selection sweeps: full-band, ten-band groups and single bands, each
//! evaluated over repeated stratified splits.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{calibrate, CalibrationError, CalibrationOptions, RefFrames};
use crate::cube_io::{self, CubeError, HyperCube};
use crate::nn::{mix_seed, Network, Params};
use crate::segmentation::{extract_seeds, SeedImage, SeedLabel, SegmentConfig, SegmentationError};
use crate::synthgen::{self, GenConfig, PretextConfig, SynthError};
use crate::transfer::{self, build_model, prepare_finetune, ModelConfig, TrainConfig, TrainHistory, TransferError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("invalid sweep config: {0}")]
    InvalidConfig(String),
    #[error("sample {index}: {message}")]
    Sample { index: usize, message: String },
    #[error(transparent)]
    Cube(#[from] CubeError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which bands a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "index")]
pub enum BandSelector {
    Full,
    /// Group `g` (1-based) covers bands `10(g-1)+1 ..= 10g`.
    Group(usize),
    /// One 1-based band.
    Single(usize),
}

pub const GROUP_WIDTH: usize = 10;
pub const GROUP_COUNT: usize = 25;
pub const SINGLE_BAND_STEP: usize = 5;

impl BandSelector {
    /// 1-based bands selected from a cube with `total` bands.
    pub fn bands(&self, total: usize) -> Result<Vec<usize>> {
        let v: Vec<usize> = match *self {
            BandSelector::Full => (1..=total).collect(),
            BandSelector::Group(g) => {
                if g == 0 {
                    return Err(ExperimentError::InvalidConfig("group indices start at 1".into()));
                }
                (GROUP_WIDTH * (g - 1) + 1..=GROUP_WIDTH * g).collect()
            }
            BandSelector::Single(b) => vec![b],
        };
        match v.iter().find(|&&b| b == 0 || b > total) {
            Some(b) => Err(ExperimentError::InvalidConfig(format!(
                "{self} needs band {b}, cube has {total}"
            ))),
            None => Ok(v),
        }
    }
}

impl fmt::Display for BandSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandSelector::Full => write!(f, "full"),
            BandSelector::Group(g) => write!(f, "group:{g}"),
            BandSelector::Single(b) => write!(f, "band:{b}"),
        }
    }
}

impl FromStr for BandSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "full" {
            return Ok(BandSelector::Full);
        }
        let (kind, idx) = s.split_once(':').ok_or_else(|| format!("bad selector {s:?}"))?;
        let idx: usize = idx.parse().map_err(|_| format!("bad index in {s:?}"))?;
        match kind {
            "group" => Ok(BandSelector::Group(idx)),
            "band" => Ok(BandSelector::Single(idx)),
            _ => Err(format!("bad selector kind {kind:?}")),
        }
    }
}

/// The 25 contiguous ten-band groups covering bands 1-250.
pub fn band_groups() -> Vec<BandSelector> {
    (1..=GROUP_COUNT).map(BandSelector::Group).collect()
}

/// Bands 5, 10, ..., 255.
pub fn single_band_schedule() -> Vec<BandSelector> {
    (1..=51).map(|i| BandSelector::Single(i * SINGLE_BAND_STEP)).collect()
}

/// Calibrated, segmented seeds with every band retained.
#[derive(Debug, Clone)]
pub struct SeedDataset {
    pub images: Vec<SeedImage>,
    pub labels: Vec<usize>,
    pub bands: usize,
    pub canvas: usize,
    pub wavelengths: Option<Vec<f64>>,
}

fn single_seed(index: usize, raw: &HyperCube, refs: &RefFrames, seg: &SegmentConfig) -> Result<SeedImage> {
    let refl = calibrate(raw, refs, CalibrationOptions::default())?;
    let bands: Vec<usize> = (1..=raw.header.bands).collect();
    let mut seeds = extract_seeds(&refl, seg, &bands)?;
    if seeds.len() != 1 {
        return Err(ExperimentError::Sample {
            index,
            message: format!("expected one seed, segmentation found {}", seeds.len()),
        });
    }
    Ok(seeds.remove(0))
}

impl SeedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn assemble(images: Vec<SeedImage>, labels: Vec<usize>, wavelengths: Option<Vec<f64>>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| ExperimentError::DegenerateDataset("no samples".into()))?;
        let (bands, canvas) = (first.channels(), first.canvas);
        Ok(SeedDataset {
            images,
            labels,
            bands,
            canvas,
            wavelengths,
        })
    }

    /// Generates, calibrates and segments a synthetic seed dataset. Each
    /// cube must yield exactly one seed.
    pub fn synthetic(cfg: &GenConfig, seg: &SegmentConfig) -> Result<Self> {
        cfg.validate()?;
        let refs = cfg.scene.reference_frames()?;
        let images = (0..cfg.n_samples())
            .into_par_iter()
            .map(|i| {
                let s = synthgen::generate_sample(cfg, &refs, i)?;
                let mut seed = single_seed(i, &s.raw, &refs, seg)?;
                seed.label = s.truth.label;
                Ok(seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = images
            .iter()
            .map(|s| s.label.class_index().expect("seed data is labeled"))
            .collect();
        Self::assemble(images, labels, Some(synthgen::band_wavelengths(cfg.scene.bands)))
    }

    /// Synthetic pretext shapes; labels are the pretext class ids.
    pub fn pretext(cfg: &PretextConfig, seg: &SegmentConfig) -> Result<Self> {
        cfg.validate()?;
        let refs = cfg.scene.reference_frames()?;
        let images = (0..cfg.n_samples())
            .into_par_iter()
            .map(|i| {
                let s = synthgen::generate_pretext_sample(cfg, &refs, i)?;
                single_seed(i, &s.raw, &refs, seg)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..cfg.n_samples()).map(|i| cfg.class_of(i)).collect();
        Self::assemble(images, labels, Some(synthgen::band_wavelengths(cfg.scene.bands)))
    }

    /// Reads a dataset directory written by the generator (or laid out the
    /// same way): `manifest.json`, reference frames and one cube per sample.
    pub fn load(dir: &Path, seg: &SegmentConfig) -> Result<Self> {
        let manifest = synthgen::read_manifest(dir)?;
        let refs = RefFrames::new(
            cube_io::load_cube(&dir.join(&manifest.dark))?,
            cube_io::load_cube(&dir.join(&manifest.white))?,
        )?;
        let images = manifest
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let raw = cube_io::load_cube(&dir.join(&e.file))?;
                let mut seed = single_seed(i, &raw, &refs, seg)?;
                seed.label = e.label;
                Ok(seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = match manifest.kind {
            synthgen::DatasetKind::Pretext => manifest.samples.iter().map(|e| e.signature_id).collect(),
            synthgen::DatasetKind::Seeds => manifest
                .samples
                .iter()
                .map(|e| {
                    e.label.class_index().ok_or_else(|| ExperimentError::Sample {
                        index: e.order_index,
                        message: format!("{} has no class label", e.id),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let wavelengths = refs.dark.header.wavelengths.clone();
        Self::assemble(images, labels, wavelengths)
    }

    /// Network inputs for `selector`, one CHW vector per sample.
    pub fn inputs(&self, selector: BandSelector) -> Result<Vec<Vec<f32>>> {
        let bands = selector.bands(self.bands)?;
        let n = self.canvas * self.canvas;
        Ok(self
            .images
            .iter()
            .map(|img| {
                let mut v = Vec::with_capacity(bands.len() * n);
                for &b in &bands {
                    v.extend_from_slice(img.channel(b - 1));
                }
                v
            })
            .collect())
    }

    /// Band-mean (panchromatic) single-channel images.
    pub fn panchromatic(&self) -> Vec<Vec<f32>> {
        let n = self.canvas * self.canvas;
        self.images
            .iter()
            .map(|img| {
                let mut acc = vec![0f64; n];
                for c in 0..img.channels() {
                    for (a, &v) in acc.iter_mut().zip(img.channel(c)) {
                        *a += v as f64;
                    }
                }
                acc.iter().map(|&a| (a / img.channels() as f64) as f32).collect()
            })
            .collect()
    }

    /// `"lo-hi"` wavelength range of a selector, or the single wavelength.
    pub fn wavelength_range(&self, selector: BandSelector) -> Result<String> {
        wavelength_range(self.wavelengths.as_deref(), self.bands, selector)
    }
}

/// Wavelength label for a selector: `"862.9-1704.2"` for a range, `"1249.1"`
/// for one band. Falls back to band numbers when no table is known.
pub fn wavelength_range(wavelengths: Option<&[f64]>, total: usize, selector: BandSelector) -> Result<String> {
    let bands = selector.bands(total)?;
    let (lo, hi) = (bands[0], *bands.last().expect("non-empty"));
    Ok(match wavelengths {
        Some(wl) if lo == hi => format!("{:.1}", wl[lo - 1]),
        Some(wl) => format!("{:.1}-{:.1}", wl[lo - 1], wl[hi - 1]),
        None if lo == hi => format!("band {lo}"),
        None => format!("bands {lo}-{hi}"),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified random split: each class sends `floor(test_fraction * size)`
/// of its members to the test set. Index lists are sorted.
pub fn split_dataset(labels: &[usize], rng_seed: u64, test_fraction: f64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ExperimentError::InvalidConfig(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    if members.iter().filter(|m| !m.is_empty()).count() < 2 {
        return Err(ExperimentError::DegenerateDataset(
            "split needs at least two classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut m in members {
        m.shuffle(&mut rng);
        let k = (test_fraction * m.len() as f64).floor() as usize;
        test.extend_from_slice(&m[..k]);
        train.extend_from_slice(&m[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Mean, extremes and sample standard deviation (`n - 1`; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub stddev: f64,
}

pub fn stats(values: &[f64]) -> Stats {
    assert!(!values.is_empty(), "statistics of an empty list");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let stddev = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stats { mean, max, min, stddev }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub selectors: Vec<BandSelector>,
    pub repeats: usize,
    pub base_seed: u64,
    pub test_fraction: f64,
    pub train: TrainConfig,
    /// Architecture used when no pretrained backbone is supplied.
    pub model: ModelConfig,
    /// Keep per-iteration histories in the report.
    pub keep_histories: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            selectors: vec![BandSelector::Full],
            repeats: 5,
            base_seed: 0,
            test_fraction: 0.4,
            train: TrainConfig::desk(),
            model: ModelConfig::desk(1, 2),
            keep_histories: true,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self, dataset_bands: usize) -> Result<()> {
        if self.repeats == 0 {
            return Err(ExperimentError::InvalidConfig("repeats must be at least 1".into()));
        }
        if self.selectors.is_empty() {
            return Err(ExperimentError::InvalidConfig("no selectors".into()));
        }
        for s in &self.selectors {
            s.bands(dataset_bands)?;
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn split_seed(&self, repeat: usize) -> u64 {
        self.base_seed.wrapping_add(repeat as u64)
    }
}

/// One trained-and-evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub selector: BandSelector,
    pub repeat: usize,
    pub split_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub test_accuracy: f64,
    pub iterations: usize,
    pub epochs: usize,
    pub stop_reason: transfer::StopReason,
    pub final_train_accuracy: f64,
    pub wall_time: f64,
    /// Input normalization the model expects, when standardization is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<transfer::BandScaler>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorSummary {
    pub selector: BandSelector,
    pub wavelength_range: String,
    /// Test accuracy per repeat, in repeat order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub stddev: f64,
    pub mean_iterations: f64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub repeats: usize,
    pub base_seed: u64,
    pub test_fraction: f64,
    pub stddev_convention: String,
    pub pretrained: bool,
    pub selectors: Vec<SelectorSummary>,
    pub runs: Vec<RunRecord>,
}

/// Network and weights a sweep starts from.
pub struct Backbone<'a> {
    pub net: &'a Network,
    pub params: &'a Params<f32>,
}

/// Trains one model on the training part of split `repeat` and scores it
/// on the held-out part. Returns the record with the trained model.
pub fn train_split(
    dataset: &SeedDataset,
    inputs: &[Vec<f32>],
    selector: BandSelector,
    repeat: usize,
    cfg: &SweepConfig,
    backbone: Option<&Backbone>,
) -> Result<(RunRecord, Network, Params<f32>)> {
    let split_seed = cfg.split_seed(repeat);
    let split = split_dataset(&dataset.labels, split_seed, cfg.test_fraction)?;
    let bands = selector.bands(dataset.bands)?.len();
    let head_seed = mix_seed(split_seed, 0x4ead);
    let (net, mut params) = match backbone {
        Some(b) => prepare_finetune(b.net, b.params, bands, 2, head_seed)?,
        None => build_model(&cfg.model.with_bands(bands).with_classes(2), head_seed)?,
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.rng_seed = mix_seed(cfg.train.rng_seed ^ split_seed, 0x7a19);
    let scaler = if cfg.train.standardize {
        let tr: Vec<&[f32]> = split.train.iter().map(|&i| inputs[i].as_slice()).collect();
        Some(transfer::BandScaler::fit(&tr, bands)?)
    } else {
        None
    };
    let scaled: Option<Vec<Vec<f32>>> = scaler.as_ref().map(|s| inputs.iter().map(|x| s.apply(x)).collect());
    let inputs = scaled.as_deref().unwrap_or(inputs);
    let pick = |idx: &[usize]| -> (Vec<&[f32]>, Vec<usize>) {
        (
            idx.iter().map(|&i| inputs[i].as_slice()).collect(),
            idx.iter().map(|&i| dataset.labels[i]).collect(),
        )
    };
    let (tr_x, tr_t) = pick(&split.train);
    let (te_x, te_t) = pick(&split.test);
    log::trace!(
        "{selector} repeat {repeat}: split seed {split_seed}, head seed {head_seed}, train seed {}",
        train_cfg.rng_seed
    );
    let history = transfer::train(&net, &mut params, &tr_x, &tr_t, &train_cfg)?;
    let test_accuracy = transfer::evaluate(&net, &params, &te_x, &te_t)?;
    log::info!(
        "{selector} repeat {repeat}: test {:.4} after {} iterations ({:.1}s)",
        test_accuracy,
        history.iterations_run,
        history.wall_time
    );
    let record = RunRecord {
        selector,
        repeat,
        split_seed,
        train_samples: split.train.len(),
        test_samples: split.test.len(),
        test_accuracy,
        iterations: history.iterations_run,
        epochs: history.epochs_run,
        stop_reason: history.stop_reason,
        final_train_accuracy: history.accuracies.last().copied().unwrap_or(0.0),
        wall_time: history.wall_time,
        scaler,
        history: cfg.keep_histories.then_some(history),
    };
    Ok((record, net, params))
}

/// Trains and evaluates every `(selector, repeat)` pair. Repeat `r` uses
/// split seed `base_seed + r` for every selector, so selectors are compared
/// on identical splits. Up to `jobs` runs execute at once; results do not
/// depend on `jobs`.
pub fn run_sweep(
    dataset: &SeedDataset,
    backbone: Option<&Backbone>,
    cfg: &SweepConfig,
    jobs: usize,
) -> Result<SweepReport> {
    cfg.validate(dataset.bands)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::InvalidConfig(format!("worker pool: {e}")))?;
    let mut runs = Vec::with_capacity(cfg.selectors.len() * cfg.repeats);
    for &selector in &cfg.selectors {
        let inputs = dataset.inputs(selector)?;
        let batch = pool.install(|| {
            (0..cfg.repeats)
                .into_par_iter()
                .map(|r| train_split(dataset, &inputs, selector, r, cfg, backbone).map(|(rec, _, _)| rec))
                .collect::<Result<Vec<_>>>()
        })?;
        runs.extend(batch);
    }
    let selectors = cfg
        .selectors
        .iter()
        .map(|&sel| {
            let rs: Vec<&RunRecord> = runs.iter().filter(|r| r.selector == sel).collect();
            let accuracies: Vec<f64> = rs.iter().map(|r| r.test_accuracy).collect();
            let st = stats(&accuracies);
            let k = rs.len() as f64;
            Ok(SelectorSummary {
                selector: sel,
                wavelength_range: dataset.wavelength_range(sel)?,
                mean: st.mean,
                max: st.max,
                stddev: st.stddev,
                mean_iterations: rs.iter().map(|r| r.iterations as f64).sum::<f64>() / k,
                mean_seconds: rs.iter().map(|r| r.wall_time).sum::<f64>() / k,
                accuracies,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        repeats: cfg.repeats,
        base_seed: cfg.base_seed,
        test_fraction: cfg.test_fraction,
        stddev_convention: "sample (n-1); 0 for a single repeat".into(),
        pretrained: backbone.is_some(),
        selectors,
        runs,
    })
}

/// One row of `summary.csv`. Every column is a deterministic function of
/// the configuration; wall time lives in `timing.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub selector: String,
    pub wavelength_range: String,
    pub mean_acc_pct: String,
    pub max_acc_pct: String,
    pub stddev_pct: String,
    pub mean_iterations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub selector: String,
    pub wavelength_range: String,
    pub mean_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub selector: String,
    pub wavelength_lo: f64,
    pub wavelength_hi: f64,
    pub mean_acc: f64,
    pub max_acc: f64,
    pub stddev: f64,
}

pub fn summarize(report: &SweepReport) -> Vec<SummaryRow> {
    report
        .selectors
        .iter()
        .map(|s| SummaryRow {
            selector: s.selector.to_string(),
            wavelength_range: s.wavelength_range.clone(),
            mean_acc_pct: format!("{:.2}", 100.0 * s.mean),
            max_acc_pct: format!("{:.2}", 100.0 * s.max),
            stddev_pct: format!("{:.2}", 100.0 * s.stddev),
            mean_iterations: format!("{:.1}", s.mean_iterations),
        })
        .collect()
}

pub fn timing_rows(report: &SweepReport) -> Vec<TimingRow> {
    report
        .selectors
        .iter()
        .map(|s| TimingRow {
            selector: s.selector.to_string(),
            wavelength_range: s.wavelength_range.clone(),
            mean_seconds: s.mean_seconds,
            total_seconds: report
                .runs
                .iter()
                .filter(|r| r.selector == s.selector)
                .map(|r| r.wall_time)
                .sum(),
        })
        .collect()
}

/// Plot series; a band without a wavelength table plots at its band number.
pub fn plot_rows(report: &SweepReport) -> Vec<PlotRow> {
    report
        .selectors
        .iter()
        .map(|s| {
            let parse = |t: &str| {
                t.trim_start_matches("bands ")
                    .trim_start_matches("band ")
                    .parse::<f64>()
                    .unwrap_or(f64::NAN)
            };
            let range = s.wavelength_range.trim_start_matches("bands ");
            let (lo, hi) = match range.split_once('-') {
                Some((a, b)) => (parse(a), parse(b)),
                None => (parse(range), parse(range)),
            };
            PlotRow {
                selector: s.selector.to_string(),
                wavelength_lo: lo,
                wavelength_hi: hi,
                mean_acc: s.mean,
                max_acc: s.max,
                stddev: s.stddev,
            }
        })
        .collect()
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const PLOT_FILE: &str = "plotdata.csv";

/// Writes `report.json` (without histories), `summary.csv`, `timing.csv`,
/// `plotdata.csv` and one `histories/<selector>_r<repeat>.json` per run.
pub fn write_report(report: &SweepReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let hist_dir = dir.join("histories");
    let mut slim = report.clone();
    for run in &mut slim.runs {
        if let Some(h) = run.history.take() {
            fs::create_dir_all(&hist_dir).map_err(io_err(&hist_dir))?;
            let name = format!("{}_r{}.json", run.selector.to_string().replace(':', "-"), run.repeat);
            let path = hist_dir.join(name);
            fs::write(&path, serde_json::to_string(&h)?).map_err(io_err(&path))?;
        }
    }
    let path = dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&slim)?).map_err(io_err(&path))?;
    write_derived(&slim, dir)
}

/// Regenerates the CSV outputs from a report.
pub fn write_derived(report: &SweepReport, dir: &Path) -> Result<()> {
    write_csv(&dir.join(SUMMARY_FILE), &summarize(report))?;
    write_csv(&dir.join(TIMING_FILE), &timing_rows(report))?;
    write_csv(&dir.join(PLOT_FILE), &plot_rows(report))
}

pub fn read_report(dir: &Path) -> Result<SweepReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Synthetic pretext data, model and schedule for backbone pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub pretext: PretextConfig,
    pub segment: SegmentConfig,
    /// Architecture; the band count is forced to 1 and the class count to
    /// the pretext class count.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            pretext: PretextConfig::default(),
            segment: SegmentConfig {
                band: 8,
                canvas: 64,
                ..SegmentConfig::default()
            },
            model: ModelConfig::desk(1, 2),
            train: TrainConfig::pretext(),
            init_seed: 11,
        }
    }
}

/// Pretrains a single-channel backbone on the band-mean images of a
/// pretext dataset.
pub fn pretrain_on(
    dataset: &SeedDataset,
    cfg: &PretrainConfig,
) -> Result<(Network, Params<f32>, transfer::PretrainReport)> {
    if cfg.model.input_canvas != dataset.canvas {
        return Err(ExperimentError::InvalidConfig(format!(
            "model canvas {} but pretext images are {} px",
            cfg.model.input_canvas, dataset.canvas
        )));
    }
    let pan = dataset.panchromatic();
    let xs: Vec<&[f32]> = pan.iter().map(|v| v.as_slice()).collect();
    log::trace!(
        "pretraining: init seed {}, schedule seed {}",
        cfg.init_seed,
        cfg.train.rng_seed
    );
    let out = transfer::pretrain_backbone(
        &cfg.model.with_bands(1),
        &xs,
        &dataset.labels,
        &cfg.train,
        cfg.init_seed,
    )?;
    log::info!(
        "pretext validation accuracy {:.4} after {} iterations",
        out.2.validation_accuracy,
        out.2.history.iterations_run
    );
    Ok(out)
}

/// Generates the pretext dataset described by `cfg` and pretrains on it.
pub fn pretrain(cfg: &PretrainConfig) -> Result<(Network, Params<f32>, transfer::PretrainReport)> {
    let dataset = SeedDataset::pretext(&cfg.pretext, &cfg.segment)?;
    pretrain_on(&dataset, cfg)
}

/// Label of a seed class index.
pub fn class_name(class: usize) -> SeedLabel {
    match class {
        0 => SeedLabel::Haploid,
        1 => SeedLabel::Diploid,
        _ => SeedLabel::Unknown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_first_250_bands() {
        let groups = band_groups();
        assert_eq!(groups.len(), 25);
        assert_eq!(groups[0].bands(256).unwrap(), (1..=10).collect::<Vec<_>>());
        assert_eq!(groups[24].bands(256).unwrap(), (241..=250).collect::<Vec<_>>());
        let mut all: Vec<usize> = groups.iter().flat_map(|g| g.bands(256).unwrap()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!((n, all), (250, (1..=250).collect::<Vec<_>>()));
        assert!(BandSelector::Group(26).bands(256).is_err());
        assert!(BandSelector::Group(25).bands(249).is_err());
    }

    #[test]
    fn single_band_schedule_multiples_of_five() {
        let s = single_band_schedule();
        assert_eq!(s.len(), 51);
        assert_eq!(s[0], BandSelector::Single(5));
        assert_eq!(s[50], BandSelector::Single(255));
        assert!(s.contains(&BandSelector::Single(115)) && s.contains(&BandSelector::Single(220)));
    }

    #[test]
    fn selector_text_round_trip() {
        for s in [BandSelector::Full, BandSelector::Group(3), BandSelector::Single(115)] {
            assert_eq!(s.to_string().parse::<BandSelector>().unwrap(), s);
        }
        assert!("group:x".parse::<BandSelector>().is_err());
        assert!("row:3".parse::<BandSelector>().is_err());
    }

    #[test]
    fn wavelength_labels() {
        let wl = cube_io::nir_camera_wavelengths();
        let r = |s| wavelength_range(Some(&wl), 256, s).unwrap();
        assert_eq!(r(BandSelector::Full), "862.9-1704.2");
        assert_eq!(r(BandSelector::Single(115)), "1249.1");
        assert_eq!(r(BandSelector::Single(220)), "1590.4");
        assert_eq!(r(BandSelector::Group(25)), format!("{:.1}-{:.1}", wl[240], wl[249]));
        assert_eq!(
            wavelength_range(None, 256, BandSelector::Group(2)).unwrap(),
            "bands 11-20"
        );
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let s = split_dataset(&labels, 3, 0.4).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (120, 80));
        assert_eq!(s.test.iter().filter(|&&i| labels[i] == 0).count(), 40);
        assert_eq!(split_dataset(&labels, 3, 0.4).unwrap(), s);
        assert_ne!(split_dataset(&labels, 4, 0.4).unwrap(), s);
        let small: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let s = split_dataset(&small, 0, 0.5).unwrap();
        assert_eq!(s.test.iter().filter(|&&i| small[i] == 1).count(), 5);
        assert!(matches!(
            split_dataset(&[0, 0, 0], 0, 0.4),
            Err(ExperimentError::DegenerateDataset(_))
        ));
        assert!(split_dataset(&labels, 0, 1.0).is_err());
    }

    #[test]
    fn statistics_by_hand() {
        let s = stats(&[0.9, 0.95, 1.0]);
        assert!((s.mean - 0.95).abs() < 1e-15);
        assert_eq!(s.max, 1.0);
        assert!((s.stddev - 0.05).abs() < 1e-15);
        assert_eq!(stats(&[0.7]).stddev, 0.0);
    }

    fn tiny_report() -> SweepReport {
        let sel = BandSelector::Single(115);
        SweepReport {
            repeats: 2,
            base_seed: 0,
            test_fraction: 0.4,
            stddev_convention: String::new(),
            pretrained: true,
            selectors: vec![SelectorSummary {
                selector: sel,
                wavelength_range: "1249.1".into(),
                accuracies: vec![0.9, 1.0],
                mean: 0.95,
                max: 1.0,
                stddev: 0.0707,
                mean_iterations: 55.0,
                mean_seconds: 1.5,
            }],
            runs: vec![],
        }
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let report = tiny_report();
        write_report(&report, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(
            summary,
            "selector,wavelength_range,mean_acc_pct,max_acc_pct,stddev_pct,mean_iterations\nband:115,1249.1,95.00,100.00,7.07,55.0\n"
        );
        let plot = fs::read_to_string(dir.path().join(PLOT_FILE)).unwrap();
        assert!(plot.ends_with("band:115,1249.1,1249.1,0.95,1.0,0.0707\n"), "{plot}");
        assert_eq!(read_report(dir.path()).unwrap(), report);
        let rows = plot_rows(&SweepReport {
            selectors: vec![SelectorSummary {
                selector: BandSelector::Full,
                wavelength_range: "862.9-1704.2".into(),
                ..report.selectors[0].clone()
            }],
            ..report
        });
        assert_eq!((rows[0].wavelength_lo, rows[0].wavelength_hi), (862.9, 1704.2));
    }
}

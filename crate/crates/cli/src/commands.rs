//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use hss_core::calibration::{
    calibrate as calibrate_cube, validate_references, CalibrationOptions, RefFrames, ReflectanceCube,
};
use hss_core::cube_io::{load_cube, save_cube};
use hss_core::experiments::{
    self, band_groups, pretrain_on, read_report, run_sweep, single_band_schedule, train_split, write_derived,
    write_report, Backbone, BandSelector, PretrainConfig, SeedDataset, SweepConfig, REPORT_FILE,
};
use hss_core::nn::{load_weights, save_weights, LoadOptions, Network, Params};
use hss_core::segmentation::{extract_seeds, segment as segment_cube, Roi, SegmentConfig};
use hss_core::synthgen::{read_manifest, write_dataset, write_pretext, GenConfig, PretextConfig, MANIFEST_FILE};
use hss_core::transfer::{build_network, ModelConfig, TrainConfig};

use crate::config::{load, load_required, write_run};
use crate::{CmdResult, Common, Failure};

pub const WEIGHTS_FILE: &str = "backbone.hssw";
pub const MODEL_FILE: &str = "model.json";

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("`hss {command}` needs {flag}")))
}

fn jobs(common: &Common) -> usize {
    common
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("{}: cannot create directory", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("{}: cannot write", path.display()))
}

pub fn gen(common: &Common, pretext: bool) -> CmdResult {
    let out = require(&common.out, "--out", "gen")?;
    if pretext {
        let mut cfg: PretextConfig = load(common.config.as_deref())?;
        if let Some(s) = common.seed {
            cfg.rng_seed = s;
        }
        cfg.validate()?;
        log::trace!("pretext generator seed {}", cfg.rng_seed);
        let m = write_pretext(&cfg, out)?;
        log::info!(
            "wrote {} pretext cubes in {} classes to {}",
            m.samples.len(),
            m.classes,
            out.display()
        );
        write_run(out, "gen --pretext", Some(cfg.rng_seed), &cfg, &[])?;
    } else {
        let mut cfg: GenConfig = load(common.config.as_deref())?;
        if let Some(s) = common.seed {
            cfg.rng_seed = s;
        }
        cfg.validate()?;
        log::trace!("generator seed {}", cfg.rng_seed);
        let m = write_dataset(&cfg, out)?;
        log::info!("wrote {} seed cubes to {}", m.samples.len(), out.display());
        write_run(out, "gen", Some(cfg.rng_seed), &cfg, &[])?;
    }
    Ok(())
}

fn dataset_refs(dir: &Path) -> Result<(hss_core::synthgen::Manifest, RefFrames)> {
    let manifest = read_manifest(dir)?;
    let refs = RefFrames::new(
        load_cube(&dir.join(&manifest.dark))?,
        load_cube(&dir.join(&manifest.white))?,
    )?;
    Ok((manifest, refs))
}

#[derive(Debug, Serialize)]
struct CalibratedSample {
    id: String,
    file: String,
    degenerate_pixels: usize,
}

#[derive(Debug, Serialize)]
struct CalibrationSummary {
    reference_defects: usize,
    samples: Vec<CalibratedSample>,
}

pub fn calibrate(common: &Common, dark: Option<PathBuf>, white: Option<PathBuf>) -> CmdResult {
    let data = require(&common.data, "--data", "calibrate")?;
    let out = require(&common.out, "--out", "calibrate")?;
    let opts: CalibrationOptions = load(common.config.as_deref())?;
    if data.join(MANIFEST_FILE).is_file() {
        let (manifest, refs) = dataset_refs(data)?;
        let defects = validate_references(&refs, opts.eps);
        if !defects.is_empty() {
            log::warn!(
                "{} reference pixels have white - dark below {}",
                defects.count(),
                opts.eps
            );
        }
        fs::create_dir_all(out).with_context(|| format!("{}: cannot create directory", out.display()))?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let raw = load_cube(&data.join(&e.file))?;
            let refl = calibrate_cube(&raw, &refs, opts).with_context(|| format!("{}: calibration failed", e.file))?;
            save_cube(&out.join(&e.file), &refl.cube)?;
            samples.push(CalibratedSample {
                id: e.id.clone(),
                file: e.file.clone(),
                degenerate_pixels: refl.degenerate,
            });
        }
        log::info!("calibrated {} cubes into {}", samples.len(), out.display());
        write_json(
            &out.join("calibration.json"),
            &CalibrationSummary {
                reference_defects: defects.count(),
                samples,
            },
        )?;
        write_run(out, "calibrate", None, &opts, &[data])?;
    } else {
        let (Some(dark), Some(white)) = (dark, white) else {
            return Err(Failure::Usage(
                "single-cube calibration needs --dark and --white (or point --data at a dataset directory)".into(),
            ));
        };
        let refs = RefFrames::new(load_cube(&dark)?, load_cube(&white)?)?;
        let refl = calibrate_cube(&load_cube(data)?, &refs, opts)?;
        save_cube(out, &refl.cube)?;
        log::info!("wrote {} ({} degenerate pixels)", out.display(), refl.degenerate);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SeedRecord {
    file: String,
    roi: Roi,
    area: usize,
}

#[derive(Debug, Serialize)]
struct SegmentedCube {
    source: String,
    threshold: f32,
    seeds: Vec<SeedRecord>,
}

fn segment_one(name: &str, refl: &ReflectanceCube, cfg: &SegmentConfig, out: &Path) -> Result<SegmentedCube> {
    let (threshold, components) = segment_cube(refl, cfg).with_context(|| format!("{name}: segmentation failed"))?;
    let bands: Vec<usize> = (1..=refl.cube.header.bands).collect();
    let images = extract_seeds(refl, cfg, &bands)?;
    let wavelengths = refl.cube.header.wavelengths.as_deref();
    let mut seeds = Vec::with_capacity(images.len());
    for (k, (img, comp)) in images.iter().zip(&components).enumerate() {
        let file = format!("seeds/{name}_s{k}");
        save_cube(&out.join(&file), &img.to_cube(wavelengths)?)?;
        seeds.push(SeedRecord {
            file,
            roi: comp.roi,
            area: comp.area(),
        });
    }
    Ok(SegmentedCube {
        source: name.into(),
        threshold,
        seeds,
    })
}

pub fn segment(common: &Common) -> CmdResult {
    let data = require(&common.data, "--data", "segment")?;
    let out = require(&common.out, "--out", "segment")?;
    let cfg: SegmentConfig = load(common.config.as_deref())?;
    fs::create_dir_all(out.join("seeds")).with_context(|| format!("{}: cannot create directory", out.display()))?;
    let mut results = Vec::new();
    if data.join(MANIFEST_FILE).is_file() {
        // Dataset directories hold raw cubes; calibrate on the way.
        let (manifest, refs) = dataset_refs(data)?;
        for e in &manifest.samples {
            let refl = calibrate_cube(&load_cube(&data.join(&e.file))?, &refs, CalibrationOptions::default())?;
            results.push(segment_one(&e.id, &refl, &cfg, out)?);
        }
    } else {
        let cube = load_cube(data)?;
        let name = data
            .file_stem()
            .map_or("cube".into(), |s| s.to_string_lossy().into_owned());
        results.push(segment_one(&name, &ReflectanceCube { cube, degenerate: 0 }, &cfg, out)?);
    }
    let seeds: usize = results.iter().map(|r| r.seeds.len()).sum();
    log::info!("{} cubes, {} seeds", results.len(), seeds);
    write_json(&out.join("segments.json"), &results)?;
    write_run(out, "segment", None, &cfg, &[data])?;
    Ok(())
}

pub fn pretrain(common: &Common) -> CmdResult {
    let out = require(&common.out, "--out", "pretrain")?;
    let mut cfg: PretrainConfig = load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.init_seed = s;
    }
    cfg.train.validate()?;
    let dataset = match &common.data {
        Some(dir) => {
            let m = read_manifest(dir)?;
            if m.kind != hss_core::synthgen::DatasetKind::Pretext {
                return Err(anyhow!(
                    "{}: not a pretext dataset (generate one with `hss gen --pretext`)",
                    dir.display()
                )
                .into());
            }
            SeedDataset::load(dir, &cfg.segment)?
        }
        None => {
            cfg.pretext.validate()?;
            log::trace!("pretext generator seed {}", cfg.pretext.rng_seed);
            SeedDataset::pretext(&cfg.pretext, &cfg.segment)?
        }
    };
    let (_net, params, report) = pretrain_on(&dataset, &cfg)?;
    let model = cfg.model.with_bands(1).with_classes(report.classes);
    fs::create_dir_all(out).with_context(|| format!("{}: cannot create directory", out.display()))?;
    let wpath = out.join(WEIGHTS_FILE);
    fs::write(&wpath, save_weights(&params)).with_context(|| format!("{}: cannot write", wpath.display()))?;
    write_json(&out.join(MODEL_FILE), &model)?;
    write_json(&out.join("pretrain.json"), &report)?;
    let inputs: Vec<&Path> = common.data.iter().map(PathBuf::as_path).collect();
    write_run(out, "pretrain", Some(cfg.init_seed), &cfg, &inputs)?;
    Ok(())
}

fn load_backbone(dir: &Path) -> Result<(Network, Params<f32>)> {
    let mpath = dir.join(MODEL_FILE);
    let model: ModelConfig = load_required(&mpath)?;
    let net = build_network(&model).with_context(|| format!("{}: invalid model", mpath.display()))?;
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).with_context(|| format!("{}: cannot read", wpath.display()))?;
    let params = load_weights(&bytes, &net, LoadOptions::default())
        .with_context(|| format!("{}: weights do not fit {}", wpath.display(), mpath.display()))?;
    Ok((net, params))
}

fn check_canvas(dataset: &SeedDataset, canvas: usize, what: &str) -> Result<()> {
    if dataset.canvas != canvas {
        bail!(
            "{what} expects {canvas} px inputs but segmentation produced {} px (set segment.canvas)",
            dataset.canvas
        );
    }
    Ok(())
}

fn default_selector() -> String {
    "full".into()
}

fn default_test_fraction() -> f64 {
    0.4
}

fn default_model() -> ModelConfig {
    ModelConfig::desk(1, 2)
}

fn desk_segment() -> SegmentConfig {
    SegmentConfig {
        canvas: 64,
        ..SegmentConfig::default()
    }
}

/// `hss train` config. The training schedule has no defaults: every
/// learning rate must be stated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default = "default_selector")]
    pub selector: String,
    #[serde(default)]
    pub repeat: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub train: TrainConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "desk_segment")]
    pub segment: SegmentConfig,
}

fn parse_selector(s: &str) -> Result<BandSelector, Failure> {
    s.parse().map_err(|e: String| Failure::Usage(e))
}

pub fn train(common: &Common, backbone: Option<PathBuf>, selector: Option<String>) -> CmdResult {
    let cfg_path = require(&common.config, "--config", "train")?;
    let data = require(&common.data, "--data", "train")?;
    let out = require(&common.out, "--out", "train")?;
    let mut file: TrainFile = load_required(cfg_path)?;
    if let Some(s) = selector {
        file.selector = s;
    }
    if let Some(s) = common.seed {
        file.base_seed = s;
    }
    let sel = parse_selector(&file.selector)?;
    let sweep = SweepConfig {
        selectors: vec![sel],
        repeats: file.repeat + 1,
        base_seed: file.base_seed,
        test_fraction: file.test_fraction,
        train: file.train.clone(),
        model: file.model.clone(),
        keep_histories: true,
    };
    let pretrained = backbone.as_deref().map(load_backbone).transpose()?;
    let dataset = SeedDataset::load(data, &file.segment)?;
    sweep.validate(dataset.bands)?;
    check_canvas(
        &dataset,
        pretrained
            .as_ref()
            .map_or(file.model.input_canvas, |(n, _)| n.input_shape[1]),
        "the model",
    )?;
    let inputs = dataset.inputs(sel)?;
    let bb = pretrained.as_ref().map(|(net, params)| Backbone { net, params });
    let (record, _net, params) = train_split(&dataset, &inputs, sel, file.repeat, &sweep, bb.as_ref())?;
    log::info!(
        "{sel}: test accuracy {:.4} after {} iterations",
        record.test_accuracy,
        record.iterations
    );
    fs::create_dir_all(out).with_context(|| format!("{}: cannot create directory", out.display()))?;
    let wpath = out.join("model.hssw");
    fs::write(&wpath, save_weights(&params)).with_context(|| format!("{}: cannot write", wpath.display()))?;
    write_json(&out.join("record.json"), &record)?;
    let mut inputs: Vec<&Path> = vec![data];
    inputs.extend(backbone.as_deref());
    write_run(out, "train", Some(file.base_seed), &file, &inputs)?;
    Ok(())
}

/// `hss sweep` config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    /// Selector strings; `groups` and `singles` expand to the schedules.
    pub selectors: Vec<String>,
    pub repeats: usize,
    pub base_seed: u64,
    pub test_fraction: f64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub keep_histories: bool,
    pub segment: SegmentConfig,
    /// Pretrain a backbone first when no `--backbone` is given.
    pub pretrain: Option<PretrainConfig>,
}

impl Default for SweepFile {
    fn default() -> Self {
        let s = SweepConfig::default();
        SweepFile {
            selectors: vec!["full".into()],
            repeats: s.repeats,
            base_seed: s.base_seed,
            test_fraction: s.test_fraction,
            train: s.train,
            model: s.model,
            keep_histories: s.keep_histories,
            segment: desk_segment(),
            pretrain: None,
        }
    }
}

fn expand_selectors(items: &[String]) -> Result<Vec<BandSelector>, Failure> {
    let mut out = Vec::new();
    for item in items {
        match item.trim() {
            "groups" => out.extend(band_groups()),
            "singles" => out.extend(single_band_schedule()),
            s => out.push(parse_selector(s)?),
        }
    }
    Ok(out)
}

pub fn sweep(common: &Common, backbone: Option<PathBuf>, selectors: Option<Vec<String>>) -> CmdResult {
    let data = require(&common.data, "--data", "sweep")?;
    let out = require(&common.out, "--out", "sweep")?;
    let mut file: SweepFile = load(common.config.as_deref())?;
    if let Some(s) = selectors {
        file.selectors = s;
    }
    if let Some(s) = common.seed {
        file.base_seed = s;
    }
    let cfg = SweepConfig {
        selectors: expand_selectors(&file.selectors)?,
        repeats: file.repeats,
        base_seed: file.base_seed,
        test_fraction: file.test_fraction,
        train: file.train.clone(),
        model: file.model.clone(),
        keep_histories: file.keep_histories,
    };
    cfg.train.validate()?;
    let dataset = SeedDataset::load(data, &file.segment)?;
    cfg.validate(dataset.bands)?;
    let pretrained = match (&backbone, &file.pretrain) {
        (Some(dir), _) => Some(load_backbone(dir)?),
        (None, Some(p)) => {
            let pre = SeedDataset::pretext(&p.pretext, &p.segment)?;
            let (net, params, report) = pretrain_on(&pre, p)?;
            log::info!(
                "pretrained backbone: pretext validation accuracy {:.4}",
                report.validation_accuracy
            );
            Some((net, params))
        }
        (None, None) => None,
    };
    check_canvas(
        &dataset,
        pretrained
            .as_ref()
            .map_or(cfg.model.input_canvas, |(n, _)| n.input_shape[1]),
        "the model",
    )?;
    let bb = pretrained.as_ref().map(|(net, params)| Backbone { net, params });
    log::trace!("sweep base seed {}, train seed {}", cfg.base_seed, cfg.train.rng_seed);
    let report = run_sweep(&dataset, bb.as_ref(), &cfg, jobs(common))?;
    write_report(&report, out)?;
    for s in &report.selectors {
        log::info!(
            "{}: mean {:.2}% max {:.2}% sd {:.2}",
            s.selector,
            100.0 * s.mean,
            100.0 * s.max,
            100.0 * s.stddev
        );
    }
    let mut inputs: Vec<&Path> = vec![data];
    inputs.extend(backbone.as_deref());
    write_run(out, "sweep", Some(file.base_seed), &file, &inputs)?;
    Ok(())
}

pub fn report(common: &Common) -> CmdResult {
    let dir = require(&common.data, "--data", "report")?;
    if !dir.join(REPORT_FILE).is_file() {
        return Err(anyhow!("MissingReport: {} has no {REPORT_FILE}", dir.display()).into());
    }
    let out = common.out.as_deref().unwrap_or(dir);
    let report = read_report(dir)?;
    fs::create_dir_all(out).with_context(|| format!("{}: cannot create directory", out.display()))?;
    write_derived(&report, out)?;
    println!(
        "{:<10} {:>15} {:>8} {:>8} {:>8} {:>8}",
        "selector", "wavelength", "mean%", "max%", "sd%", "iters"
    );
    for row in experiments::summarize(&report) {
        println!(
            "{:<10} {:>15} {:>8} {:>8} {:>8} {:>8}",
            row.selector, row.wavelength_range, row.mean_acc_pct, row.max_acc_pct, row.stddev_pct, row.mean_iterations
        );
    }
    Ok(())
}

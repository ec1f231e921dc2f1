//! Synthetic hyperspectral seed scenes with exact ground truth.
//!
//! Each sample is one seed on a dark background, imaged through a push-broom
//! forward model: `raw = dark + (white - dark) * reflectance + noise`, with
//! one-line dark and white reference frames shared by all samples.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, RefFrames};
use crate::cube_io::{self, CubeError, CubeHeader, DataType, HyperCube};
use crate::segmentation::{BinaryMask, Roi, SeedLabel};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error(transparent)]
    Cube(#[from] CubeError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Geometry, radiometry and noise shared by the seed and pretext generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub bands: usize,
    pub lines: usize,
    pub samples: usize,
    /// Semi-major axis range in pixels.
    pub axis_major: (f64, f64),
    /// Semi-minor axis range in pixels.
    pub axis_minor: (f64, f64),
    /// Maximum offset of the seed centre from the image centre, pixels.
    pub center_jitter: f64,
    /// Background reflectance.
    pub background: f64,
    /// Amplitude of the multiplicative low-frequency texture.
    pub texture: f64,
    /// Additive Gaussian noise in raw counts, as a fraction of `white_level`.
    pub noise_sigma: f64,
    pub dark_level: f64,
    pub white_level: f64,
    /// Stored sample type; `F32` keeps the forward model exactly invertible.
    pub data_type: DataType,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            bands: 256,
            lines: 64,
            samples: 64,
            axis_major: (14.0, 19.0),
            axis_minor: (9.0, 13.0),
            center_jitter: 3.0,
            background: 0.05,
            texture: 0.03,
            noise_sigma: 0.005,
            dark_level: 600.0,
            white_level: 9000.0,
            data_type: DataType::F32,
        }
    }
}

/// Width of the background frame the segmentation threshold is read from.
const CLEAR_BORDER: f64 = 8.0;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.bands == 0 || self.lines == 0 || self.samples == 0 {
            return bad("bands, lines and samples must be positive".into());
        }
        let (a0, a1) = self.axis_major;
        let (b0, b1) = self.axis_minor;
        if !(a0 > 0.0 && a0 <= a1 && b0 > 0.0 && b0 <= b1 && b1 <= a1) {
            return bad(format!("axis ranges {:?} / {:?}", self.axis_major, self.axis_minor));
        }
        let reach = a1 + self.center_jitter + 1.0;
        let half = self.lines.min(self.samples) as f64 / 2.0;
        if reach + CLEAR_BORDER > half {
            return bad(format!(
                "a seed reaching {reach:.1} px from centre leaves no clear border in {}x{}",
                self.lines, self.samples
            ));
        }
        if !(self.background >= 0.0 && self.background < 0.3) {
            return bad(format!(
                "background {} must lie below the minimum seed reflectance 0.3",
                self.background
            ));
        }
        if !(0.0..0.2).contains(&self.texture) || self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("texture must lie in [0, 0.2) and noise_sigma must be non-negative".into());
        }
        if !(self.dark_level >= 0.0 && self.white_level > self.dark_level) {
            return bad("white_level must exceed dark_level".into());
        }
        if self.data_type == DataType::U16 && self.white_level * 1.1 > u16::MAX as f64 {
            return bad("white_level too large for 16-bit samples".into());
        }
        Ok(())
    }

    fn header(&self, lines: usize) -> CubeHeader {
        let mut h = CubeHeader::new(lines, self.samples, self.bands);
        h.data_type = self.data_type;
        h.wavelengths = Some(band_wavelengths(self.bands));
        h
    }

    /// One-line dark and white frames: a mild fixed pattern on the dark
    /// level and a smooth illumination falloff across the slit.
    pub fn reference_frames(&self) -> Result<RefFrames> {
        let (ns, nb) = (self.samples as f64, self.bands as f64);
        let dark = |s: usize, b: usize| {
            let x = s as f64 / ns;
            self.dark_level * (1.0 + 0.03 * (2.0 * PI * (1.3 * x + b as f64 / nb)).sin())
        };
        let gain = |s: usize, b: usize| {
            let x = (s as f64 + 0.5) / ns - 0.5;
            let y = b as f64 / nb - 0.5;
            (1.0 - 0.6 * x * x) * (0.9 + 0.1 * (-(y * y) / 0.08).exp())
        };
        let span = self.white_level - self.dark_level;
        let dark_cube = HyperCube::from_fn(self.header(1), |_, s, b| round_to(self.data_type, dark(s, b)))?;
        let white_cube = HyperCube::from_fn(self.header(1), |_, s, b| {
            round_to(self.data_type, dark(s, b) + span * gain(s, b))
        })?;
        Ok(RefFrames::new(dark_cube, white_cube)?)
    }
}

fn round_to(t: DataType, v: f64) -> f32 {
    match t {
        DataType::F32 => v as f32,
        DataType::U16 => v.round().clamp(0.0, u16::MAX as f64) as f32,
    }
}

/// Camera wavelength table for 256-band cubes; an even spread over the
/// same 862.9-1704.2 nm range otherwise.
pub fn band_wavelengths(bands: usize) -> Vec<f64> {
    if bands == 256 {
        return cube_io::nir_camera_wavelengths();
    }
    let (lo, hi) = (862.9, 1704.2);
    (0..bands)
        .map(|i| {
            let t = if bands == 1 { 0.0 } else { i as f64 / (bands - 1) as f64 };
            ((lo + t * (hi - lo)) * 10.0).round() / 10.0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_haploid: usize,
    pub n_diploid: usize,
    /// Minimum haploid/diploid reflectance gap at designated bands.
    pub delta: f64,
    /// 1-based bands carrying the class contrast; `None` designates all.
    pub designated_bands: Option<Vec<usize>>,
    /// Bands around which the contrast is strongest (up to twice `delta`).
    pub peak_bands: Vec<usize>,
    #[serde(flatten)]
    pub scene: SceneConfig,
    pub rng_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_haploid: 100,
            n_diploid: 100,
            delta: DEFAULT_DELTA,
            designated_bands: None,
            peak_bands: vec![115, 220],
            scene: SceneConfig::default(),
            rng_seed: 2019,
        }
    }
}

/// Default class contrast (reflectance units).
pub const DEFAULT_DELTA: f64 = 0.08;

/// Width (in bands) of each designated-band contrast bump.
const BUMP_SIGMA: f64 = 0.3;
/// Width (in bands) of the emphasis around each peak band.
const PEAK_SIGMA: f64 = 12.0;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n_haploid == 0 || self.n_diploid == 0 {
            return Err(SynthError::InvalidConfig("both class counts must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 0.1) {
            return Err(SynthError::InvalidConfig(format!(
                "delta {} must lie in (0, 0.1]",
                self.delta
            )));
        }
        let nb = self.scene.bands;
        if let Some(d) = &self.designated_bands {
            if d.is_empty() || d.iter().any(|&b| b == 0 || b > nb) {
                return Err(SynthError::InvalidConfig(format!(
                    "designated bands must lie in 1..={nb}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_haploid + self.n_diploid
    }

    fn designated(&self) -> Vec<usize> {
        match &self.designated_bands {
            Some(d) => d.clone(),
            None => (1..=self.scene.bands).collect(),
        }
    }

    /// Haploid-minus-diploid reflectance gap at 1-based `band`.
    pub fn contrast(&self, band: usize) -> f64 {
        let b = band as f64;
        self.designated()
            .into_iter()
            .map(|d| {
                let df = d as f64;
                let emphasis: f64 = self.peak_bands.iter().map(|&p| gauss(df, p as f64, PEAK_SIGMA)).sum();
                self.delta * (1.0 + emphasis.min(1.0)) * gauss(b, df, BUMP_SIGMA)
            })
            .sum()
    }

    /// Label of the sample at `index`: classes alternate H, D, H, D, ...
    /// until one is exhausted.
    pub fn label_of(&self, index: usize) -> SeedLabel {
        let paired = 2 * self.n_haploid.min(self.n_diploid);
        if index < paired {
            if index.is_multiple_of(2) {
                SeedLabel::Haploid
            } else {
                SeedLabel::Diploid
            }
        } else if self.n_haploid > self.n_diploid {
            SeedLabel::Haploid
        } else {
            SeedLabel::Diploid
        }
    }
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp()
}

/// Shared smooth reflectance curve both classes are built on.
pub fn base_signature(band: usize, bands: usize) -> f64 {
    // Place the features on the 256-band axis whatever the band count.
    let b = (band as f64 - 1.0) * 255.0 / (bands.max(2) - 1) as f64 + 1.0;
    0.58 + 0.14 * gauss(b, 70.0, 45.0) - 0.10 * gauss(b, 175.0, 35.0) + 0.06 * gauss(b, 235.0, 18.0)
}

/// Class reflectance at 1-based `band`: the base curve shifted up (haploid)
/// or down (diploid) by half the class contrast.
pub fn class_signature(cfg: &GenConfig, class: SeedLabel, band: usize) -> f64 {
    let base = base_signature(band, cfg.scene.bands);
    let half = cfg.contrast(band) / 2.0;
    match class {
        SeedLabel::Haploid => base + half,
        SeedLabel::Diploid => base - half,
        SeedLabel::Unknown => base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Diamond,
    Ring,
    Cross,
    Triangle,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Diamond,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Triangle,
    ];

    /// Membership in normalized, rotated coordinates (`u` along the major
    /// axis, `v` along the minor axis, both scaled to the semi-axes).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Ellipse => u * u + v * v <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeFamily::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
            ShapeFamily::Cross => (u.abs() <= 1.0 && v.abs() <= 0.4) || (u.abs() <= 0.4 && v.abs() <= 1.0),
            ShapeFamily::Triangle => v >= -0.6 && u.abs() <= (1.0 - v) * 0.62,
        }
    }
}

/// Randomized placement of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedGeometry {
    pub shape: ShapeFamily,
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
}

impl SeedGeometry {
    fn random(scene: &SceneConfig, shape: ShapeFamily, rng: &mut ChaCha8Rng) -> Self {
        let j = scene.center_jitter;
        let cy = scene.lines as f64 / 2.0 + rng.gen_range(-j..=j);
        let cx = scene.samples as f64 / 2.0 + rng.gen_range(-j..=j);
        let a = rng.gen_range(scene.axis_major.0..=scene.axis_major.1);
        let b = rng.gen_range(scene.axis_minor.0..=scene.axis_minor.1).min(a);
        let angle = rng.gen_range(0.0..PI);
        SeedGeometry {
            shape,
            center: (cy, cx),
            semi_axes: (a, b),
            angle,
        }
    }

    /// Pixel-centre membership.
    pub fn contains(&self, l: usize, s: usize) -> bool {
        let dy = l as f64 + 0.5 - self.center.0;
        let dx = s as f64 + 0.5 - self.center.1;
        let (sin, cos) = self.angle.sin_cos();
        let u = (dx * cos + dy * sin) / self.semi_axes.0;
        let v = (-dx * sin + dy * cos) / self.semi_axes.1;
        self.shape.contains(u, v)
    }

    pub fn mask(&self, lines: usize, samples: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(lines, samples);
        for l in 0..lines {
            for s in 0..samples {
                if self.contains(l, s) {
                    m.set(l, s, true);
                }
            }
        }
        m
    }
}

/// Tight bounding box of a mask (`component_id` 0); `None` when empty.
pub fn mask_bbox(mask: &BinaryMask) -> Option<Roi> {
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for l in 0..mask.lines {
        for s in 0..mask.samples {
            if mask.get(l, s) {
                top = top.min(l);
                left = left.min(s);
                bottom = bottom.max(l + 1);
                right = right.max(s + 1);
            }
        }
    }
    (top != usize::MAX).then(|| Roi {
        top,
        left,
        height: bottom - top,
        width: right - left,
        component_id: 0,
    })
}

/// Smooth multiplicative texture in `[-1, 1]`: three random plane waves
/// with periods of 12-40 px.
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Texture {
            waves: std::array::from_fn(|_| {
                let period = rng.gen_range(12.0..40.0);
                let dir = rng.gen_range(0.0..2.0 * PI);
                let k = 2.0 * PI / period;
                (k * dir.cos(), k * dir.sin(), rng.gen_range(0.0..2.0 * PI))
            }),
        }
    }

    fn at(&self, l: usize, s: usize) -> f64 {
        self.waves
            .iter()
            .map(|&(ky, kx, p)| (ky * l as f64 + kx * s as f64 + p).cos())
            .sum::<f64>()
            / 3.0
    }
}

/// Ground truth of one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    pub index: usize,
    pub label: SeedLabel,
    /// Pretext class, or the class index for seed data.
    pub signature_id: usize,
    pub geometry: SeedGeometry,
    pub mask: BinaryMask,
    pub bbox: Roi,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub samples: Vec<SampleTruth>,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub raw: HyperCube,
    /// Noise-free scene reflectance, same shape as `raw`.
    pub scene: HyperCube,
    pub truth: SampleTruth,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders one seed through the forward model. `signature(band)` gives the
/// seed reflectance at 1-based `band`.
fn render(
    scene_cfg: &SceneConfig,
    refs: &RefFrames,
    geometry: SeedGeometry,
    rng: &mut ChaCha8Rng,
    signature: impl Fn(usize) -> f64,
) -> Result<(HyperCube, HyperCube, BinaryMask)> {
    let texture = Texture::random(rng);
    let (nl, ns, nb) = (scene_cfg.lines, scene_cfg.samples, scene_cfg.bands);
    let mask = geometry.mask(nl, ns);
    let sig: Vec<f64> = (1..=nb).map(&signature).collect();
    let header = scene_cfg.header(nl);
    let reflect = |l: usize, s: usize, b: usize| -> f64 {
        if mask.get(l, s) {
            sig[b] * (1.0 + scene_cfg.texture * texture.at(l, s))
        } else {
            scene_cfg.background
        }
    };
    let scene = HyperCube::from_fn(header.clone(), |l, s, b| reflect(l, s, b) as f32)?;
    let noise = Normal::new(0.0, scene_cfg.noise_sigma * scene_cfg.white_level).expect("finite sigma");
    let dark = refs.dark.data();
    let white = refs.white.data();
    let raw = HyperCube::from_fn(header, |l, s, b| {
        let i = s * nb + b;
        let (d, w) = (dark[i] as f64, white[i] as f64);
        let mut v = d + (w - d) * reflect(l, s, b);
        if scene_cfg.noise_sigma > 0.0 {
            v += noise.sample(rng);
        }
        round_to(scene_cfg.data_type, v)
    })?;
    Ok((raw, scene, mask))
}

/// Generates sample `index` of a seed dataset. Every sample draws from its
/// own RNG stream, so samples can be produced in any order.
pub fn generate_sample(cfg: &GenConfig, refs: &RefFrames, index: usize) -> Result<GeneratedSample> {
    let label = cfg.label_of(index);
    let mut rng = sample_rng(cfg.rng_seed, index);
    let geometry = SeedGeometry::random(&cfg.scene, ShapeFamily::Ellipse, &mut rng);
    let (raw, scene, mask) = render(&cfg.scene, refs, geometry, &mut rng, |b| class_signature(cfg, label, b))?;
    let bbox = mask_bbox(&mask).ok_or_else(|| SynthError::InvalidConfig("seed rasterized to no pixels".into()))?;
    Ok(GeneratedSample {
        raw,
        scene,
        truth: SampleTruth {
            index,
            label,
            signature_id: label.class_index().unwrap_or(0),
            geometry,
            mask,
            bbox,
        },
    })
}

/// All samples of a seed dataset in order, with the shared reference frames.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Vec<HyperCube>, RefFrames, GroundTruth)> {
    cfg.validate()?;
    let refs = cfg.scene.reference_frames()?;
    let mut cubes = Vec::with_capacity(cfg.n_samples());
    let mut truth = GroundTruth::default();
    for i in 0..cfg.n_samples() {
        let s = generate_sample(cfg, &refs, i)?;
        cubes.push(s.raw);
        truth.samples.push(s.truth);
    }
    Ok((cubes, refs, truth))
}

/// Pretext shapes: every combination of a shape family and a reflectance
/// level is one class, so neither cue alone identifies the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    pub shapes: Vec<ShapeFamily>,
    /// Mean reflectance of each level.
    pub levels: Vec<f64>,
    pub per_class: usize,
    #[serde(flatten)]
    pub scene: SceneConfig,
    pub rng_seed: u64,
}

/// Amplitude of the class-specific spectral ripple on pretext signatures.
const PRETEXT_RIPPLE: f64 = 0.02;

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            shapes: vec![ShapeFamily::Ellipse, ShapeFamily::Rectangle],
            levels: (0..8).map(|i| 0.4 + 0.4 * i as f64 / 7.0).collect(),
            per_class: 60,
            scene: SceneConfig {
                bands: 16,
                ..SceneConfig::default()
            },
            rng_seed: 7,
        }
    }
}

impl PretextConfig {
    pub fn classes(&self) -> usize {
        self.shapes.len() * self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.classes() < 4 {
            return Err(SynthError::DegenerateDataset(format!(
                "pretext needs at least 4 classes, got {}",
                self.classes()
            )));
        }
        if self.per_class == 0 {
            return Err(SynthError::DegenerateDataset("per_class must be at least 1".into()));
        }
        let distinct = |n: usize, eq: &dyn Fn(usize, usize) -> bool| (0..n).all(|a| (a + 1..n).all(|b| !eq(a, b)));
        if !distinct(self.shapes.len(), &|a, b| self.shapes[a] == self.shapes[b])
            || !distinct(self.levels.len(), &|a, b| {
                (self.levels[a] - self.levels[b]).abs() < 1e-9
            })
        {
            return Err(SynthError::DegenerateDataset(
                "pretext shapes and levels must be distinct".into(),
            ));
        }
        let (lo, hi) = (0.3 + PRETEXT_RIPPLE, 0.9 - PRETEXT_RIPPLE);
        if let Some(l) = self.levels.iter().find(|l| !(lo..=hi).contains(*l)) {
            return Err(SynthError::InvalidConfig(format!(
                "pretext level {l} outside [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.classes() * self.per_class
    }

    /// Class of sample `index`; classes cycle 0, 1, ..., classes-1.
    pub fn class_of(&self, index: usize) -> usize {
        index % self.classes()
    }

    pub fn shape_of(&self, class: usize) -> ShapeFamily {
        self.shapes[class / self.levels.len()]
    }

    pub fn level_of(&self, class: usize) -> f64 {
        self.levels[class % self.levels.len()]
    }

    /// Pretext reflectance: the class level plus a class-specific ripple.
    pub fn signature(&self, class: usize, band: usize) -> f64 {
        let x = (band as f64 - 0.5) / self.scene.bands as f64;
        self.level_of(class) + PRETEXT_RIPPLE * (2.0 * PI * (class as f64 + 1.0) * x).sin()
    }
}

pub fn generate_pretext_sample(cfg: &PretextConfig, refs: &RefFrames, index: usize) -> Result<GeneratedSample> {
    let class = cfg.class_of(index);
    let mut rng = sample_rng(cfg.rng_seed, index);
    let geometry = SeedGeometry::random(&cfg.scene, cfg.shape_of(class), &mut rng);
    let (raw, scene, mask) = render(&cfg.scene, refs, geometry, &mut rng, |b| cfg.signature(class, b))?;
    let bbox = mask_bbox(&mask).ok_or_else(|| SynthError::InvalidConfig("shape rasterized to no pixels".into()))?;
    Ok(GeneratedSample {
        raw,
        scene,
        truth: SampleTruth {
            index,
            label: SeedLabel::Unknown,
            signature_id: class,
            geometry,
            mask,
            bbox,
        },
    })
}

pub fn generate_pretext(cfg: &PretextConfig) -> Result<(Vec<HyperCube>, RefFrames, GroundTruth)> {
    cfg.validate()?;
    let refs = cfg.scene.reference_frames()?;
    let mut cubes = Vec::with_capacity(cfg.n_samples());
    let mut truth = GroundTruth::default();
    for i in 0..cfg.n_samples() {
        let s = generate_pretext_sample(cfg, &refs, i)?;
        cubes.push(s.raw);
        truth.samples.push(s.truth);
    }
    Ok((cubes, refs, truth))
}

/// One `manifest.json` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Cube stem relative to the dataset directory.
    pub file: String,
    pub label: SeedLabel,
    pub bbox: Roi,
    pub mask_file: String,
    pub signature_id: usize,
    pub order_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub dark: String,
    pub white: String,
    pub classes: usize,
    pub samples: Vec<ManifestEntry>,
    pub generator: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Seeds,
    Pretext,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn mask_cube(mask: &BinaryMask) -> HyperCube {
    let mut h = CubeHeader::new(mask.lines, mask.samples, 1);
    h.data_type = DataType::U16;
    HyperCube::from_fn(h, |l, s, _| mask.get(l, s) as u8 as f32).expect("valid mask header")
}

/// Mask cube written next to each sample, decoded back to a mask.
pub fn load_mask(stem: &Path) -> Result<BinaryMask> {
    let cube = cube_io::load_cube(stem)?;
    let d = cube.dims();
    let mut m = BinaryMask::empty(d.lines, d.samples);
    for l in 0..d.lines {
        for s in 0..d.samples {
            m.set(l, s, cube.get(l, s, 0) > 0.5);
        }
    }
    Ok(m)
}

fn write_samples(
    dir: &Path,
    kind: DatasetKind,
    classes: usize,
    generator: serde_json::Value,
    refs: &RefFrames,
    n: usize,
    mut sample: impl FnMut(usize) -> Result<GeneratedSample>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    cube_io::save_cube(&dir.join("dark"), &refs.dark)?;
    cube_io::save_cube(&dir.join("white"), &refs.white)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s = sample(i)?;
        let id = format!("sample_{i:04}");
        let mask_file = format!("{id}_mask");
        cube_io::save_cube(&dir.join(&id), &s.raw)?;
        cube_io::save_cube(&dir.join(&mask_file), &mask_cube(&s.truth.mask))?;
        entries.push(ManifestEntry {
            file: id.clone(),
            id,
            label: s.truth.label,
            bbox: s.truth.bbox,
            mask_file,
            signature_id: s.truth.signature_id,
            order_index: i,
        });
    }
    let manifest = Manifest {
        kind,
        dark: "dark".into(),
        white: "white".into(),
        classes,
        samples: entries,
        generator,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Writes a seed dataset sample by sample: reference frames, one cube and
/// one mask per sample, and `manifest.json`.
pub fn write_dataset(cfg: &GenConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let refs = cfg.scene.reference_frames()?;
    write_samples(
        dir,
        DatasetKind::Seeds,
        2,
        serde_json::to_value(cfg)?,
        &refs,
        cfg.n_samples(),
        |i| generate_sample(cfg, &refs, i),
    )
}

pub fn write_pretext(cfg: &PretextConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let refs = cfg.scene.reference_frames()?;
    write_samples(
        dir,
        DatasetKind::Pretext,
        cfg.classes(),
        serde_json::to_value(cfg)?,
        &refs,
        cfg.n_samples(),
        |i| generate_pretext_sample(cfg, &refs, i),
    )
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{calibrate, CalibrationOptions};

    fn small(n: usize, bands: usize) -> GenConfig {
        GenConfig {
            n_haploid: n,
            n_diploid: n,
            scene: SceneConfig {
                bands,
                lines: 48,
                samples: 48,
                axis_major: (8.0, 12.0),
                axis_minor: (6.0, 8.0),
                ..SceneConfig::default()
            },
            peak_bands: vec![],
            ..GenConfig::default()
        }
    }

    #[test]
    fn signatures_stay_in_range_and_separate() {
        let cfg = GenConfig::default();
        for b in 1..=256 {
            for c in [SeedLabel::Haploid, SeedLabel::Diploid] {
                let v = class_signature(&cfg, c, b);
                assert!((0.3..=0.9).contains(&v), "band {b}: {v}");
            }
            let gap = class_signature(&cfg, SeedLabel::Haploid, b) - class_signature(&cfg, SeedLabel::Diploid, b);
            assert!(gap >= cfg.delta, "band {b}: {gap}");
        }
        let g = |b| cfg.contrast(b);
        assert!(g(115) > 1.9 * cfg.delta && g(220) > 1.9 * cfg.delta && g(30) < 1.1 * cfg.delta);
    }

    #[test]
    fn non_designated_bands_barely_differ() {
        let cfg = GenConfig {
            designated_bands: Some(vec![10, 20, 21, 115]),
            ..GenConfig::default()
        };
        for b in 1..=256 {
            let gap = cfg.contrast(b);
            if [10, 20, 21, 115].contains(&b) {
                assert!(gap >= cfg.delta);
            } else {
                assert!(gap < cfg.delta / 10.0, "band {b}: {gap}");
            }
        }
    }

    #[test]
    fn labels_alternate() {
        let cfg = GenConfig {
            n_haploid: 3,
            n_diploid: 5,
            ..GenConfig::default()
        };
        let labels: Vec<_> = (0..8).map(|i| cfg.label_of(i)).collect();
        use SeedLabel::*;
        assert_eq!(
            labels,
            [Haploid, Diploid, Haploid, Diploid, Haploid, Diploid, Diploid, Diploid]
        );
    }

    #[test]
    fn noiseless_forward_model_inverts() {
        let mut cfg = small(2, 12);
        cfg.scene.noise_sigma = 0.0;
        let (cubes, refs, truth) = generate_dataset(&cfg).unwrap();
        assert_eq!(cubes.len(), 4);
        for (raw, t) in cubes.iter().zip(&truth.samples) {
            let s = generate_sample(&cfg, &refs, t.index).unwrap();
            let r = calibrate(raw, &refs, CalibrationOptions::default()).unwrap();
            for (a, b) in r.cube.data().iter().zip(s.scene.data()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let cfg = small(3, 4);
        let refs = cfg.scene.reference_frames().unwrap();
        let a = generate_sample(&cfg, &refs, 4).unwrap();
        let (cubes, _, _) = generate_dataset(&cfg).unwrap();
        assert_eq!(a.raw, cubes[4]);
        let other = GenConfig { rng_seed: 1, ..cfg };
        assert_ne!(generate_sample(&other, &refs, 4).unwrap().raw, a.raw);
    }

    #[test]
    fn seeds_keep_clear_of_the_border() {
        let mut cfg = GenConfig::default();
        cfg.scene.bands = 2;
        let refs = cfg.scene.reference_frames().unwrap();
        for i in 0..20 {
            let t = generate_sample(&cfg, &refs, i).unwrap().truth;
            assert!(t.bbox.top >= 8 && t.bbox.left >= 8 && t.bbox.bottom() <= 56 && t.bbox.right() <= 56);
        }
    }

    #[test]
    fn pretext_classes_differ_in_shape_or_signature() {
        let cfg = PretextConfig::default();
        assert_eq!(cfg.classes(), 16);
        for a in 0..cfg.classes() {
            for b in a + 1..cfg.classes() {
                let gap = (1..=16)
                    .map(|band| (cfg.signature(a, band) - cfg.signature(b, band)).abs())
                    .fold(0.0, f64::max);
                assert!(cfg.shape_of(a) != cfg.shape_of(b) || gap > 0.05, "{a} {b}");
                assert!(gap > 0.0);
            }
            for band in 1..=16 {
                assert!((0.3..=0.9).contains(&cfg.signature(a, band)));
            }
        }
        let few = PretextConfig {
            shapes: vec![ShapeFamily::Ring],
            levels: vec![0.4, 0.5, 0.6],
            ..cfg.clone()
        };
        assert!(matches!(few.validate(), Err(SynthError::DegenerateDataset(_))));
        let dup = PretextConfig {
            levels: vec![0.4, 0.4],
            ..cfg
        };
        assert!(matches!(dup.validate(), Err(SynthError::DegenerateDataset(_))));
    }

    #[test]
    fn shapes_rasterize_connected() {
        use crate::segmentation::extract_components;
        let scene = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in ShapeFamily::ALL {
            for _ in 0..20 {
                let g = SeedGeometry::random(&scene, shape, &mut rng);
                let m = g.mask(64, 64);
                let comps = extract_components(&m, 1);
                assert_eq!(comps.len(), 1, "{shape:?}");
                assert_eq!(comps[0].area(), m.count());
            }
        }
    }

    #[test]
    fn writes_manifest_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(2, 3);
        let m = write_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.samples.len(), 4);
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        let refs = cfg.scene.reference_frames().unwrap();
        let s = generate_sample(&cfg, &refs, 1).unwrap();
        assert_eq!(
            load_mask(&dir.path().join(&m.samples[1].mask_file)).unwrap(),
            s.truth.mask
        );
        assert_eq!(cube_io::load_cube(&dir.path().join(&m.samples[1].file)).unwrap(), s.raw);
    }
}

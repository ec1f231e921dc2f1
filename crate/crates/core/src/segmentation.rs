//! Seed ROI extraction: background-max thresholding on one band,
//! 8-connected components, mask multiplication and centred canvas padding.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::ReflectanceCube;
use crate::cube_io::{band_slice, CubeError, CubeHeader, HyperCube, Plane};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("background region is empty")]
    EmptyBackgroundRegion,
    #[error("roi {height}x{width} does not fit a {canvas}x{canvas} canvas")]
    RoiLargerThanCanvas { height: usize, width: usize, canvas: usize },
    #[error("roi or mask does not match the cube bounds")]
    OutOfBounds,
    #[error("no band selected")]
    NoBands,
    #[error(transparent)]
    Cube(#[from] CubeError),
}

pub type Result<T> = std::result::Result<T, SegmentationError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub lines: usize,
    pub samples: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(lines: usize, samples: usize) -> Self {
        BinaryMask {
            lines,
            samples,
            data: vec![false; lines * samples],
        }
    }

    #[inline]
    pub fn get(&self, l: usize, s: usize) -> bool {
        self.data[l * self.samples + s]
    }

    #[inline]
    pub fn set(&mut self, l: usize, s: usize, v: bool) {
        self.data[l * self.samples + s] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!((self.lines, self.samples), (other.lines, other.samples), "mask dims");
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub component_id: usize,
}

impl Roi {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub roi: Roi,
    /// Member pixels `(line, sample)` in scan order.
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// This component alone, as a full-size mask.
    pub fn mask(&self, lines: usize, samples: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(lines, samples);
        for &(l, s) in &self.pixels {
            m.set(l, s, true);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SeedLabel {
    Haploid,
    Diploid,
    Unknown,
}

impl SeedLabel {
    /// Network class index; `None` for unlabeled seeds.
    pub fn class_index(self) -> Option<usize> {
        match self {
            SeedLabel::Haploid => Some(0),
            SeedLabel::Diploid => Some(1),
            SeedLabel::Unknown => None,
        }
    }
}

impl fmt::Display for SeedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeedLabel::Haploid => "haploid",
            SeedLabel::Diploid => "diploid",
            SeedLabel::Unknown => "unknown",
        })
    }
}

/// A seed placed on a square canvas, stored channel-major:
/// `data[(c * canvas + y) * canvas + x]` where `c` indexes `bands`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedImage {
    pub canvas: usize,
    /// 1-based source bands, one per channel.
    pub bands: Vec<usize>,
    pub data: Vec<f32>,
    pub label: SeedLabel,
    pub source_roi: Roi,
    /// Canvas position of the ROI's top-left corner.
    pub offset: (usize, usize),
}

impl SeedImage {
    pub fn channels(&self) -> usize {
        self.bands.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.canvas * self.canvas;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.canvas + y) * self.canvas + x]
    }

    /// Keeps a subset of channels, given as positions into `self.bands`.
    pub fn select_channels(&self, positions: &[usize]) -> SeedImage {
        let mut data = Vec::with_capacity(positions.len() * self.canvas * self.canvas);
        for &p in positions {
            data.extend_from_slice(self.channel(p));
        }
        SeedImage {
            canvas: self.canvas,
            bands: positions.iter().map(|&p| self.bands[p]).collect(),
            data,
            label: self.label,
            source_roi: self.source_roi,
            offset: self.offset,
        }
    }

    /// The seed as a cube (`canvas` lines × `canvas` samples × channels).
    pub fn to_cube(&self, wavelengths: Option<&[f64]>) -> std::result::Result<HyperCube, CubeError> {
        let mut header = CubeHeader::new(self.canvas, self.canvas, self.channels());
        header.wavelengths = wavelengths.map(|wl| self.bands.iter().map(|&b| wl[b - 1]).collect());
        HyperCube::from_fn(header, |l, s, c| self.get(c, l, s))
    }
}

/// Background region used for threshold estimation: a frame `width` pixels
/// wide along all four image borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BorderStrip {
    pub width: usize,
}

impl Default for BorderStrip {
    fn default() -> Self {
        BorderStrip { width: 8 }
    }
}

impl BorderStrip {
    pub fn contains(&self, lines: usize, samples: usize, l: usize, s: usize) -> bool {
        let w = self.width;
        l < w || s < w || l + w >= lines || s + w >= samples
    }
}

/// Maximum of `image` over the background strip.
pub fn estimate_threshold(image: &Plane, region: BorderStrip) -> Result<f32> {
    if region.width == 0 || image.lines == 0 || image.samples == 0 {
        return Err(SegmentationError::EmptyBackgroundRegion);
    }
    let mut max = f32::NEG_INFINITY;
    for l in 0..image.lines {
        for s in 0..image.samples {
            if region.contains(image.lines, image.samples, l, s) {
                max = max.max(image.get(l, s));
            }
        }
    }
    Ok(max)
}

/// `mask[p] = image[p] > threshold`; values equal to the threshold are
/// background.
pub fn binarize(image: &Plane, threshold: f32) -> BinaryMask {
    BinaryMask {
        lines: image.lines,
        samples: image.samples,
        data: image.data.iter().map(|&v| v > threshold).collect(),
    }
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// 8-connected components of `mask` with at least `min_area` pixels,
/// sorted by `(top, left)` and numbered in that order.
pub fn extract_components(mask: &BinaryMask, min_area: usize) -> Vec<Component> {
    let (lines, samples) = (mask.lines, mask.samples);
    let mut seen = vec![false; mask.data.len()];
    let mut found = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..mask.data.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (l, s) = (p / samples, p % samples);
            pixels.push((l, s));
            for (dl, ds) in NEIGHBOURS {
                let (nl, ns) = (l as isize + dl, s as isize + ds);
                if nl < 0 || ns < 0 || nl >= lines as isize || ns >= samples as isize {
                    continue;
                }
                let q = nl as usize * samples + ns as usize;
                if mask.data[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        pixels.sort_unstable();
        let top = pixels.iter().map(|p| p.0).min().unwrap();
        let bottom = pixels.iter().map(|p| p.0).max().unwrap();
        let left = pixels.iter().map(|p| p.1).min().unwrap();
        let right = pixels.iter().map(|p| p.1).max().unwrap();
        found.push(Component {
            roi: Roi {
                top,
                left,
                height: bottom - top + 1,
                width: right - left + 1,
                component_id: 0,
            },
            pixels,
        });
    }

    found.sort_by_key(|c| (c.roi.top, c.roi.left));
    for (id, c) in found.iter_mut().enumerate() {
        c.roi.component_id = id;
    }
    found
}

/// Crops `roi` from the cube, keeps only `mask` pixels, and centres the
/// crop on a `canvas`×`canvas` image. Every pixel outside the mask (inside or
/// outside the ROI) is `pad_value`. `bands` are 1-based.
pub fn apply_mask_and_pad(
    cube: &ReflectanceCube,
    roi: &Roi,
    mask: &BinaryMask,
    bands: &[usize],
    canvas: usize,
    pad_value: f32,
) -> Result<SeedImage> {
    let cube = &cube.cube;
    let d = cube.dims();
    if bands.is_empty() {
        return Err(SegmentationError::NoBands);
    }
    for &b in bands {
        cube.header.check_band(b)?;
    }
    if roi.height == 0 || roi.width == 0 || roi.bottom() > d.lines || roi.right() > d.samples {
        return Err(SegmentationError::OutOfBounds);
    }
    if (mask.lines, mask.samples) != (d.lines, d.samples) {
        return Err(SegmentationError::OutOfBounds);
    }
    if roi.height > canvas || roi.width > canvas {
        return Err(SegmentationError::RoiLargerThanCanvas {
            height: roi.height,
            width: roi.width,
            canvas,
        });
    }

    let oy = (canvas - roi.height) / 2;
    let ox = (canvas - roi.width) / 2;
    let plane = canvas * canvas;
    let mut data = vec![pad_value; bands.len() * plane];
    for y in 0..roi.height {
        for x in 0..roi.width {
            let (l, s) = (roi.top + y, roi.left + x);
            if !mask.get(l, s) {
                continue;
            }
            let spectrum = cube.pixel(l, s);
            let at = (oy + y) * canvas + ox + x;
            for (c, &b) in bands.iter().enumerate() {
                data[c * plane + at] = spectrum[b - 1];
            }
        }
    }
    Ok(SeedImage {
        canvas,
        bands: bands.to_vec(),
        data,
        label: SeedLabel::Unknown,
        source_roi: *roi,
        offset: (oy, ox),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// 1-based band used for thresholding.
    pub band: usize,
    pub background: BorderStrip,
    pub min_area: usize,
    pub canvas: usize,
    pub pad_value: f32,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            band: 60,
            background: BorderStrip::default(),
            min_area: 25,
            canvas: 224,
            pad_value: 0.0,
        }
    }
}

/// Threshold, binarize and label one calibrated cube. Returns the
/// threshold and the surviving components.
pub fn segment(cube: &ReflectanceCube, cfg: &SegmentConfig) -> Result<(f32, Vec<Component>)> {
    let image = band_slice(&cube.cube, cfg.band)?;
    let threshold = estimate_threshold(&image, cfg.background)?;
    let mask = binarize(&image, threshold);
    Ok((threshold, extract_components(&mask, cfg.min_area)))
}

/// Full per-cube extraction: one [`SeedImage`] per component, all bands of
/// `bands` (1-based) retained.
pub fn extract_seeds(cube: &ReflectanceCube, cfg: &SegmentConfig, bands: &[usize]) -> Result<Vec<SeedImage>> {
    let (_, components) = segment(cube, cfg)?;
    let d = cube.cube.dims();
    components
        .iter()
        .map(|c| {
            let mask = c.mask(d.lines, d.samples);
            apply_mask_and_pad(cube, &c.roi, &mask, bands, cfg.canvas, cfg.pad_value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reflectance(
        lines: usize,
        samples: usize,
        bands: usize,
        f: impl FnMut(usize, usize, usize) -> f32,
    ) -> ReflectanceCube {
        ReflectanceCube {
            cube: HyperCube::from_fn(CubeHeader::new(lines, samples, bands), f).unwrap(),
            degenerate: 0,
        }
    }

    #[test]
    fn uniform_background_threshold() {
        let img = Plane::filled(20, 20, 0.2);
        assert_eq!(estimate_threshold(&img, BorderStrip::default()).unwrap(), 0.2);
    }

    #[test]
    fn threshold_is_strip_max() {
        let mut img = Plane::filled(30, 30, 0.1);
        img.set(2, 15, 0.25);
        for l in 10..20 {
            for s in 10..20 {
                img.set(l, s, 0.8);
            }
        }
        assert_eq!(estimate_threshold(&img, BorderStrip { width: 8 }).unwrap(), 0.25);
    }

    #[test]
    fn zero_width_strip() {
        let img = Plane::filled(5, 5, 0.1);
        assert!(matches!(
            estimate_threshold(&img, BorderStrip { width: 0 }),
            Err(SegmentationError::EmptyBackgroundRegion)
        ));
    }

    #[test]
    fn binarize_is_strict() {
        let img = Plane::new(1, 3, vec![0.1, 0.5, 0.6]);
        assert_eq!(binarize(&img, 0.5).data, vec![false, false, true]);
        assert_eq!(binarize(&img, 0.9).count(), 0);
    }

    #[test]
    fn rectangle_component() {
        let mut m = BinaryMask::empty(10, 12);
        for l in 2..6 {
            for s in 3..10 {
                m.set(l, s, true);
            }
        }
        let comps = extract_components(&m, 1);
        assert_eq!(comps.len(), 1);
        assert_eq!(
            comps[0].roi,
            Roi {
                top: 2,
                left: 3,
                height: 4,
                width: 7,
                component_id: 0
            }
        );
        assert_eq!(comps[0].area(), 28);
    }

    #[test]
    fn diagonal_pixels_connect() {
        let mut m = BinaryMask::empty(4, 4);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(2, 2, true);
        assert_eq!(extract_components(&m, 1).len(), 1);
    }

    #[test]
    fn min_area_and_empty() {
        assert!(extract_components(&BinaryMask::empty(5, 5), 1).is_empty());
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        assert!(extract_components(&m, 2).is_empty());
        assert_eq!(extract_components(&m, 1).len(), 1);
    }

    #[test]
    fn components_sorted_by_top_left() {
        let mut m = BinaryMask::empty(10, 10);
        m.set(5, 1, true);
        m.set(1, 8, true);
        m.set(1, 2, true);
        let rois: Vec<_> = extract_components(&m, 1)
            .iter()
            .map(|c| (c.roi.top, c.roi.left, c.roi.component_id))
            .collect();
        assert_eq!(rois, vec![(1, 2, 0), (1, 8, 1), (5, 1, 2)]);
    }

    #[test]
    fn centred_placement_on_large_canvas() {
        let (h, w) = (141, 111);
        let cube = reflectance(h + 4, w + 6, 2, |l, s, b| 1.0 + (l * 1000 + s) as f32 + b as f32 * 0.5);
        let roi = Roi {
            top: 2,
            left: 3,
            height: h,
            width: w,
            component_id: 0,
        };
        let mut mask = BinaryMask::empty(h + 4, w + 6);
        for l in 2..2 + h {
            for s in 3..3 + w {
                mask.set(l, s, true);
            }
        }
        let seed = apply_mask_and_pad(&cube, &roi, &mask, &[2], 224, -1.0).unwrap();
        let (oy, ox) = ((224 - h) / 2, (224 - w) / 2);
        assert_eq!(seed.offset, (oy, ox));
        for y in 0..224 {
            for x in 0..224 {
                let v = seed.get(0, y, x);
                if (oy..oy + h).contains(&y) && (ox..ox + w).contains(&x) {
                    assert_eq!(v, cube.cube.get(y - oy + 2, x - ox + 3, 1));
                } else {
                    assert_eq!(v, -1.0);
                }
            }
        }
    }

    #[test]
    fn canvas_sized_crop_is_identity_placement() {
        let cube = reflectance(8, 8, 1, |l, s, _| (l * 8 + s) as f32 + 1.0);
        let roi = Roi {
            top: 0,
            left: 0,
            height: 8,
            width: 8,
            component_id: 0,
        };
        let mut mask = BinaryMask::empty(8, 8);
        mask.data.iter_mut().for_each(|m| *m = true);
        let seed = apply_mask_and_pad(&cube, &roi, &mask, &[1], 8, 0.0).unwrap();
        assert_eq!(seed.offset, (0, 0));
        assert_eq!(seed.data, cube.cube.data());
    }

    #[test]
    fn oversized_roi() {
        let cube = reflectance(300, 300, 1, |_, _, _| 1.0);
        let roi = Roi {
            top: 0,
            left: 0,
            height: 300,
            width: 300,
            component_id: 0,
        };
        let mask = BinaryMask::empty(300, 300);
        assert!(matches!(
            apply_mask_and_pad(&cube, &roi, &mask, &[1], 224, 0.0),
            Err(SegmentationError::RoiLargerThanCanvas {
                height: 300,
                width: 300,
                canvas: 224
            })
        ));
    }

    #[test]
    fn masked_out_pixels_take_pad_value() {
        let cube = reflectance(6, 6, 1, |_, _, _| 0.7);
        let roi = Roi {
            top: 1,
            left: 1,
            height: 3,
            width: 3,
            component_id: 0,
        };
        let mut mask = BinaryMask::empty(6, 6);
        mask.set(2, 2, true);
        let seed = apply_mask_and_pad(&cube, &roi, &mask, &[1], 5, 0.25).unwrap();
        let kept: Vec<_> = seed.data.iter().filter(|&&v| v == 0.7).collect();
        assert_eq!(kept.len(), 1);
        assert_eq!(seed.data.iter().filter(|&&v| v == 0.25).count(), 24);
    }

    #[test]
    fn band_out_of_range_in_selector() {
        let cube = reflectance(4, 4, 2, |_, _, _| 1.0);
        let roi = Roi {
            top: 0,
            left: 0,
            height: 2,
            width: 2,
            component_id: 0,
        };
        let mask = BinaryMask::empty(4, 4);
        assert!(matches!(
            apply_mask_and_pad(&cube, &roi, &mask, &[3], 4, 0.0),
            Err(SegmentationError::Cube(CubeError::BandOutOfRange { .. }))
        ));
    }
}

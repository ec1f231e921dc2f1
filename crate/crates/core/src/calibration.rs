//! Dark/white reference correction of raw sample cubes to reflectance.
//!
//! `R = (sample - dark) / max(white - dark, eps)`, clamped to `[0, clamp_max]`.
//! Reference frames are cubes sharing the sample's `samples` and `bands`;
//! a reference with a single line is broadcast over every sample line (the
//! usual push-broom reference), otherwise line counts must match.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cube_io::{CubeHeader, HyperCube};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("reference {which} has dims {found:?}, sample cube needs {expected:?}")]
    ShapeMismatch {
        which: &'static str,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("every reference pixel has white - dark below eps")]
    AllPixelsDegenerate,
    #[error("eps must be positive and clamp_max must exceed 0")]
    BadOptions,
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub eps: f64,
    pub clamp_max: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            eps: 1e-6,
            clamp_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefFrames {
    pub dark: HyperCube,
    pub white: HyperCube,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DefectReport {
    /// `(line, sample, band)` of every reference element with
    /// `white - dark < eps`, 0-based, in scan order.
    pub pixels: Vec<(usize, usize, usize)>,
}

impl DefectReport {
    pub fn count(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceCube {
    pub cube: HyperCube,
    /// Number of sample elements whose reference denominator fell below eps.
    pub degenerate: usize,
}

fn dims3(h: &CubeHeader) -> (usize, usize, usize) {
    (h.lines, h.samples, h.bands)
}

impl RefFrames {
    pub fn new(dark: HyperCube, white: HyperCube) -> Result<Self> {
        if dims3(&dark.header) != dims3(&white.header) {
            return Err(CalibrationError::ShapeMismatch {
                which: "white",
                expected: dims3(&dark.header),
                found: dims3(&white.header),
            });
        }
        Ok(RefFrames { dark, white })
    }

    fn check_against(&self, sample: &CubeHeader) -> Result<()> {
        let (l, s, b) = dims3(sample);
        for (which, r) in [("dark", &self.dark), ("white", &self.white)] {
            let found = dims3(&r.header);
            let ok = found.1 == s && found.2 == b && (found.0 == 1 || found.0 == l);
            if !ok {
                return Err(CalibrationError::ShapeMismatch {
                    which,
                    expected: (l, s, b),
                    found,
                });
            }
        }
        if dims3(&self.dark.header) != dims3(&self.white.header) {
            return Err(CalibrationError::ShapeMismatch {
                which: "white",
                expected: dims3(&self.dark.header),
                found: dims3(&self.white.header),
            });
        }
        Ok(())
    }
}

/// Lists reference elements whose white-dark gap is below `eps`.
pub fn validate_references(refs: &RefFrames, eps: f64) -> DefectReport {
    let d = refs.dark.dims();
    let mut pixels = Vec::new();
    for (i, (&dk, &wh)) in refs.dark.data().iter().zip(refs.white.data()).enumerate() {
        if (wh as f64 - dk as f64) < eps {
            let b = i % d.bands;
            let s = (i / d.bands) % d.samples;
            let l = i / (d.bands * d.samples);
            pixels.push((l, s, b));
        }
    }
    DefectReport { pixels }
}

pub fn calibrate(sample: &HyperCube, refs: &RefFrames, opts: CalibrationOptions) -> Result<ReflectanceCube> {
    if opts.eps.is_nan() || opts.eps <= 0.0 || opts.clamp_max.is_nan() || opts.clamp_max <= 0.0 {
        return Err(CalibrationError::BadOptions);
    }
    refs.check_against(&sample.header)?;

    let d = sample.dims();
    let row = d.samples * d.bands;
    let broadcast = refs.dark.header.lines == 1;

    let degenerate_refs = validate_references(refs, opts.eps).count();
    if degenerate_refs == refs.dark.data().len() {
        return Err(CalibrationError::AllPixelsDegenerate);
    }

    let mut out = sample.clone();
    let mut degenerate = 0usize;
    for (l, line) in out.data_mut().chunks_exact_mut(row).enumerate() {
        let r = if broadcast { 0 } else { l * row };
        let dark = &refs.dark.data()[r..r + row];
        let white = &refs.white.data()[r..r + row];
        for ((v, &dk), &wh) in line.iter_mut().zip(dark).zip(white) {
            let gap = wh as f64 - dk as f64;
            if gap < opts.eps {
                degenerate += 1;
            }
            let refl = (*v as f64 - dk as f64) / gap.max(opts.eps);
            *v = refl.clamp(0.0, opts.clamp_max) as f32;
        }
    }
    Ok(ReflectanceCube { cube: out, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(l: usize, s: usize, b: usize, f: impl FnMut(usize, usize, usize) -> f32) -> HyperCube {
        HyperCube::from_fn(CubeHeader::new(l, s, b), f).unwrap()
    }

    fn refs(l: usize, s: usize, b: usize, dark: f32, white: f32) -> RefFrames {
        RefFrames::new(cube(l, s, b, |_, _, _| dark), cube(l, s, b, |_, _, _| white)).unwrap()
    }

    #[test]
    fn single_pixel_arithmetic() {
        let sample = cube(1, 1, 1, |_, _, _| 0.5);
        let out = calibrate(&sample, &refs(1, 1, 1, 0.1, 0.9), CalibrationOptions::default()).unwrap();
        assert!((out.cube.get(0, 0, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dark = cube(4, 5, 3, |_, _, _| rng.gen_range(100.0..300.0));
        let white = cube(4, 5, 3, |l, s, b| dark.get(l, s, b) + 500.0 + (l + s + b) as f32);
        let r = RefFrames::new(dark.clone(), white.clone()).unwrap();
        let ones = calibrate(&white, &r, CalibrationOptions::default()).unwrap();
        assert!(ones.cube.data().iter().all(|&v| v == 1.0));
        let zeros = calibrate(&dark, &r, CalibrationOptions::default()).unwrap();
        assert!(zeros.cube.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_line_reference_broadcasts() {
        let sample = cube(6, 2, 2, |l, _, _| 100.0 + 10.0 * l as f32);
        let out = calibrate(&sample, &refs(1, 2, 2, 100.0, 200.0), CalibrationOptions::default()).unwrap();
        for l in 0..6 {
            assert!((out.cube.get(l, 1, 1) - 0.1 * l as f32).abs() < 1e-6);
        }
    }

    #[test]
    fn clamping() {
        let sample = cube(1, 3, 1, |_, s, _| [-50.0, 500.0, 150.0][s]);
        let out = calibrate(&sample, &refs(1, 3, 1, 0.0, 100.0), CalibrationOptions::default()).unwrap();
        assert_eq!(out.cube.data(), &[0.0, 2.0, 1.5]);
    }

    #[test]
    fn shape_mismatch() {
        let sample = cube(2, 3, 4, |_, _, _| 1.0);
        let err = calibrate(&sample, &refs(2, 3, 5, 0.0, 1.0), CalibrationOptions::default()).unwrap_err();
        assert!(matches!(err, CalibrationError::ShapeMismatch { which: "dark", .. }));
        let err = calibrate(&sample, &refs(3, 3, 4, 0.0, 1.0), CalibrationOptions::default()).unwrap_err();
        assert!(matches!(err, CalibrationError::ShapeMismatch { .. }));
    }

    #[test]
    fn degenerate_pixels_flagged_not_fatal() {
        let dark = cube(1, 2, 1, |_, _, _| 10.0);
        let white = cube(1, 2, 1, |_, s, _| if s == 0 { 10.0 } else { 20.0 });
        let r = RefFrames::new(dark, white).unwrap();
        let report = validate_references(&r, 1e-6);
        assert_eq!(report.pixels, vec![(0, 0, 0)]);
        let sample = cube(3, 2, 1, |_, _, _| 15.0);
        let out = calibrate(&sample, &r, CalibrationOptions::default()).unwrap();
        assert_eq!(out.degenerate, 3);
        assert_eq!(out.cube.get(0, 0, 0), 2.0);
        assert_eq!(out.cube.get(0, 1, 0), 0.5);
    }

    #[test]
    fn all_degenerate_is_error() {
        let sample = cube(1, 2, 2, |_, _, _| 1.0);
        let err = calibrate(&sample, &refs(1, 2, 2, 5.0, 5.0), CalibrationOptions::default()).unwrap_err();
        assert_eq!(err, CalibrationError::AllPixelsDegenerate);
    }

    #[test]
    fn clean_references_empty_report() {
        let r = refs(3, 3, 3, 0.2, 0.7);
        assert!(validate_references(&r, 1e-6).is_empty());
    }

    #[test]
    fn report_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dark = cube(5, 6, 4, |_, _, _| rng.gen_range(0.0..1.0));
        let white = cube(5, 6, 4, |l, s, b| {
            let d = dark.get(l, s, b);
            if (l * 31 + s * 7 + b) % 5 == 0 {
                d
            } else {
                d + 0.5
            }
        });
        let r = RefFrames::new(dark.clone(), white.clone()).unwrap();
        let report = validate_references(&r, 1e-6);
        let mut expected = Vec::new();
        for l in 0..5 {
            for s in 0..6 {
                for b in 0..4 {
                    if (white.get(l, s, b) as f64 - dark.get(l, s, b) as f64) < 1e-6 {
                        expected.push((l, s, b));
                    }
                }
            }
        }
        assert_eq!(report.pixels, expected);
    }
}

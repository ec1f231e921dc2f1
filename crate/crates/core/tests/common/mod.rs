//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hss_core::calibration::{calibrate, CalibrationOptions, RefFrames};
use hss_core::cube_io::{parse_header, read_cube, write_cube, CubeHeader, DataType, HyperCube, Interleave};
use hss_core::experiments::{SeedDataset, SweepReport};
use hss_core::nn::{gradient_check, LayerKind, LayerSpec, LrGroup, Network};
use hss_core::segmentation::{segment, SegmentConfig};
use hss_core::synthgen::{generate_sample, GenConfig};
use hss_core::transfer::{build_network, run_schedule, ModelConfig, StepOutcome, StopReason, TrainConfig};

fn spec(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec::new(name, kind, LrGroup::Backbone)
}

fn head(name: &str, inputs: usize, units: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Dense { inputs, units }, LrGroup::Head)
}

fn loss() -> LayerSpec {
    LayerSpec::new("loss", LayerKind::SoftmaxXent, LrGroup::Head)
}

/// One small network per layer kind (each isolating that kind between
/// parameterized layers) plus the desk MiniVGG at canvas 16.
pub fn gradient_networks() -> Vec<(String, Network)> {
    use LayerKind::*;
    let conv = |i, o| Conv3x3 {
        in_channels: i,
        out_channels: o,
    };
    let mk = |layers: Vec<LayerSpec>, shape: [usize; 3]| Network::new(shape, layers).unwrap();
    vec![
        (
            "conv3x3".into(),
            mk(vec![spec("c", conv(2, 3)), head("fc", 3 * 36, 3), loss()], [2, 6, 6]),
        ),
        (
            "relu".into(),
            mk(
                vec![spec("c", conv(2, 3)), spec("r", Relu), head("fc", 3 * 36, 3), loss()],
                [2, 6, 6],
            ),
        ),
        (
            "maxpool2".into(),
            mk(
                vec![spec("c", conv(2, 3)), spec("p", MaxPool2), head("fc", 3 * 9, 3), loss()],
                [2, 6, 6],
            ),
        ),
        (
            "dense".into(),
            mk(
                vec![spec("d", Dense { inputs: 18, units: 7 }), head("fc", 7, 3), loss()],
                [2, 3, 3],
            ),
        ),
        (
            "dropout".into(),
            mk(
                vec![
                    spec("d", Dense { inputs: 18, units: 9 }),
                    spec("drop", Dropout { p: 0.5 }),
                    head("fc", 9, 3),
                    loss(),
                ],
                [2, 3, 3],
            ),
        ),
        ("softmax_xent".into(), mk(vec![head("fc", 18, 4), loss()], [2, 3, 3])),
        (
            "minivgg_desk_16".into(),
            build_network(&ModelConfig {
                input_canvas: 16,
                ..ModelConfig::desk(3, 2)
            })
            .unwrap(),
        ),
    ]
}

/// Worst analytic-vs-central-difference relative error of each network,
/// in double precision on a random input and random target.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gradient_networks()
        .into_iter()
        .map(|(name, net)| {
            let mut params = net.init_params::<f64>(rng.gen());
            // Non-zero biases so no unit sits exactly at a ReLU kink.
            for p in params.tensors.iter_mut().filter(|p| p.name.ends_with(".bias")) {
                p.tensor.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
            }
            let x: Vec<f64> = (0..net.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = rng.gen_range(0..net.n_classes());
            let err = gradient_check(&net, &params, &x, target).unwrap();
            (name, err)
        })
        .collect()
}

/// Largest deviation of `calibrate` from a scalar evaluation of
/// `(sample - dark) / max(white - dark, eps)` clamped to `[0, clamp]`,
/// over `lines * samples * bands` random elements with per-line references.
pub fn calibration_oracle(lines: usize, samples: usize, bands: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = CubeHeader::new(lines, samples, bands);
    let dark = HyperCube::from_fn(h.clone(), |_, _, _| rng.gen_range(0.0..2000.0f32)).unwrap();
    let white = HyperCube::from_fn(h.clone(), |l, s, b| {
        let d = dark.get(l, s, b);
        // A few near-degenerate references exercise the eps floor.
        if rng.gen_bool(0.01) {
            d + rng.gen_range(0.0..1e-6f32)
        } else {
            d + rng.gen_range(1.0..10000.0f32)
        }
    })
    .unwrap();
    let sample = HyperCube::from_fn(h, |_, _, _| rng.gen_range(-500.0..15000.0f32)).unwrap();
    let opts = CalibrationOptions::default();
    let refs = RefFrames::new(dark.clone(), white.clone()).unwrap();
    let got = calibrate(&sample, &refs, opts).unwrap();
    let mut worst: f64 = 0.0;
    for l in 0..lines {
        for s in 0..samples {
            for b in 0..bands {
                let (x, d, w) = (
                    sample.get(l, s, b) as f64,
                    dark.get(l, s, b) as f64,
                    white.get(l, s, b) as f64,
                );
                let mut r = (x - d) / (w - d).max(opts.eps);
                if r < 0.0 {
                    r = 0.0;
                }
                if r > opts.clamp_max {
                    r = opts.clamp_max;
                }
                worst = worst.max((got.cube.get(l, s, b) as f64 - r).abs());
            }
        }
    }
    worst
}

/// Calibrating the white frame gives exactly 1 and the dark frame exactly 0
/// at every element.
pub fn calibration_fixed_points(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = CubeHeader::new(1, 40, 30);
    let dark = HyperCube::from_fn(h.clone(), |_, _, _| rng.gen_range(100.0..900.0f32)).unwrap();
    let white = HyperCube::from_fn(h, |l, s, b| dark.get(l, s, b) + rng.gen_range(50.0..9000.0f32)).unwrap();
    let refs = RefFrames::new(dark.clone(), white.clone()).unwrap();
    let opts = CalibrationOptions::default();
    let one = calibrate(&white, &refs, opts).unwrap();
    let zero = calibrate(&dark, &refs, opts).unwrap();
    one.cube.data().iter().all(|&v| v == 1.0) && zero.cube.data().iter().all(|&v| v == 0.0)
}

#[derive(Debug, Clone)]
pub struct SegmentationScore {
    pub cubes: usize,
    pub count_matches: usize,
    pub ious: Vec<f64>,
}

impl SegmentationScore {
    pub fn fraction_at_least(&self, iou: f64) -> f64 {
        self.ious.iter().filter(|&&v| v >= iou).count() as f64 / self.ious.len().max(1) as f64
    }
}

/// Generates `n` cubes, calibrates and segments them, and scores the
/// components against the generator's ground truth.
pub fn segmentation_score(cfg: &GenConfig, seg: &SegmentConfig, n: usize) -> SegmentationScore {
    let refs = cfg.scene.reference_frames().unwrap();
    let mut score = SegmentationScore {
        cubes: n,
        count_matches: 0,
        ious: Vec::new(),
    };
    for i in 0..n {
        let s = generate_sample(cfg, &refs, i).unwrap();
        let refl = calibrate(&s.raw, &refs, CalibrationOptions::default()).unwrap();
        let (_, comps) = segment(&refl, seg).unwrap();
        if comps.len() == 1 {
            score.count_matches += 1;
        }
        let d = refl.cube.dims();
        let best = comps
            .iter()
            .map(|c| c.mask(d.lines, d.samples).iou(&s.truth.mask))
            .fold(0.0, f64::max);
        score.ious.push(best);
    }
    score
}

/// Writes, parses and reads back `n` random cubes across every interleave
/// and sample type; returns the number that failed to round-trip bitwise.
pub fn format_round_trips(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interleaves = [Interleave::Bsq, Interleave::Bil, Interleave::Bip];
    let mut failures = 0;
    for i in 0..n {
        let mut h = CubeHeader::new(rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..12));
        h.interleave = interleaves[i % 3];
        h.data_type = if rng.gen_bool(0.5) {
            DataType::F32
        } else {
            DataType::U16
        };
        if rng.gen_bool(0.5) {
            let mut wl: Vec<f64> = (0..h.bands).map(|_| rng.gen_range(800.0..1800.0)).collect();
            wl.sort_by(f64::total_cmp);
            h.wavelengths = Some(wl);
        }
        let u16_data = h.data_type == DataType::U16;
        let cube = HyperCube::from_fn(h, |_, _, _| {
            if u16_data {
                rng.gen_range(0..=u16::MAX) as f32
            } else {
                f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff)
            }
        })
        .unwrap();
        let (text, bytes) = write_cube(&cube);
        let ok = parse_header(&text)
            .and_then(|hdr| read_cube(&hdr, &bytes))
            .map(|back| {
                back.header == cube.header
                    && back
                        .data()
                        .iter()
                        .zip(cube.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
                    && back.data().len() == cube.data().len()
            })
            .unwrap_or(false);
        if !ok {
            failures += 1;
        }
    }
    failures
}

/// First 1-based iteration whose trailing `window` accuracies average at
/// least `threshold`, found by rescanning every window from scratch.
pub fn brute_force_stop(acc: &[f64], window: usize, threshold: f64) -> Option<usize> {
    (window..=acc.len()).find(|&t| acc[t - window..t].iter().sum::<f64>() / window as f64 >= threshold)
}

/// Runs the training schedule on `trials` random scripted accuracy
/// histories and returns how many stop iterations disagree with the
/// brute-force scan.
pub fn early_stop_mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..300);
        let minibatch = rng.gen_range(1..64);
        let cfg = TrainConfig {
            minibatch,
            max_epochs: rng.gen_range(1..40),
            early_stop_window: rng.gen_range(1..60),
            early_stop_threshold: rng.gen_range(0.5..=1.0),
            rng_seed: rng.gen(),
            ..TrainConfig::default()
        };
        let per_epoch = if n <= minibatch { 1 } else { n / minibatch };
        let total = per_epoch * cfg.max_epochs;
        // Accuracies on a 1/64 grid keep every window sum exact.
        let drift = rng.gen_range(0.0..0.05);
        let acc: Vec<f64> = (0..total)
            .map(|t| {
                let p = (0.5 + drift * t as f64).min(1.0);
                let k = (0..64).filter(|_| rng.gen_bool(p)).count();
                k as f64 / 64.0
            })
            .collect();
        let history = run_schedule(n, &cfg, |it, _| {
            Ok::<_, ()>(StepOutcome {
                accuracy: acc[it],
                loss: 0.0,
            })
        })
        .unwrap();
        let expected = brute_force_stop(&acc, cfg.early_stop_window, cfg.early_stop_threshold);
        let ok = match expected {
            Some(t) => history.iterations_run == t && history.stop_reason == StopReason::EarlyStop,
            None => history.iterations_run == total && history.stop_reason == StopReason::MaxEpochs,
        };
        if !ok {
            mismatches += 1;
        }
    }
    mismatches
}

/// Two-pass mean, maximum and sample standard deviation.
pub fn two_pass_stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mean = sum / n;
    let mut max = values[0];
    let mut ss = 0.0;
    for &v in values {
        if v > max {
            max = v;
        }
        ss += (v - mean) * (v - mean);
    }
    let sd = if values.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, max, sd)
}

/// Largest deviation of any selector summary from the two-pass statistics
/// of its runs' test accuracies.
pub fn report_stats_error(report: &SweepReport) -> f64 {
    let mut worst: f64 = 0.0;
    for s in &report.selectors {
        let accs: Vec<f64> = report
            .runs
            .iter()
            .filter(|r| r.selector == s.selector)
            .map(|r| r.test_accuracy)
            .collect();
        let (mean, max, sd) = two_pass_stats(&accs);
        worst = worst
            .max((s.mean - mean).abs())
            .max((s.max - max).abs())
            .max((s.stddev - sd).abs());
    }
    worst
}

/// The default synthetic seed dataset at canvas 64.
pub fn desk_dataset(cfg: &GenConfig) -> SeedDataset {
    let seg = SegmentConfig {
        canvas: 64,
        ..SegmentConfig::default()
    };
    SeedDataset::synthetic(cfg, &seg).unwrap()
}

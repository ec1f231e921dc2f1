mod common;

use hss_core::experiments::{pretrain, run_sweep, Backbone, BandSelector, PretrainConfig, SweepConfig};
use hss_core::synthgen::{GenConfig, PretextConfig, ShapeFamily};
use hss_core::transfer::TrainConfig;

#[test]
fn four_class_pretext_is_learned() {
    let cfg = PretrainConfig {
        pretext: PretextConfig {
            shapes: vec![ShapeFamily::Ellipse, ShapeFamily::Rectangle],
            levels: vec![0.4, 0.8],
            per_class: 100,
            ..PretextConfig::default()
        },
        train: TrainConfig {
            backbone_lr: 0.01,
            head_lr: 0.01,
            max_epochs: 250,
            ..TrainConfig::pretext()
        },
        ..PretrainConfig::default()
    };
    let (_, _, report) = pretrain(&cfg).unwrap();
    assert_eq!(report.classes, 4);
    assert_eq!(report.train_samples + report.validation_samples, 400);
    assert!(report.validation_accuracy > 0.9, "{}", report.validation_accuracy);
}

#[test]
fn more_contrast_never_costs_accuracy() {
    let (net, params, _) = pretrain(&PretrainConfig::default()).unwrap();
    let backbone = Backbone {
        net: &net,
        params: &params,
    };
    let sweep = SweepConfig {
        selectors: vec![BandSelector::Single(115)],
        repeats: 1,
        keep_histories: false,
        ..SweepConfig::default()
    };
    let mut means = Vec::new();
    for delta in [0.02, 0.05, 0.08] {
        let mut total = 0.0;
        for seed in [1, 2, 3] {
            let data = common::desk_dataset(&GenConfig {
                delta,
                rng_seed: seed,
                ..GenConfig::default()
            });
            total += run_sweep(&data, Some(&backbone), &sweep, 1).unwrap().selectors[0].mean;
        }
        means.push(total / 3.0);
    }
    for w in means.windows(2) {
        assert!(w[1] >= w[0] - 0.02, "{means:?}");
    }
}

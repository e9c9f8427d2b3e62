//! Scratch calibration harness for desk-scale training settings.

use boldseg_core::losses::LossConfig;
use boldseg_core::model::UNetConfig;
use boldseg_core::phantom::{self, PhantomConfig};
use boldseg_core::preprocess::PipelineParams;
use boldseg_core::trainer::{self, TrainConfig};
use boldseg_core::{augment::AugmentConfig, inference, metrics};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let loss_name = args.get(1).map(|s| s.as_str()).unwrap_or("BW-CE");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(80);
    let base_width: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr0: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);

    let t0 = std::time::Instant::now();
    let thick_lo: f64 = std::env::var("THICK_LO").ok().and_then(|v| v.parse().ok()).unwrap_or(2.5);
    let thick_hi: f64 = std::env::var("THICK_HI").ok().and_then(|v| v.parse().ok()).unwrap_or(4.0);
    let envf = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let phantom_cfg = PhantomConfig {
        grid: 32,
        frames: 8,
        phase_lengths: [3, 3, 2],
        ramp_time: 2,
        thickness: [thick_lo, thick_hi],
        noise_sigma: envf("PNOISE", 0.03),
        background_std: envf("BG_STD", 0.10),
        fetus_intensity: [envf("FETUS_LO", 0.55), envf("FETUS_HI", 0.95)],
        placenta_mean: envf("PLAC_MEAN", 0.85),
        seed,
        ..Default::default()
    };
    let cohort = phantom::generate_cohort(20, &phantom_cfg).unwrap();
    let pipeline = PipelineParams {
        percentile: 90.0,
        target_shape: [32, 32, 32],
    };
    // sparse labels: keep 1..6 labels per subject
    let mut rng = boldseg_core::rng::stream(seed, "calib-sparsify", &[]);
    use rand::Rng;
    let subjects: Vec<trainer::Subject> = cohort
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let max_nl: usize = std::env::var("MAX_NL").ok().and_then(|v| v.parse().ok()).unwrap_or(6);
            let n_l = rng.random_range(1..=max_nl);
            let keep: Vec<usize> = (0..n_l)
                .map(|j| (j * phantom_cfg.frames / n_l.max(1)).min(phantom_cfg.frames - 1))
                .collect();
            let series = phantom::sparsify_labels(&p.series, &keep).unwrap();
            let subject = trainer::Subject {
                record: p.record.clone(),
                series,
            };
            let s = trainer::preprocess_subject(&subject, &pipeline).unwrap();
            eprintln!("subject {i}: {} labels, {} fg voxels", n_l, s.series.labels[keep.first().unwrap()].count());
            s
        })
        .collect();
    let (train_set, val_set, test_set) =
        trainer::stratified_split(subjects, [0.65, 0.15, 0.20], seed).unwrap();
    eprintln!(
        "split: {}/{}/{} gen {:?}",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        t0.elapsed()
    );

    let cfg = TrainConfig {
        lr0,
        epochs,
        batch_size: 8,
        val_every: 10,
        seed,
        split: [0.65, 0.15, 0.20],
        loss: {
            let mut l = LossConfig::named(loss_name);
            l.kernel_size = std::env::var("LOSS_K").ok().and_then(|v| v.parse().ok()).unwrap_or(11);
            l
        },
        augment: {
            let no_aug = std::env::var("NO_AUG").is_ok();
            if no_aug {
                AugmentConfig::disabled()
            } else {
                AugmentConfig {
                    max_translation: 3.0,
                    elastic_max_displacement: 3.0,
                    noise_sigma: std::env::var("NOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.25),
                    ..Default::default()
                }
            }
        },
        model: UNetConfig {
            base_width,
            ..Default::default()
        },
        pipeline,
        threshold: 0.5,
        adam: Default::default(),
    };
    let t1 = std::time::Instant::now();
    let result = trainer::train(&cfg, &train_set, &val_set).unwrap();
    eprintln!(
        "trained {} epochs in {:?}; best val dice {:.2} at epoch {}",
        epochs,
        t1.elapsed(),
        result.checkpoint.val_dice,
        result.checkpoint.epoch
    );
    for row in result.history.iter().step_by((epochs / 15).max(1)) {
        eprintln!(
            "  epoch {:>4} loss {:.5} lr {:.2e} val {:?}",
            row.epoch, row.loss, row.lr, row.val_dice
        );
    }

    // test evaluation
    let net = result.checkpoint.restore().unwrap();

    // diagnostics: train-set eval dice (overfit check), prediction sizes
    let mut train_dices = Vec::new();
    for s in train_set.subjects.iter().take(4) {
        for (&frame, label) in s.series.labels.iter().take(1) {
            let outcome = inference::predict(&net, &s.series.frames[frame], 0.5).unwrap();
            let d = metrics::dice(label, &outcome.mask).unwrap();
            eprintln!(
                "  train {}: dice {:.1} pred {} gt {} empty={}",
                s.record.subject_id,
                d,
                outcome.mask.count(),
                label.count(),
                outcome.empty_prediction
            );
            train_dices.push(d);
        }
    }
    eprintln!("train-eval dice mean {:.2}", boldseg_core::stats::mean(&train_dices));

    let mut dices = Vec::new();
    for s in &test_set.subjects {
        for (&frame, label) in &s.series.labels {
            let outcome = inference::predict(&net, &s.series.frames[frame], 0.5).unwrap();
            dices.push(metrics::dice(label, &outcome.mask).unwrap());
        }
    }
    let mean = boldseg_core::stats::mean(&dices);
    eprintln!(
        "TEST dice mean {:.2} (n={}) min {:.2}; total {:?}",
        mean,
        dices.len(),
        dices.iter().cloned().fold(f64::INFINITY, f64::min),
        t0.elapsed()
    );
    println!("{loss_name},{seed},{mean:.3}");
}

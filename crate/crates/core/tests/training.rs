use rand::Rng;

use voicepd::augment::{AugmentationConfig, NoiseCorpus};
use voicepd::model::ModelConfig;
use voicepd::seed;
use voicepd::train::{
    adam_update, initial_params, train, AdamConfig, AdamState, Configuration, TrainConfig, TrainSample,
};
use voicepd::Label;

/// Textbook Adam on one scalar, written out independently.
fn adam_reference(lr: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    let (mut theta, mut m, mut v) = (0.0, 0.0, 0.0);
    let mut path = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(theta);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        path.push(theta);
    }
    path
}

#[test]
fn adam_minimizes_a_quadratic() {
    let grad = |th: f64| 2.0 * (th - 3.0);
    let reference = adam_reference(0.1, 500, grad);
    let config = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    let mut theta = [0.0];
    let mut state = AdamState::for_shapes([1]);
    for (step, want) in reference.iter().enumerate() {
        let g = [grad(theta[0])];
        adam_update(&mut [&mut theta[..]], &[&g[..]], &mut state, &config).unwrap();
        assert!((theta[0] - want).abs() <= 1e-12, "step {step}: {} vs {want}", theta[0]);
    }
    assert!((theta[0] - 3.0).abs() < 1e-3, "theta = {}", theta[0]);
}

fn tone(freq: f64, len: usize, phase: f64) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0 + phase).sin())
        .collect()
}

fn noise(len: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

/// Patient one speaks low tones, patient two is hiss.
fn toy_clips() -> Vec<(Vec<f64>, Label)> {
    let mut v = Vec::new();
    for k in 0..4 {
        v.push((tone(150.0 + 10.0 * k as f64, 1600, k as f64), Label::Hp));
        v.push((noise(1600, k), Label::Pd));
    }
    v
}

fn samples(clips: &[(Vec<f64>, Label)]) -> Vec<TrainSample<'_>> {
    clips
        .iter()
        .map(|(w, l)| TrainSample {
            waveform: w,
            label: *l,
            features: None,
        })
        .collect()
}

fn toy_config(configuration: Configuration, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        configuration,
        seed: 3,
        augmentation: AugmentationConfig::disabled(),
        ..TrainConfig::default()
    }
}

#[test]
fn toy_patients_are_learned_within_fifty_epochs() {
    let model = ModelConfig::miniature();
    let clips = toy_clips();
    let config = toy_config(Configuration::FullScratch, 50);
    let params = initial_params(&model, config.configuration, None, config.seed).unwrap();
    let (_, log) = train(&samples(&clips), params, &model, &config, &NoiseCorpus::empty()).unwrap();
    let losses = log.losses();
    assert_eq!(losses.len(), 50);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(*losses.last().unwrap() < 0.05, "{losses:?}");
}

#[test]
fn only_trainable_parameters_move() {
    let model = ModelConfig::miniature();
    let clips = toy_clips();
    let pretrained = initial_params(&model, Configuration::FullScratch, None, 99)
        .unwrap()
        .conv;
    for configuration in [
        Configuration::Frozen,
        Configuration::FullPretrained,
        Configuration::FullScratch,
    ] {
        let config = toy_config(configuration, 2);
        let start = initial_params(&model, configuration, Some(pretrained.clone()), config.seed).unwrap();
        let trainable: Vec<usize> = start.trainable_tensors().iter().map(|t| t.len()).collect();
        assert_eq!(AdamState::new(&start).lengths(), trainable);
        let (end, _) = train(&samples(&clips), start.clone(), &model, &config, &NoiseCorpus::empty()).unwrap();
        assert_eq!(end.conv.frozen, configuration == Configuration::Frozen);
        if configuration == Configuration::Frozen {
            assert_eq!(end.conv, start.conv, "frozen conv changed");
        } else {
            assert_ne!(end.conv.tensors(), start.conv.tensors());
        }
        assert_ne!(end.gru, start.gru);
        assert_ne!(end.head, start.head);
    }
}

fn augmenting() -> AugmentationConfig {
    AugmentationConfig {
        p_background: 0.0,
        ..AugmentationConfig::default()
    }
}

#[test]
fn same_seed_same_run() {
    let model = ModelConfig::miniature();
    let clips = toy_clips();
    let config = TrainConfig {
        augmentation: augmenting(),
        trace_augment: true,
        ..toy_config(Configuration::FullScratch, 3)
    };
    let run = || {
        let params = initial_params(&model, config.configuration, None, config.seed).unwrap();
        train(&samples(&clips), params, &model, &config, &NoiseCorpus::empty()).unwrap()
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a.losses(), log_b.losses());
    assert_eq!(log_a.augment_trace, log_b.augment_trace);
    assert!(log_a.augment_trace.iter().any(|t| !t.applied.is_empty()));

    let other = TrainConfig {
        augment_seed: Some(1234),
        ..config.clone()
    };
    let params = initial_params(&model, other.configuration, None, other.seed).unwrap();
    let (_, log_c) = train(&samples(&clips), params, &model, &other, &NoiseCorpus::empty()).unwrap();
    assert_ne!(log_a.augment_trace, log_c.augment_trace);
}

#[test]
fn zero_probability_augmentation_equals_raw_training() {
    let model = ModelConfig::miniature();
    let clips = toy_clips();
    let raw = toy_config(Configuration::FullScratch, 3);
    let zeroed = TrainConfig {
        augmentation: AugmentationConfig {
            p_background: 0.0,
            p_colored: 0.0,
            p_shift: 0.0,
            p_polarity: 0.0,
            ..augmenting()
        },
        augment_seed: Some(77),
        ..raw.clone()
    };
    let run = |c: &TrainConfig| {
        let params = initial_params(&model, c.configuration, None, c.seed).unwrap();
        train(&samples(&clips), params, &model, c, &NoiseCorpus::empty()).unwrap()
    };
    let (a, log_a) = run(&raw);
    let (b, log_b) = run(&zeroed);
    assert_eq!(a, b);
    assert_eq!(log_a.losses(), log_b.losses());
}

#[test]
fn threads_change_results_only_within_reduction_rounding() {
    let model = ModelConfig::miniature();
    let clips = toy_clips();
    let one = toy_config(Configuration::FullScratch, 3);
    let three = TrainConfig {
        threads: 3,
        ..one.clone()
    };
    let run = |c: &TrainConfig| {
        let params = initial_params(&model, c.configuration, None, c.seed).unwrap();
        train(&samples(&clips), params, &model, c, &NoiseCorpus::empty())
            .unwrap()
            .1
    };
    for (a, b) in run(&one).losses().iter().zip(run(&three).losses()) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

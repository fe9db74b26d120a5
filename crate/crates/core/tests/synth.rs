use std::fs;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use voicepd::audio::{preprocess, read_wav, MODEL_SAMPLE_RATE};
use voicepd::data::{load_manifest, render_clip, synth_generate, SynthConfig, UtteranceType, VoiceParams};
use voicepd::seed;
use voicepd::Label;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_pd: 2,
        n_hp: 2,
        samples_per_patient: 4,
        duration_s: [0.5, 1.0],
        seed,
        ..SynthConfig::default()
    }
}

fn wav_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(wav_files(&path));
        } else if path.extension().is_some_and(|e| e == "wav") {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest_path = synth_generate(&small(7), tmp.path()).unwrap();
    assert_eq!(wav_files(tmp.path()).len(), 16);
    let manifest = load_manifest(&manifest_path).unwrap();
    assert_eq!(manifest.sample_count(), 16);
    assert_eq!(manifest.group_counts(), (2, 2));
    for p in &manifest.patients {
        assert_eq!(p.hy_grade.is_some(), p.group == Label::Pd);
        assert_eq!(p.samples.len(), 4);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    synth_generate(&small(3), a.path()).unwrap();
    synth_generate(&small(3), b.path()).unwrap();
    synth_generate(&small(4), c.path()).unwrap();
    let files = |d: &Path| {
        wav_files(d)
            .into_iter()
            .map(|p| fs::read(p).unwrap())
            .chain([fs::read(d.join("manifest.csv")).unwrap()])
            .collect::<Vec<_>>()
    };
    assert_eq!(files(a.path()), files(b.path()));
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn corpus_survives_preprocessing() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        stereo: true,
        ..small(11)
    };
    synth_generate(&config, tmp.path()).unwrap();
    for path in wav_files(tmp.path()) {
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.num_channels(), 2);
        let out = preprocess(&clip, MODEL_SAMPLE_RATE).unwrap();
        assert!(!out.silent && !out.subtraction_skipped, "{}", path.display());
    }
}

fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf[..x.len() / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// Sideband power at carrier ± tremor relative to the carrier, in dB. The
/// carrier is the strongest bin within 6% of the nominal f0 (clips detune
/// by up to 5%); each sideband is the strongest bin within 1 Hz.
fn sideband_db(x: &[f64], f0: f64, tremor: f64) -> f64 {
    let p = power_spectrum(x);
    let hz_per_bin = 16000.0 / x.len() as f64;
    let strongest = |lo_hz: f64, hi_hz: f64| {
        let lo = (lo_hz / hz_per_bin).floor() as usize;
        let hi = (hi_hz / hz_per_bin).ceil() as usize;
        (lo..=hi).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap()
    };
    let carrier = strongest(0.94 * f0, 1.06 * f0) as f64 * hz_per_bin;
    let line = |f: f64| p[strongest(f - 1.0, f + 1.0)];
    let side = 0.5 * (line(carrier - tremor) + line(carrier + tremor));
    10.0 * (side / line(carrier)).log10()
}

#[test]
fn tremor_sidebands_separate_the_groups() {
    let healthy = VoiceParams {
        f0_hz: 150.0,
        tremor_hz: 0.0,
        am_depth: 0.0,
        fm_depth: 0.0,
        jitter: 0.001,
        shimmer: 0.01,
        noise_floor: 0.01,
    };
    let pd = VoiceParams {
        tremor_hz: 5.5,
        am_depth: 0.4,
        fm_depth: 0.01,
        jitter: 0.01,
        shimmer: 0.05,
        noise_floor: 0.1,
        ..healthy
    };
    for s in 0..5 {
        let render =
            |v: &VoiceParams| render_clip(v, UtteranceType::SustainedVowel, "a", 32000, 16000, &mut seed::rng(s));
        let with = sideband_db(&render(&pd), 150.0, 5.5);
        let without = sideband_db(&render(&healthy), 150.0, 5.5);
        assert!(with > -18.0, "seed {s}: PD-like sidebands at {with:.1} dB");
        assert!(without < -25.0, "seed {s}: healthy sidebands at {without:.1} dB");
    }
}

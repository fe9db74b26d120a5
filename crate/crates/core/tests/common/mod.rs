//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod survey;

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use voicepd::audio::AudioClip;
use voicepd::augment::{add_colored_noise, mix_background_fragment, Mixed};
use voicepd::data::{hy_grade_bins, Manifest, PatientInfo};
use voicepd::eval::{vote_labels, ConfusionMetrics, VotingResult};
use voicepd::features::{conv_backward, conv_forward_train, ConvStackConfig, ConvStackParams};
use voicepd::model::{gru_backward_batch, gru_forward_batch, head_backward, head_forward, GruParams, HeadParams};
use voicepd::seed;
use voicepd::Label;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor of 1e-5 on the denominator. Gradients that
/// are exactly zero (the bias ahead of a normalization, for one) come out
/// of the central difference as rounding noise of about 1e-11.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Central-difference derivative of `loss` with respect to entry `j` of
/// parameter tensor `tensor`.
fn central<P: Clone>(
    params: &P,
    tensor: usize,
    j: usize,
    tensors_mut: impl Fn(&mut P) -> Vec<&mut [f64]>,
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let mut plus = params.clone();
    tensors_mut(&mut plus)[tensor][j] += FD_STEP;
    let mut minus = params.clone();
    tensors_mut(&mut minus)[tensor][j] -= FD_STEP;
    (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
}

/// Two-layer, 8-channel stack on 64 samples with a random linear readout.
/// Returns the largest relative error over every parameter and input sample.
pub fn conv_gradient_error(s: u64) -> f64 {
    let mut rng = seed::rng(s);
    let config = ConvStackConfig::uniform(8, &[(8, 4), (3, 2)]);
    let mut params = ConvStackParams::kaiming_uniform(&config, &mut rng).unwrap();
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
    }
    let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let frames = config.output_frames(64).unwrap();
    let readout = random_matrix(frames, 8, &mut rng);

    let loss = |p: &ConvStackParams, x: &[f64]| {
        let (map, _) = conv_forward_train(x, 16000, p, &config).unwrap();
        (&map.data * &readout).sum()
    };
    let (_, cache) = conv_forward_train(&x, 16000, &params, &config).unwrap();
    let (dx, grads) = conv_backward(&readout, &cache, &params, &config).unwrap();
    let grads = grads.unwrap();

    let mut worst = 0.0_f64;
    for (ti, g) in grads.tensors().iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let n = central(&params, ti, j, |p| p.tensors_mut(), |p| loss(p, &x));
            worst = worst.max(rel_err(a, n));
        }
    }
    for (j, &a) in dx.iter().enumerate() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[j] += FD_STEP;
        xm[j] -= FD_STEP;
        let n = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(a, n));
    }
    worst
}

/// Bidirectional GRU with hidden size 4 on a batch of two 6-frame,
/// 8-feature sequences.
pub fn gru_gradient_error(s: u64) -> f64 {
    let mut rng = seed::rng(s);
    let params = GruParams::uniform(8, 4, &mut rng);
    let inputs = [random_matrix(6, 8, &mut rng), random_matrix(6, 8, &mut rng)];
    let readout = random_matrix(2, 8, &mut rng);

    let loss = |p: &GruParams, xs: &[Array2<f64>]| {
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let (h, _) = gru_forward_batch(&views, p).unwrap();
        (&h * &readout).sum()
    };
    let views: Vec<_> = inputs.iter().map(|x| x.view()).collect();
    let (_, cache) = gru_forward_batch(&views, &params).unwrap();
    let mut grads = GruParams::zeros(8, 4);
    let dx = gru_backward_batch(&readout, &cache, &params, &mut grads, true)
        .unwrap()
        .unwrap();

    let mut worst = 0.0_f64;
    for (ti, g) in grads.tensors().iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let n = central(&params, ti, j, |p| p.tensors_mut(), |p| loss(p, &inputs));
            worst = worst.max(rel_err(a, n));
        }
    }
    for (b, d) in dx.iter().enumerate() {
        for ((t, f), &a) in d.indexed_iter() {
            let (mut xp, mut xm) = (inputs.clone(), inputs.clone());
            xp[b][[t, f]] += FD_STEP;
            xm[b][[t, f]] -= FD_STEP;
            let n = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, n));
        }
    }
    worst
}

/// Head `[8, 6, 5, 2]` on a batch of three inputs.
pub fn head_gradient_error(s: u64) -> f64 {
    let mut rng = seed::rng(s);
    let params = HeadParams::uniform(&[8, 6, 5, 2], &mut rng);
    let x = random_matrix(3, 8, &mut rng);
    let readout = random_matrix(3, 2, &mut rng);

    let loss = |p: &HeadParams, x: &Array2<f64>| (&head_forward(x, p).unwrap().0 * &readout).sum();
    let (_, cache) = head_forward(&x, &params).unwrap();
    let mut grads = HeadParams::zeros(&[8, 6, 5, 2]);
    let dx = head_backward(&readout, &cache, &params, &mut grads);

    let mut worst = 0.0_f64;
    for (ti, g) in grads.tensors().iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let n = central(&params, ti, j, |p| p.tensors_mut(), |p| loss(p, &x));
            worst = worst.max(rel_err(a, n));
        }
    }
    for ((r, c), &a) in dx.indexed_iter() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[[r, c]] += FD_STEP;
        xm[[r, c]] -= FD_STEP;
        let n = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(a, n));
    }
    worst
}

/// One second of a 440 Hz tone with the given RMS.
pub fn tone(rms: f64, len: usize) -> AudioClip {
    let amp = rms * 2f64.sqrt();
    let samples = (0..len)
        .map(|i| amp * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
        .collect();
    AudioClip::mono(samples, 16000).unwrap()
}

fn power(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64
}

/// SNR of `mixed` against `clean`, taking the difference as the added noise.
pub fn measured_snr_db(clean: &AudioClip, mixed: &AudioClip) -> f64 {
    let noise: Vec<f64> = mixed
        .samples()
        .iter()
        .zip(clean.samples())
        .map(|(m, c)| m - c)
        .collect();
    10.0 * (power(clean.samples()) / power(&noise)).log10()
}

pub fn colored_snr_db(requested: f64, f_decay: f64, s: u64) -> f64 {
    let clip = tone(0.1, 16000);
    match add_colored_noise(&clip, requested, f_decay, &mut seed::rng(s)).unwrap() {
        Mixed::Applied(out) => measured_snr_db(&clip, &out),
        Mixed::Skipped(r) => panic!("colored noise skipped: {r:?}"),
    }
}

/// Background noise from a 0.7 s recording-like clip (tiled to the clip
/// length) at a random offset.
pub fn background_snr_db(requested: f64, s: u64) -> f64 {
    let mut rng = seed::rng(s);
    let clip = tone(0.1, 16000);
    let noise: Vec<f64> = (0..11200)
        .map(|i| 0.3 * (i as f64 * 0.013).sin() + rng.random_range(-0.2..0.2))
        .collect();
    let noise = AudioClip::mono(noise, 16000).unwrap();
    let offset = rng.random_range(0..noise.len());
    match mix_background_fragment(&clip, &noise, offset, requested).unwrap() {
        Mixed::Applied(out) => measured_snr_db(&clip, &out),
        Mixed::Skipped(r) => panic!("background noise skipped: {r:?}"),
    }
}

/// Welch PSD (Hann window, 50% overlap) averaged over several realizations,
/// then a least-squares fit of log10 PSD against log10 frequency.
pub fn psd_slope(realizations: &[Vec<f64>], segment: usize) -> f64 {
    let window: Vec<f64> = (0..segment)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / segment as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment);
    let mut psd = vec![0.0; segment / 2 + 1];
    let mut count = 0usize;
    for x in realizations {
        let mut start = 0;
        while start + segment <= x.len() {
            let mut buf: Vec<Complex<f64>> = x[start..start + segment]
                .iter()
                .zip(&window)
                .map(|(v, w)| Complex::new(v * w, 0.0))
                .collect();
            fft.process(&mut buf);
            for (p, b) in psd.iter_mut().zip(&buf) {
                *p += b.norm_sqr();
            }
            count += 1;
            start += segment / 2;
        }
    }
    // skip the lowest bins, where the window's main lobe mixes in DC
    let pts: Vec<(f64, f64)> = (4..=segment / 2)
        .map(|k| ((k as f64).log10(), (psd[k] / count as f64).log10()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Mode recount: PD iff at least half of the labels are PD.
pub fn brute_vote(labels: &[Label]) -> (usize, Label) {
    let mut counts: HashMap<Label, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let pd = counts.get(&Label::Pd).copied().unwrap_or(0);
    let hp = counts.get(&Label::Hp).copied().unwrap_or(0);
    (pd, if pd >= hp { Label::Pd } else { Label::Hp })
}

/// Mann-Whitney AUC by comparing every positive with every negative.
pub fn brute_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// 38 PD patients graded like the reference cohort and 10 HP patients.
pub fn table3_patients() -> Vec<PatientInfo> {
    let mut v: Vec<PatientInfo> = hy_grade_bins(38)
        .into_iter()
        .enumerate()
        .map(|(i, g)| PatientInfo {
            patient_id: format!("PD{:02}", i + 1),
            group: Label::Pd,
            hy_grade: Some(g),
        })
        .collect();
    v.extend((1..=10).map(|i| PatientInfo {
        patient_id: format!("HP{i:02}"),
        group: Label::Hp,
        hy_grade: None,
    }));
    v
}

/// Manifest for [`table3_patients`] with `per_patient` rows each; files
/// are not checked.
pub fn table3_manifest(per_patient: usize) -> Manifest {
    let mut text = String::from("patient_id,group,hy_grade,file,utterance_type\n");
    for p in table3_patients() {
        let (group, hy) = match p.hy_grade {
            Some(g) => ("PD", g.to_string()),
            None => ("HP", String::new()),
        };
        for k in 0..per_patient {
            text.push_str(&format!("{},{group},{hy},{0}/{k:02}.wav,vowel\n", p.patient_id));
        }
    }
    Manifest::parse(&text, "corpus", false).unwrap()
}

/// Voting results for 38 PD patients of which `pd_missed` are voted HP,
/// and 10 HP patients of which `hp_missed` are voted PD.
pub fn constructed_votes(pd_missed: usize, hp_missed: usize) -> (Vec<VotingResult>, HashMap<String, Label>) {
    let mut results = Vec::new();
    let mut truth = HashMap::new();
    for i in 0..48 {
        let (id, group, wrong) = if i < 38 {
            (format!("PD{i}"), Label::Pd, i < pd_missed)
        } else {
            (format!("HP{i}"), Label::Hp, i - 38 < hp_missed)
        };
        let other = if group == Label::Pd { Label::Hp } else { Label::Pd };
        // 43 clips with a 30/13 majority for the voted label
        let voted = if wrong { other } else { group };
        let minority = if voted == Label::Pd { Label::Hp } else { Label::Pd };
        let mut labels = vec![voted; 30];
        labels.extend(vec![minority; 13]);
        results.push(vote_labels(&id, &labels).unwrap());
        truth.insert(id, group);
    }
    (results, truth)
}

pub fn metrics_match_fixture(m: &ConfusionMetrics) -> bool {
    (m.accuracy * 100.0 - 97.92).abs() <= 0.01
        && m.sensitivity.is_some_and(|s| (s - 0.974).abs() <= 0.005)
        && m.specificity == Some(1.0)
}

/// Independent frame count: apply L -> floor((L - k) / s) + 1 per layer.
pub fn frames_by_formula(len: usize, shape: &[(usize, usize)]) -> Option<usize> {
    let mut l = len;
    for &(k, s) in shape {
        if l < k {
            return None;
        }
        l = (l - k) / s + 1;
    }
    Some(l)
}

pub const BASE_SHAPE: [(usize, usize); 7] = [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];

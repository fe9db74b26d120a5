//! Synthetic voice corpus.
//!
//! A test fixture, not a clinical simulator. Healthy voices are a stable
//! harmonic source shaped by vowel formants. Pathological voices add a slow
//! amplitude and frequency tremor, extra cycle-to-cycle jitter and shimmer,
//! and a breath-noise floor, all scaled by a per-patient severity.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{protocol_sequence, Manifest, PatientRecord, SampleEntry, UtteranceType};
use crate::audio::{write_wav_with_comment, AudioClip};
use crate::error::{Error, Result};
use crate::model::Label;
use crate::seed::{self, purpose};

/// Hoehn-Yahr grade counts of the reference cohort (38 PD patients).
pub const TABLE3_HY_COUNTS: [(u8, usize); 5] = [(1, 2), (2, 11), (3, 13), (4, 11), (5, 1)];

/// Parameter value for healthy voices and at full pathological severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathologyRange {
    pub healthy: f64,
    pub severe: f64,
}

impl PathologyRange {
    fn at(&self, severity: f64) -> f64 {
        self.healthy + severity * (self.severe - self.healthy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_pd: usize,
    pub n_hp: usize,
    pub samples_per_patient: usize,
    /// Clip duration range in seconds.
    pub duration_s: [f64; 2],
    pub sample_rate: u32,
    /// Two channels: voice plus ambient on the left, ambient alone on the right.
    pub stereo: bool,
    pub seed: u64,
    pub f0_hz: [f64; 2],
    pub tremor_hz: [f64; 2],
    /// PD severity is drawn uniformly from this range.
    pub severity: [f64; 2],
    /// Relative amplitude modulation depth.
    pub tremor_depth: PathologyRange,
    /// Relative frequency modulation depth.
    pub tremor_fm_depth: PathologyRange,
    /// Cycle-to-cycle period perturbation (fraction, standard deviation).
    pub jitter: PathologyRange,
    /// Cycle-to-cycle amplitude perturbation (fraction, standard deviation).
    pub shimmer: PathologyRange,
    /// Breath-noise RMS relative to voice RMS.
    pub noise_floor: PathologyRange,
    /// Ambient noise RMS relative to full scale (stereo only).
    pub ambient_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pd: 38,
            n_hp: 10,
            samples_per_patient: 43,
            duration_s: [1.0, 2.0],
            sample_rate: crate::audio::MODEL_SAMPLE_RATE,
            stereo: false,
            seed: 0,
            f0_hz: [120.0, 220.0],
            tremor_hz: [4.0, 7.0],
            severity: [0.3, 1.0],
            tremor_depth: PathologyRange {
                healthy: 0.0,
                severe: 0.5,
            },
            tremor_fm_depth: PathologyRange {
                healthy: 0.0,
                severe: 0.03,
            },
            jitter: PathologyRange {
                healthy: 0.002,
                severe: 0.03,
            },
            shimmer: PathologyRange {
                healthy: 0.01,
                severe: 0.15,
            },
            noise_floor: PathologyRange {
                healthy: 0.01,
                severe: 0.3,
            },
            ambient_level: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_pd == 0 || self.n_hp == 0 || self.samples_per_patient == 0 {
            return bad("patient and sample counts must be at least 1".into());
        }
        if self.sample_rate < 8000 {
            return bad(format!("sample rate {} is below 8 kHz", self.sample_rate));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|x| x.is_finite());
        if !ordered(self.duration_s) || self.duration_s[0] <= 0.0 {
            return bad("duration range must be positive and ordered".into());
        }
        if !ordered(self.f0_hz) || self.f0_hz[0] < 50.0 || self.f0_hz[1] > 500.0 {
            return bad("f0 range must lie within [50, 500] Hz".into());
        }
        if !ordered(self.tremor_hz) || self.tremor_hz[0] < 3.0 || self.tremor_hz[1] > 12.0 {
            return bad("tremor frequency must lie within [3, 12] Hz".into());
        }
        if !ordered(self.severity) || self.severity[0] < 0.0 || self.severity[1] > 1.0 {
            return bad("severity range must lie within [0, 1]".into());
        }
        for (name, r) in [
            ("tremor_depth", self.tremor_depth),
            ("tremor_fm_depth", self.tremor_fm_depth),
            ("jitter", self.jitter),
            ("shimmer", self.shimmer),
            ("noise_floor", self.noise_floor),
        ] {
            if !(0.0..=1.0).contains(&r.healthy) || !(0.0..=1.0).contains(&r.severe) {
                return bad(format!("{name} values must lie within [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.ambient_level) {
            return bad("ambient level must lie within [0, 1]".into());
        }
        Ok(())
    }
}

/// Source parameters of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoiceParams {
    pub f0_hz: f64,
    pub tremor_hz: f64,
    pub am_depth: f64,
    pub fm_depth: f64,
    pub jitter: f64,
    pub shimmer: f64,
    pub noise_floor: f64,
}

impl VoiceParams {
    fn healthy(config: &SynthConfig, rng: &mut impl rand::Rng) -> Self {
        Self {
            f0_hz: rng.random_range(config.f0_hz[0]..=config.f0_hz[1]),
            tremor_hz: 0.0,
            am_depth: config.tremor_depth.healthy,
            fm_depth: config.tremor_fm_depth.healthy,
            jitter: config.jitter.healthy * rng.random_range(0.3..=1.0),
            shimmer: config.shimmer.healthy * rng.random_range(0.5..=1.0),
            noise_floor: config.noise_floor.healthy,
        }
    }

    fn pathological(config: &SynthConfig, severity: f64, rng: &mut impl rand::Rng) -> Self {
        Self {
            f0_hz: rng.random_range(config.f0_hz[0]..=config.f0_hz[1]),
            tremor_hz: rng.random_range(config.tremor_hz[0]..=config.tremor_hz[1]),
            am_depth: config.tremor_depth.at(severity),
            fm_depth: config.tremor_fm_depth.at(severity),
            jitter: config.jitter.at(severity),
            shimmer: config.shimmer.at(severity),
            noise_floor: config.noise_floor.at(severity),
        }
    }
}

/// Grades for `n` patients sorted by ascending severity, following the
/// reference cohort's cumulative grade proportions.
pub fn hy_grade_bins(n: usize) -> Vec<u8> {
    let total: usize = TABLE3_HY_COUNTS.iter().map(|&(_, c)| c).sum();
    (0..n)
        .map(|r| {
            let q = (r as f64 + 0.5) / n as f64 * total as f64;
            let mut cum = 0.0;
            for &(grade, count) in &TABLE3_HY_COUNTS {
                cum += count as f64;
                if q < cum {
                    return grade;
                }
            }
            TABLE3_HY_COUNTS[TABLE3_HY_COUNTS.len() - 1].0
        })
        .collect()
}

/// Maps severities to grades by rank; the result is non-decreasing in severity.
pub fn severity_to_hy(severities: &[f64]) -> Vec<u8> {
    let mut order: Vec<usize> = (0..severities.len()).collect();
    order.sort_by(|&a, &b| severities[a].total_cmp(&severities[b]).then(a.cmp(&b)));
    let bins = hy_grade_bins(severities.len());
    let mut out = vec![0; severities.len()];
    for (rank, &i) in order.iter().enumerate() {
        // equal severities share a grade
        out[i] = match rank.checked_sub(1).map(|r| order[r]) {
            Some(prev) if severities[prev] == severities[i] => out[prev],
            _ => bins[rank],
        };
    }
    out
}

fn formants(text: &str) -> [f64; 3] {
    let vowel = text
        .chars()
        .find(|c| "aeiouy".contains(c.to_ascii_lowercase()))
        .unwrap_or('a');
    match vowel.to_ascii_lowercase() {
        'e' => [500.0, 1800.0, 2500.0],
        'i' | 'y' => [300.0, 2300.0, 3000.0],
        'o' => [500.0, 900.0, 2400.0],
        'u' => [350.0, 800.0, 2300.0],
        _ => [800.0, 1200.0, 2500.0],
    }
}

fn syllables(text: &str) -> usize {
    text.chars()
        .filter(|c| "aeiouyąę".contains(c.to_lowercase().next().unwrap_or(' ')))
        .count()
        .max(1)
}

/// Amplitude envelope in [0, 1] for the utterance shape.
fn envelope(kind: UtteranceType, text: &str, t: f64, duration: f64) -> f64 {
    let x = t / duration;
    let fade = |x: f64, w: f64| {
        let a = (x / w).min(1.0);
        let b = ((1.0 - x) / w).min(1.0);
        a.min(b).max(0.0)
    };
    match kind {
        UtteranceType::SustainedVowel => fade(x, 0.05),
        UtteranceType::Vowel => {
            let u = ((x - 0.1) / 0.8).clamp(0.0, 1.0);
            (PI * u).sin()
        }
        UtteranceType::Word | UtteranceType::Sentence => {
            let n = syllables(text) as f64;
            let phase = (x * n).fract();
            0.15 + 0.85 * (PI * phase).sin().powi(2)
        }
    }
    .max(0.0)
        * fade(x, 0.02)
}

/// One mono clip for a speaker, peak-normalized to 0.8.
pub fn render_clip(
    voice: &VoiceParams,
    kind: UtteranceType,
    text: &str,
    samples: usize,
    sample_rate: u32,
    rng: &mut impl rand::Rng,
) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let duration = samples as f64 / fs;
    let f0 = voice.f0_hz * rng.random_range(0.95..=1.05);
    let peak_f0 = f0 * (1.0 + voice.fm_depth) * 1.1;
    let harmonics = ((0.45 * fs / peak_f0) as usize).clamp(1, 60);
    let [f1, f2, f3] = formants(text);
    let gains: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let f = k as f64 * f0;
            let res: f64 = [(f1, 90.0), (f2, 120.0), (f3, 160.0)]
                .iter()
                .map(|&(fc, bw)| 1.0 / (1.0 + ((f - fc) / bw).powi(2)))
                .sum();
            (0.05 + res) / k as f64
        })
        .collect();

    let jitter = Normal::new(0.0, voice.jitter.max(0.0)).expect("finite");
    let shimmer = Normal::new(0.0, voice.shimmer.max(0.0)).expect("finite");
    let trem_phase = rng.random_range(0.0..2.0 * PI);
    let am_phase = trem_phase + rng.random_range(-0.5..0.5);
    let mut cycle_f = f0 * (1.0 + jitter.sample(rng));
    let mut cycle_amp = (1.0 + shimmer.sample(rng)).max(0.0);
    let mut phase = 0.0_f64;
    let mut out = Vec::with_capacity(samples);
    for n in 0..samples {
        let t = n as f64 / fs;
        let trem = 2.0 * PI * voice.tremor_hz * t;
        phase += cycle_f * (1.0 + voice.fm_depth * (trem + trem_phase).sin()) / fs;
        if phase >= 1.0 {
            phase -= 1.0;
            cycle_f = f0 * (1.0 + jitter.sample(rng));
            cycle_amp = (1.0 + shimmer.sample(rng)).max(0.0);
        }
        // Σ g_k sin(kθ) by the Chebyshev recurrence
        let theta = 2.0 * PI * phase;
        let two_cos = 2.0 * theta.cos();
        let (mut s_prev, mut s_cur) = (0.0, theta.sin());
        let mut acc = 0.0;
        for g in &gains {
            acc += g * s_cur;
            let next = two_cos * s_cur - s_prev;
            s_prev = s_cur;
            s_cur = next;
        }
        let am = 1.0 + voice.am_depth * (trem + am_phase).sin();
        out.push(acc * am * cycle_amp * envelope(kind, text, t, duration));
    }

    let rms = (out.iter().map(|x| x * x).sum::<f64>() / samples.max(1) as f64).sqrt();
    if voice.noise_floor > 0.0 {
        let level = voice.noise_floor * rms;
        for x in &mut out {
            let z: f64 = StandardNormal.sample(rng);
            *x += level * z;
        }
    }
    let peak = out.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|x| *x *= 0.8 / peak);
    }
    out
}

struct PatientPlan {
    id: String,
    group: Label,
    hy_grade: Option<u8>,
    voice: VoiceParams,
    index: usize,
}

fn plan(config: &SynthConfig) -> Vec<PatientPlan> {
    let mut plans = Vec::with_capacity(config.n_pd + config.n_hp);
    let mut severities = Vec::with_capacity(config.n_pd);
    for i in 0..config.n_pd {
        let mut rng = seed::derived_rng(config.seed, &[purpose::SYNTH, 0, i as u64]);
        let severity = rng.random_range(config.severity[0]..=config.severity[1]);
        severities.push(severity);
        plans.push(PatientPlan {
            id: format!("PD{:02}", i + 1),
            group: Label::Pd,
            hy_grade: None,
            voice: VoiceParams::pathological(config, severity, &mut rng),
            index: i,
        });
    }
    for (p, g) in plans.iter_mut().zip(severity_to_hy(&severities)) {
        p.hy_grade = Some(g);
    }
    for i in 0..config.n_hp {
        let mut rng = seed::derived_rng(config.seed, &[purpose::SYNTH, 1, i as u64]);
        plans.push(PatientPlan {
            id: format!("HP{:02}", i + 1),
            group: Label::Hp,
            hy_grade: None,
            voice: VoiceParams::healthy(config, &mut rng),
            index: config.n_pd + i,
        });
    }
    plans
}

fn render_patient(config: &SynthConfig, p: &PatientPlan, out_dir: &Path, stamp: &str) -> Result<PatientRecord> {
    let dir = out_dir.join(&p.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let protocol = protocol_sequence();
    let mut rng = seed::derived_rng(config.seed, &[purpose::SYNTH, 2, p.index as u64]);
    let mut samples = Vec::with_capacity(config.samples_per_patient);
    for j in 0..config.samples_per_patient {
        let (kind, text) = protocol[j % protocol.len()];
        let seconds = rng.random_range(config.duration_s[0]..=config.duration_s[1]);
        let len = (seconds * f64::from(config.sample_rate)).round().max(1.0) as usize;
        let voice = render_clip(&p.voice, kind, text, len, config.sample_rate, &mut rng);
        let clip = if config.stereo {
            let ambient: Vec<f64> = (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    config.ambient_level * z
                })
                .collect();
            let left: Vec<f64> = voice.iter().zip(&ambient).map(|(v, a)| v + a).collect();
            let peak = left.iter().chain(&ambient).fold(0.0_f64, |m, x| m.max(x.abs()));
            let scale = if peak > 0.95 { 0.95 / peak } else { 1.0 };
            AudioClip::new(
                vec![
                    left.iter().map(|x| x * scale).collect(),
                    ambient.iter().map(|x| x * scale).collect(),
                ],
                config.sample_rate,
            )?
        } else {
            AudioClip::mono(voice, config.sample_rate)?
        };
        let file = PathBuf::from(&p.id).join(format!("{}_{:03}_{}.wav", p.id, j, kind.as_str()));
        write_wav_with_comment(&clip, out_dir.join(&file), Some(stamp))?;
        samples.push(SampleEntry {
            file,
            utterance_type: kind,
            duration_s: Some(len as f64 / f64::from(config.sample_rate)),
        });
    }
    Ok(PatientRecord {
        patient_id: p.id.clone(),
        group: p.group,
        hy_grade: p.hy_grade,
        samples,
    })
}

/// Writes the corpus and `manifest.csv` under `out_dir`; returns the
/// manifest path.
pub fn synth_generate(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stamp = crate::provenance::stamp(config.seed, config);
    let plans = plan(config);
    let patients = plans
        .par_iter()
        .map(|p| render_patient(config, p, out_dir, &stamp))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        patients,
    };
    let path = out_dir.join("manifest.csv");
    manifest.write(&path, Some(&stamp))?;
    Ok(path)
}

//! Training-time waveform augmentations: background noise, colored noise,
//! time shift without rollover, and polarity inversion.
//!
//! Each augmentation fires independently with its own probability on every
//! iteration. Randomness comes only from the caller's generator, so a fixed
//! (clip, config, seed) triple reproduces the output bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub p_background: f64,
    pub p_colored: f64,
    pub p_shift: f64,
    pub p_polarity: f64,
    /// SNR range for colored noise, dB.
    pub snr_db_range: [f64; 2],
    /// SNR range for background noise, dB.
    pub background_snr_db_range: [f64; 2],
    pub f_decay_range: [f64; 2],
    pub shift_fraction_range: [f64; 2],
    pub noise_corpus: Vec<PathBuf>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_background: 0.5,
            p_colored: 0.5,
            p_shift: 0.5,
            p_polarity: 0.5,
            snr_db_range: [3.0, 30.0],
            background_snr_db_range: [3.0, 30.0],
            f_decay_range: [-2.0, 2.0],
            shift_fraction_range: [-0.1, 0.1],
            noise_corpus: Vec::new(),
        }
    }
}

impl AugmentationConfig {
    /// All probabilities zero.
    pub fn disabled() -> Self {
        Self {
            p_background: 0.0,
            p_colored: 0.0,
            p_shift: 0.0,
            p_polarity: 0.0,
            ..Self::default()
        }
    }

    pub fn is_disabled(&self) -> bool {
        [self.p_background, self.p_colored, self.p_shift, self.p_polarity]
            .iter()
            .all(|&p| p == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_background", self.p_background),
            ("p_colored", self.p_colored),
            ("p_shift", self.p_shift),
            ("p_polarity", self.p_polarity),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} not in [0, 1]")));
            }
        }
        let ranges = [
            ("snr_db_range", self.snr_db_range),
            ("background_snr_db_range", self.background_snr_db_range),
            ("f_decay_range", self.f_decay_range),
            ("shift_fraction_range", self.shift_fraction_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "{name} [{lo}, {hi}] is not a valid range"
                )));
            }
        }
        for (name, [lo, hi]) in [
            ("snr_db_range", self.snr_db_range),
            ("background_snr_db_range", self.background_snr_db_range),
        ] {
            if lo < 0.0 || hi > 60.0 {
                return Err(Error::InvalidConfig(format!("{name} must lie within [0, 60] dB")));
            }
        }
        let [lo, hi] = self.shift_fraction_range;
        if lo < -0.5 || hi > 0.5 {
            return Err(Error::InvalidConfig(
                "shift fractions must lie within [-0.5, 0.5]".into(),
            ));
        }
        Ok(())
    }
}

/// Background noise recordings, resampled to a common rate and downmixed to
/// mono.
#[derive(Debug, Clone, Default)]
pub struct NoiseCorpus {
    clips: Vec<AudioClip>,
}

impl NoiseCorpus {
    pub fn new(clips: Vec<AudioClip>) -> Self {
        Self { clips }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Loads the given WAV files in lexicographic path order.
    pub fn load(paths: &[PathBuf], sample_rate: u32) -> Result<Self> {
        let mut paths = paths.to_vec();
        paths.sort();
        let clips = paths
            .iter()
            .map(|p| {
                let clip = audio::read_wav(p)?;
                let mono = if clip.num_channels() == 2 {
                    let ch = clip.channels();
                    let mixed = ch[0].iter().zip(&ch[1]).map(|(l, r)| 0.5 * (l + r)).collect();
                    AudioClip::mono(mixed, clip.sample_rate())?
                } else {
                    clip
                };
                audio::resample(&mono, sample_rate)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips })
    }

    /// Every `.wav` file directly inside `dir`.
    pub fn wav_files_in(dir: &Path) -> Result<Vec<PathBuf>> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                paths.push(path);
            }
        }
        paths.sort();
        Ok(paths)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[AudioClip] {
        &self.clips
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    SilentClip,
    SilentNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixed {
    Applied(AudioClip),
    Skipped(SkipReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub noise_index: usize,
    pub offset: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColoredParams {
    pub snr_db: f64,
    pub f_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub fraction: f64,
    pub samples: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub augmentation: Augmentation,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Background,
    Colored,
    Shift,
    Polarity,
}

/// What [`apply_pipeline`] did to one sample on one iteration. A parameter
/// block is present exactly when that augmentation was applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedAugmentations {
    pub background: Option<BackgroundParams>,
    pub colored: Option<ColoredParams>,
    pub shift: Option<ShiftParams>,
    pub polarity: bool,
    pub skipped: Vec<SkipRecord>,
}

impl AppliedAugmentations {
    pub fn is_empty(&self) -> bool {
        self.background.is_none()
            && self.colored.is_none()
            && self.shift.is_none()
            && !self.polarity
            && self.skipped.is_empty()
    }
}

fn require_mono(clip: &AudioClip) -> Result<()> {
    if clip.num_channels() != 1 {
        return Err(Error::InvalidAudio("augmentations expect mono clips".into()));
    }
    Ok(())
}

fn check_snr(snr_db: f64) -> Result<()> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput(format!("SNR must be finite, got {snr_db}")));
    }
    Ok(())
}

fn mean_square(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64
}

/// Scales `noise` so that 10·log10(P_clip / P_noise) equals `snr_db` and adds it.
fn mix_at_snr(clip: &AudioClip, noise: &[f64], snr_db: f64) -> Mixed {
    let signal_power = clip.power();
    if signal_power == 0.0 {
        return Mixed::Skipped(SkipReason::SilentClip);
    }
    let noise_power = mean_square(noise);
    if noise_power == 0.0 {
        return Mixed::Skipped(SkipReason::SilentNoise);
    }
    let gain = (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clip.samples().iter().zip(noise).map(|(x, n)| x + gain * n).collect();
    Mixed::Applied(clip.with_channels(vec![mixed]))
}

/// Cyclic fragment of `noise` starting at `offset`, as long as `len`.
fn noise_fragment(noise: &[f64], offset: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Largest valid fragment offset. Noise shorter than the clip is tiled, so
/// any starting point is valid.
fn max_offset(noise_len: usize, clip_len: usize) -> usize {
    if noise_len >= clip_len {
        noise_len - clip_len
    } else {
        noise_len - 1
    }
}

/// Adds the noise fragment starting at `offset` at the requested SNR.
pub fn mix_background_fragment(clip: &AudioClip, noise: &AudioClip, offset: usize, snr_db: f64) -> Result<Mixed> {
    require_mono(clip)?;
    check_snr(snr_db)?;
    if noise.is_empty() {
        return Err(Error::InvalidInput("background noise clip is empty".into()));
    }
    let fragment = noise_fragment(noise.samples(), offset, clip.len());
    Ok(mix_at_snr(clip, &fragment, snr_db))
}

/// Adds a uniformly placed fragment of `noise` at the requested SNR.
pub fn add_background_noise(
    clip: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng: &mut impl rand::Rng,
) -> Result<Mixed> {
    if noise.is_empty() {
        return Err(Error::InvalidInput("background noise clip is empty".into()));
    }
    let offset = rng.random_range(0..=max_offset(noise.len(), clip.len()));
    mix_background_fragment(clip, noise, offset, snr_db)
}

/// Gaussian noise with power spectral density proportional to f^(-f_decay),
/// shaped in the frequency domain. The DC bin is zeroed.
pub fn colored_noise(len: usize, f_decay: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let mut spectrum: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut spectrum);
    spectrum[0] = Complex::new(0.0, 0.0);
    for (k, bin) in spectrum.iter_mut().enumerate().skip(1) {
        let f = k.min(len - k) as f64;
        *bin *= f.powf(-f_decay / 2.0);
    }
    planner.plan_fft_inverse(len).process(&mut spectrum);
    spectrum.iter().map(|c| c.re / len as f64).collect()
}

pub fn add_colored_noise(clip: &AudioClip, snr_db: f64, f_decay: f64, rng: &mut impl rand::Rng) -> Result<Mixed> {
    require_mono(clip)?;
    check_snr(snr_db)?;
    if !f_decay.is_finite() {
        return Err(Error::InvalidInput(format!("f_decay must be finite, got {f_decay}")));
    }
    if clip.power() == 0.0 {
        return Ok(Mixed::Skipped(SkipReason::SilentClip));
    }
    let noise = colored_noise(clip.len(), f_decay, rng);
    Ok(mix_at_snr(clip, &noise, snr_db))
}

/// Number of samples [`time_shift`] moves a clip of `len` samples.
pub fn shift_samples(len: usize, fraction: f64) -> i64 {
    (fraction * len as f64).round() as i64
}

/// Delays (positive fraction) or advances the clip, filling the vacated
/// region with zeros.
pub fn time_shift(clip: &AudioClip, fraction: f64) -> Result<AudioClip> {
    if fraction.is_nan() || fraction.abs() > 0.5 {
        return Err(Error::InvalidInput(format!(
            "shift fraction {fraction} outside [-0.5, 0.5]"
        )));
    }
    let len = clip.len();
    let k = shift_samples(len, fraction);
    let channels = clip
        .channels()
        .iter()
        .map(|ch| {
            let mut out = vec![0.0; len];
            let k_abs = k.unsigned_abs() as usize;
            if k >= 0 {
                out[k_abs..].copy_from_slice(&ch[..len - k_abs]);
            } else {
                out[..len - k_abs].copy_from_slice(&ch[k_abs..]);
            }
            out
        })
        .collect();
    Ok(clip.with_channels(channels))
}

pub fn invert_polarity(clip: &AudioClip) -> AudioClip {
    clip.map_samples(|x| -x)
}

fn draw_in(range: [f64; 2], rng: &mut impl rand::Rng) -> f64 {
    let [lo, hi] = range;
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Applies background noise, colored noise, time shift and polarity
/// inversion in that order, each with its own probability, then hard-clamps
/// to [-1, 1].
pub fn apply_pipeline(
    clip: &AudioClip,
    config: &AugmentationConfig,
    noise: &NoiseCorpus,
    rng: &mut impl rand::Rng,
) -> Result<(AudioClip, AppliedAugmentations)> {
    config.validate()?;
    require_mono(clip)?;
    let mut out = clip.clone();
    let mut record = AppliedAugmentations::default();

    if rng.random::<f64>() < config.p_background {
        if noise.is_empty() {
            return Err(Error::InvalidConfig(
                "background noise drawn but the noise corpus is empty".into(),
            ));
        }
        let noise_index = rng.random_range(0..noise.len());
        let source = &noise.clips()[noise_index];
        let snr_db = draw_in(config.background_snr_db_range, rng);
        let offset = rng.random_range(0..=max_offset(source.len(), out.len()));
        match mix_background_fragment(&out, source, offset, snr_db)? {
            Mixed::Applied(mixed) => {
                out = mixed;
                record.background = Some(BackgroundParams {
                    noise_index,
                    offset,
                    snr_db,
                });
            }
            Mixed::Skipped(reason) => record.skipped.push(SkipRecord {
                augmentation: Augmentation::Background,
                reason,
            }),
        }
    }

    if rng.random::<f64>() < config.p_colored {
        let snr_db = draw_in(config.snr_db_range, rng);
        let f_decay = draw_in(config.f_decay_range, rng);
        match add_colored_noise(&out, snr_db, f_decay, rng)? {
            Mixed::Applied(mixed) => {
                out = mixed;
                record.colored = Some(ColoredParams { snr_db, f_decay });
            }
            Mixed::Skipped(reason) => record.skipped.push(SkipRecord {
                augmentation: Augmentation::Colored,
                reason,
            }),
        }
    }

    if rng.random::<f64>() < config.p_shift {
        let fraction = draw_in(config.shift_fraction_range, rng);
        out = time_shift(&out, fraction)?;
        record.shift = Some(ShiftParams {
            fraction,
            samples: shift_samples(out.len(), fraction),
        });
    }

    if rng.random::<f64>() < config.p_polarity {
        out = invert_polarity(&out);
        record.polarity = true;
    }

    if out.peak() > 1.0 {
        out = out.map_samples(|x| x.clamp(-1.0, 1.0));
    }
    Ok((out, record))
}

//! PCM WAV I/O and the deterministic preprocessing chain applied to every
//! recording: channel subtraction, peak normalization and resampling.
//!
//! Samples are held as `f64` in `[-1, 1]` and only quantized to 16-bit at the
//! file boundary.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Target rate expected by the convolutional feature encoder.
pub const MODEL_SAMPLE_RATE: u32 = 16_000;

const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::InvalidAudio(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidAudio("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("audio sample".into()));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Samples of the first channel; the whole signal for mono clips.
    pub fn samples(&self) -> &[f64] {
        &self.channels[0]
    }

    pub fn into_samples(mut self) -> Vec<f64> {
        self.channels.swap_remove(0)
    }

    /// Number of sample frames (per channel).
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f64 {
        self.channels.iter().flatten().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Mean squared amplitude over all channels.
    pub fn power(&self) -> f64 {
        let n = self.len() * self.num_channels();
        if n == 0 {
            return 0.0;
        }
        self.channels.iter().flatten().map(|x| x * x).sum::<f64>() / n as f64
    }

    pub(crate) fn map_samples(&self, f: impl Fn(f64) -> f64) -> AudioClip {
        AudioClip {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().copied().map(&f).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn with_channels(&self, channels: Vec<Vec<f64>>) -> AudioClip {
        AudioClip {
            channels,
            sample_rate: self.sample_rate,
        }
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

#[derive(Debug, Clone, Copy)]
struct Format {
    channels: u16,
    sample_rate: u32,
    block_align: u16,
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn parse_fmt(body: &[u8]) -> Result<Format> {
    if body.len() < 16 {
        return Err(Error::MalformedWav("fmt chunk shorter than 16 bytes".into()));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12);
    let bits = u16_at(body, 14);
    if tag == WAVE_FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(Error::MalformedWav("truncated WAVE_FORMAT_EXTENSIBLE".into()));
        }
        // first two bytes of the sub-format GUID carry the actual format tag
        tag = u16_at(body, 24);
    }
    match tag {
        WAVE_FORMAT_PCM => {}
        WAVE_FORMAT_IEEE_FLOAT => return Err(Error::UnsupportedEncoding("IEEE float samples".into())),
        other => return Err(Error::UnsupportedEncoding(format!("format tag {other:#06x}"))),
    }
    if bits != 16 {
        return Err(Error::UnsupportedEncoding(format!("{bits}-bit samples")));
    }
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedEncoding(format!("{channels} channels")));
    }
    if sample_rate == 0 {
        return Err(Error::MalformedWav("sample rate is zero".into()));
    }
    if block_align != channels * 2 {
        return Err(Error::MalformedWav(format!(
            "block align {block_align} inconsistent with {channels} channels"
        )));
    }
    Ok(Format {
        channels,
        sample_rate,
        block_align,
    })
}

/// Parses a RIFF/WAVE byte buffer holding 16-bit PCM.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start.checked_add(size).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            Error::MalformedWav(format!("chunk '{}' runs past end of file", String::from_utf8_lossy(id)))
        })?;
        match id {
            b"fmt " => format = Some(parse_fmt(&bytes[start..end])?),
            b"data" => {
                if format.is_none() {
                    return Err(Error::MalformedWav("data chunk precedes fmt chunk".into()));
                }
                data = Some(&bytes[start..end]);
                break;
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    let format = format.ok_or_else(|| Error::MalformedWav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::MalformedWav("no data chunk".into()))?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let block = usize::from(format.block_align);
    if data.len() % block != 0 {
        return Err(Error::MalformedWav(format!(
            "data length {} is not a multiple of the block size {block}",
            data.len()
        )));
    }
    let n_ch = usize::from(format.channels);
    let frames = data.len() / block;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in data.chunks_exact(block) {
        for (ch, bytes) in channels.iter_mut().zip(frame.chunks_exact(2)) {
            let v = i16::from_le_bytes([bytes[0], bytes[1]]);
            ch.push(f64::from(v) / PCM_SCALE);
        }
    }
    AudioClip::new(channels, format.sample_rate)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

fn quantize(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Serializes a clip as 16-bit PCM. A non-empty `comment` is stored in a
/// `LIST/INFO/ICMT` chunk ahead of the sample data.
pub fn encode_wav(clip: &AudioClip, comment: Option<&str>) -> Result<Vec<u8>> {
    if clip.is_empty() {
        return Err(Error::InvalidAudio("cannot write an empty clip".into()));
    }
    if let Some(bad) = clip.channels.iter().flatten().find(|x| x.abs() > 1.0) {
        return Err(Error::InvalidAudio(format!("sample {bad} outside [-1, 1]")));
    }
    let n_ch = clip.num_channels() as u16;
    let block_align = n_ch * 2;
    let data_len = clip.len() * usize::from(block_align);
    let data_len_u32 =
        u32::try_from(data_len).map_err(|_| Error::InvalidAudio("clip too long for a WAV file".into()))?;

    let list_chunk = comment.filter(|c| !c.is_empty()).map(|c| {
        let mut text = c.as_bytes().to_vec();
        text.push(0);
        if text.len() % 2 == 1 {
            text.push(0);
        }
        let mut chunk = Vec::with_capacity(text.len() + 20);
        chunk.extend_from_slice(b"LIST");
        chunk.extend_from_slice(&(text.len() as u32 + 12).to_le_bytes());
        chunk.extend_from_slice(b"INFO");
        chunk.extend_from_slice(b"ICMT");
        chunk.extend_from_slice(&(text.len() as u32).to_le_bytes());
        chunk.extend_from_slice(&text);
        chunk
    });
    let list_len = list_chunk.as_ref().map_or(0, Vec::len);

    let mut out = Vec::with_capacity(44 + list_len + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + list_len + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&n_ch.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * u32::from(block_align)).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    if let Some(chunk) = list_chunk {
        out.extend_from_slice(&chunk);
    }
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len_u32.to_le_bytes());
    for i in 0..clip.len() {
        for ch in &clip.channels {
            out.extend_from_slice(&quantize(ch[i]).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    write_wav_with_comment(clip, path, None)
}

pub fn write_wav_with_comment(clip: &AudioClip, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(clip, comment)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Left minus right. The result can exceed full scale; peak normalization is
/// expected to follow.
pub fn channel_subtract(clip: &AudioClip) -> Result<AudioClip> {
    if clip.num_channels() != 2 {
        return Err(Error::InvalidAudio(format!(
            "channel subtraction needs 2 channels, got {}",
            clip.num_channels()
        )));
    }
    let diff = clip.channels[0]
        .iter()
        .zip(&clip.channels[1])
        .map(|(l, r)| l - r)
        .collect();
    Ok(clip.with_channels(vec![diff]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub clip: AudioClip,
    /// The input was all zeros and has been passed through unchanged.
    pub silent: bool,
}

pub fn peak_normalize(clip: &AudioClip) -> Result<Normalized> {
    if clip.is_empty() {
        return Err(Error::InvalidAudio("cannot normalize an empty clip".into()));
    }
    let peak = clip.peak();
    if peak == 0.0 {
        return Ok(Normalized {
            clip: clip.clone(),
            silent: true,
        });
    }
    Ok(Normalized {
        clip: clip.map_samples(|x| x / peak),
        silent: false,
    })
}

/// Output length of [`resample`]: `round(len * to / from)`, computed exactly.
pub fn resampled_len(len: usize, from: u32, to: u32) -> usize {
    let num = len as u128 * u128::from(to);
    let den = u128::from(from);
    ((2 * num + den) / (2 * den)) as usize
}

const KAISER_BETA: f64 = 8.6;
/// Sinc zero crossings on each side of the kernel centre, measured at the
/// lower of the two rates (64 taps per polyphase branch).
const HALF_ZERO_CROSSINGS: f64 = 32.0;

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling of a mono clip with a Kaiser-windowed sinc kernel.
///
/// The lowpass cutoff sits at the Nyquist frequency of the lower rate. Each
/// output sample is normalized by its tap sum so DC passes exactly, including
/// near the edges where the kernel is truncated.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidAudio("target rate must be positive".into()));
    }
    if clip.num_channels() != 1 {
        return Err(Error::InvalidAudio("resampling expects a mono clip".into()));
    }
    if clip.is_empty() {
        return Err(Error::InvalidAudio("cannot resample an empty clip".into()));
    }
    let from = clip.sample_rate;
    if from == target_rate {
        return Ok(clip.clone());
    }
    let x = clip.samples();
    let ratio = f64::from(target_rate) / f64::from(from);
    let scale = ratio.min(1.0);
    let cutoff = 0.5 * scale;
    let half_width = HALF_ZERO_CROSSINGS / scale;
    let i0_beta = bessel_i0(KAISER_BETA);
    let n_out = resampled_len(x.len(), from, target_rate);
    let last = x.len() as isize - 1;

    let mut y = Vec::with_capacity(n_out);
    for n in 0..n_out {
        // position in input samples, computed from integers to avoid drift
        let t = (n as f64 * f64::from(from)) / f64::from(target_rate);
        let lo = ((t - half_width).ceil() as isize).max(0);
        let hi = ((t + half_width).floor() as isize).min(last);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for k in lo..=hi {
            let d = t - k as f64;
            let r = d / half_width;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            let w = 2.0 * cutoff * sinc(2.0 * cutoff * d) * window;
            acc += w * x[k as usize];
            wsum += w;
        }
        y.push(if wsum.abs() > 1e-12 { acc / wsum } else { acc });
    }
    AudioClip::mono(y, target_rate)
}

/// Result of the fixed preprocessing chain for one recording.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub clip: AudioClip,
    pub silent: bool,
    /// Mono input: channel subtraction was not applied.
    pub subtraction_skipped: bool,
}

/// subtract (stereo only) -> peak normalize -> resample.
pub fn preprocess(clip: &AudioClip, target_rate: u32) -> Result<Preprocessed> {
    let (mono, skipped) = if clip.num_channels() == 2 {
        (channel_subtract(clip)?, false)
    } else {
        (clip.clone(), true)
    };
    let normalized = peak_normalize(&mono)?;
    let mut resampled = resample(&normalized.clip, target_rate)?;
    // the sinc kernel may overshoot full scale by a hair around transients
    if resampled.peak() > 1.0 {
        resampled = resampled.map_samples(|x| x.clamp(-1.0, 1.0));
    }
    Ok(Preprocessed {
        clip: resampled,
        silent: normalized.silent,
        subtraction_skipped: skipped,
    })
}

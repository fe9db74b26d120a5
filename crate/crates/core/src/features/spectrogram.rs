use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann window.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub fft_length: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for SpectrogramConfig {
    /// 1024-point frames overlapping by one eighth of a window (hop 896).
    fn default() -> Self {
        Self {
            fft_length: 1024,
            hop: 1024 - 1024 / 8,
            window: Window::Hann,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_length.is_power_of_two() || self.fft_length < 2 {
            return Err(Error::InvalidConfig(format!(
                "fft length {} is not a power of two",
                self.fft_length
            )));
        }
        if self.hop == 0 || self.hop > self.fft_length {
            return Err(Error::InvalidConfig(format!(
                "hop {} must lie in 1..={}",
                self.hop, self.fft_length
            )));
        }
        Ok(())
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.fft_length {
            0
        } else {
            (len - self.fft_length) / self.hop + 1
        }
    }

    fn window(&self) -> Vec<f64> {
        let n = self.fft_length as f64;
        match self.window {
            Window::Hann => (0..self.fft_length)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                .collect(),
        }
    }
}

/// Magnitude STFT, `frames × fft_length/2`. The Nyquist bin is dropped so a
/// 1024-point transform yields 512 features per frame.
pub fn stft_spectrogram(waveform: &[f64], config: &SpectrogramConfig) -> Result<Array2<f64>> {
    config.validate()?;
    if waveform.len() < config.fft_length {
        return Err(Error::InvalidInput(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            waveform.len(),
            config.fft_length
        )));
    }
    let n = config.fft_length;
    let bins = n / 2;
    let frames = config.frames(waveform.len());
    let window = config.window();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut out = Array2::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (f, mut row) in out.outer_iter_mut().enumerate() {
        let start = f * config.hop;
        for (b, (x, w)) in buf.iter_mut().zip(waveform[start..start + n].iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (dst, c) in row.iter_mut().zip(&buf[..bins]) {
            *dst = c.norm();
        }
    }
    Ok(out)
}

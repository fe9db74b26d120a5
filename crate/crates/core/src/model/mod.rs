//! Sequence-to-one classifier: conv encoder, bidirectional GRU, MLP head.

mod checkpoint;
mod gru;
mod head;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{conv_forward, ConvStackConfig, ConvStackGrads, ConvStackParams};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gru::{gru_backward, gru_backward_batch, gru_forward, gru_forward_batch, GruCache, GruDirection, GruParams};
pub use head::{head_backward, head_forward, DenseLayer, HeadCache, HeadParams};

/// Diagnostic class. `Hp` is logit index 0, `Pd` is index 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "HP")]
    Hp,
    #[serde(rename = "PD")]
    Pd,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Hp => 0,
            Label::Pd => 1,
        }
    }

    pub fn is_pd(self) -> bool {
        self == Label::Pd
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Hp => "HP",
            Label::Pd => "PD",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PD" => Ok(Label::Pd),
            "HP" => Ok(Label::Hp),
            other => Err(Error::InvalidInput(format!(
                "unknown group {other:?}, expected PD or HP"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub probability_pd: f64,
    pub label: Label,
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e_hp = (logits[0] - m).exp();
        let e_pd = (logits[1] - m).exp();
        let probability_pd = e_pd / (e_hp + e_pd);
        let label = if logits[1] >= logits[0] { Label::Pd } else { Label::Hp };
        Self {
            logits,
            probability_pd,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub conv: ConvStackConfig,
    pub gru_hidden: usize,
    /// Widths of the head's hidden layers.
    pub head_hidden: Vec<usize>,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv: ConvStackConfig::default(),
            gru_hidden: 256,
            head_hidden: vec![128, 128],
            sample_rate: crate::audio::MODEL_SAMPLE_RATE,
        }
    }
}

impl ModelConfig {
    /// Small network used for fast tests and desk-scale experiments.
    pub fn miniature() -> Self {
        Self {
            conv: ConvStackConfig::uniform(8, &[(10, 5), (4, 2), (4, 2), (4, 2)]),
            gru_hidden: 6,
            head_hidden: vec![8, 8],
            sample_rate: crate::audio::MODEL_SAMPLE_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        if self.gru_hidden == 0 || self.head_hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(())
    }

    /// Head widths from the GRU readout to the two logits.
    pub fn head_widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.gru_hidden];
        w.extend(&self.head_hidden);
        w.push(2);
        w
    }

    /// Shortest waveform that yields one feature frame.
    pub fn min_samples(&self) -> usize {
        self.conv.receptive_field()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv: ConvStackParams,
    pub gru: GruParams,
    pub head: HeadParams,
}

impl ModelParams {
    /// Kaiming-uniform conv stack, ±1/√fan_in GRU and head.
    pub fn init(config: &ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let conv = ConvStackParams::kaiming_uniform(&config.conv, rng)?;
        let gru = GruParams::uniform(config.conv.feature_dim(), config.gru_hidden, rng);
        let head = HeadParams::uniform(&config.head_widths(), rng);
        Ok(Self { conv, gru, head })
    }

    /// Fresh GRU and head around an existing conv stack.
    pub fn with_conv(config: &ModelConfig, conv: ConvStackParams, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        conv.check_shapes(&config.conv)?;
        let gru = GruParams::uniform(config.conv.feature_dim(), config.gru_hidden, rng);
        let head = HeadParams::uniform(&config.head_widths(), rng);
        Ok(Self { conv, gru, head })
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        self.conv.check_shapes(&config.conv)?;
        self.gru.check_shapes(config.conv.feature_dim(), config.gru_hidden)?;
        self.head.check_shapes(&config.head_widths())
    }

    /// Trainable tensors in a fixed order: conv (unless frozen), GRU, head.
    pub fn trainable_tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        if !self.conv.frozen {
            v.extend(self.conv.tensors());
        }
        v.extend(self.gru.tensors());
        v.extend(self.head.tensors());
        v
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        if !self.conv.frozen {
            v.extend(self.conv.tensors_mut());
        }
        v.extend(self.gru.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Gradient set mirroring [`ModelParams`]. `conv` is `None` when the conv
/// stack is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub conv: Option<ConvStackGrads>,
    pub gru: GruParams,
    pub head: HeadParams,
}

impl ModelGrads {
    pub fn zeros(config: &ModelConfig, conv_trainable: bool) -> Self {
        Self {
            conv: conv_trainable.then(|| ConvStackGrads::zeros(&config.conv)),
            gru: GruParams::zeros(config.conv.feature_dim(), config.gru_hidden),
            head: HeadParams::zeros(&config.head_widths()),
        }
    }

    /// Same order as [`ModelParams::trainable_tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        if let Some(c) = &self.conv {
            v.extend(c.tensors());
        }
        v.extend(self.gru.tensors());
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        if let Some(c) = &mut self.conv {
            v.extend(c.tensors_mut());
        }
        v.extend(self.gru.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// GRU and head over feature maps (`frames × features`). Maps of equal
/// length are batched; results come back in input order.
pub fn classify_features(features: &[ArrayView2<'_, f64>], params: &ModelParams) -> Result<Vec<Prediction>> {
    let mut out = vec![None; features.len()];
    for (_, idx) in group_by_frames(features.iter().map(|f| f.nrows())) {
        let batch: Vec<_> = idx.iter().map(|&i| features[i].view()).collect();
        let (hidden, _) = gru_forward_batch(&batch, &params.gru)?;
        let (logits, _) = head_forward(&hidden, &params.head)?;
        for (row, &i) in logits.outer_iter().zip(&idx) {
            out[i] = Some(Prediction::from_logits([row[0], row[1]]));
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every input grouped")).collect())
}

/// Indices grouped by sequence length, in ascending length order.
pub(crate) fn group_by_frames(lengths: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, n) in lengths.enumerate() {
        groups.entry(n).or_default().push(i);
    }
    groups
}

/// Conv features for a waveform at the model's sample rate.
pub fn encode(waveform: &[f64], params: &ModelParams, config: &ModelConfig) -> Result<Array2<f64>> {
    Ok(conv_forward(waveform, config.sample_rate, &params.conv, &config.conv)?.data)
}

pub fn model_forward(waveform: &[f64], params: &ModelParams, config: &ModelConfig) -> Result<Prediction> {
    let features = encode(waveform, params, config)?;
    let (hidden, _) = gru_forward(&features, &params.gru)?;
    let (logits, _) = head_forward(&hidden.insert_axis(ndarray::Axis(0)), &params.head)?;
    Ok(Prediction::from_logits([logits[[0, 0]], logits[[0, 1]]]))
}

/// Batched [`model_forward`]; each waveform is classified independently.
pub fn model_forward_batch(
    waveforms: &[&[f64]],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Prediction>> {
    let features = waveforms
        .iter()
        .map(|w| encode(w, params, config))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    classify_features(&views, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    fn wave(len: usize, s: u64) -> Vec<f64> {
        let mut rng = seed::rng(s);
        (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn prediction_probabilities() {
        let p = Prediction::from_logits([0.0, 0.0]);
        assert_eq!(p.probability_pd, 0.5);
        assert_eq!(p.label, Label::Pd);
        let p = Prediction::from_logits([1000.0, -1000.0]);
        assert_eq!(p.label, Label::Hp);
        assert!(p.probability_pd >= 0.0 && p.probability_pd < 1e-300);
        let q = Prediction::from_logits([3.0, 1.5]);
        let r = Prediction::from_logits([3.0 + 77.0, 1.5 + 77.0]);
        assert_eq!(q.label, r.label);
        assert!((q.probability_pd - r.probability_pd).abs() < 1e-15);
    }

    #[test]
    fn label_parsing() {
        assert_eq!("pd".parse::<Label>().unwrap(), Label::Pd);
        assert_eq!(" HP".parse::<Label>().unwrap(), Label::Hp);
        assert!("XX".parse::<Label>().is_err());
        assert_eq!(serde_json::to_string(&Label::Pd).unwrap(), "\"PD\"");
    }

    #[test]
    fn default_shapes() {
        let c = ModelConfig::default();
        assert_eq!(c.head_widths(), vec![512, 128, 128, 2]);
        assert_eq!(c.min_samples(), 400);
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let c = ModelConfig::miniature();
        let mut p = ModelParams::init(&c, &mut seed::rng(1)).unwrap();
        p.head = HeadParams::zeros(&c.head_widths());
        let pred = model_forward(&wave(800, 2), &p, &c).unwrap();
        assert_eq!(pred.logits, [0.0, 0.0]);
        assert_eq!(pred.probability_pd, 0.5);
    }

    #[test]
    fn forward_is_deterministic_and_input_sensitive() {
        let c = ModelConfig::miniature();
        let p = ModelParams::init(&c, &mut seed::rng(3)).unwrap();
        let a = model_forward(&wave(900, 4), &p, &c).unwrap();
        let b = model_forward(&wave(900, 4), &p, &c).unwrap();
        let other = model_forward(&wave(900, 5), &p, &c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.logits, other.logits);
    }

    #[test]
    fn batch_equals_one_by_one() {
        let c = ModelConfig::miniature();
        let p = ModelParams::init(&c, &mut seed::rng(6)).unwrap();
        let waves: Vec<Vec<f64>> = [900, 1200, 900, 700, 1200]
            .iter()
            .enumerate()
            .map(|(i, &n)| wave(n, 10 + i as u64))
            .collect();
        let refs: Vec<&[f64]> = waves.iter().map(|w| w.as_slice()).collect();
        let batch = model_forward_batch(&refs, &p, &c).unwrap();
        for (w, b) in waves.iter().zip(&batch) {
            let single = model_forward(w, &p, &c).unwrap();
            for k in 0..2 {
                assert!((single.logits[k] - b.logits[k]).abs() < 1e-12);
            }
            assert_eq!(single.label, b.label);
        }
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let c = ModelConfig::miniature();
        let p = ModelParams::init(&c, &mut seed::rng(6)).unwrap();
        assert!(model_forward(&wave(c.min_samples() - 1, 1), &p, &c).is_err());
        assert!(model_forward(&wave(c.min_samples(), 1), &p, &c).is_ok());
    }

    #[test]
    fn trainable_tensors_follow_freezing() {
        let c = ModelConfig::miniature();
        let mut p = ModelParams::init(&c, &mut seed::rng(6)).unwrap();
        let all = p.trainable_tensors().len();
        p.conv.frozen = true;
        let frozen = p.trainable_tensors().len();
        assert_eq!(all - frozen, p.conv.tensors().len());
        assert_eq!(ModelGrads::zeros(&c, false).tensors().len(), frozen);
        assert_eq!(ModelGrads::zeros(&c, true).tensors().len(), all);
    }
}

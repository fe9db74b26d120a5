//! Loss, optimizer and the training loop.

mod adam;

use std::borrow::Cow;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::augment::{apply_pipeline, AppliedAugmentations, AugmentationConfig, NoiseCorpus};
use crate::error::{Error, Result};
use crate::features::{conv_backward, conv_forward, conv_forward_train, ConvCache, ConvStackParams};
use crate::model::{
    group_by_frames, gru_backward_batch, gru_forward_batch, head_backward, head_forward, Label, ModelConfig,
    ModelGrads, ModelParams,
};
use crate::seed::{self, purpose};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};

/// Softmax cross-entropy on two logits. Returns the loss and its gradient
/// with respect to the logits.
pub fn cross_entropy_loss(logits: [f64; 2], target: Label) -> Result<(f64, [f64; 2])> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let z = e[0] + e[1];
    let lse = m + z.ln();
    let t = target.index();
    let loss = lse - logits[t];
    let mut grad = [e[0] / z, e[1] / z];
    grad[t] -= 1.0;
    Ok((loss, grad))
}

/// Which parts of the network are trained and where the conv weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Configuration {
    /// Pretrained conv stack, frozen; GRU and head trained.
    #[default]
    #[serde(alias = "frozen_conv")]
    Frozen,
    /// Pretrained conv stack, everything trained.
    #[serde(alias = "full_pretrained")]
    FullPretrained,
    /// Randomly initialized conv stack, everything trained.
    #[serde(alias = "full_scratch")]
    FullScratch,
}

impl Configuration {
    pub fn conv_frozen(self) -> bool {
        self == Configuration::Frozen
    }

    pub fn needs_pretrained(self) -> bool {
        self != Configuration::FullScratch
    }

    pub fn name(self) -> &'static str {
        match self {
            Configuration::Frozen => "frozen",
            Configuration::FullPretrained => "full-pretrained",
            Configuration::FullScratch => "full-scratch",
        }
    }
}

impl std::str::FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "frozen" | "frozen-conv" => Ok(Configuration::Frozen),
            "full-pretrained" => Ok(Configuration::FullPretrained),
            "full-scratch" => Ok(Configuration::FullScratch),
            _ => Err(Error::InvalidConfig(format!(
                "unknown configuration {s:?}; expected frozen, full-pretrained or full-scratch"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub configuration: Configuration,
    pub seed: u64,
    /// Seed for augmentation draws; derived from `seed` when absent.
    pub augment_seed: Option<u64>,
    pub augmentation: AugmentationConfig,
    /// Worker threads for gradient computation. 1 is bit-reproducible.
    pub threads: usize,
    /// Keep a per-sample record of applied augmentations.
    pub trace_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 32,
            adam: AdamConfig::default(),
            configuration: Configuration::Frozen,
            seed: 0,
            augment_seed: None,
            augmentation: AugmentationConfig::default(),
            threads: 1,
            trace_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        self.adam.validate()?;
        self.augmentation.validate()
    }

    fn augment_seed(&self) -> u64 {
        self.augment_seed
            .unwrap_or_else(|| seed::derive(self.seed, &[purpose::AUGMENT]))
    }
}

/// Builds starting parameters for a configuration. The conv stack is the
/// pretrained one when required, otherwise freshly initialized; GRU and
/// head are always fresh.
pub fn initial_params(
    model: &ModelConfig,
    configuration: Configuration,
    pretrained: Option<ConvStackParams>,
    seed: u64,
) -> Result<ModelParams> {
    let mut rng = seed::derived_rng(seed, &[purpose::INIT]);
    let mut params = match (configuration.needs_pretrained(), pretrained) {
        (true, None) => {
            return Err(Error::InvalidConfig(format!(
                "configuration {} needs pretrained conv weights; pass a weight file",
                configuration.name()
            )))
        }
        (true, Some(conv)) => ModelParams::with_conv(model, conv, &mut rng)?,
        (false, _) => ModelParams::init(model, &mut rng)?,
    };
    params.conv.frozen = configuration.conv_frozen();
    Ok(params)
}

/// One labelled clip at the model sample rate.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub waveform: &'a [f64],
    pub label: Label,
    /// Conv features for `waveform`, usable while the conv stack is frozen
    /// and augmentation is off.
    pub features: Option<ArrayView2<'a, f64>>,
}

/// Input to [`loss_and_gradients`].
#[derive(Debug, Clone)]
pub enum ModelInput<'a> {
    Waveform(Cow<'a, [f64]>),
    Features(ArrayView2<'a, f64>),
}

/// Summed loss and summed gradients over `batch`. Inputs given as features
/// bypass the conv stack, which must then be frozen.
pub fn loss_and_gradients(
    batch: &[(ModelInput<'_>, Label)],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(f64, ModelGrads)> {
    let conv_trainable = !params.conv.frozen;
    let mut owned: Vec<Option<Array2<f64>>> = Vec::with_capacity(batch.len());
    let mut caches: Vec<Option<ConvCache>> = Vec::with_capacity(batch.len());
    for (input, _) in batch {
        match input {
            ModelInput::Features(_) => {
                if conv_trainable {
                    return Err(Error::MissingCache);
                }
                owned.push(None);
                caches.push(None);
            }
            ModelInput::Waveform(w) => {
                if conv_trainable {
                    let (map, cache) = conv_forward_train(w, config.sample_rate, &params.conv, &config.conv)?;
                    owned.push(Some(map.data));
                    caches.push(Some(cache));
                } else {
                    owned.push(Some(
                        conv_forward(w, config.sample_rate, &params.conv, &config.conv)?.data,
                    ));
                    caches.push(None);
                }
            }
        }
    }

    let features: Vec<ArrayView2<'_, f64>> = batch
        .iter()
        .zip(&owned)
        .map(|((input, _), own)| match (input, own) {
            (ModelInput::Features(f), _) => f.view(),
            (_, Some(f)) => f.view(),
            (ModelInput::Waveform(_), None) => unreachable!("waveforms are encoded above"),
        })
        .collect();
    let mut grads = ModelGrads::zeros(config, conv_trainable);
    let mut loss_sum = 0.0;
    for (_, idx) in group_by_frames(features.iter().map(|f| f.nrows())) {
        let views: Vec<_> = idx.iter().map(|&i| features[i].view()).collect();
        let (hidden, gru_cache) = gru_forward_batch(&views, &params.gru)?;
        let (logits, head_cache) = head_forward(&hidden, &params.head)?;
        let mut d_logits = Array2::zeros(logits.dim());
        for (k, &i) in idx.iter().enumerate() {
            let (loss, g) = cross_entropy_loss([logits[[k, 0]], logits[[k, 1]]], batch[i].1)?;
            loss_sum += loss;
            d_logits[[k, 0]] = g[0];
            d_logits[[k, 1]] = g[1];
        }
        let d_hidden = head_backward(&d_logits, &head_cache, &params.head, &mut grads.head);
        let d_features = gru_backward_batch(&d_hidden, &gru_cache, &params.gru, &mut grads.gru, conv_trainable)?;
        if let (Some(d_features), Some(conv_grads)) = (d_features, grads.conv.as_mut()) {
            for (dx, &i) in d_features.iter().zip(&idx) {
                let cache = caches[i].as_ref().ok_or(Error::MissingCache)?;
                let (_, g) = conv_backward(dx, cache, &params.conv, &config.conv)?;
                conv_grads.add_assign(&g.expect("trainable conv yields gradients"));
            }
        }
    }
    Ok((loss_sum, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
    /// Mean L2 norm of the per-step averaged gradient.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub epoch: usize,
    pub sample: usize,
    pub applied: AppliedAugmentations,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Filled when tracing is enabled.
    pub augment_trace: Vec<AugmentTrace>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// `epoch,mean_loss,wall_ms,grad_norm`, preceded by `# comment` if given.
    pub fn to_csv(&self, comment: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(c) = comment {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("epoch,mean_loss,wall_ms,grad_norm\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.mean_loss, e.wall_ms, e.grad_norm);
        }
        s
    }

    /// One JSON object per line.
    pub fn trace_jsonl(&self) -> String {
        self.augment_trace
            .iter()
            .map(|t| serde_json::to_string(t).expect("trace records serialize") + "\n")
            .collect()
    }
}

/// Called after every epoch, e.g. to write checkpoints.
pub trait EpochObserver {
    fn epoch_end(&mut self, record: &EpochRecord, params: &ModelParams) -> Result<()>;
}

impl EpochObserver for () {
    fn epoch_end(&mut self, _: &EpochRecord, _: &ModelParams) -> Result<()> {
        Ok(())
    }
}

pub fn train(
    dataset: &[TrainSample<'_>],
    params: ModelParams,
    model: &ModelConfig,
    config: &TrainConfig,
    noise: &NoiseCorpus,
) -> Result<(ModelParams, TrainingLog)> {
    train_with_observer(dataset, params, model, config, noise, &mut ())
}

pub fn train_with_observer(
    dataset: &[TrainSample<'_>],
    mut params: ModelParams,
    model: &ModelConfig,
    config: &TrainConfig,
    noise: &NoiseCorpus,
    observer: &mut dyn EpochObserver,
) -> Result<(ModelParams, TrainingLog)> {
    config.validate()?;
    model.validate()?;
    params.check_shapes(model)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if params.conv.frozen != config.configuration.conv_frozen() {
        return Err(Error::InvalidConfig(format!(
            "parameters have conv frozen = {} but configuration is {}",
            params.conv.frozen,
            config.configuration.name()
        )));
    }
    let augmenting = !config.augmentation.is_disabled();
    let use_features = params.conv.frozen && !augmenting;

    // frozen conv without augmentation: features never change
    let computed: Vec<Option<Array2<f64>>> = if use_features {
        dataset
            .iter()
            .map(|s| match s.features {
                Some(_) => Ok(None),
                None => conv_forward(s.waveform, model.sample_rate, &params.conv, &model.conv).map(|m| Some(m.data)),
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; dataset.len()]
    };

    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let augment_seed = config.augment_seed();
    let mut state = AdamState::new(&params);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::derived_rng(config.seed, &[purpose::SHUFFLE, epoch as u64]));
        let mut loss_total = 0.0;
        let mut norm_total = 0.0;
        let mut steps = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &dataset[i];
                let input = if use_features {
                    ModelInput::Features(match (&sample.features, &computed[i]) {
                        (Some(f), _) => f.view(),
                        (None, Some(f)) => f.view(),
                        (None, None) => unreachable!("features computed above"),
                    })
                } else if augmenting {
                    let clip = AudioClip::mono(sample.waveform.to_vec(), model.sample_rate)?;
                    let mut rng = seed::derived_rng(augment_seed, &[i as u64, epoch as u64]);
                    let (out, applied) = apply_pipeline(&clip, &config.augmentation, noise, &mut rng)?;
                    if config.trace_augment {
                        log.augment_trace.push(AugmentTrace {
                            epoch,
                            sample: i,
                            applied,
                        });
                    }
                    ModelInput::Waveform(Cow::Owned(out.into_samples()))
                } else {
                    ModelInput::Waveform(Cow::Borrowed(sample.waveform))
                };
                batch.push((input, sample.label));
            }

            let (loss, mut grads) = batch_gradients(&batch, &params, model, config.threads, pool.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            grads.scale(1.0 / batch.len() as f64);
            norm_total += grads.l2_norm();
            adam_step(&mut params, &grads, &mut state, &config.adam)?;
            loss_total += loss;
            steps += 1;
        }

        let record = EpochRecord {
            epoch,
            mean_loss: loss_total / dataset.len() as f64,
            wall_ms: started.elapsed().as_millis() as u64,
            grad_norm: norm_total / steps as f64,
        };
        if !record.mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("mean loss at epoch {epoch}")));
        }
        observer.epoch_end(&record, &params)?;
        log.epochs.push(record);
    }
    Ok((params, log))
}

/// Splits the batch into `threads` contiguous parts and sums their results
/// in part order.
fn batch_gradients(
    batch: &[(ModelInput<'_>, Label)],
    params: &ModelParams,
    model: &ModelConfig,
    threads: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, ModelGrads)> {
    let Some(pool) = pool.filter(|_| threads > 1 && batch.len() > 1) else {
        return loss_and_gradients(batch, params, model);
    };
    use rayon::prelude::*;
    let part = batch.len().div_ceil(threads);
    let results: Vec<Result<(f64, ModelGrads)>> = pool.install(|| {
        batch
            .par_chunks(part)
            .map(|c| loss_and_gradients(c, params, model))
            .collect()
    });
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch")?;
    for r in iter {
        let (l, g) = r?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

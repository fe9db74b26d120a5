//! Convolutional feature encoder and the STFT used to compare against it.

mod conv;
mod spectrogram;
mod weights;

pub use conv::{
    conv_backward, conv_forward, conv_forward_train, Activation, ConvCache, ConvLayerParams, ConvLayerSpec,
    ConvStackConfig, ConvStackGrads, ConvStackParams, FeatureMap, GroupNormParams, Normalization,
};
pub use spectrogram::{stft_spectrogram, SpectrogramConfig, Window};
pub(crate) use weights::read_weights_from;
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

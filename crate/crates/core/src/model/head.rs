//! Fully connected classifier head: ReLU hidden layers and a two-logit output.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<DenseLayer>,
}

impl HeadParams {
    /// Layer widths from input to output, e.g. `[512, 128, 128, 2]`.
    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| DenseLayer {
                    weight: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
        }
    }

    /// Weights and biases uniform in ±1/√fan_in.
    pub fn uniform(widths: &[usize], rng: &mut impl rand::Rng) -> Self {
        let mut p = Self::zeros(widths);
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.weight.ncols() as f64).sqrt();
            layer
                .weight
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-bound..bound));
            layer.bias.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
        }
        p
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.weight.ncols()).collect();
        w.extend(self.layers.last().map(|l| l.weight.nrows()));
        w
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn check_shapes(&self, widths: &[usize]) -> Result<()> {
        if self.widths() != widths {
            return Err(Error::InvalidConfig(format!(
                "head widths {:?} do not match configured {:?}",
                self.widths(),
                widths
            )));
        }
        if self.layers.iter().any(|l| l.bias.len() != l.weight.nrows()) {
            return Err(Error::InvalidConfig("head bias length mismatch".into()));
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("head parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    /// Input to each layer, `B × in`.
    inputs: Vec<Array2<f64>>,
}

/// `B × in` readouts to `B × out` logits.
pub fn head_forward(x: &Array2<f64>, params: &HeadParams) -> Result<(Array2<f64>, HeadCache)> {
    let first = params
        .layers
        .first()
        .ok_or_else(|| Error::InvalidConfig("head has no layers".into()))?;
    if x.ncols() != first.weight.ncols() {
        return Err(Error::InvalidInput(format!(
            "head expects {} inputs, got {}",
            first.weight.ncols(),
            x.ncols()
        )));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut y = h.dot(&layer.weight.t());
        y += &layer.bias;
        if i < last {
            y.mapv_inplace(|v| v.max(0.0));
        }
        inputs.push(h);
        h = y;
    }
    Ok((h, HeadCache { inputs }))
}

/// Accumulates parameter gradients into `grads` and returns the input gradient.
pub fn head_backward(
    grad_logits: &Array2<f64>,
    cache: &HeadCache,
    params: &HeadParams,
    grads: &mut HeadParams,
) -> Array2<f64> {
    let mut g = grad_logits.clone();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let input = &cache.inputs[i];
        grads.layers[i].weight += &g.t().dot(input);
        grads.layers[i].bias += &g.sum_axis(Axis(0));
        let mut gi = g.dot(&layer.weight);
        if i > 0 {
            // the input of layer i is the ReLU output of layer i - 1
            ndarray::Zip::from(&mut gi).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        }
        g = gi;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut p = HeadParams::zeros(&[4, 3, 2]);
        p.layers[1].bias[0] = 0.25;
        p.layers[1].bias[1] = -1.0;
        let (y, _) = head_forward(&Array2::ones((2, 4)), &p).unwrap();
        assert_eq!(y.row(1).to_vec(), vec![0.25, -1.0]);
    }

    #[test]
    fn relu_blocks_negative_paths() {
        let p = HeadParams::uniform(&[5, 7, 7, 2], &mut seed::rng(1));
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (_, cache) = head_forward(&x, &p).unwrap();
        for input in &cache.inputs[1..] {
            assert!(input.iter().all(|&v| v >= 0.0));
        }
        let mut g = HeadParams::zeros(&[5, 7, 7, 2]);
        let gx = head_backward(&Array2::zeros((3, 2)), &cache, &p, &mut g);
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn widths_and_shape_check() {
        let p = HeadParams::uniform(&[512, 128, 128, 2], &mut seed::rng(2));
        assert_eq!(p.widths(), vec![512, 128, 128, 2]);
        assert!(p.check_shapes(&[512, 128, 128, 2]).is_ok());
        assert!(p.check_shapes(&[512, 64, 2]).is_err());
        assert!(head_forward(&Array2::zeros((1, 10)), &p).is_err());
    }
}

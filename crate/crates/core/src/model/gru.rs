//! Bidirectional single-layer GRU with exact backpropagation through time.
//!
//! Per direction, with gates stacked in the order update (z), reset (r),
//! candidate (c):
//!
//! ```text
//! z_t = σ(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = σ(W_r x_t + U_r h_{t-1} + b_r)
//! c_t = tanh(W_c x_t + U_c (r_t ⊙ h_{t-1}) + b_c)
//! h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ c_t
//! ```
//!
//! The readout concatenates the final forward state and the final backward
//! state (the one reached after consuming frame 0). Sequences of equal
//! length are processed as a batch so every step is a matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection {
    /// `3H × D`, rows ordered z, r, c.
    pub w_input: Array2<f64>,
    /// `3H × H`, rows ordered z, r, c.
    pub w_hidden: Array2<f64>,
    /// `3H`
    pub bias: Array1<f64>,
}

impl GruDirection {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Array2::zeros((3 * hidden, input)),
            w_hidden: Array2::zeros((3 * hidden, hidden)),
            bias: Array1::zeros(3 * hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.w_hidden.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub forward: GruDirection,
    pub backward: GruDirection,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            forward: GruDirection::zeros(input, hidden),
            backward: GruDirection::zeros(input, hidden),
        }
    }

    /// Every entry uniform in ±1/√hidden.
    pub fn uniform(input: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input, hidden);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
        }
        p
    }

    pub fn input_size(&self) -> usize {
        self.forward.w_input.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden()
    }

    pub fn output_size(&self) -> usize {
        2 * self.hidden_size()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        [&self.forward, &self.backward]
            .into_iter()
            .flat_map(|d| {
                [
                    d.w_input.as_slice().expect("standard layout"),
                    d.w_hidden.as_slice().expect("standard layout"),
                    d.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        [&mut self.forward, &mut self.backward]
            .into_iter()
            .flat_map(|d| {
                [
                    d.w_input.as_slice_mut().expect("standard layout"),
                    d.w_hidden.as_slice_mut().expect("standard layout"),
                    d.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn check_shapes(&self, input: usize, hidden: usize) -> Result<()> {
        for (name, d) in [("forward", &self.forward), ("backward", &self.backward)] {
            let ok = d.w_input.dim() == (3 * hidden, input)
                && d.w_hidden.dim() == (3 * hidden, hidden)
                && d.bias.len() == 3 * hidden;
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "{name} GRU tensors do not match input {input} / hidden {hidden}"
                )));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("GRU parameter".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct DirectionCache {
    /// Inputs in processing order, `T·B × D`, row `t·B + b`.
    x: Array2<f64>,
    h_prev: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    c: Array2<f64>,
}

/// Values kept by [`gru_forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    steps: usize,
    batch: usize,
    forward: DirectionCache,
    backward: DirectionCache,
}

impl GruCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Stacks sequences into a `T·B × D` matrix, optionally time-reversed.
fn interleave(inputs: &[ArrayView2<'_, f64>], reverse: bool) -> Array2<f64> {
    let steps = inputs[0].nrows();
    let batch = inputs.len();
    let dim = inputs[0].ncols();
    let mut x = Array2::zeros((steps * batch, dim));
    for t in 0..steps {
        let src_t = if reverse { steps - 1 - t } else { t };
        for (b, seq) in inputs.iter().enumerate() {
            x.row_mut(t * batch + b).assign(&seq.row(src_t));
        }
    }
    x
}

fn run_direction(dir: &GruDirection, x: Array2<f64>, steps: usize, batch: usize) -> (Array2<f64>, DirectionCache) {
    let hidden = dir.hidden();
    let mut a = x.dot(&dir.w_input.t());
    a += &dir.bias;
    let u_zr = dir.w_hidden.slice(s![..2 * hidden, ..]);
    let u_c = dir.w_hidden.slice(s![2 * hidden.., ..]);

    let rows = steps * batch;
    let mut cache = DirectionCache {
        x,
        h_prev: Array2::zeros((rows, hidden)),
        z: Array2::zeros((rows, hidden)),
        r: Array2::zeros((rows, hidden)),
        c: Array2::zeros((rows, hidden)),
    };
    let mut h = Array2::<f64>::zeros((batch, hidden));
    let mut rh = Array2::<f64>::zeros((batch, hidden));
    for t in 0..steps {
        let span = t * batch..(t + 1) * batch;
        let a_t = a.slice(s![span.clone(), ..]);
        let mut zr = a_t.slice(s![.., ..2 * hidden]).to_owned();
        general_mat_mul(1.0, &h, &u_zr.t(), 1.0, &mut zr);
        zr.mapv_inplace(sigmoid);
        let z = zr.slice(s![.., ..hidden]);
        let r = zr.slice(s![.., hidden..]);
        Zip::from(&mut rh).and(&r).and(&h).for_each(|o, &r, &h| *o = r * h);
        let mut cand = a_t.slice(s![.., 2 * hidden..]).to_owned();
        general_mat_mul(1.0, &rh, &u_c.t(), 1.0, &mut cand);
        cand.mapv_inplace(f64::tanh);

        cache.h_prev.slice_mut(s![span.clone(), ..]).assign(&h);
        cache.z.slice_mut(s![span.clone(), ..]).assign(&z);
        cache.r.slice_mut(s![span.clone(), ..]).assign(&r);
        cache.c.slice_mut(s![span, ..]).assign(&cand);

        Zip::from(&mut h)
            .and(&z)
            .and(&cand)
            .for_each(|h, &z, &c| *h = (1.0 - z) * *h + z * c);
    }
    (h, cache)
}

fn check_batch(inputs: &[ArrayView2<'_, f64>], params: &GruParams) -> Result<()> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidInput("empty GRU batch".into()))?;
    if first.nrows() == 0 {
        return Err(Error::InvalidInput("feature map has zero frames".into()));
    }
    for x in inputs {
        if x.dim() != first.dim() {
            return Err(Error::InvalidInput(format!(
                "batched sequences must share a shape: {:?} vs {:?}",
                x.dim(),
                first.dim()
            )));
        }
    }
    if first.ncols() != params.input_size() {
        return Err(Error::InvalidInput(format!(
            "feature dimension {} does not match GRU input size {}",
            first.ncols(),
            params.input_size()
        )));
    }
    Ok(())
}

/// Runs a batch of equal-length sequences. Returns `B × 2H` readouts
/// (forward final state, then backward final state).
pub fn gru_forward_batch(inputs: &[ArrayView2<'_, f64>], params: &GruParams) -> Result<(Array2<f64>, GruCache)> {
    check_batch(inputs, params)?;
    let steps = inputs[0].nrows();
    let batch = inputs.len();
    let hidden = params.hidden_size();
    let (h_f, cache_f) = run_direction(&params.forward, interleave(inputs, false), steps, batch);
    let (h_b, cache_b) = run_direction(&params.backward, interleave(inputs, true), steps, batch);
    let mut out = Array2::zeros((batch, 2 * hidden));
    out.slice_mut(s![.., ..hidden]).assign(&h_f);
    out.slice_mut(s![.., hidden..]).assign(&h_b);
    Ok((
        out,
        GruCache {
            steps,
            batch,
            forward: cache_f,
            backward: cache_b,
        },
    ))
}

/// Single-sequence forward pass returning the `2H` readout.
pub fn gru_forward(features: &Array2<f64>, params: &GruParams) -> Result<(Array1<f64>, GruCache)> {
    let (out, cache) = gru_forward_batch(&[features.view()], params)?;
    Ok((out.row(0).to_owned(), cache))
}

fn backward_direction(
    dir: &GruDirection,
    grads: &mut GruDirection,
    cache: &DirectionCache,
    grad_final: ArrayView2<'_, f64>,
    steps: usize,
    batch: usize,
    want_input_grad: bool,
) -> Option<Array2<f64>> {
    let hidden = dir.hidden();
    let u_zr = dir.w_hidden.slice(s![..2 * hidden, ..]);
    let u_c = dir.w_hidden.slice(s![2 * hidden.., ..]);
    let rows = steps * batch;
    let mut d_pre = Array2::<f64>::zeros((rows, 3 * hidden));
    let mut dh = grad_final.to_owned();
    let mut drh = Array2::<f64>::zeros((batch, hidden));

    for t in (0..steps).rev() {
        let span = t * batch..(t + 1) * batch;
        let z = cache.z.slice(s![span.clone(), ..]);
        let r = cache.r.slice(s![span.clone(), ..]);
        let c = cache.c.slice(s![span.clone(), ..]);
        let hp = cache.h_prev.slice(s![span.clone(), ..]);
        let mut d_t = d_pre.slice_mut(s![span, ..]);

        // candidate pre-activation
        {
            let mut dc_pre = d_t.slice_mut(s![.., 2 * hidden..]);
            Zip::from(&mut dc_pre)
                .and(&dh)
                .and(&z)
                .and(&c)
                .for_each(|o, &dh, &z, &c| *o = dh * z * (1.0 - c * c));
        }
        drh.fill(0.0);
        general_mat_mul(1.0, &d_t.slice(s![.., 2 * hidden..]), &u_c, 0.0, &mut drh);

        // update and reset gate pre-activations
        {
            let (mut dz_pre, mut dr_pre) = d_t.multi_slice_mut((s![.., ..hidden], s![.., hidden..2 * hidden]));
            Zip::from(&mut dz_pre)
                .and(&dh)
                .and(&z)
                .and(&c)
                .and(&hp)
                .for_each(|o, &dh, &z, &c, &hp| *o = dh * (c - hp) * z * (1.0 - z));
            Zip::from(&mut dr_pre)
                .and(&drh)
                .and(&hp)
                .and(&r)
                .for_each(|o, &drh, &hp, &r| *o = drh * hp * r * (1.0 - r));
        }

        // gradient reaching h_{t-1}
        let mut dh_prev = Array2::<f64>::zeros((batch, hidden));
        Zip::from(&mut dh_prev)
            .and(&dh)
            .and(&z)
            .and(&drh)
            .and(&r)
            .for_each(|o, &dh, &z, &drh, &r| *o = dh * (1.0 - z) + drh * r);
        general_mat_mul(1.0, &d_t.slice(s![.., ..2 * hidden]), &u_zr, 1.0, &mut dh_prev);
        dh = dh_prev;
    }

    general_mat_mul(1.0, &d_pre.t(), &cache.x, 1.0, &mut grads.w_input);
    grads.bias += &d_pre.sum_axis(Axis(0));
    {
        let mut du_zr = grads.w_hidden.slice_mut(s![..2 * hidden, ..]);
        general_mat_mul(
            1.0,
            &d_pre.slice(s![.., ..2 * hidden]).t(),
            &cache.h_prev,
            1.0,
            &mut du_zr,
        );
    }
    {
        let rh = &cache.r * &cache.h_prev;
        let mut du_c = grads.w_hidden.slice_mut(s![2 * hidden.., ..]);
        general_mat_mul(1.0, &d_pre.slice(s![.., 2 * hidden..]).t(), &rh, 1.0, &mut du_c);
    }
    want_input_grad.then(|| d_pre.dot(&dir.w_input))
}

/// Backpropagates `grad_out` (`B × 2H`) through a batch forward pass and
/// accumulates parameter gradients into `grads`. Returns per-sequence input
/// gradients when requested.
pub fn gru_backward_batch(
    grad_out: &Array2<f64>,
    cache: &GruCache,
    params: &GruParams,
    grads: &mut GruParams,
    want_input_grad: bool,
) -> Result<Option<Vec<Array2<f64>>>> {
    let hidden = params.hidden_size();
    if grad_out.dim() != (cache.batch, 2 * hidden) {
        return Err(Error::InvalidInput(format!(
            "readout gradient is {:?}, expected {:?}",
            grad_out.dim(),
            (cache.batch, 2 * hidden)
        )));
    }
    let (steps, batch) = (cache.steps, cache.batch);
    let dx_f = backward_direction(
        &params.forward,
        &mut grads.forward,
        &cache.forward,
        grad_out.slice(s![.., ..hidden]),
        steps,
        batch,
        want_input_grad,
    );
    let dx_b = backward_direction(
        &params.backward,
        &mut grads.backward,
        &cache.backward,
        grad_out.slice(s![.., hidden..]),
        steps,
        batch,
        want_input_grad,
    );
    Ok(dx_f.zip(dx_b).map(|(f, b)| {
        let dim = f.ncols();
        (0..batch)
            .map(|i| {
                let mut g = Array2::zeros((steps, dim));
                for t in 0..steps {
                    let mut row = g.row_mut(t);
                    row += &f.row(t * batch + i);
                    row += &b.row((steps - 1 - t) * batch + i);
                }
                g
            })
            .collect()
    }))
}

/// Single-sequence backward pass: feature-map gradient and parameter gradients.
pub fn gru_backward(
    grad_hidden: &Array1<f64>,
    cache: &GruCache,
    params: &GruParams,
) -> Result<(Array2<f64>, GruParams)> {
    if cache.batch != 1 {
        return Err(Error::InvalidInput("cache holds a batch, not a single sequence".into()));
    }
    let mut grads = GruParams::zeros(params.input_size(), params.hidden_size());
    let g = grad_hidden.view().insert_axis(Axis(0)).to_owned();
    let dx = gru_backward_batch(&g, cache, params, &mut grads, true)?
        .expect("input gradient requested")
        .pop()
        .expect("one sequence");
    Ok((dx, grads))
}

//! A small dense feed-forward denoiser with hand-written reverse-mode
//! gradients and an Adam optimizer.
//!
//! The network maps `[x ; embed(t / T)]` to a vector of the same size as `x`.
//! It is generic over the float type so that gradient checks can run in
//! `f64` while training runs in `f32`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Float types the network can run in.
pub trait Real: Float + Debug + Default + Send + Sync + Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub(crate) fn to_tag(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply<S: Real>(self, z: S) -> S {
        match self {
            Activation::Silu => z / (S::one() + (-z).exp()),
            Activation::Relu => z.max(S::zero()),
        }
    }

    #[inline]
    fn derivative<S: Real>(self, z: S) -> S {
        match self {
            Activation::Silu => {
                let s = S::one() / (S::one() + (-z).exp());
                s * (S::one() + z * (S::one() - s))
            }
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

/// Sinusoidal embedding of the normalized step `t / T`.
///
/// Frequencies form a geometric sequence from 1 down to 1/10000; the phase is
/// `1000 * (t / T) * freq`, so the embedding does not depend on `T` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("time embedding dim must be even and positive, got {dim}")));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.dim / 2;
        if half == 1 {
            return vec![1.0];
        }
        (0..half).map(|i| 10000f64.powf(-(i as f64) / (half - 1) as f64)).collect()
    }

    pub fn embed(&self, t: usize, steps: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.embed_into(t, steps, &mut out);
        out
    }

    fn embed_into(&self, t: usize, steps: usize, out: &mut [f64]) {
        let half = self.dim / 2;
        let phase = 1000.0 * t as f64 / steps as f64;
        for (i, freq) in self.frequencies().into_iter().enumerate() {
            let arg = phase * freq;
            out[i] = arg.sin();
            out[half + i] = arg.cos();
        }
    }
}

/// One affine layer, `out = W in + b`, with `W` stored row-major
/// (`out_dim` rows of `in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Real> Layer<S> {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![S::zero(); in_dim * out_dim], bias: vec![S::zero(); out_dim] }
    }

    fn cast<T: Real>(&self) -> Layer<T> {
        Layer {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: self.weights.iter().map(|w| T::from_f64(w.as_f64())).collect(),
            bias: self.bias.iter().map(|b| T::from_f64(b.as_f64())).collect(),
        }
    }

    /// `out[b] = W x[b] + bias` for every row `b` of `x`.
    fn forward(&self, x: &[S], batch: usize, out: &mut Vec<S>) {
        out.clear();
        out.reserve(batch * self.out_dim);
        for row in x.chunks_exact(self.in_dim).take(batch) {
            for (w, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
                out.push(dot(w, row) + *b);
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
/// Each output depends only on its own two slices, so batched and single-row
/// evaluation agree bit for bit.
#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// Gradients (or any other parameter-shaped buffer) of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn zeros_like(net: &DenseNet<S>) -> Self {
        Self { layers: net.layers.iter().map(|l| Layer::zeros(l.in_dim, l.out_dim)).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flatten(&self) -> Vec<S> {
        self.iter().copied().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: S) {
        self.iter_mut().for_each(|g| *g = *g * factor);
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a = *a + *b;
        }
    }
}

/// Cached activations from a batched forward pass.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    batch: usize,
    /// Input to each layer, `inputs[0]` being the network input.
    inputs: Vec<Vec<S>>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Vec<S>>,
    output: Vec<S>,
}

impl<S> Trace<S> {
    pub fn output(&self) -> &[S] {
        &self.output
    }
}

/// Dense denoiser: hidden layers use `activation`, the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<S = f32> {
    layers: Vec<Layer<S>>,
    activation: Activation,
    embedding: TimeEmbedding,
}

impl<S: Real> DenseNet<S> {
    /// He-uniform hidden layers, zero biases, zero output layer.
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        time_embed_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        let embedding = TimeEmbedding::new(time_embed_dim)?;
        let mut dims = vec![data_dim + time_embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let mut layer = Layer::zeros(pair[0], pair[1]);
            if k + 2 < dims.len() {
                let bound = (6.0 / pair[0] as f64).sqrt();
                for w in &mut layer.weights {
                    *w = S::from_f64(rng.random_range(-bound..bound));
                }
            }
            layers.push(layer);
        }
        Ok(Self { layers, activation, embedding })
    }

    /// Assembles a network from explicit layers, validating shapes.
    pub fn from_layers(layers: Vec<Layer<S>>, activation: Activation, time_embed_dim: usize) -> Result<Self> {
        let embedding = TimeEmbedding::new(time_embed_dim)?;
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::invalid(format!("layer {k} buffers do not match its shape")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        let data_dim = layers.last().unwrap().out_dim;
        if layers[0].in_dim != data_dim + time_embed_dim {
            return Err(Error::invalid(format!(
                "input width {} != data dim {data_dim} + embedding {time_embed_dim}",
                layers[0].in_dim
            )));
        }
        Ok(Self { layers, activation, embedding })
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn time_embedding(&self) -> TimeEmbedding {
        self.embedding
    }

    pub fn data_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<S> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied()).collect()
    }

    pub fn set_flat_param(&mut self, index: usize, value: S) {
        let mut i = index;
        for l in &mut self.layers {
            if i < l.weights.len() {
                l.weights[i] = value;
                return;
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                l.bias[i] = value;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|p| p.is_finite()))
    }

    pub fn cast<T: Real>(&self) -> DenseNet<T> {
        DenseNet {
            layers: self.layers.iter().map(Layer::cast).collect(),
            activation: self.activation,
            embedding: self.embedding,
        }
    }

    /// Packs `[x ; embed(t)]` rows for a batch.
    pub fn build_input(&self, xs: &[f64], ts: &[usize], steps: usize) -> Result<Vec<S>> {
        let d = self.data_dim();
        if xs.len() != ts.len() * d {
            return Err(Error::invalid(format!(
                "expected {} values for a batch of {} with data dim {d}, got {}",
                ts.len() * d,
                ts.len(),
                xs.len()
            )));
        }
        let e = self.embedding.dim();
        let mut emb = vec![0.0; e];
        let mut input = Vec::with_capacity(ts.len() * (d + e));
        for (x, &t) in xs.chunks_exact(d).zip(ts) {
            input.extend(x.iter().map(|v| S::from_f64(*v)));
            self.embedding.embed_into(t, steps, &mut emb);
            input.extend(emb.iter().map(|v| S::from_f64(*v)));
        }
        Ok(input)
    }

    /// Batched forward pass keeping everything needed for [`Self::backward`].
    pub fn forward_traced(&self, input: Vec<S>, batch: usize) -> Trace<S> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        let mut current = input;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.forward(&current, batch, &mut z);
            inputs.push(current);
            if k < last {
                let a = z.iter().map(|v| self.activation.apply(*v)).collect();
                pre_activations.push(z);
                current = a;
            } else {
                current = z;
            }
        }
        Trace { batch, inputs, pre_activations, output: current }
    }

    /// Batched forward pass without caching.
    pub fn forward_input(&self, input: &[S], batch: usize) -> Vec<S> {
        let mut current = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.forward(&current, batch, &mut next);
            if k < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    /// Network output for a batch of `(x, t)` pairs, as `f64`.
    pub fn forward_batch(&self, xs: &[f64], ts: &[usize], steps: usize) -> Result<Vec<f64>> {
        let input = self.build_input(xs, ts, steps)?;
        Ok(self.forward_input(&input, ts.len()).into_iter().map(Real::as_f64).collect())
    }

    pub fn forward(&self, x: &[f64], t: usize, steps: usize) -> Result<Vec<f64>> {
        if t == 0 || t > steps {
            return Err(Error::invalid(format!("step {t} outside [1, {steps}]")));
        }
        self.forward_batch(x, &[t], steps)
    }

    /// Reverse pass: gradients of `sum_b <upstream[b], output[b]>` with respect
    /// to every parameter.
    pub fn backward(&self, trace: &Trace<S>, upstream: &[S]) -> Gradients<S> {
        let batch = trace.batch;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let input = &trace.inputs[k];
            let g = &mut grads.layers[k];
            for (d_row, in_row) in
                delta.chunks_exact(layer.out_dim).zip(input.chunks_exact(layer.in_dim)).take(batch)
            {
                for ((dv, gw), gb) in
                    d_row.iter().zip(g.weights.chunks_exact_mut(layer.in_dim)).zip(g.bias.iter_mut())
                {
                    if *dv != S::zero() {
                        axpy(*dv, in_row, gw);
                    }
                    *gb = *gb + *dv;
                }
            }
            if k == 0 {
                break;
            }
            let pre = &trace.pre_activations[k - 1];
            let mut next = vec![S::zero(); batch * layer.in_dim];
            for (d_row, n_row) in delta.chunks_exact(layer.out_dim).zip(next.chunks_exact_mut(layer.in_dim)) {
                for (dv, w_row) in d_row.iter().zip(layer.weights.chunks_exact(layer.in_dim)) {
                    if *dv != S::zero() {
                        axpy(*dv, w_row, n_row);
                    }
                }
            }
            for (n, z) in next.iter_mut().zip(pre) {
                *n = *n * self.activation.derivative(*z);
            }
            delta = next;
        }
        grads
    }

    /// Gradients of `<upstream, forward(x, t)>` for a single sample.
    pub fn gradient(&self, x: &[f64], t: usize, steps: usize, upstream: &[f64]) -> Result<Gradients<S>> {
        if upstream.len() != self.data_dim() {
            return Err(Error::invalid(format!(
                "upstream has {} entries, expected {}",
                upstream.len(),
                self.data_dim()
            )));
        }
        if upstream.iter().any(|u| !u.is_finite()) {
            return Err(Error::invalid("upstream gradient is not finite"));
        }
        let input = self.build_input(x, &[t], steps)?;
        let trace = self.forward_traced(input, 1);
        let up: Vec<S> = upstream.iter().map(|u| S::from_f64(*u)).collect();
        Ok(self.backward(&trace, &up))
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<S = f32> {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Gradients<S>,
    second: Gradients<S>,
}

impl<S: Real> AdamState<S> {
    pub fn new(net: &DenseNet<S>, learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn second_moments(&self) -> &Gradients<S> {
        &self.second
    }

    /// Applies one update in place. Non-finite gradients are rejected before
    /// any state changes.
    pub fn step(&mut self, net: &mut DenseNet<S>, grads: &Gradients<S>) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
        {
            return Err(Error::invalid("gradient shapes do not match the network"));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let one = S::one();
        let step_size = S::from_f64(self.learning_rate / (1.0 - self.beta1.powi(self.step as i32)));
        let inv_bc2 = S::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let eps = S::from_f64(self.epsilon);

        let params = net.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()));
        for (((p, g), m), v) in
            params.zip(grads.iter()).zip(self.first.iter_mut()).zip(self.second.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
        if !net.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(())
    }
}

use rand::Rng;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer `activation(x·W + b)` with `W` stored fan_in × fan_out.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Values saved by a training forward pass.
#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Tensor2,
    pre: Tensor2,
}

impl DenseLayer {
    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn new<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Self {
            weights: Tensor2::from_vec(fan_in, fan_out, data).expect("sized above"),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            weights: Tensor2::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    /// Identity-weight layer (fan_in == fan_out) with no activation.
    pub fn identity(width: usize) -> Self {
        Self {
            weights: Tensor2::identity(width),
            bias: vec![0.0; width],
            activation: Activation::Identity,
        }
    }

    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.fan_in() {
            return Err(Error::ShapeMismatch(format!(
                "dense layer expects {} inputs, got {}",
                self.fan_in(),
                x.cols()
            )));
        }
        Ok(())
    }

    fn affine(&self, x: &Tensor2) -> Tensor2 {
        let (rows, fan_out) = (x.rows(), self.fan_out());
        let mut out = Tensor2::zeros(rows, fan_out);
        for r in 0..rows {
            let o = out.row_mut(r);
            o.copy_from_slice(&self.bias);
            for (i, &xi) in x.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (ov, &w) in o.iter_mut().zip(self.weights.row(i)) {
                    *ov += xi * w;
                }
            }
        }
        out
    }

    fn activate(&self, mut z: Tensor2) -> Tensor2 {
        if self.activation == Activation::Relu {
            z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        z
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        Ok(self.activate(self.affine(x)))
    }

    pub fn forward_train(&self, x: &Tensor2) -> Result<(Tensor2, DenseCache)> {
        self.check_input(x)?;
        let pre = self.affine(x);
        let out = self.activate(pre.clone());
        Ok((
            out,
            DenseCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the layer input.
    pub fn backward(&self, cache: &DenseCache, grad_out: &Tensor2, grad: &mut DenseLayer) -> Tensor2 {
        let fan_out = self.fan_out();
        let mut gpre = grad_out.clone();
        if self.activation == Activation::Relu {
            for (g, &z) in gpre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let mut grad_in = Tensor2::zeros(cache.input.rows(), self.fan_in());
        for r in 0..gpre.rows() {
            let gp = gpre.row(r);
            if gp.iter().all(|&g| g == 0.0) {
                continue;
            }
            for (b, &g) in grad.bias.iter_mut().zip(gp) {
                *b += g;
            }
            let xr = cache.input.row(r);
            let gi = grad_in.row_mut(r);
            for i in 0..xr.len() {
                let w = self.weights.row(i);
                let mut acc = 0.0;
                for o in 0..fan_out {
                    acc += gp[o] * w[o];
                }
                gi[i] = acc;
                let xi = xr[i];
                if xi != 0.0 {
                    for (gw, &g) in grad.weights.row_mut(i).iter_mut().zip(gp) {
                        *gw += xi * g;
                    }
                }
            }
        }
        grad_in
    }
}

/// Stack of dense layers applied row-wise; used as the shared per-point
/// perceptron of the set-abstraction and pooling stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug)]
pub struct MlpCache(Vec<DenseCache>);

impl Mlp {
    /// ReLU on every layer. `channels` lists the output width of each layer.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, channels: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(channels.len());
        let mut width = fan_in;
        for &c in channels {
            layers.push(DenseLayer::new(width, c, Activation::Relu, rng));
            width = c;
        }
        Self { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Self {
        Self { layers }
    }

    /// Empty MLP: the identity map.
    pub fn identity() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn out_width(&self, fan_in: usize) -> usize {
        self.layers.last().map_or(fan_in, |l| l.fan_out())
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: &Tensor2) -> Result<(Tensor2, MlpCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, c) = l.forward_train(&h)?;
            caches.push(c);
            h = out;
        }
        Ok((h, MlpCache(caches)))
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &Tensor2, grad: &mut Mlp) -> Tensor2 {
        let mut g = grad_out.clone();
        for ((l, c), gl) in self
            .layers
            .iter()
            .zip(&cache.0)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            g = l.backward(c, &g, gl);
        }
        g
    }
}

/// Any model built from dense layers. The layer order defines the order of
/// parameters for optimizers and checkpoints, so it must be stable.
pub trait Layered {
    fn layers(&self) -> Vec<&DenseLayer>;
    fn layers_mut(&mut self) -> Vec<&mut DenseLayer>;

    fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }
}

impl Layered for DenseLayer {
    fn layers(&self) -> Vec<&DenseLayer> {
        vec![self]
    }
    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        vec![self]
    }
}

impl Layered for Mlp {
    fn layers(&self) -> Vec<&DenseLayer> {
        self.layers.iter().collect()
    }
    fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        self.layers.iter_mut().collect()
    }
}

/// A structurally identical copy with every parameter zeroed; used as a
/// gradient accumulator.
pub fn zeroed_like<M: Layered + Clone>(model: &M) -> M {
    let mut g = model.clone();
    zero_grads(&mut g);
    g
}

pub fn zero_grads<M: Layered + ?Sized>(grads: &mut M) {
    for l in grads.layers_mut() {
        l.weights.fill(0.0);
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// `dst += scale * src`, parameter-wise.
pub fn accumulate<M: Layered + ?Sized>(dst: &mut M, src: &M, scale: f64) {
    for (d, s) in dst.layers_mut().into_iter().zip(src.layers()) {
        for (a, b) in d.weights.as_mut_slice().iter_mut().zip(s.weights.as_slice()) {
            *a += scale * b;
        }
        for (a, b) in d.bias.iter_mut().zip(&s.bias) {
            *a += scale * b;
        }
    }
}

/// Iterates every parameter slice (weights then bias, per layer).
pub(crate) fn param_slices<M: Layered + ?Sized>(model: &M) -> Vec<&[f64]> {
    model
        .layers()
        .into_iter()
        .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
        .collect()
}

pub(crate) fn param_slices_mut<M: Layered + ?Sized>(model: &mut M) -> Vec<&mut [f64]> {
    model
        .layers_mut()
        .into_iter()
        .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
        .collect()
}

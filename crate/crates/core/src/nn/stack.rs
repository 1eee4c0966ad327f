use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::layer::{Layer, LayerCache, LayerKind, Mode};
use crate::tensor::Tensor;

static NEXT_STACK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STACK_ID.fetch_add(1, Ordering::Relaxed)
}

/// Ordered layers with a fixed per-sample input shape.
#[derive(Debug)]
pub struct LayerStack {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    mode: Mode,
    // Identity of this stack's parameter state; bumped on every mutation so
    // caches from an older state are refused by `backward`.
    revision: u64,
}

impl Clone for LayerStack {
    fn clone(&self) -> Self {
        LayerStack {
            layers: self.layers.clone(),
            input_shape: self.input_shape.clone(),
            mode: self.mode,
            revision: fresh_id(),
        }
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    revision: u64,
    batch: usize,
    caches: Vec<LayerCache>,
}

impl LayerStack {
    /// Builds a stack, checking that every adjacent pair of layers fits.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|message| Error::LayerShape { layer: i, message })?;
            if let Layer::Dropout(d) = layer {
                if !(0.0..1.0).contains(&d.rate) {
                    return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", d.rate)));
                }
            }
        }
        Ok(LayerStack {
            layers,
            input_shape,
            mode: Mode::Train,
            revision: fresh_id(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers.iter().fold(self.input_shape.clone(), |s, l| {
            l.output_shape(&s).expect("validated at construction")
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Mutable parameter views. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.revision = fresh_id();
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Mutable access to a single layer. Invalidates outstanding caches.
    pub fn layer_mut(&mut self, index: usize) -> Option<&mut Layer> {
        self.revision = fresh_id();
        self.layers.get_mut(index)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::LayerShape {
                layer: 0,
                message: format!("expected [N, {:?}], got {s:?}", self.input_shape),
            });
        }
        Ok(())
    }

    fn needs_seed(&self, mode: Mode) -> bool {
        mode == Mode::Train
            && self
                .layers
                .iter()
                .any(|l| matches!(l, Layer::Dropout(d) if d.rate > 0.0))
    }

    /// Forward pass in the stack's own mode. In training mode the batchnorm
    /// running statistics and spectral-norm vectors are advanced.
    pub fn forward(&mut self, input: &Tensor, rng_seed: Option<u64>) -> Result<(Tensor, StackCache)> {
        let (out, cache) = self.forward_with(input, self.mode, rng_seed)?;
        if self.mode == Mode::Train {
            self.commit(&cache);
        }
        Ok((out, cache))
    }

    /// Forward pass that leaves the stack untouched.
    pub fn forward_with(&self, input: &Tensor, mode: Mode, rng_seed: Option<u64>) -> Result<(Tensor, StackCache)> {
        if self.needs_seed(mode) && rng_seed.is_none() {
            return Err(Error::invalid("dropout in training mode requires an rng seed"));
        }
        let seed = if mode == Mode::Train { rng_seed } else { None };
        self.run(input, mode, seed)
    }

    /// Evaluation-mode pass with dropout kept active (Monte-Carlo sampling).
    pub fn forward_stochastic(&self, input: &Tensor, rng_seed: u64) -> Result<(Tensor, StackCache)> {
        self.run(input, Mode::Eval, Some(rng_seed))
    }

    fn run(&self, input: &Tensor, mode: Mode, rng_seed: Option<u64>) -> Result<(Tensor, StackCache)> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let seed = rng_seed.map(|s| s ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (y, cache) = layer.forward(&x, mode, seed);
            caches.push(cache);
            x = y;
        }
        Ok((
            x,
            StackCache {
                revision: self.revision,
                batch: input.batch(),
                caches,
            },
        ))
    }

    /// Eval-mode forward without a cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, Mode::Eval, None).map(|(y, _)| y)
    }

    /// Folds training-mode side effects of a forward pass into the stack.
    pub fn commit(&mut self, cache: &StackCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.caches) {
            match (layer, c) {
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(bc)) if bc.training => {
                    let m = bn.momentum;
                    let unbias = if bc.count > 1 {
                        bc.count as f64 / (bc.count - 1) as f64
                    } else {
                        1.0
                    };
                    for ch in 0..bn.running_mean.len() {
                        bn.running_mean[ch] = (1.0 - m) * bn.running_mean[ch] + m * bc.batch_mean[ch];
                        bn.running_var[ch] = (1.0 - m) * bn.running_var[ch] + m * bc.batch_var[ch] * unbias;
                    }
                }
                (layer, LayerCache::Affine { spectral: Some(sc), .. }) => {
                    if let Some(state) = layer.spectral_state_mut() {
                        *state = sc.state.clone();
                    }
                }
                _ => {}
            }
        }
    }

    /// Gradients of a scalar loss w.r.t. the input and every parameter,
    /// grouped per layer in `params()` order.
    pub fn backward(&self, cache: &StackCache, output_grad: &Tensor) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        if cache.caches.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, stack has {}",
                cache.caches.len(),
                self.layers.len()
            )));
        }
        for (i, (l, c)) in self.layers.iter().zip(&cache.caches).enumerate() {
            if !c.matches(l.kind()) {
                return Err(Error::StaleCache(format!("layer {i} kind does not match cache")));
            }
        }
        let mut expected = vec![cache.batch];
        expected.extend(self.output_shape());
        if output_grad.shape() != expected.as_slice() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {expected:?}",
                output_grad.shape()
            )));
        }
        let mut grad = output_grad.clone();
        let mut param_grads = vec![Vec::new(); self.layers.len()];
        for (i, (layer, c)) in self.layers.iter().zip(&cache.caches).enumerate().rev() {
            let (dx, pg) = layer.backward(c, &grad);
            param_grads[i] = pg;
            grad = dx;
        }
        Ok((grad, param_grads))
    }
}

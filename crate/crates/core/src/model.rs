//! A feature stack followed by a per-site head.
//!
//! Stack outputs are `[N, D]` (one site per sample) or `[N, D, H, W]`
//! (one site per output pixel). Sites are laid out sample-major, then
//! row-major over pixels, each as a `D`-vector.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::heads::{head_from_record, UncertaintyHead};
use crate::nn::{LayerStack, Mode, Record};
use crate::objective::InputGradient;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SiteModel {
    pub stack: LayerStack,
    pub head: Box<dyn UncertaintyHead>,
}

/// Inference result for a batch: `n = N * sites_per_sample` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteOutput {
    pub sites_per_sample: usize,
    pub features: Vec<f64>,
    pub scores: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

/// `[N, D, S...]` → sample-major rows of width `D`.
pub fn to_sites(out: &Tensor) -> Vec<f64> {
    let (n, d) = (out.shape()[0], out.shape()[1]);
    let s: usize = out.shape()[2..].iter().product();
    if s == 1 {
        return out.data().to_vec();
    }
    let mut rows = vec![0.0; out.len()];
    for i in 0..n {
        let src = out.sample(i);
        let dst = &mut rows[i * d * s..(i + 1) * d * s];
        for c in 0..d {
            for p in 0..s {
                dst[p * d + c] = src[c * s + p];
            }
        }
    }
    rows
}

/// Inverse of [`to_sites`].
pub fn from_sites(rows: &[f64], shape: &[usize]) -> Tensor {
    let (n, d) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    if s == 1 {
        return Tensor::new(shape.to_vec(), rows.to_vec()).expect("row count matches shape");
    }
    let mut data = vec![0.0; rows.len()];
    for i in 0..n {
        let src = &rows[i * d * s..(i + 1) * d * s];
        let dst = &mut data[i * d * s..(i + 1) * d * s];
        for p in 0..s {
            for c in 0..d {
                dst[c * s + p] = src[p * d + c];
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("row count matches shape")
}

impl SiteModel {
    pub fn new(stack: LayerStack, head: Box<dyn UncertaintyHead>) -> Result<Self> {
        let out = stack.output_shape();
        if out[0] != head.feature_dim() {
            return Err(Error::Shape(format!(
                "stack emits {} channels, head expects {}",
                out[0],
                head.feature_dim()
            )));
        }
        Ok(SiteModel { stack, head })
    }

    pub fn sites_per_sample(&self) -> usize {
        self.stack.output_shape()[1..].iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Evaluation-mode inference. Heads with several Monte-Carlo passes run the
    /// stack with dropout active under seeds derived from `seed` and average
    /// their scores before computing uncertainty.
    pub fn infer(&self, input: &Tensor, seed: u64) -> Result<SiteOutput> {
        let passes = self.head.mc_passes();
        let c = self.head.num_classes();
        let (features, mut scores) = if passes <= 1 {
            let out = self.stack.infer(input)?;
            let f = to_sites(&out);
            let s = self.head.scores(&f);
            (f, s)
        } else {
            let mut acc: Option<Vec<f64>> = None;
            let mut first = Vec::new();
            for t in 0..passes {
                let pass_seed = seed.wrapping_add((t as u64 + 1).wrapping_mul(0xD134_2543_DE82_EF95));
                let (out, _) = self.stack.forward_stochastic(input, pass_seed)?;
                let f = to_sites(&out);
                let s = self.head.scores(&f);
                match acc.as_mut() {
                    None => {
                        acc = Some(s);
                        first = f;
                    }
                    Some(a) => a.iter_mut().zip(&s).for_each(|(x, y)| *x += y),
                }
            }
            let mut a = acc.expect("at least one pass");
            a.iter_mut().for_each(|v| *v /= passes as f64);
            (first, a)
        };
        let uncertainty: Vec<f64> = scores.chunks_exact(c).map(|row| self.head.uncertainty(row)).collect();
        scores.shrink_to_fit();
        Ok(SiteOutput {
            sites_per_sample: self.sites_per_sample(),
            features,
            scores,
            uncertainty,
        })
    }

    /// Stack parameters followed by head parameters.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.stack.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.stack.params();
        p.extend(self.head.params());
        p
    }

    /// Gradients of `sum(upstream * scores)` for a training-mode pass at
    /// `input`: input gradient and all parameter gradients (stack then head).
    pub(crate) fn scores_gradients(
        &self,
        input: &Tensor,
        upstream: &[f64],
        seed: Option<u64>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (out, cache) = self.stack.forward_with(input, Mode::Train, seed)?;
        let sites = to_sites(&out);
        let mut head_grads: Vec<Tensor> = self.head.params().iter().map(|p| p.zeros_like()).collect();
        let site_grad = self.head.scores_backward(&sites, upstream, &mut head_grads);
        let (dx, stack_grads) = self.stack.backward(&cache, &from_sites(&site_grad, out.shape()))?;
        let mut grads: Vec<Tensor> = stack_grads.into_iter().flatten().collect();
        grads.extend(head_grads);
        Ok((dx, grads))
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut r = self.stack.to_records();
        r.push(self.head.to_record());
        r
    }

    pub fn from_records(records: &mut VecDeque<Record>) -> Result<Self> {
        let stack = LayerStack::from_records(records)?;
        let head = head_from_record(records.pop_front().ok_or_else(|| Error::Format("missing head record".into()))?)?;
        SiteModel::new(stack, head).map_err(|e| Error::Format(e.to_string()))
    }
}

impl InputGradient for SiteModel {
    /// Uses the stack's current mode, so batch-coupled layers contribute
    /// cross-sample terms in training mode.
    fn input_grads(&self, inputs: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.stack.forward_with(inputs, self.stack.mode(), Some(0))?;
        let sites = to_sites(&out);
        let upstream = vec![1.0; sites.len() / self.head.feature_dim() * self.head.num_classes()];
        let mut scratch: Vec<Tensor> = self.head.params().iter().map(|p| p.zeros_like()).collect();
        let site_grad = self.head.scores_backward(&sites, &upstream, &mut scratch);
        let (dx, _) = self.stack.backward(&cache, &from_sites(&site_grad, out.shape()))?;
        Ok(dx)
    }
}

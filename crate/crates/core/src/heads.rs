//! Per-site classification heads that emit class scores and an uncertainty
//! in `[0, 1]`, selectable by name.

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Record;
use crate::objective::{boundary_loss, in_dist_loss};
use crate::rbf::{argmax, RbfHead};
use crate::tensor::Tensor;

/// Training target of one site (a pixel, or a whole sample for vector inputs).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteTarget {
    Class(usize),
    /// Treated as an outlier: every class score is pushed to zero.
    Boundary,
    Ignore,
}

/// Loss of one batch of sites, with gradients w.r.t. the site features and
/// the head's parameters (in `params()` order).
#[derive(Clone, Debug)]
pub struct HeadLoss {
    pub l_in: f64,
    pub l_bd: f64,
    pub feature_grad: Vec<f64>,
    pub param_grads: Vec<Tensor>,
}

/// Construction parameters shared by every head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub centers_per_class: usize,
    pub sigma: f64,
    pub mc_passes: usize,
}

pub trait UncertaintyHead: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;

    /// Class scores for row-major `n x D` sites, as `n x C`.
    fn scores(&self, sites: &[f64]) -> Vec<f64>;

    /// Uncertainty of one row of (possibly pass-averaged) scores.
    fn uncertainty(&self, scores: &[f64]) -> f64;

    fn loss(&self, sites: &[f64], targets: &[SiteTarget]) -> Result<HeadLoss>;

    /// Gradient of `sum(upstream * scores)` w.r.t. the sites; parameter
    /// gradients are added into `param_grads`.
    fn scores_backward(&self, sites: &[f64], upstream: &[f64], param_grads: &mut [Tensor]) -> Vec<f64>;

    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Hook run after each optimizer step with the step's site features.
    fn after_step(&mut self, _sites: &[f64], _targets: &[SiteTarget], _ema_momentum: f64) -> Result<()> {
        Ok(())
    }

    /// Number of stochastic forward passes averaged at inference.
    fn mc_passes(&self) -> usize {
        1
    }

    /// Whether the feature stack should carry dropout layers for this head.
    fn wants_dropout(&self) -> bool {
        false
    }

    fn supports_boundary(&self) -> bool {
        false
    }

    fn as_rbf(&self) -> Option<&RbfHead> {
        None
    }

    fn to_record(&self) -> Record;
    fn clone_box(&self) -> Box<dyn UncertaintyHead>;
}

impl Clone for Box<dyn UncertaintyHead> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Gaussian-kernel head; uncertainty is `1 - max_c h_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfUncertainty {
    pub head: RbfHead,
}

impl UncertaintyHead for RbfUncertainty {
    fn name(&self) -> &'static str {
        "rbf"
    }

    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.head.feature_dim()
    }

    fn scores(&self, sites: &[f64]) -> Vec<f64> {
        self.head.scores_batch(sites).expect("site width checked by the model")
    }

    fn uncertainty(&self, scores: &[f64]) -> f64 {
        1.0 - argmax(scores).1
    }

    fn loss(&self, sites: &[f64], targets: &[SiteTarget]) -> Result<HeadLoss> {
        let (c, d) = (self.head.num_classes(), self.head.feature_dim());
        let scores = self.scores(sites);
        let mut in_rows = Vec::new();
        let mut in_labels = Vec::new();
        let mut bd_rows = Vec::new();
        for (i, t) in targets.iter().enumerate() {
            match *t {
                SiteTarget::Class(l) => {
                    in_rows.push(i);
                    in_labels.push(l);
                }
                SiteTarget::Boundary => bd_rows.push(i),
                SiteTarget::Ignore => {}
            }
        }
        let gather = |rows: &[usize]| -> Vec<f64> {
            rows.iter().flat_map(|&i| scores[i * c..(i + 1) * c].iter().copied()).collect()
        };
        let (l_in, g_in) = in_dist_loss(&gather(&in_rows), &in_labels, c)?;
        let (l_bd, g_bd) = boundary_loss(&gather(&bd_rows), c)?;
        let mut upstream = vec![0.0; scores.len()];
        for (j, &i) in in_rows.iter().enumerate() {
            upstream[i * c..(i + 1) * c].copy_from_slice(&g_in[j * c..(j + 1) * c]);
        }
        for (j, &i) in bd_rows.iter().enumerate() {
            upstream[i * c..(i + 1) * c].copy_from_slice(&g_bd[j * c..(j + 1) * c]);
        }
        let mut logits_grad = self.head.weight_logits.zeros_like();
        let feature_grad = self.head.scores_grad_batch(sites, &upstream, &mut logits_grad);
        debug_assert_eq!(feature_grad.len(), targets.len() * d);
        Ok(HeadLoss {
            l_in,
            l_bd,
            feature_grad,
            param_grads: vec![logits_grad],
        })
    }

    fn scores_backward(&self, sites: &[f64], upstream: &[f64], param_grads: &mut [Tensor]) -> Vec<f64> {
        self.head.scores_grad_batch(sites, upstream, &mut param_grads[0])
    }

    // Centers move only through the moving average.
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.head.weight_logits]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.head.weight_logits]
    }

    fn after_step(&mut self, sites: &[f64], targets: &[SiteTarget], ema_momentum: f64) -> Result<()> {
        let d = self.head.feature_dim();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (i, t) in targets.iter().enumerate() {
            if let SiteTarget::Class(l) = *t {
                feats.extend_from_slice(&sites[i * d..(i + 1) * d]);
                labels.push(l);
            }
        }
        self.head.ema_update(&feats, &labels, ema_momentum)
    }

    fn supports_boundary(&self) -> bool {
        true
    }

    fn as_rbf(&self) -> Option<&RbfHead> {
        Some(&self.head)
    }

    fn to_record(&self) -> Record {
        self.head.to_record()
    }

    fn clone_box(&self) -> Box<dyn UncertaintyHead> {
        Box::new(self.clone())
    }
}

/// Linear layer with softmax; uncertainty is the entropy of the (averaged)
/// probabilities divided by `ln C`. With `mc_passes > 1` it is the dropout
/// baseline: the stack carries dropout layers that stay active at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxEntropy {
    /// `[C, D]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
    pub mc_passes: usize,
    pub dropout: bool,
}

impl SoftmaxEntropy {
    pub fn new(num_classes: usize, feature_dim: usize, mc_passes: usize, dropout: bool, seed: u64) -> Result<Self> {
        if num_classes < 2 || feature_dim == 0 || mc_passes == 0 {
            return Err(Error::invalid("softmax head needs >= 2 classes, D > 0 and >= 1 pass"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / feature_dim as f64).sqrt()).expect("positive std");
        let data = (0..num_classes * feature_dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(SoftmaxEntropy {
            weight: Tensor::new(vec![num_classes, feature_dim], data)?,
            bias: Tensor::zeros(&[num_classes]),
            mc_passes,
            dropout,
        })
    }

    fn probs_into(&self, site: &[f64], out: &mut [f64]) {
        let d = site.len();
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weight.data()[c * d..(c + 1) * d];
            *o = self.bias.data()[c] + w.iter().zip(site).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
    }

    /// Back through the softmax and linear map, given `d/d logits` per site.
    fn linear_backward(&self, sites: &[f64], dlogits: &[f64], param_grads: &mut [Tensor]) -> Vec<f64> {
        let (c, d) = (self.weight.shape()[0], self.weight.shape()[1]);
        let mut out = vec![0.0; sites.len()];
        for ((site, dl), g) in sites.chunks_exact(d).zip(dlogits.chunks_exact(c)).zip(out.chunks_exact_mut(d)) {
            for (k, &dk) in dl.iter().enumerate() {
                if dk == 0.0 {
                    continue;
                }
                let w = &self.weight.data()[k * d..(k + 1) * d];
                for t in 0..d {
                    g[t] += dk * w[t];
                }
                let gw = &mut param_grads[0].data_mut()[k * d..(k + 1) * d];
                for t in 0..d {
                    gw[t] += dk * site[t];
                }
                param_grads[1].data_mut()[k] += dk;
            }
        }
        out
    }
}

impl UncertaintyHead for SoftmaxEntropy {
    fn name(&self) -> &'static str {
        if self.dropout {
            "dropout"
        } else {
            "entropy"
        }
    }

    fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn scores(&self, sites: &[f64]) -> Vec<f64> {
        let (c, d) = (self.num_classes(), self.feature_dim());
        let mut out = vec![0.0; sites.len() / d * c];
        for (site, o) in sites.chunks_exact(d).zip(out.chunks_exact_mut(c)) {
            self.probs_into(site, o);
        }
        out
    }

    fn uncertainty(&self, probs: &[f64]) -> f64 {
        let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        (h / (probs.len() as f64).ln()).clamp(0.0, 1.0)
    }

    fn loss(&self, sites: &[f64], targets: &[SiteTarget]) -> Result<HeadLoss> {
        let c = self.num_classes();
        let probs = self.scores(sites);
        let n_in = targets.iter().filter(|t| matches!(t, SiteTarget::Class(_))).count();
        let mut dlogits = vec![0.0; probs.len()];
        let mut l_in = 0.0;
        if n_in > 0 {
            let scale = 1.0 / n_in as f64;
            for (i, t) in targets.iter().enumerate() {
                if let SiteTarget::Class(l) = *t {
                    if l >= c {
                        return Err(Error::invalid(format!("label {l} out of range")));
                    }
                    let row = &probs[i * c..(i + 1) * c];
                    l_in -= row[l].max(crate::objective::LOG_CLAMP).ln() * scale;
                    for k in 0..c {
                        dlogits[i * c + k] = scale * (row[k] - if k == l { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        let mut param_grads = vec![self.weight.zeros_like(), self.bias.zeros_like()];
        let feature_grad = self.linear_backward(sites, &dlogits, &mut param_grads);
        Ok(HeadLoss {
            l_in,
            l_bd: 0.0,
            feature_grad,
            param_grads,
        })
    }

    fn scores_backward(&self, sites: &[f64], upstream: &[f64], param_grads: &mut [Tensor]) -> Vec<f64> {
        let c = self.num_classes();
        let probs = self.scores(sites);
        let mut dlogits = vec![0.0; probs.len()];
        for ((p, u), dl) in probs.chunks_exact(c).zip(upstream.chunks_exact(c)).zip(dlogits.chunks_exact_mut(c)) {
            let dot: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            for k in 0..c {
                dl[k] = p[k] * (u[k] - dot);
            }
        }
        self.linear_backward(sites, &dlogits, param_grads)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn mc_passes(&self) -> usize {
        self.mc_passes
    }

    fn wants_dropout(&self) -> bool {
        self.dropout
    }

    fn to_record(&self) -> Record {
        Record::new(
            format!("softmax passes={} dropout={}", self.mc_passes, self.dropout as u8),
            vec![self.weight.clone(), self.bias.clone()],
        )
    }

    fn clone_box(&self) -> Box<dyn UncertaintyHead> {
        Box::new(self.clone())
    }
}

pub type HeadFactory = fn(&HeadSpec, u64) -> Result<Box<dyn UncertaintyHead>>;

fn build_rbf(spec: &HeadSpec, seed: u64) -> Result<Box<dyn UncertaintyHead>> {
    let head = RbfHead::new(spec.num_classes, spec.centers_per_class, spec.feature_dim, spec.sigma, seed)?;
    Ok(Box::new(RbfUncertainty { head }))
}

fn build_entropy(spec: &HeadSpec, seed: u64) -> Result<Box<dyn UncertaintyHead>> {
    Ok(Box::new(SoftmaxEntropy::new(spec.num_classes, spec.feature_dim, 1, false, seed)?))
}

fn build_dropout(spec: &HeadSpec, seed: u64) -> Result<Box<dyn UncertaintyHead>> {
    Ok(Box::new(SoftmaxEntropy::new(spec.num_classes, spec.feature_dim, spec.mc_passes, true, seed)?))
}

/// Registered heads, by name.
pub const HEADS: &[(&str, HeadFactory)] = &[
    ("rbf", build_rbf),
    ("entropy", build_entropy),
    ("dropout", build_dropout),
];

pub fn head_names() -> Vec<&'static str> {
    HEADS.iter().map(|(n, _)| *n).collect()
}

pub fn build_head(name: &str, spec: &HeadSpec, seed: u64) -> Result<Box<dyn UncertaintyHead>> {
    let (_, factory) = HEADS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::config("head", format!("unknown head `{name}`; expected one of {:?}", head_names())))?;
    factory(spec, seed)
}

pub fn head_from_record(rec: Record) -> Result<Box<dyn UncertaintyHead>> {
    match rec.kind() {
        "rbf" => Ok(Box::new(RbfUncertainty {
            head: RbfHead::from_record(rec)?,
        })),
        "softmax" => {
            let mc_passes: usize = rec.field("passes")?;
            let dropout: u8 = rec.field("dropout")?;
            let mut it = rec.tensors.into_iter();
            let (Some(weight), Some(bias)) = (it.next(), it.next()) else {
                return Err(Error::Format("softmax record needs weight and bias".into()));
            };
            Ok(Box::new(SoftmaxEntropy {
                weight,
                bias,
                mc_passes,
                dropout: dropout == 1,
            }))
        }
        other => Err(Error::Format(format!("unknown head record `{other}`"))),
    }
}

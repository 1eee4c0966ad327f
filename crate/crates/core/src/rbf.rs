//! Gaussian-kernel class scores over per-class centers.
//!
//! For class `c` with centers `mu[c][k]` and weights `w[c][k] = softmax_k(logits[c])`:
//!
//! ```text
//! h_c(f)  = sum_k w[c][k] * exp(-|f - mu[c][k]|^2 / (2 sigma^2))
//! tau(f)  = 1 - max_c h_c(f)
//! ```
//!
//! Weights sum to one per class, so `0 < h_c <= 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::dist_sq;
use crate::nn::Record;
use crate::tensor::Tensor;

/// Scale of the Gaussian used to draw initial centers.
pub const CENTER_INIT_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct RbfHead {
    num_classes: usize,
    centers_per_class: usize,
    feature_dim: usize,
    /// `[C, K, D]`
    pub centers: Tensor,
    /// `[C, K]`
    pub weight_logits: Tensor,
    sigma: f64,
}

/// Scores for one feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub h: Vec<f64>,
    pub predicted_class: usize,
    pub tau: f64,
}

impl ScoreVector {
    pub fn from_scores(h: Vec<f64>) -> Self {
        let (predicted_class, max) = argmax(&h);
        ScoreVector {
            h,
            predicted_class,
            tau: 1.0 - max,
        }
    }
}

/// Index and value of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Gradients of `sum_c upstream[c] * h_c` for one feature vector.
#[derive(Clone, Debug)]
pub struct RbfGrads {
    pub feature: Vec<f64>,
    /// `[C, K, D]`
    pub centers: Tensor,
    /// `[C, K]`
    pub weight_logits: Tensor,
}

impl RbfHead {
    pub fn new(num_classes: usize, centers_per_class: usize, feature_dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 || centers_per_class == 0 || feature_dim == 0 {
            return Err(Error::invalid("rbf head dimensions must be positive"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma {sigma} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = num_classes * centers_per_class * feature_dim;
        let data = (0..n)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); CENTER_INIT_SCALE * z })
            .collect();
        Ok(RbfHead {
            num_classes,
            centers_per_class,
            feature_dim,
            centers: Tensor::new(vec![num_classes, centers_per_class, feature_dim], data)?,
            weight_logits: Tensor::zeros(&[num_classes, centers_per_class]),
            sigma,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn centers_per_class(&self) -> usize {
        self.centers_per_class
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn param_count(&self) -> usize {
        self.centers.len() + self.weight_logits.len()
    }

    pub fn center(&self, class: usize, k: usize) -> &[f64] {
        let d = self.feature_dim;
        let off = (class * self.centers_per_class + k) * d;
        &self.centers.data()[off..off + d]
    }

    pub fn center_mut(&mut self, class: usize, k: usize) -> &mut [f64] {
        let d = self.feature_dim;
        let off = (class * self.centers_per_class + k) * d;
        &mut self.centers.data_mut()[off..off + d]
    }

    /// Softmax of the weight logits of one class.
    pub fn weights(&self, class: usize) -> Vec<f64> {
        let k = self.centers_per_class;
        let logits = &self.weight_logits.data()[class * k..(class + 1) * k];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    fn all_weights(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes).map(|c| self.weights(c)).collect()
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "feature has {} dims, head expects {}",
                feature.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    fn kernels_into(&self, feature: &[f64], out: &mut [f64]) {
        let denom = 2.0 * self.sigma * self.sigma;
        let d = self.feature_dim;
        for (i, o) in out.iter_mut().enumerate() {
            *o = (-dist_sq(feature, &self.centers.data()[i * d..(i + 1) * d]) / denom).exp();
        }
    }

    fn scores_with(&self, feature: &[f64], weights: &[Vec<f64>], kernels: &mut [f64]) -> Vec<f64> {
        self.kernels_into(feature, kernels);
        let k = self.centers_per_class;
        (0..self.num_classes)
            .map(|c| {
                weights[c]
                    .iter()
                    .zip(&kernels[c * k..(c + 1) * k])
                    .map(|(w, e)| w * e)
                    .sum::<f64>()
                    .min(1.0)
            })
            .collect()
    }

    pub fn scores(&self, feature: &[f64]) -> Result<ScoreVector> {
        self.check_feature(feature)?;
        let mut kernels = vec![0.0; self.num_classes * self.centers_per_class];
        Ok(ScoreVector::from_scores(self.scores_with(feature, &self.all_weights(), &mut kernels)))
    }

    /// Class scores for `n` row-major feature vectors, returned as `n x C`.
    pub fn scores_batch(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.feature_dim;
        if features.len() % d != 0 {
            return Err(Error::Shape(format!("{} values is not a multiple of {d}", features.len())));
        }
        let weights = self.all_weights();
        let mut kernels = vec![0.0; self.num_classes * self.centers_per_class];
        let mut out = Vec::with_capacity(features.len() / d * self.num_classes);
        for f in features.chunks_exact(d) {
            out.extend(self.scores_with(f, &weights, &mut kernels));
        }
        Ok(out)
    }

    /// Exact gradients of `sum_c upstream[c] * h_c(feature)`.
    pub fn scores_grad(&self, feature: &[f64], upstream: &[f64]) -> Result<RbfGrads> {
        self.check_feature(feature)?;
        if upstream.len() != self.num_classes {
            return Err(Error::Shape("upstream gradient must have one entry per class".into()));
        }
        let mut grads = RbfGrads {
            feature: vec![0.0; self.feature_dim],
            centers: self.centers.zeros_like(),
            weight_logits: self.weight_logits.zeros_like(),
        };
        let weights = self.all_weights();
        let mut kernels = vec![0.0; self.num_classes * self.centers_per_class];
        self.kernels_into(feature, &mut kernels);
        self.accumulate_grad(feature, upstream, &weights, &kernels, &mut grads.feature, Some(&mut grads.centers), &mut grads.weight_logits);
        Ok(grads)
    }

    /// Batched gradient: returns `n x D` feature gradients and accumulates into
    /// the logits gradient. Center gradients are not formed (centers follow EMA).
    pub fn scores_grad_batch(&self, features: &[f64], upstream: &[f64], logits_grad: &mut Tensor) -> Vec<f64> {
        let (d, c) = (self.feature_dim, self.num_classes);
        let weights = self.all_weights();
        let mut kernels = vec![0.0; c * self.centers_per_class];
        let mut out = vec![0.0; features.len()];
        for ((f, up), g) in features.chunks_exact(d).zip(upstream.chunks_exact(c)).zip(out.chunks_exact_mut(d)) {
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            self.kernels_into(f, &mut kernels);
            self.accumulate_grad(f, up, &weights, &kernels, g, None, logits_grad);
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate_grad(
        &self,
        feature: &[f64],
        upstream: &[f64],
        weights: &[Vec<f64>],
        kernels: &[f64],
        dfeature: &mut [f64],
        mut dcenters: Option<&mut Tensor>,
        dlogits: &mut Tensor,
    ) {
        let (k, d) = (self.centers_per_class, self.feature_dim);
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        for (c, &up) in upstream.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            let ker = &kernels[c * k..(c + 1) * k];
            let h: f64 = weights[c].iter().zip(ker).map(|(w, e)| w * e).sum();
            for j in 0..k {
                let idx = c * k + j;
                let we = weights[c][j] * ker[j];
                // d h / d logit_j = w_j (e_j - h)
                dlogits.data_mut()[idx] += up * weights[c][j] * (ker[j] - h);
                if we == 0.0 {
                    continue;
                }
                let mu = &self.centers.data()[idx * d..(idx + 1) * d];
                let scale = up * we * inv_s2;
                for t in 0..d {
                    dfeature[t] -= scale * (feature[t] - mu[t]);
                }
                if let Some(dc) = dcenters.as_deref_mut() {
                    let dcs = &mut dc.data_mut()[idx * d..(idx + 1) * d];
                    for t in 0..d {
                        dcs[t] += scale * (feature[t] - mu[t]);
                    }
                }
            }
        }
    }

    /// Nearest center of `class` to `feature`; ties go to the lowest index.
    pub fn nearest_center(&self, class: usize, feature: &[f64]) -> usize {
        (0..self.centers_per_class)
            .map(|k| dist_sq(feature, self.center(class, k)))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, d)| if d < best.1 { (k, d) } else { best })
            .0
    }

    /// Moving-average center update. Each sample is assigned to the nearest
    /// center of its labeled class; every center with at least one assignment
    /// moves to `momentum * mu + (1 - momentum) * mean(assigned)`.
    pub fn ema_update(&mut self, features: &[f64], labels: &[usize], momentum: f64) -> Result<()> {
        let (k, d) = (self.centers_per_class, self.feature_dim);
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("ema momentum {momentum} outside [0, 1]")));
        }
        if features.len() != labels.len() * d {
            return Err(Error::Shape(format!(
                "{} labels for {} feature values of width {d}",
                labels.len(),
                features.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }
        let mut sums = vec![0.0; self.num_classes * k * d];
        let mut counts = vec![0usize; self.num_classes * k];
        for (f, &label) in features.chunks_exact(d).zip(labels) {
            let j = self.nearest_center(label, f);
            let idx = label * k + j;
            counts[idx] += 1;
            for (s, v) in sums[idx * d..(idx + 1) * d].iter_mut().zip(f) {
                *s += v;
            }
        }
        for (idx, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let mean = &sums[idx * d..(idx + 1) * d];
            let mu = &mut self.centers.data_mut()[idx * d..(idx + 1) * d];
            for (m, s) in mu.iter_mut().zip(mean) {
                *m = momentum * *m + (1.0 - momentum) * (s / n as f64);
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> Record {
        Record::new(
            format!(
                "rbf classes={} centers={} dim={} sigma={:e}",
                self.num_classes, self.centers_per_class, self.feature_dim, self.sigma
            ),
            vec![self.centers.clone(), self.weight_logits.clone()],
        )
    }

    pub fn from_record(rec: Record) -> Result<Self> {
        if rec.kind() != "rbf" {
            return Err(Error::Format(format!("expected rbf record, found `{}`", rec.kind())));
        }
        let num_classes: usize = rec.field("classes")?;
        let centers_per_class: usize = rec.field("centers")?;
        let feature_dim: usize = rec.field("dim")?;
        let sigma: f64 = rec.field("sigma")?;
        let mut it = rec.tensors.into_iter();
        let (Some(centers), Some(weight_logits)) = (it.next(), it.next()) else {
            return Err(Error::Format("rbf record needs centers and logits".into()));
        };
        if centers.shape() != [num_classes, centers_per_class, feature_dim]
            || weight_logits.shape() != [num_classes, centers_per_class]
        {
            return Err(Error::Format("rbf tensor shapes disagree with descriptor".into()));
        }
        Ok(RbfHead {
            num_classes,
            centers_per_class,
            feature_dim,
            centers,
            weight_logits,
            sigma,
        })
    }
}

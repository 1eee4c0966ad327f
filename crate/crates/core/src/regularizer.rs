//! Training regularizers, selectable by name.

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::SiteModel;
use crate::objective::{penalty_direction, penalty_from_grads, DEFAULT_GP_LAMBDA};
use crate::tensor::Tensor;

/// Largest input perturbation used for the penalty's second-order term.
const PENALTY_PROBE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub gp_lambda: f64,
    /// Sites sampled per sample when the model emits several (pixel maps).
    pub gp_sites: usize,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec {
            gp_lambda: DEFAULT_GP_LAMBDA,
            gp_sites: 1,
        }
    }
}

/// Penalty value with gradients for every model parameter (stack, then head).
pub struct Penalty {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

pub trait Regularizer: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether boundary-flagged sites are trained as all-zero-target outliers.
    fn uses_boundary(&self) -> bool {
        false
    }

    /// Extra loss term for a training batch.
    fn penalty(&self, _model: &SiteModel, _input: &Tensor, _dropout_seed: Option<u64>, _seed: u64) -> Result<Option<Penalty>> {
        Ok(None)
    }
}

#[derive(Clone, Debug)]
pub struct NoRegularizer;

impl Regularizer for NoRegularizer {
    fn name(&self) -> &'static str {
        "none"
    }
}

#[derive(Clone, Debug)]
pub struct BoundaryConstraint;

impl Regularizer for BoundaryConstraint {
    fn name(&self) -> &'static str {
        "boundary"
    }

    fn uses_boundary(&self) -> bool {
        true
    }
}

/// `lambda * mean_i (|d/dx_i sum_c h_c|^2 - 1)^2`.
///
/// For pixel-map models each sample contributes `sites` randomly chosen
/// pixels. The parameter gradient is the central difference of the score
/// gradients along the penalty direction (a Hessian-vector product).
#[derive(Clone, Debug)]
pub struct GradientPenalty {
    pub lambda: f64,
    pub sites: usize,
}

impl Regularizer for GradientPenalty {
    fn name(&self) -> &'static str {
        "gp"
    }

    fn penalty(&self, model: &SiteModel, input: &Tensor, dropout_seed: Option<u64>, seed: u64) -> Result<Option<Penalty>> {
        let (n, spp, c) = (input.batch(), model.sites_per_sample(), model.num_classes());
        let mut upstream = vec![0.0; n * spp * c];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            for _ in 0..self.sites.min(spp) {
                let s = if spp == 1 { 0 } else { rng.gen_range(0..spp) };
                upstream[(i * spp + s) * c..(i * spp + s + 1) * c].fill(1.0);
            }
        }
        let (g, _) = model.scores_gradients(input, &upstream, dropout_seed)?;
        let value = penalty_from_grads(&g, self.lambda);
        let dir = penalty_direction(&g, self.lambda);
        let scale = dir.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let zero: Vec<Tensor> = model.params().iter().map(|p| p.zeros_like()).collect();
        if !value.is_finite() || !scale.is_finite() {
            return Ok(Some(Penalty { value: f64::NAN, grads: zero }));
        }
        if scale == 0.0 {
            return Ok(Some(Penalty { value, grads: zero }));
        }
        let eps = PENALTY_PROBE / scale;
        let mut plus = input.clone();
        plus.add_scaled(&dir, eps);
        let mut minus = input.clone();
        minus.add_scaled(&dir, -eps);
        let (_, gp) = model.scores_gradients(&plus, &upstream, dropout_seed)?;
        let (_, gm) = model.scores_gradients(&minus, &upstream, dropout_seed)?;
        let grads = gp
            .into_iter()
            .zip(gm)
            .map(|(mut a, b)| {
                a.add_scaled(&b, -1.0);
                a.data_mut().iter_mut().for_each(|v| *v /= 2.0 * eps);
                a
            })
            .collect();
        Ok(Some(Penalty { value, grads }))
    }
}

pub type RegularizerFactory = fn(&RegularizerSpec) -> Box<dyn Regularizer>;

/// Registered regularizers, by name.
pub const REGULARIZERS: &[(&str, RegularizerFactory)] = &[
    ("none", |_| Box::new(NoRegularizer)),
    ("gp", |s| {
        Box::new(GradientPenalty {
            lambda: s.gp_lambda,
            sites: s.gp_sites,
        })
    }),
    ("boundary", |_| Box::new(BoundaryConstraint)),
];

pub fn regularizer_names() -> Vec<&'static str> {
    REGULARIZERS.iter().map(|(n, _)| *n).collect()
}

pub fn build_regularizer(name: &str, spec: &RegularizerSpec) -> Result<Box<dyn Regularizer>> {
    REGULARIZERS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f(spec))
        .ok_or_else(|| {
            Error::config(
                "regularizer",
                format!("unknown regularizer `{name}`; expected one of {:?}", regularizer_names()),
            )
        })
}

//! Mini-batch training shared by every stack-plus-head model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::SiteTarget;
use crate::model::{from_sites, to_sites, SiteModel};
use crate::nn::{Mode, Schedule, SgdMomentum};
use crate::objective::{total_loss, LossBreakdown};
use crate::regularizer::Regularizer;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub ema_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 64,
            epochs: 20,
            schedule: Schedule::default(),
            ema_momentum: 0.999,
        }
    }
}

/// Label of one site before the regularizer decides how boundaries are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteLabel {
    pub class: Option<usize>,
    pub boundary: bool,
}

impl SiteLabel {
    pub fn class(c: usize) -> Self {
        SiteLabel {
            class: Some(c),
            boundary: false,
        }
    }

    pub const IGNORE: SiteLabel = SiteLabel {
        class: None,
        boundary: false,
    };

    pub const BOUNDARY: SiteLabel = SiteLabel {
        class: None,
        boundary: true,
    };

    fn target(self, use_boundary: bool) -> SiteTarget {
        match (self.boundary && use_boundary, self.class) {
            (true, _) => SiteTarget::Boundary,
            (false, Some(c)) => SiteTarget::Class(c),
            (false, None) => SiteTarget::Ignore,
        }
    }
}

/// Inputs `[M, ...]` with `M * sites_per_sample` site labels.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub inputs: Tensor,
    pub labels: Vec<SiteLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

fn gather(inputs: &Tensor, idx: &[usize]) -> Tensor {
    let per = inputs.sample_len();
    let mut shape = inputs.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(inputs.sample(i));
    }
    Tensor::new(shape, data).expect("gathered rows")
}

/// Trains `model` in place. Fails cleanly if any loss or gradient turns
/// non-finite, naming the epoch and batch.
pub fn train(
    model: &mut SiteModel,
    data: &TrainingSet,
    regularizer: &dyn Regularizer,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let m = data.inputs.batch();
    let spp = model.sites_per_sample();
    if data.labels.len() != m * spp {
        return Err(Error::Shape(format!(
            "{} site labels for {m} samples of {spp} sites",
            data.labels.len()
        )));
    }
    if regularizer.uses_boundary() && !model.head.supports_boundary() {
        return Err(Error::config(
            "regularizer",
            format!("`{}` needs a head that supports boundary targets", regularizer.name()),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    let mut opt = SgdMomentum::new(config.learning_rate, config.momentum, config.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let use_boundary = regularizer.uses_boundary();
    let targets: Vec<SiteTarget> = data.labels.iter().map(|l| l.target(use_boundary)).collect();
    let mut order: Vec<usize> = (0..m).collect();
    let mut log = TrainLog::default();
    model.stack.set_mode(Mode::Train);

    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let where_ = || format!("training at epoch {epoch} batch {b}");
            let x = gather(&data.inputs, idx);
            let batch_targets: Vec<SiteTarget> = idx
                .iter()
                .flat_map(|&i| targets[i * spp..(i + 1) * spp].iter().copied())
                .collect();
            let dropout_seed: u64 = rng.gen();
            let penalty_seed: u64 = rng.gen();

            let (out, cache) = model.stack.forward(&x, Some(dropout_seed))?;
            let sites = to_sites(&out);
            let head_loss = model.head.loss(&sites, &batch_targets)?;
            let (_, stack_grads) = model.stack.backward(&cache, &from_sites(&head_loss.feature_grad, out.shape()))?;
            let mut grads: Vec<Tensor> = stack_grads.into_iter().flatten().collect();
            grads.extend(head_loss.param_grads);

            let mut l_reg = 0.0;
            if let Some(p) = regularizer.penalty(model, &x, Some(dropout_seed), penalty_seed)? {
                l_reg = p.value;
                for (g, pg) in grads.iter_mut().zip(&p.grads) {
                    g.add_scaled(pg, 1.0);
                }
            }
            let loss = total_loss(head_loss.l_in, head_loss.l_bd, l_reg);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss during {}", where_())));
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut model.params_mut(), &grad_refs).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} during {}", where_())),
                other => other,
            })?;
            model.head.after_step(&sites, &batch_targets, config.ema_momentum)?;

            sum.l_in += loss.l_in;
            sum.l_bd += loss.l_bd;
            sum.l_reg += loss.l_reg;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: opt.learning_rate(),
            loss: total_loss(sum.l_in / k, sum.l_bd / k, sum.l_reg / k),
        });
    }
    model.stack.set_mode(Mode::Eval);
    Ok(log)
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step decay: the learning rate is divided by `decay_factor` every `epoch_period` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub decay_factor: f64,
    pub epoch_period: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            decay_factor: 10.0,
            epoch_period: 10,
        }
    }
}

/// SGD with classical momentum: `v = m*v - lr*g; p = p + v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    base_lr: f64,
    lr: f64,
    momentum: f64,
    schedule: Schedule,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, schedule: Schedule) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {learning_rate} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        if schedule.decay_factor <= 0.0 || schedule.epoch_period == 0 {
            return Err(Error::invalid("schedule needs a positive factor and period"));
        }
        Ok(SgdMomentum {
            base_lr: learning_rate,
            lr: learning_rate,
            momentum,
            schedule,
            velocity: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        let drops = (epoch / self.schedule.epoch_period) as i32;
        self.lr = self.base_lr / self.schedule.decay_factor.powi(drops);
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| p.zeros_like()).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.shape() != p.shape())
        {
            return Err(Error::Shape("parameter set changed between steps".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv - self.lr * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}

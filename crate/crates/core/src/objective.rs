//! Per-site binary cross-entropy over class scores, the all-zero-target
//! boundary loss, and the two-sided gradient penalty.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to every log argument.
pub const LOG_CLAMP: f64 = 1e-7;

/// Default gradient-penalty coefficient.
pub const DEFAULT_GP_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_in: f64,
    pub l_bd: f64,
    pub l_reg: f64,
    pub total: f64,
}

pub fn total_loss(l_in: f64, l_bd: f64, l_reg: f64) -> LossBreakdown {
    LossBreakdown {
        l_in,
        l_bd,
        l_reg,
        total: l_in + l_bd + l_reg,
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_in.is_finite() && self.l_bd.is_finite() && self.l_reg.is_finite() && self.total.is_finite()
    }
}

fn neg_log(x: f64) -> (f64, f64) {
    // value and derivative of -log(max(x, clamp))
    if x > LOG_CLAMP {
        (-x.ln(), -1.0 / x)
    } else {
        (-LOG_CLAMP.ln(), 0.0)
    }
}

/// Sum over classes of the BCE terms for one site, accumulating `d/dh` into `grad`.
fn site_bce(h: &[f64], target: Option<usize>, scale: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for (c, (&hc, g)) in h.iter().zip(grad.iter_mut()).enumerate() {
        if target == Some(c) {
            let (v, d) = neg_log(hc);
            loss += v;
            *g += scale * d;
        } else {
            let (v, d) = neg_log(1.0 - hc);
            loss += v;
            *g -= scale * d;
        }
    }
    loss
}

fn check_scores(h: &[f64], num_classes: usize) -> Result<usize> {
    if num_classes == 0 || h.len() % num_classes != 0 {
        return Err(Error::Shape(format!(
            "{} scores is not a multiple of {num_classes} classes",
            h.len()
        )));
    }
    Ok(h.len() / num_classes)
}

/// Mean over sites of `-sum_c [y_c log h_c + (1 - y_c) log(1 - h_c)]` with
/// one-hot `y` given by `labels`. Returns the loss and `d loss / d h`.
pub fn in_dist_loss(h: &[f64], labels: &[usize], num_classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = check_scores(h, num_classes)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} score rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let mut grad = vec![0.0; h.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for ((row, g), &label) in h.chunks_exact(num_classes).zip(grad.chunks_exact_mut(num_classes)).zip(labels) {
        total += site_bce(row, Some(label), scale, g);
    }
    Ok((total * scale, grad))
}

/// Mean over boundary sites of `-sum_c log(1 - h_c)`; zero for an empty set.
pub fn boundary_loss(h: &[f64], num_classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = check_scores(h, num_classes)?;
    let mut grad = vec![0.0; h.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for (row, g) in h.chunks_exact(num_classes).zip(grad.chunks_exact_mut(num_classes)) {
        total += site_bce(row, None, scale, g);
    }
    Ok((total * scale, grad))
}

/// A model whose summed class scores can be differentiated w.r.t. its inputs.
pub trait InputGradient {
    /// Per-sample gradients `d/dx_i sum_j sum_c h_c(x_j)`, shaped like `inputs`.
    fn input_grads(&self, inputs: &Tensor) -> Result<Tensor>;
}

/// `lambda * mean_i (|g_i|^2 - 1)^2` over per-sample input gradients `g_i`.
pub fn penalty_from_grads(grads: &Tensor, lambda: f64) -> f64 {
    let n = grads.batch();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = (0..n)
        .map(|i| {
            let nsq: f64 = grads.sample(i).iter().map(|v| v * v).sum();
            (nsq - 1.0).powi(2)
        })
        .sum();
    lambda * sum / n as f64
}

/// Two-sided gradient penalty with target norm one.
pub fn gradient_penalty(model: &impl InputGradient, inputs: &Tensor, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("penalty weight {lambda} must be >= 0")));
    }
    Ok(penalty_from_grads(&model.input_grads(inputs)?, lambda))
}

/// Direction whose directional derivative of the summed scores has the same
/// parameter gradient as the penalty: `V_i = 4 lambda / N (|g_i|^2 - 1) g_i`.
pub fn penalty_direction(grads: &Tensor, lambda: f64) -> Tensor {
    let n = grads.batch();
    let mut dir = grads.clone();
    if n == 0 {
        return dir;
    }
    let per = grads.sample_len();
    for i in 0..n {
        let s = &mut dir.data_mut()[i * per..(i + 1) * per];
        let nsq: f64 = s.iter().map(|v| v * v).sum();
        let a = 4.0 * lambda / n as f64 * (nsq - 1.0);
        s.iter_mut().for_each(|v| *v *= a);
    }
    dir
}

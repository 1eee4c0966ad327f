use crate::tensor::Tensor;

/// Maximum relative discrepancy between `analytic` and central differences of `f` at `point`.
///
/// Per component: `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn finite_diff_check<F>(mut f: F, point: &Tensor, analytic: &Tensor, epsilon: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    assert_eq!(point.shape(), analytic.shape(), "gradient shape must match the point");
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = f(&probe);
        probe.data_mut()[i] = orig - epsilon;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

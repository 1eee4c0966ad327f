//! Central-difference checks of every analytic gradient in the crate.
//! Each check returns the failure message instead of panicking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rbfood::heads::{build_head, HeadSpec, SiteTarget};
use rbfood::model::SiteModel;
use rbfood::nn::{finite_diff_check, Layer, LayerStack, Mode};
use rbfood::objective::{boundary_loss, in_dist_loss};
use rbfood::rbf::RbfHead;
use rbfood::regularizer::{GradientPenalty, Regularizer};
use rbfood::Tensor;

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

pub type Check = Result<(), String>;

fn within(name: &str, worst: f64) -> Check {
    if worst <= TOL {
        Ok(())
    } else {
        Err(format!("{name}: worst relative error {worst:e}"))
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Worst relative error over the input and every parameter of `stack` for
/// the scalar `sum(r * stack(x))`.
fn stack_error(stack: &LayerStack, x: &Tensor, mode: Mode, seed: Option<u64>, rng: &mut ChaCha8Rng) -> f64 {
    let (y, cache) = stack.forward_with(x, mode, seed).unwrap();
    let r = randn(y.shape(), rng);
    let loss = |s: &LayerStack, x: &Tensor| s.forward_with(x, mode, seed).unwrap().0.dot(&r);
    let (dx, grads) = stack.backward(&cache, &r).unwrap();
    let mut worst = finite_diff_check(|p| loss(stack, p), x, &dx, EPS);
    let flat: Vec<Tensor> = grads.into_iter().flatten().collect();
    for (k, g) in flat.iter().enumerate() {
        let point = stack.params()[k].clone();
        let mut probe = stack.clone();
        let err = finite_diff_check(
            |p| {
                *probe.params_mut()[k] = p.clone();
                loss(&probe, x)
            },
            &point,
            g,
            EPS,
        );
        worst = worst.max(err);
    }
    worst
}

/// Zero biases put ReLU inputs exactly on the kink, where central
/// differences disagree with any one-sided derivative.
fn randomize(stack: &mut LayerStack, rng: &mut ChaCha8Rng) {
    for p in stack.params_mut() {
        *p = randn(p.shape(), rng);
        p.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    }
}

/// Smallest |pre-activation| feeding any ReLU in the stack.
fn kink_margin(stack: &LayerStack, x: &Tensor, mode: Mode, seed: Option<u64>) -> f64 {
    let layers = stack.layers();
    let mut margin = f64::INFINITY;
    for (j, layer) in layers.iter().enumerate() {
        if matches!(layer, Layer::Relu) {
            let prefix = LayerStack::new(stack.input_shape().to_vec(), layers[..j].to_vec()).unwrap();
            let (pre, _) = prefix.forward_with(x, mode, seed).unwrap();
            margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    margin
}

/// Checks `INSTANCES` random instances, redrawing any that sit within
/// 1e-3 of a ReLU kink.
fn run<F: Fn(&mut ChaCha8Rng) -> (LayerStack, Tensor, Mode, Option<u64>)>(name: &str, make: F) -> Check {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6C4E);
    while checked < INSTANCES {
        let (stack, x, mode, seed) = make(&mut rng);
        if kink_margin(&stack, &x, mode, seed) < 1e-3 {
            continue;
        }
        worst = worst.max(stack_error(&stack, &x, mode, seed, &mut rng));
        checked += 1;
    }
    within(name, worst)
}

pub fn dense_layer() -> Check {
    run("dense", |rng| {
        let s = LayerStack::new(vec![4], vec![Layer::dense(4, 3, 1.0, false, rng)]).unwrap();
        (s, randn(&[3, 4], rng), Mode::Eval, None)
    })?;
    Ok(())
}

pub fn scaled_pointwise_dense_layer() -> Check {
    run("pointwise dense", |rng| {
        let s = LayerStack::new(
            vec![3, 2, 2],
            vec![Layer::dense(3, 2, 1.0, false, rng).with_output_scale(0.1)],
        )
        .unwrap();
        (s, randn(&[2, 3, 2, 2], rng), Mode::Eval, None)
    })?;
    Ok(())
}

pub fn conv_layer() -> Check {
    run("conv3x3", |rng| {
        let s = LayerStack::new(vec![2, 4, 3], vec![Layer::conv3x3(2, 3, false, rng)]).unwrap();
        (s, randn(&[2, 2, 4, 3], rng), Mode::Eval, None)
    })?;
    Ok(())
}

pub fn deconv_layer() -> Check {
    run("deconv2x", |rng| {
        let s = LayerStack::new(vec![2, 3, 2], vec![Layer::deconv2x(2, 3, false, rng)]).unwrap();
        (s, randn(&[2, 2, 3, 2], rng), Mode::Eval, None)
    })?;
    Ok(())
}

pub fn relu_layer() -> Check {
    run("relu", |rng| {
        let s = LayerStack::new(vec![5], vec![Layer::Relu]).unwrap();
        (s, randn(&[3, 5], rng), Mode::Eval, None)
    })?;
    Ok(())
}

pub fn batchnorm_training_and_eval() -> Check {
    run("batchnorm train", |rng| {
        let mut s = LayerStack::new(vec![3, 2, 2], vec![Layer::batchnorm(3)]).unwrap();
        for p in s.params_mut() {
            *p = randn(p.shape(), rng);
        }
        (s, randn(&[3, 3, 2, 2], rng), Mode::Train, None)
    })?;
    run("batchnorm eval", |rng| {
        let s = LayerStack::new(vec![4], vec![Layer::batchnorm(4)]).unwrap();
        (s, randn(&[3, 4], rng), Mode::Eval, None)
    })?;
    Ok(())
}

pub fn dropout_layer() -> Check {
    run("dropout", |rng| {
        let s = LayerStack::new(vec![6], vec![Layer::dropout(0.5)]).unwrap();
        let seed = rng.gen();
        (s, randn(&[2, 6], rng), Mode::Train, Some(seed))
    })?;
    Ok(())
}

pub fn spectral_layers() -> Check {
    run("spectral dense", |rng| {
        let s = LayerStack::new(vec![4], vec![Layer::dense(4, 3, 1.0, true, rng)]).unwrap();
        (s, randn(&[2, 4], rng), Mode::Eval, None)
    })?;
    run("spectral conv", |rng| {
        let s = LayerStack::new(vec![2, 3, 3], vec![Layer::conv3x3(2, 2, true, rng)]).unwrap();
        (s, randn(&[1, 2, 3, 3], rng), Mode::Eval, None)
    })?;
    Ok(())
}

pub fn three_layer_stack() -> Check {
    run("stack", |rng| {
        let mut s = LayerStack::new(
            vec![2, 3, 3],
            vec![
                Layer::conv3x3(2, 3, false, rng),
                Layer::Relu,
                Layer::deconv2x(3, 2, false, rng),
                Layer::Relu,
                Layer::dense(2, 2, 1.0, false, rng),
            ],
        )
        .unwrap();
        randomize(&mut s, rng);
        (s, randn(&[2, 2, 3, 3], rng), Mode::Eval, None)
    })?;
    Ok(())
}

fn random_head(rng: &mut ChaCha8Rng) -> (RbfHead, Vec<f64>) {
    let (c, k, d) = (3, 2, 4);
    let mut head = RbfHead::new(c, k, d, 1.0, rng.gen()).unwrap();
    head.centers = randn(&[c, k, d], rng);
    head.weight_logits = randn(&[c, k], rng);
    let feature: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.7 * z
        })
        .collect();
    (head, feature)
}

pub fn rbf_head_gradients() -> Check {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let (head, feature) = random_head(&mut rng);
        let up: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = head.scores_grad(&feature, &up).unwrap();
        let dot = |h: &RbfHead, f: &[f64]| -> f64 { h.scores(f).unwrap().h.iter().zip(&up).map(|(a, b)| a * b).sum() };
        let f = Tensor::from_vec(feature.clone());
        worst = worst.max(finite_diff_check(
            |p| dot(&head, p.data()),
            &f,
            &Tensor::from_vec(g.feature.clone()),
            EPS,
        ));
        let mut probe = head.clone();
        worst = worst.max(finite_diff_check(
            |p| {
                probe.centers = p.clone();
                dot(&probe, &feature)
            },
            &head.centers,
            &g.centers,
            EPS,
        ));
        let mut probe = head.clone();
        worst = worst.max(finite_diff_check(
            |p| {
                probe.weight_logits = p.clone();
                dot(&probe, &feature)
            },
            &head.weight_logits,
            &g.weight_logits,
            EPS,
        ));
    }
    within("rbf head", worst)
}

pub fn loss_gradients() -> Check {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let (n, c) = (4, 3);
        let h = Tensor::new(vec![n * c], (0..n * c).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let (_, g) = in_dist_loss(h.data(), &labels, c).unwrap();
        let err = finite_diff_check(
            |p| in_dist_loss(p.data(), &labels, c).unwrap().0,
            &h,
            &Tensor::from_vec(g),
            EPS,
        );
        worst = worst.max(err);
        let (_, g) = boundary_loss(h.data(), c).unwrap();
        let err = finite_diff_check(|p| boundary_loss(p.data(), c).unwrap().0, &h, &Tensor::from_vec(g), EPS);
        worst = worst.max(err);
    }
    within("losses", worst)
}

pub fn head_losses_through_features() -> Check {
    for name in ["rbf", "entropy"] {
        let mut worst = 0.0f64;
        for i in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let spec = HeadSpec {
                num_classes: 3,
                feature_dim: 4,
                centers_per_class: 2,
                sigma: 1.0,
                mc_passes: 1,
            };
            let head = build_head(name, &spec, rng.gen()).unwrap();
            let sites = randn(&[5, 4], &mut rng);
            let mut targets: Vec<SiteTarget> = (0..4).map(|_| SiteTarget::Class(rng.gen_range(0..3))).collect();
            targets.push(if head.supports_boundary() {
                SiteTarget::Boundary
            } else {
                SiteTarget::Ignore
            });
            let total = |s: &Tensor| {
                let l = head.loss(s.data(), &targets).unwrap();
                l.l_in + l.l_bd
            };
            let analytic = Tensor::new(vec![5, 4], head.loss(sites.data(), &targets).unwrap().feature_grad).unwrap();
            worst = worst.max(finite_diff_check(total, &sites, &analytic, EPS));
        }
        within(&format!("{name} head loss"), worst)?;
    }
    Ok(())
}

fn penalty_model(batchnorm: bool, rng: &mut ChaCha8Rng) -> SiteModel {
    let mut layers = vec![Layer::dense(2, 5, 1.0, false, rng)];
    if batchnorm {
        layers.push(Layer::batchnorm(5));
    }
    layers.extend([Layer::Relu, Layer::dense(5, 3, 1.0, false, rng)]);
    let mut stack = LayerStack::new(vec![2], layers).unwrap();
    randomize(&mut stack, rng);
    let spec = HeadSpec {
        num_classes: 2,
        feature_dim: 3,
        centers_per_class: 2,
        sigma: 1.0,
        mc_passes: 1,
    };
    let mut head = build_head("rbf", &spec, rng.gen()).unwrap();
    for p in head.params_mut() {
        *p = randn(p.shape(), rng);
    }
    SiteModel::new(stack, head).unwrap()
}

pub fn gradient_penalty_parameter_gradients() -> Check {
    let gp = GradientPenalty { lambda: 0.5, sites: 1 };
    for batchnorm in [false, true] {
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6A);
        while checked < INSTANCES {
            let model = penalty_model(batchnorm, &mut rng);
            let x = randn(&[8, 2], &mut rng);
            // The probe moves inputs along the penalty direction, which batch
            // norm can amplify, so keep a wider margin from ReLU kinks.
            if kink_margin(&model.stack, &x, Mode::Train, None) < 1e-2 {
                continue;
            }
            let p = gp.penalty(&model, &x, None, 0).unwrap().unwrap();
            // The penalty gradient is itself a central difference of score
            // gradients, so components below 1e-5 are compared absolutely.
            for k in 0..model.params().len() {
                for j in 0..model.params()[k].len() {
                    let at = |delta: f64| {
                        let mut m = model.clone();
                        m.params_mut()[k].data_mut()[j] += delta;
                        gp.penalty(&m, &x, None, 0).unwrap().unwrap().value
                    };
                    let numeric = (at(EPS) - at(-EPS)) / (2.0 * EPS);
                    let analytic = p.grads[k].data()[j];
                    let denom = analytic.abs().max(numeric.abs()).max(1e-5);
                    worst = worst.max((analytic - numeric).abs() / denom);
                }
            }
            checked += 1;
        }
        within(&format!("gradient penalty (batchnorm {batchnorm})"), worst)?;
    }
    Ok(())
}

#[allow(dead_code)]
pub const CHECKS: &[(&str, fn() -> Check)] = &[
    ("dense_layer", dense_layer),
    ("scaled_pointwise_dense_layer", scaled_pointwise_dense_layer),
    ("conv_layer", conv_layer),
    ("deconv_layer", deconv_layer),
    ("relu_layer", relu_layer),
    ("batchnorm_training_and_eval", batchnorm_training_and_eval),
    ("dropout_layer", dropout_layer),
    ("spectral_layers", spectral_layers),
    ("three_layer_stack", three_layer_stack),
    ("rbf_head_gradients", rbf_head_gradients),
    ("loss_gradients", loss_gradients),
    ("head_losses_through_features", head_losses_through_features),
    (
        "gradient_penalty_parameter_gradients",
        gradient_penalty_parameter_gradients,
    ),
];

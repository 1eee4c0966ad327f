//! Two-blob 2-D benchmark for feature collapse: Gaussian in-distribution
//! blobs, uniform outliers, and six regularization variants of a small
//! RBF network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::heads::{build_head, HeadSpec};
use crate::metrics::{accuracy, auroc, fpr95, ScoredSample};
use crate::model::SiteModel;
use crate::nn::{Layer, LayerStack};
use crate::regularizer::{build_regularizer, RegularizerSpec};
use crate::tensor::Tensor;
use crate::train::{train, SiteLabel, TrainConfig, TrainLog, TrainingSet};
use crate::umap::UncertaintyMap;

pub type Point = [f64; 2];

pub const BACKGROUND: usize = 0;
pub const OBJECT: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    /// Blob means, background first.
    pub means: [Point; 2],
    pub covariances: [[[f64; 2]; 2]; 2],
    /// Outliers are uniform in `[lo, hi]^2`.
    pub ood_box: (f64, f64),
    pub per_class: usize,
    pub ood_count: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        let cov = [[0.3, 0.0], [0.0, 0.3]];
        ToyParams {
            means: [[-2.0, 0.0], [2.0, 0.0]],
            covariances: [cov, cov],
            ood_box: (-6.0, 6.0),
            per_class: 500,
            ood_count: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub params: ToyParams,
    pub in_points: Vec<Point>,
    pub in_labels: Vec<usize>,
    pub ood_points: Vec<Point>,
}

/// What a toy model is allowed to see during training.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTrainingData {
    pub points: Vec<Point>,
    pub labels: Vec<usize>,
    pub boundary_points: Vec<Point>,
}

impl ToyDataset {
    pub fn training_data(&self, boundary_points: Vec<Point>) -> ToyTrainingData {
        ToyTrainingData {
            points: self.in_points.clone(),
            labels: self.in_labels.clone(),
            boundary_points,
        }
    }
}

fn cholesky(c: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let symmetric = (c[0][1] - c[1][0]).abs() <= 1e-12 * (c[0][1].abs() + 1.0);
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    if !symmetric || !(c[0][0] > 0.0) || !(det > 0.0) {
        return Err(Error::invalid(format!("covariance {c:?} is not positive definite")));
    }
    let l00 = c[0][0].sqrt();
    let l10 = c[1][0] / l00;
    let l11 = (c[1][1] - l10 * l10).sqrt();
    Ok([[l00, 0.0], [l10, l11]])
}

pub fn generate_toy_data(params: &ToyParams, seed: u64) -> Result<ToyDataset> {
    let chol = [cholesky(&params.covariances[0])?, cholesky(&params.covariances[1])?];
    let (lo, hi) = params.ood_box;
    if !(lo < hi) {
        return Err(Error::invalid(format!("empty outlier box [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_points = Vec::with_capacity(2 * params.per_class);
    let mut in_labels = Vec::with_capacity(2 * params.per_class);
    for class in [BACKGROUND, OBJECT] {
        let (m, l) = (params.means[class], chol[class]);
        for _ in 0..params.per_class {
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            in_points.push([m[0] + l[0][0] * z0, m[1] + l[1][0] * z0 + l[1][1] * z1]);
            in_labels.push(class);
        }
    }
    let ood_points = (0..params.ood_count)
        .map(|_| [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)])
        .collect();
    Ok(ToyDataset {
        params: params.clone(),
        in_points,
        in_labels,
        ood_points,
    })
}

/// Midpoints of random cross-class pairs plus isotropic Gaussian jitter.
pub fn sample_boundary_points(dataset: &ToyDataset, count: usize, jitter: f64, seed: u64) -> Result<Vec<Point>> {
    let by_class = |c: usize| -> Vec<Point> {
        dataset
            .in_points
            .iter()
            .zip(&dataset.in_labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| *p)
            .collect()
    };
    let (bg, obj) = (by_class(BACKGROUND), by_class(OBJECT));
    if bg.is_empty() || obj.is_empty() {
        return Err(Error::invalid("boundary points need both classes"));
    }
    if !(jitter >= 0.0) {
        return Err(Error::invalid(format!("jitter {jitter} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let a = bg.choose(&mut rng).expect("non-empty");
            let b = obj.choose(&mut rng).expect("non-empty");
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            [(a[0] + b[0]) / 2.0 + jitter * z0, (a[1] + b[1]) / 2.0 + jitter * z1]
        })
        .collect())
}

/// A named combination of normalization layers and training regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyVariant {
    pub name: &'static str,
    pub batchnorm: bool,
    pub spectral: bool,
    pub regularizer: &'static str,
}

pub const TOY_VARIANTS: &[ToyVariant] = &[
    ToyVariant { name: "plain", batchnorm: false, spectral: false, regularizer: "none" },
    ToyVariant { name: "bn", batchnorm: true, spectral: false, regularizer: "none" },
    ToyVariant { name: "gp", batchnorm: false, spectral: false, regularizer: "gp" },
    ToyVariant { name: "bn+gp", batchnorm: true, spectral: false, regularizer: "gp" },
    ToyVariant { name: "spectral", batchnorm: false, spectral: true, regularizer: "none" },
    ToyVariant { name: "boundary", batchnorm: false, spectral: false, regularizer: "boundary" },
];

pub fn toy_variant(name: &str) -> Result<ToyVariant> {
    TOY_VARIANTS.iter().copied().find(|v| v.name == name).ok_or_else(|| {
        let names: Vec<_> = TOY_VARIANTS.iter().map(|v| v.name).collect();
        Error::config("toy.variant", format!("unknown variant `{name}`; expected one of {names:?}"))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub centers_per_class: usize,
    pub sigma: f64,
    /// Fixed output scale of the final projection.
    pub projection_scale: f64,
    pub boundary_count: usize,
    pub boundary_jitter: f64,
    pub gp_lambda: f64,
    pub train: TrainConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            hidden: 64,
            feature_dim: 16,
            centers_per_class: 8,
            sigma: 0.1,
            projection_scale: 0.02,
            boundary_count: 500,
            boundary_jitter: 0.3,
            gp_lambda: 0.5,
            train: TrainConfig {
                learning_rate: 0.01,
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub variant: ToyVariant,
    pub model: SiteModel,
}

pub fn build_toy_model(variant: ToyVariant, config: &ToyConfig, seed: u64) -> Result<ToyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let mut layers = Vec::new();
    for (i, o) in [(2, h), (h, h)] {
        layers.push(Layer::dense(i, o, 1.0, variant.spectral, &mut rng));
        if variant.batchnorm {
            layers.push(Layer::batchnorm(o));
        }
        layers.push(Layer::Relu);
    }
    layers.push(Layer::dense(h, config.feature_dim, 1.0, false, &mut rng).with_output_scale(config.projection_scale));
    let stack = LayerStack::new(vec![2], layers)?;
    let spec = HeadSpec {
        num_classes: 2,
        feature_dim: config.feature_dim,
        centers_per_class: config.centers_per_class,
        sigma: config.sigma,
        mc_passes: 1,
    };
    let head = build_head("rbf", &spec, rng.gen())?;
    Ok(ToyModel {
        variant,
        model: SiteModel::new(stack, head)?,
    })
}

fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::new(vec![points.len(), 2], points.iter().flatten().copied().collect()).expect("n x 2")
}

/// Builds and trains one variant. Boundary points are used only by variants
/// whose regularizer consumes them.
pub fn train_toy_variant(
    data: &ToyTrainingData,
    variant: ToyVariant,
    config: &ToyConfig,
    seed: u64,
) -> Result<(ToyModel, TrainLog)> {
    if data.points.len() != data.labels.len() {
        return Err(Error::Shape(format!("{} points, {} labels", data.points.len(), data.labels.len())));
    }
    let regularizer = build_regularizer(
        variant.regularizer,
        &RegularizerSpec {
            gp_lambda: config.gp_lambda,
            gp_sites: 1,
        },
    )?;
    let mut points = data.points.clone();
    let mut labels: Vec<SiteLabel> = data.labels.iter().map(|&c| SiteLabel::class(c)).collect();
    if regularizer.uses_boundary() {
        points.extend(&data.boundary_points);
        labels.extend(std::iter::repeat(SiteLabel::BOUNDARY).take(data.boundary_points.len()));
    }
    let mut toy = build_toy_model(variant, config, seed)?;
    let set = TrainingSet {
        inputs: points_tensor(&points),
        labels,
    };
    let log = train(&mut toy.model, &set, regularizer.as_ref(), &config.train, seed ^ 0x5EED)?;
    Ok((toy, log))
}

impl ToyModel {
    pub fn uncertainty(&self, points: &[Point]) -> Result<Vec<f64>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.model.infer(&points_tensor(points), 0)?.uncertainty)
    }

    pub fn predict(&self, points: &[Point]) -> Result<Vec<usize>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.model.infer(&points_tensor(points), 0)?;
        Ok(out.scores.chunks_exact(2).map(|s| crate::rbf::argmax(s).0).collect())
    }
}

/// Uncertainty at every node of a regular grid. Row `j` holds
/// `y = y0 + j (y1 - y0) / (ny - 1)`, columns run over `x` likewise.
pub fn uncertainty_grid(
    model: &ToyModel,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: (usize, usize),
) -> Result<UncertaintyMap> {
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::invalid(format!("grid resolution {nx}x{ny} needs at least 2 per axis")));
    }
    let at = |(a, b): (f64, f64), i: usize, n: usize| a + (b - a) * i as f64 / (n - 1) as f64;
    let nodes: Vec<Point> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| [at(x_range, i, nx), at(y_range, j, ny)])
        .collect();
    UncertaintyMap::new(nx, ny, model.uncertainty(&nodes)?)
}

/// `true` (in-distribution) iff `tau < theta`.
pub fn classify_by_threshold(taus: &[f64], theta: f64) -> Vec<bool> {
    taus.iter().map(|&t| t < theta).collect()
}

/// Uncertainty threshold separating "in" from "out" in toy summaries.
pub const TOY_THETA: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyReport {
    pub variant: &'static str,
    pub train_accuracy: f64,
    /// OOD points (positives) against held-out in-blob points.
    pub auroc: f64,
    pub fpr95: f64,
    /// Fraction of OOD points with `tau < TOY_THETA`.
    pub ood_below: f64,
    /// Per-point `(tau, is_ood)` over held-out in-blob and OOD points.
    pub samples: Vec<ScoredSample>,
}

/// Generates data for `seed`, trains `variant` and scores it against OOD
/// points and a held-out in-blob sample.
pub fn run_toy_experiment(params: &ToyParams, variant: ToyVariant, config: &ToyConfig, seed: u64) -> Result<(ToyModel, ToyReport)> {
    let data = generate_toy_data(params, seed)?;
    let held_out = generate_toy_data(
        &ToyParams {
            ood_count: 0,
            ..params.clone()
        },
        seed ^ 0x4E1D,
    )?;
    let boundary = sample_boundary_points(&data, config.boundary_count, config.boundary_jitter, seed)?;
    let (model, _) = train_toy_variant(&data.training_data(boundary), variant, config, seed)?;
    let pred = model.predict(&data.in_points)?;
    let train_accuracy = if pred.is_empty() { 0.0 } else { accuracy(&pred, &data.in_labels)? };
    let ood = model.uncertainty(&data.ood_points)?;
    let inside = model.uncertainty(&held_out.in_points)?;
    let ood_below = if ood.is_empty() {
        0.0
    } else {
        classify_by_threshold(&ood, TOY_THETA).iter().filter(|&&b| b).count() as f64 / ood.len() as f64
    };
    let samples: Vec<ScoredSample> = inside
        .iter()
        .map(|&t| ScoredSample::new(t, false))
        .chain(ood.iter().map(|&t| ScoredSample::new(t, true)))
        .collect();
    let report = ToyReport {
        variant: variant.name,
        train_accuracy,
        auroc: auroc(&samples)?,
        fpr95: fpr95(&samples)?,
        ood_below,
        samples,
    };
    Ok((model, report))
}

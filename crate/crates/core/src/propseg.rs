//! Per-pixel proposal segmentation with uncertainty: a small conv stack on
//! the 14x14 proposal features, a 2x transposed-conv resize to 28x28, and a
//! per-pixel uncertainty head.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{build_head, HeadSpec};
use crate::metrics::ScoredSample;
use crate::model::SiteModel;
use crate::nn::{Layer, LayerKind, LayerStack, Record};
use crate::regularizer::{build_regularizer, RegularizerSpec};
use crate::synthbench::{
    feature_recipe, is_background, is_unknown, PixelLabel, Proposal, Split, SynthDataset, BACKGROUND_CLASSES,
    FEATURE_SIZE, KNOWN_CLASSES, LABEL_SIZE,
};
use crate::tensor::Tensor;
use crate::train::{train, SiteLabel, TrainConfig, TrainLog, TrainingSet};

/// Which classes the head is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassPolicy {
    /// Background and known object classes.
    All,
    /// Background classes only; object pixels are ignored.
    BackgroundOnly,
}

impl ClassPolicy {
    pub fn name(self) -> &'static str {
        match self {
            ClassPolicy::All => "all",
            ClassPolicy::BackgroundOnly => "bg-only",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "all" => Ok(ClassPolicy::All),
            "bg-only" => Ok(ClassPolicy::BackgroundOnly),
            other => Err(Error::config("propseg.classes", format!("unknown policy `{other}`; expected all or bg-only"))),
        }
    }

    pub fn classes(self) -> Vec<u8> {
        match self {
            ClassPolicy::All => KNOWN_CLASSES.to_vec(),
            ClassPolicy::BackgroundOnly => BACKGROUND_CLASSES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropSegConfig {
    pub head: String,
    pub regularizer: String,
    pub recipe: String,
    pub policy: ClassPolicy,
    /// Drop the conv layers and feed the resized input straight to the projection.
    pub no_conv: bool,
    pub conv_layers: usize,
    pub conv_width: usize,
    pub feature_dim: usize,
    pub centers_per_class: usize,
    pub sigma: f64,
    pub projection_scale: f64,
    pub dropout_rate: f64,
    pub mc_passes: usize,
    pub theta_bg: f64,
    pub gp_lambda: f64,
    pub gp_sites: usize,
    pub train: TrainConfig,
}

impl Default for PropSegConfig {
    fn default() -> Self {
        PropSegConfig {
            head: "rbf".into(),
            regularizer: "boundary".into(),
            recipe: "context".into(),
            policy: ClassPolicy::All,
            no_conv: false,
            conv_layers: 4,
            conv_width: 64,
            feature_dim: 32,
            centers_per_class: 16,
            sigma: 0.1,
            projection_scale: 0.02,
            dropout_rate: 0.5,
            mc_passes: 10,
            theta_bg: 0.5,
            gp_lambda: 0.5,
            gp_sites: 1,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PropSegModel {
    pub recipe: String,
    /// Class id of each head output.
    pub classes: Vec<u8>,
    pub theta_bg: f64,
    pub model: SiteModel,
}

/// Per-pixel output for one proposal; all maps are 28x28 row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    pub class_map: Vec<u8>,
    pub u_seg: Vec<f64>,
    /// `784 x C` scores, columns ordered as `classes`.
    pub h_maps: Vec<f64>,
    pub classes: Vec<u8>,
    /// `784 x D` features entering the head.
    pub features: Vec<f64>,
}

pub fn build_propseg_model(config: &PropSegConfig, seed: u64) -> Result<PropSegModel> {
    let recipe = feature_recipe(&config.recipe)?;
    let classes = config.policy.classes();
    let spec = HeadSpec {
        num_classes: classes.len(),
        feature_dim: config.feature_dim,
        centers_per_class: config.centers_per_class,
        sigma: config.sigma,
        mc_passes: config.mc_passes,
    };
    if !(config.sigma > 0.0) {
        return Err(Error::config("head.sigma", "must be positive"));
    }
    if config.feature_dim == 0 || config.centers_per_class == 0 {
        return Err(Error::config("head.feature_dim", "dimensions must be positive"));
    }
    if !(config.theta_bg > 0.0 && config.theta_bg < 1.0) {
        return Err(Error::config("propseg.theta_bg", "must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = build_head(&config.head, &spec, rng.gen())?;
    let regularizer = build_regularizer(&config.regularizer, &RegularizerSpec::default())?;
    if regularizer.uses_boundary() && !head.supports_boundary() {
        return Err(Error::config(
            "propseg.regularizer",
            format!("`{}` cannot be combined with the `{}` head", config.regularizer, config.head),
        ));
    }
    let dropout = head.wants_dropout();
    if dropout && !(config.dropout_rate > 0.0 && config.dropout_rate < 1.0) {
        return Err(Error::config("propseg.dropout_rate", "must lie in (0, 1)"));
    }
    let f = recipe.channels();
    let mut layers = Vec::new();
    let mut width = f;
    if !config.no_conv {
        if config.conv_layers == 0 || config.conv_width == 0 {
            return Err(Error::config("propseg.conv_layers", "conv stack needs at least one layer of positive width"));
        }
        for _ in 0..config.conv_layers {
            layers.push(Layer::conv3x3(width, config.conv_width, false, &mut rng));
            layers.push(Layer::Relu);
            if dropout {
                layers.push(Layer::dropout(config.dropout_rate));
            }
            width = config.conv_width;
        }
    }
    layers.push(Layer::deconv2x(width, width, false, &mut rng));
    layers.push(Layer::Relu);
    layers.push(Layer::dense(width, config.feature_dim, 1.0, false, &mut rng).with_output_scale(config.projection_scale));
    let stack = LayerStack::new(vec![f, FEATURE_SIZE, FEATURE_SIZE], layers)?;
    Ok(PropSegModel {
        recipe: config.recipe.clone(),
        classes,
        theta_bg: config.theta_bg,
        model: SiteModel::new(stack, head)?,
    })
}

fn stack_inputs(proposals: &[&Proposal]) -> Result<Tensor> {
    let first = proposals.first().ok_or_else(|| Error::invalid("no proposals"))?;
    let mut shape = vec![proposals.len()];
    shape.extend_from_slice(first.features.shape());
    let mut data = Vec::with_capacity(proposals.len() * first.features.len());
    for p in proposals {
        if p.features.shape() != first.features.shape() {
            return Err(Error::Shape(format!(
                "proposal features {:?} differ from {:?}",
                p.features.shape(),
                first.features.shape()
            )));
        }
        data.extend_from_slice(p.features.data());
    }
    Tensor::new(shape, data)
}

impl PropSegModel {
    pub fn conv_layers(&self) -> usize {
        self.model.stack.count(LayerKind::Conv3x3)
    }

    pub fn head_index(&self, class: u8) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Segments a batch; `seed` drives Monte-Carlo dropout heads only.
    pub fn segment_batch(&self, proposals: &[&Proposal], seed: u64) -> Result<Vec<SegOutput>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let expected = &self.model.stack.input_shape()[..];
        if proposals[0].features.shape() != expected {
            return Err(Error::Shape(format!(
                "proposal features {:?}, model expects {expected:?}",
                proposals[0].features.shape()
            )));
        }
        let out = self.model.infer(&stack_inputs(proposals)?, seed)?;
        let sites = LABEL_SIZE * LABEL_SIZE;
        let (c, d) = (self.classes.len(), self.model.head.feature_dim());
        Ok((0..proposals.len())
            .map(|i| {
                let h_maps = out.scores[i * sites * c..(i + 1) * sites * c].to_vec();
                let class_map = h_maps
                    .chunks_exact(c)
                    .map(|row| self.classes[crate::rbf::argmax(row).0])
                    .collect();
                SegOutput {
                    class_map,
                    u_seg: out.uncertainty[i * sites..(i + 1) * sites].to_vec(),
                    h_maps,
                    classes: self.classes.clone(),
                    features: out.features[i * sites * d..(i + 1) * sites * d].to_vec(),
                }
            })
            .collect())
    }

    pub fn segment(&self, proposal: &Proposal, seed: u64) -> Result<SegOutput> {
        Ok(self.segment_batch(&[proposal], seed)?.remove(0))
    }

    pub fn to_records(&self) -> Vec<Record> {
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        let mut r = vec![Record::new(
            format!(
                "propseg recipe={} classes={} theta_bg={:e}",
                self.recipe,
                classes.join(","),
                self.theta_bg
            ),
            Vec::new(),
        )];
        r.extend(self.model.to_records());
        r
    }

    pub fn from_records(records: &mut VecDeque<Record>) -> Result<Self> {
        let head = records.pop_front().ok_or_else(|| Error::Format("missing propseg record".into()))?;
        if head.kind() != "propseg" {
            return Err(Error::Format(format!("expected propseg record, found `{}`", head.kind())));
        }
        let classes = head
            .field::<String>("classes")?
            .split(',')
            .map(|c| c.parse::<u8>().map_err(|_| Error::Format(format!("bad class id `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        let model = SiteModel::from_records(records)?;
        if model.num_classes() != classes.len() {
            return Err(Error::Format("class list does not match the head".into()));
        }
        Ok(PropSegModel {
            recipe: head.field("recipe")?,
            classes,
            theta_bg: head.field("theta_bg")?,
            model,
        })
    }
}

/// Object mask: a pixel is background iff its best background-class score
/// exceeds `1 - theta_bg`.
pub fn binary_object_mask(seg: &SegOutput, theta_bg: f64) -> Vec<bool> {
    let c = seg.classes.len();
    let bg: Vec<usize> = (0..c).filter(|&i| is_background(seg.classes[i])).collect();
    seg.h_maps
        .chunks_exact(c)
        .map(|row| {
            let best = bg.iter().map(|&i| row[i]).fold(0.0, f64::max);
            best <= 1.0 - theta_bg
        })
        .collect()
}

/// Site labels of one proposal under the model's class list.
pub fn site_labels(proposal: &Proposal, classes: &[u8]) -> Result<Vec<SiteLabel>> {
    let index = |c: u8| classes.iter().position(|&k| k == c);
    (0..LABEL_SIZE * LABEL_SIZE)
        .map(|i| {
            Ok(match proposal.label(i) {
                PixelLabel::Class(c) | PixelLabel::Boundary(c) if is_unknown(c) => {
                    return Err(Error::invalid("training proposal contains unknown-class pixels"));
                }
                PixelLabel::Class(c) => index(c).map_or(SiteLabel::IGNORE, SiteLabel::class),
                PixelLabel::Boundary(c) => SiteLabel {
                    class: index(c),
                    boundary: true,
                },
                PixelLabel::Ignore => SiteLabel::IGNORE,
            })
        })
        .collect()
}

/// Trains on the given dataset proposals (normally the training split).
pub fn train_propseg(
    model: &mut PropSegModel,
    data: &SynthDataset,
    indices: &[usize],
    config: &PropSegConfig,
    seed: u64,
) -> Result<TrainLog> {
    let recipe = feature_recipe(&model.recipe)?;
    let proposals: Vec<Proposal> = indices.iter().map(|&i| data.render(i, recipe.as_ref())).collect::<Result<_>>()?;
    let refs: Vec<&Proposal> = proposals.iter().collect();
    let mut labels = Vec::with_capacity(proposals.len() * LABEL_SIZE * LABEL_SIZE);
    for p in &proposals {
        labels.extend(site_labels(p, &model.classes)?);
    }
    if proposals.is_empty() {
        return Ok(TrainLog::default());
    }
    let regularizer = build_regularizer(
        &config.regularizer,
        &RegularizerSpec {
            gp_lambda: config.gp_lambda,
            gp_sites: config.gp_sites,
        },
    )?;
    let set = TrainingSet {
        inputs: stack_inputs(&refs)?,
        labels,
    };
    train(&mut model.model, &set, regularizer.as_ref(), &config.train, seed)
}

/// Test proposals that contain an object, known or unknown, in dataset order.
pub fn evaluation_indices(data: &SynthDataset) -> Vec<usize> {
    let mut out = data.indices(Split::TestKnown);
    out.extend(data.indices(Split::TestOod));
    out.sort_unstable();
    out
}

/// Pixel-level OOD samples over the given proposals: unknown-object pixels
/// are positives, every other labelled pixel a negative. Boundary-band and
/// ignored pixels are left out.
pub fn pixel_ood_samples(seg: &[SegOutput], proposals: &[&Proposal]) -> Vec<ScoredSample> {
    let mut out = Vec::new();
    for (s, p) in seg.iter().zip(proposals) {
        for i in 0..LABEL_SIZE * LABEL_SIZE {
            if let PixelLabel::Class(c) = p.label(i) {
                out.push(ScoredSample::new(s.u_seg[i], is_unknown(c)));
            }
        }
    }
    out
}

//! Proposal classification: pool features over the predicted object mask,
//! score the pooled vector with a small MLP and an uncertainty head, and
//! report the proposal-level uncertainty `u_cls` over object classes.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{build_head, HeadSpec};
use crate::model::SiteModel;
use crate::nn::{Layer, LayerStack, Record};
use crate::propseg::{binary_object_mask, PropSegModel, SegOutput};
use crate::rbf::argmax;
use crate::regularizer::NoRegularizer;
use crate::synthbench::{
    class_id, feature_recipe, Proposal, SynthDataset, CLASS_NAMES, FEATURE_SIZE, KNOWN_OBJECTS, LABEL_SIZE,
};
use crate::tensor::Tensor;
use crate::train::{train, SiteLabel, TrainConfig, TrainLog, TrainingSet};

/// Head label of the background class.
pub const BACKGROUND_LABEL: u8 = u8::MAX;

/// Which features are pooled under the object mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolSource {
    /// The segmentation stack's 28x28 activations entering its head.
    Stack,
    /// The raw 14x14 proposal features.
    Input,
}

impl PoolSource {
    pub fn name(self) -> &'static str {
        match self {
            PoolSource::Stack => "stack",
            PoolSource::Input => "input",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "stack" => Ok(PoolSource::Stack),
            "input" => Ok(PoolSource::Input),
            other => Err(Error::config("propcls.pool", format!("unknown source `{other}`; expected stack or input"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropClsConfig {
    pub head: String,
    pub pool: PoolSource,
    pub hidden: usize,
    pub feature_dim: usize,
    pub centers_per_class: usize,
    pub sigma: f64,
    pub projection_scale: f64,
    /// Label merges applied before training, as `(from, into)` class ids.
    pub merge: Vec<(u8, u8)>,
    pub train: TrainConfig,
}

impl Default for PropClsConfig {
    fn default() -> Self {
        PropClsConfig {
            head: "rbf".into(),
            pool: PoolSource::Stack,
            hidden: 64,
            feature_dim: 16,
            centers_per_class: 1,
            sigma: 0.1,
            projection_scale: 0.02,
            merge: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses a merge list such as `circle:square,star:cross`.
pub fn parse_merge_map(text: &str) -> Result<Vec<(u8, u8)>> {
    let lookup = |name: &str| {
        class_id(name.trim()).ok_or_else(|| {
            Error::config(
                "propcls.merge",
                format!("unknown class `{}`; expected one of {}", name.trim(), CLASS_NAMES.join(", ")),
            )
        })
    };
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (from, into) = pair
                .split_once(':')
                .ok_or_else(|| Error::config("propcls.merge", format!("`{pair}` is not of the form from:into")))?;
            Ok((lookup(from)?, lookup(into)?))
        })
        .collect()
}

/// Class id after applying `merge`; chains are followed to their end.
pub fn merge_label(class: u8, merge: &[(u8, u8)]) -> u8 {
    let mut c = class;
    for _ in 0..=merge.len() {
        match merge.iter().find(|(from, _)| *from == c) {
            Some(&(_, into)) if into != c => c = into,
            _ => break,
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsResult {
    /// Best known-object class.
    pub predicted_class: u8,
    /// `1 - max h` over object classes.
    pub u_cls: f64,
    /// Object-class scores, ordered as the model's object classes.
    pub h: Vec<f64>,
    pub background_score: f64,
    /// The object mask was empty and the whole box was pooled instead.
    pub whole_box: bool,
}

/// Builds a result from head scores laid out as `classes`; the background
/// entry, if present, is kept apart from the object-class uncertainty.
pub fn classify_scores(scores: &[f64], classes: &[u8], whole_box: bool) -> ClsResult {
    let mut h = Vec::with_capacity(classes.len());
    let mut objects = Vec::with_capacity(classes.len());
    let mut background_score = 0.0;
    for (&c, &s) in classes.iter().zip(scores) {
        if c == BACKGROUND_LABEL {
            background_score = s;
        } else {
            h.push(s);
            objects.push(c);
        }
    }
    let (best, max) = argmax(&h);
    ClsResult {
        predicted_class: objects[best],
        // keeps u_cls below one when every kernel underflows
        u_cls: (1.0 - max).clamp(0.0, 1.0 - f64::EPSILON),
        h,
        background_score,
        whole_box,
    }
}

/// Per-channel maximum over masked cells of a row-major `rows x cols` grid of
/// `d`-vectors. A mask of a different resolution is sampled nearest-neighbour.
pub fn mask_pool(features: &[f64], rows: usize, cols: usize, d: usize, mask: &[bool], mask_size: (usize, usize)) -> Result<Vec<f64>> {
    let (mr, mc) = mask_size;
    if features.len() != rows * cols * d {
        return Err(Error::Shape(format!("{} feature values for a {rows}x{cols}x{d} grid", features.len())));
    }
    if mask.len() != mr * mc || mr == 0 || mc == 0 {
        return Err(Error::Shape(format!("mask of {} cells is not {mr}x{mc}", mask.len())));
    }
    let mut pooled = vec![f64::NEG_INFINITY; d];
    let mut any = false;
    for i in 0..rows {
        let mi = ((2 * i + 1) * mr / (2 * rows)).min(mr - 1);
        for j in 0..cols {
            let mj = ((2 * j + 1) * mc / (2 * cols)).min(mc - 1);
            if !mask[mi * mc + mj] {
                continue;
            }
            any = true;
            for (p, &v) in pooled.iter_mut().zip(&features[(i * cols + j) * d..(i * cols + j + 1) * d]) {
                *p = p.max(v);
            }
        }
    }
    if !any {
        return Err(Error::invalid("empty mask"));
    }
    Ok(pooled)
}

/// Pooled feature of one proposal and whether the whole box was used.
pub fn pooled_feature(seg: &SegOutput, proposal: &Proposal, source: PoolSource, theta_bg: f64) -> Result<(Vec<f64>, bool)> {
    let mask = binary_object_mask(seg, theta_bg);
    let size = (LABEL_SIZE, LABEL_SIZE);
    let (grid, rows, d) = match source {
        PoolSource::Stack => (seg.features.clone(), LABEL_SIZE, seg.features.len() / (LABEL_SIZE * LABEL_SIZE)),
        PoolSource::Input => (crate::model::to_sites(&proposal_batch(proposal)), FEATURE_SIZE, proposal.features.shape()[0]),
    };
    match mask_pool(&grid, rows, rows, d, &mask, size) {
        Ok(p) => Ok((p, false)),
        Err(Error::Invalid(_)) => Ok((mask_pool(&grid, rows, rows, d, &[true], (1, 1))?, true)),
        Err(e) => Err(e),
    }
}

fn proposal_batch(p: &Proposal) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(p.features.shape());
    Tensor::new(shape, p.features.data().to_vec()).expect("same length")
}

#[derive(Clone, Debug)]
pub struct PropClsModel {
    pub pool: PoolSource,
    /// Head output classes; `BACKGROUND_LABEL` marks the background class.
    pub classes: Vec<u8>,
    pub merge: Vec<(u8, u8)>,
    /// Standardisation applied to pooled vectors before the MLP.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub model: SiteModel,
}

/// Head classes under a merge map: background first, then surviving known objects.
pub fn head_classes(merge: &[(u8, u8)]) -> Vec<u8> {
    let mut classes = vec![BACKGROUND_LABEL];
    for &c in KNOWN_OBJECTS.iter() {
        let m = merge_label(c, merge);
        if !classes.contains(&m) {
            classes.push(m);
        }
    }
    classes
}

pub fn build_propcls_model(config: &PropClsConfig, input_dim: usize, seed: u64) -> Result<PropClsModel> {
    if config.hidden == 0 || config.feature_dim == 0 || config.centers_per_class == 0 {
        return Err(Error::config("propcls.hidden", "dimensions must be positive"));
    }
    if !(config.sigma > 0.0) {
        return Err(Error::config("propcls.sigma", "must be positive"));
    }
    for &(from, into) in &config.merge {
        if !KNOWN_OBJECTS.contains(&from) || !KNOWN_OBJECTS.contains(&into) {
            return Err(Error::config("propcls.merge", "only known object classes can be merged"));
        }
    }
    let classes = head_classes(&config.merge);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = LayerStack::new(
        vec![input_dim],
        vec![
            Layer::dense(input_dim, config.hidden, 1.0, false, &mut rng),
            Layer::Relu,
            Layer::dense(config.hidden, config.feature_dim, 1.0, false, &mut rng).with_output_scale(config.projection_scale),
        ],
    )?;
    let spec = HeadSpec {
        num_classes: classes.len(),
        feature_dim: config.feature_dim,
        centers_per_class: config.centers_per_class,
        sigma: config.sigma,
        mc_passes: 1,
    };
    let head = build_head(&config.head, &spec, rng.gen())?;
    if head.wants_dropout() {
        return Err(Error::config("propcls.head", format!("`{}` needs dropout layers", config.head)));
    }
    Ok(PropClsModel {
        pool: config.pool,
        classes,
        merge: config.merge.clone(),
        mean: vec![0.0; input_dim],
        scale: vec![1.0; input_dim],
        model: SiteModel::new(stack, head)?,
    })
}

impl PropClsModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Head index of a ground-truth label (`None` for background proposals).
    pub fn label_index(&self, gt: Option<u8>) -> Option<usize> {
        let label = gt.map_or(BACKGROUND_LABEL, |c| merge_label(c, &self.merge));
        self.classes.iter().position(|&c| c == label)
    }

    fn standardize(&self, pooled: &[f64]) -> Vec<f64> {
        pooled.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Classifies pooled vectors (`n x input_dim`, row-major).
    pub fn classify_pooled(&self, pooled: &[f64], whole_box: &[bool]) -> Result<Vec<ClsResult>> {
        let d = self.input_dim();
        if pooled.len() != whole_box.len() * d {
            return Err(Error::Shape(format!("{} pooled values for {} proposals of width {d}", pooled.len(), whole_box.len())));
        }
        if whole_box.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<f64> = pooled.chunks_exact(d).flat_map(|r| self.standardize(r)).collect();
        let out = self.model.infer(&Tensor::new(vec![whole_box.len(), d], rows)?, 0)?;
        let c = self.classes.len();
        Ok(out
            .scores
            .chunks_exact(c)
            .zip(whole_box)
            .map(|(s, &w)| classify_scores(s, &self.classes, w))
            .collect())
    }

    /// Pooled vectors for proposals segmented by `seg_model`.
    pub fn pool(&self, seg_model: &PropSegModel, proposals: &[&Proposal], seed: u64) -> Result<(Vec<f64>, Vec<bool>)> {
        pool_proposals(seg_model, proposals, self.pool, seed)
    }

    pub fn classify_proposals(&self, seg_model: &PropSegModel, proposals: &[&Proposal], seed: u64) -> Result<Vec<ClsResult>> {
        let (pooled, whole) = self.pool(seg_model, proposals, seed)?;
        if pooled.len() != whole.len() * self.input_dim() {
            return Err(Error::Shape("pooled width does not match the classifier".into()));
        }
        self.classify_pooled(&pooled, &whole)
    }

    pub fn to_records(&self) -> Vec<Record> {
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        let merge: Vec<String> = self.merge.iter().map(|(a, b)| format!("{a}:{b}")).collect();
        let d = self.input_dim();
        let mut r = vec![Record::new(
            format!(
                "propcls pool={} classes={} merge={}",
                self.pool.name(),
                classes.join(","),
                if merge.is_empty() { "-".to_string() } else { merge.join(",") }
            ),
            vec![
                Tensor::new(vec![d], self.mean.clone()).expect("d values"),
                Tensor::new(vec![d], self.scale.clone()).expect("d values"),
            ],
        )];
        r.extend(self.model.to_records());
        r
    }

    pub fn from_records(records: &mut VecDeque<Record>) -> Result<Self> {
        let head = records.pop_front().ok_or_else(|| Error::Format("missing propcls record".into()))?;
        if head.kind() != "propcls" {
            return Err(Error::Format(format!("expected propcls record, found `{}`", head.kind())));
        }
        let parse = |s: &str| s.parse::<u8>().map_err(|_| Error::Format(format!("bad class id `{s}`")));
        let classes = head.field::<String>("classes")?.split(',').map(parse).collect::<Result<Vec<_>>>()?;
        let merge_text: String = head.field("merge")?;
        let merge = if merge_text == "-" {
            Vec::new()
        } else {
            merge_text
                .split(',')
                .map(|p| {
                    let (a, b) = p.split_once(':').ok_or_else(|| Error::Format(format!("bad merge `{p}`")))?;
                    Ok((parse(a)?, parse(b)?))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let pool = PoolSource::from_name(&head.field::<String>("pool")?).map_err(|e| Error::Format(e.to_string()))?;
        let mut tensors = head.tensors.into_iter();
        let (mean, scale) = match (tensors.next(), tensors.next()) {
            (Some(m), Some(s)) if m.len() == s.len() => (m.into_data(), s.into_data()),
            _ => return Err(Error::Format("propcls record needs mean and scale tensors".into())),
        };
        let model = SiteModel::from_records(records)?;
        if model.num_classes() != classes.len() || model.stack.input_shape() != [mean.len()] {
            return Err(Error::Format("propcls metadata does not match its network".into()));
        }
        Ok(PropClsModel {
            pool,
            classes,
            merge,
            mean,
            scale,
            model,
        })
    }
}

/// Proposals are segmented in chunks to bound memory.
const SEGMENT_CHUNK: usize = 32;

fn pool_proposals(seg_model: &PropSegModel, proposals: &[&Proposal], source: PoolSource, seed: u64) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut pooled = Vec::new();
    let mut whole = Vec::with_capacity(proposals.len());
    for (k, chunk) in proposals.chunks(SEGMENT_CHUNK).enumerate() {
        let segs = seg_model.segment_batch(chunk, seed.wrapping_add(k as u64))?;
        for (seg, p) in segs.iter().zip(chunk) {
            let (v, w) = pooled_feature(seg, p, source, seg_model.theta_bg)?;
            pooled.extend(v);
            whole.push(w);
        }
    }
    Ok((pooled, whole))
}

/// Trains a classifier on masks predicted by `seg_model` for the given
/// dataset proposals (normally the training split).
pub fn train_propcls(
    seg_model: &PropSegModel,
    data: &SynthDataset,
    indices: &[usize],
    config: &PropClsConfig,
    seed: u64,
) -> Result<(PropClsModel, TrainLog)> {
    let recipe = feature_recipe(&seg_model.recipe)?;
    let proposals: Vec<Proposal> = indices.iter().map(|&i| data.render(i, recipe.as_ref())).collect::<Result<_>>()?;
    let refs: Vec<&Proposal> = proposals.iter().collect();
    let (pooled, _) = pool_proposals(seg_model, &refs, config.pool, seed)?;
    let d = if refs.is_empty() {
        match config.pool {
            PoolSource::Stack => seg_model.model.head.feature_dim(),
            PoolSource::Input => recipe.channels(),
        }
    } else {
        pooled.len() / refs.len()
    };
    let mut model = build_propcls_model(config, d, seed)?;
    if refs.is_empty() {
        return Ok((model, TrainLog::default()));
    }
    let n = refs.len() as f64;
    for j in 0..d {
        let col = pooled.iter().skip(j).step_by(d);
        let mean = col.clone().sum::<f64>() / n;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        model.mean[j] = mean;
        model.scale[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let labels = proposals
        .iter()
        .map(|p| model.label_index(p.gt_class).map_or(SiteLabel::IGNORE, SiteLabel::class))
        .collect();
    let rows: Vec<f64> = pooled.chunks_exact(d).flat_map(|r| model.standardize(r)).collect();
    let set = TrainingSet {
        inputs: Tensor::new(vec![refs.len(), d], rows)?,
        labels,
    };
    let log = train(&mut model.model, &set, &NoRegularizer, &config.train, seed)?;
    Ok((model, log))
}

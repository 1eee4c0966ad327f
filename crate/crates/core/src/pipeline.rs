//! Whole-image uncertainty from many proposals, and flagging of detections
//! whose class is uncertain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::ScoredSample;
use crate::propcls::{ClsResult, PropClsModel};
use crate::propseg::PropSegModel;
use crate::synthbench::{
    feature_recipe, is_object, is_unknown, BBox, Proposal, SceneSplit, SynthDataset, SyntheticScene, KNOWN_OBJECTS,
    LABEL_SIZE,
};
use crate::umap::UncertaintyMap;

/// Amplitude of the seeded noise added to synthetic objectness.
pub const OBJECTNESS_NOISE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct RankedProposal {
    pub id: usize,
    pub proposal: Proposal,
    pub objectness: f64,
}

/// Fraction of object pixels inside `bbox` plus uniform noise in
/// `[-OBJECTNESS_NOISE, OBJECTNESS_NOISE]`, clamped to `[0, 1]`.
pub fn objectness(scene: &SyntheticScene, bbox: &BBox, rng: &mut ChaCha8Rng) -> f64 {
    let (mut inside, mut objects) = (0usize, 0usize);
    for (x, y) in box_pixels(bbox, scene.width, scene.height) {
        inside += 1;
        if is_object(scene.label(x, y)) {
            objects += 1;
        }
    }
    let frac = if inside == 0 { 0.0 } else { objects as f64 / inside as f64 };
    (frac + rng.gen_range(-OBJECTNESS_NOISE..=OBJECTNESS_NOISE)).clamp(0.0, 1.0)
}

/// Image pixels whose centres fall inside the box.
fn box_pixels(bbox: &BBox, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let span = |lo: f64, len: f64, limit: usize| {
        let a = (lo - 0.5).ceil().max(0.0) as usize;
        let b = ((lo + len - 0.5).ceil().max(0.0) as usize).min(limit);
        a..b.max(a)
    };
    let xs = span(bbox.x, bbox.w, width);
    span(bbox.y, bbox.h, height).flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Greedy suppression in descending objectness (ties keep input order): a
/// proposal is dropped if its IoU with any kept one exceeds `nms_iou`.
pub fn rank_and_filter(proposals: &[RankedProposal], nms_iou: f64) -> Result<Vec<RankedProposal>> {
    if !(nms_iou > 0.0 && nms_iou < 1.0) {
        return Err(Error::config("pipeline.nms_iou", "must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].objectness.total_cmp(&proposals[a].objectness));
    let mut kept: Vec<RankedProposal> = Vec::new();
    for i in order {
        let p = &proposals[i];
        if kept.iter().all(|k| k.proposal.bbox.iou(&p.proposal.bbox) <= nms_iou) {
            kept.push(p.clone());
        }
    }
    Ok(kept)
}

/// Per-pixel combination of the values painted by overlapping proposals.
pub trait Accumulator: Send + Sync {
    fn name(&self) -> &'static str;
    /// Reduces a non-empty list of contributions, each in `[0, 1]`.
    fn reduce(&self, values: &[f64]) -> f64;
}

pub struct MaxAccumulator;

impl Accumulator for MaxAccumulator {
    fn name(&self) -> &'static str {
        "max"
    }

    fn reduce(&self, values: &[f64]) -> f64 {
        values.iter().copied().fold(0.0, f64::max)
    }
}

/// Sum saturated at one.
pub struct SumAccumulator;

impl Accumulator for SumAccumulator {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn reduce(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>().min(1.0)
    }
}

pub struct MeanAccumulator;

impl Accumulator for MeanAccumulator {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn reduce(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub type AccumulatorFactory = fn() -> Box<dyn Accumulator>;

pub const ACCUMULATORS: &[(&str, AccumulatorFactory)] = &[
    ("max", || Box::new(MaxAccumulator)),
    ("sum", || Box::new(SumAccumulator)),
    ("mean", || Box::new(MeanAccumulator)),
];

pub fn accumulator_names() -> Vec<&'static str> {
    ACCUMULATORS.iter().map(|(n, _)| *n).collect()
}

pub fn build_accumulator(name: &str) -> Result<Box<dyn Accumulator>> {
    ACCUMULATORS.iter().find(|(n, _)| *n == name).map(|(_, f)| f()).ok_or_else(|| {
        Error::config(
            "pipeline.accumulator",
            format!("unknown accumulator `{name}`; expected one of {}", accumulator_names().join(", ")),
        )
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub theta_cls: f64,
    pub nms_iou: f64,
    pub accumulator: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            theta_cls: 0.3,
            nms_iou: 0.5,
            accumulator: "max".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WholeImageResult {
    pub umap: UncertaintyMap,
    /// Proposal id and `u_cls` of every proposal painted into the map.
    pub contributing: Vec<(usize, f64)>,
}

/// Bilinear sample of a row-major `size x size` map at continuous
/// coordinates, clamped to the map.
fn bilinear(map: &[f64], size: usize, u: f64, v: f64) -> f64 {
    let max = (size - 1) as f64;
    let (u, v) = (u.clamp(0.0, max), v.clamp(0.0, max));
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let at = |x: usize, y: usize| map[y * size + x];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

/// Paints `values` (a `LABEL_SIZE` square map) over `bbox` by bilinear
/// resampling, pushing one contribution per covered pixel.
fn paint(contributions: &mut [Vec<f64>], width: usize, height: usize, bbox: &BBox, values: &[f64]) {
    let s = LABEL_SIZE as f64;
    for (x, y) in box_pixels(bbox, width, height) {
        let u = (x as f64 + 0.5 - bbox.x) / bbox.w * s - 0.5;
        let v = (y as f64 + 0.5 - bbox.y) / bbox.h * s - 0.5;
        contributions[y * width + x].push(bilinear(values, LABEL_SIZE, u, v));
    }
}

/// One proposal's contribution to a whole-image map.
#[derive(Clone, Copy, Debug)]
pub struct ProposalMap<'a> {
    pub id: usize,
    pub bbox: BBox,
    /// `LABEL_SIZE` square map, row-major.
    pub u_seg: &'a [f64],
    pub u_cls: f64,
}

/// Discards maps with `u_cls < theta_cls` and accumulates `u_seg * u_cls` of
/// the rest into a `width x height` map; uncovered pixels are 0.
pub fn compose_uncertainty(
    maps: &[ProposalMap],
    theta_cls: f64,
    acc: &dyn Accumulator,
    (width, height): (usize, usize),
) -> Result<WholeImageResult> {
    if !(0.0..=1.0).contains(&theta_cls) {
        return Err(Error::config("pipeline.theta_cls", "must lie in [0, 1]"));
    }
    let mut contributions = vec![Vec::new(); width * height];
    let mut contributing = Vec::new();
    for m in maps {
        if m.u_seg.len() != LABEL_SIZE * LABEL_SIZE {
            return Err(Error::Shape(format!("u_seg map of {} cells", m.u_seg.len())));
        }
        if m.u_cls < theta_cls {
            continue;
        }
        let values: Vec<f64> = m.u_seg.iter().map(|u| u * m.u_cls).collect();
        paint(&mut contributions, width, height, &m.bbox, &values);
        contributing.push((m.id, m.u_cls));
    }
    let values = contributions
        .iter()
        .map(|v| if v.is_empty() { 0.0 } else { acc.reduce(v) })
        .collect();
    Ok(WholeImageResult {
        umap: UncertaintyMap::new(width, height, values)?,
        contributing,
    })
}

/// Filters proposals by NMS, segments and classifies the survivors and
/// composes their maps.
pub fn whole_image_uncertainty(
    proposals: &[RankedProposal],
    seg_model: &PropSegModel,
    cls_model: &PropClsModel,
    config: &PipelineConfig,
    size: (usize, usize),
    seed: u64,
) -> Result<WholeImageResult> {
    let acc = build_accumulator(&config.accumulator)?;
    let kept = rank_and_filter(proposals, config.nms_iou)?;
    let refs: Vec<&Proposal> = kept.iter().map(|k| &k.proposal).collect();
    let (segs, cls) = if refs.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (seg_model.segment_batch(&refs, seed)?, cls_model.classify_proposals(seg_model, &refs, seed)?)
    };
    let maps: Vec<ProposalMap> = kept
        .iter()
        .zip(&segs)
        .zip(&cls)
        .map(|((k, s), c)| ProposalMap {
            id: k.id,
            bbox: k.proposal.bbox,
            u_seg: &s.u_seg,
            u_cls: c.u_cls,
        })
        .collect();
    compose_uncertainty(&maps, config.theta_cls, acc.as_ref(), size)
}

/// The dataset's proposals for one scene, rendered and scored for objectness.
pub fn scene_ranked_proposals(data: &SynthDataset, scene: usize, recipe: &str, seed: u64) -> Result<Vec<RankedProposal>> {
    let recipe = feature_recipe(recipe)?;
    let s = data.scenes.get(scene).ok_or_else(|| Error::invalid(format!("no scene {scene}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scene as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    data.proposals
        .iter()
        .enumerate()
        .filter(|(_, r)| r.scene == scene)
        .map(|(id, r)| {
            Ok(RankedProposal {
                id,
                proposal: data.render(id, recipe.as_ref())?,
                objectness: objectness(s, &r.bbox, &mut rng),
            })
        })
        .collect()
}

/// Whole-image pixel samples: unknown-object pixels are positives.
pub fn image_pixel_samples(umap: &UncertaintyMap, scene: &SyntheticScene) -> Vec<ScoredSample> {
    let mut out = Vec::with_capacity(scene.width * scene.height);
    for y in 0..scene.height {
        for x in 0..scene.width {
            out.push(ScoredSample::new(umap.get(x, y), is_unknown(scene.label(x, y))));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub scene: usize,
    pub bbox: BBox,
    pub class: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlaggedDetection {
    pub detection: Detection,
    pub result: ClsResult,
    pub flagged: bool,
}

/// Re-scores every detection with the proposal classifier; a detection is
/// flagged iff its `u_cls` exceeds `theta_flag`.
pub fn flag_uncertain_detections(
    data: &SynthDataset,
    detections: &[Detection],
    seg_model: &PropSegModel,
    cls_model: &PropClsModel,
    theta_flag: f64,
    seed: u64,
) -> Result<Vec<FlaggedDetection>> {
    if !(theta_flag > 0.0 && theta_flag < 1.0) {
        return Err(Error::config("pipeline.theta_flag", "must lie in (0, 1)"));
    }
    let recipe = feature_recipe(&seg_model.recipe)?;
    let proposals: Vec<Proposal> = detections
        .iter()
        .map(|d| {
            if d.scene >= data.scenes.len() {
                return Err(Error::invalid(format!("detection refers to missing scene {}", d.scene)));
            }
            data.render_box(d.scene, &d.bbox, recipe.as_ref())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Proposal> = proposals.iter().collect();
    let results = cls_model.classify_proposals(seg_model, &refs, seed)?;
    Ok(detections
        .iter()
        .zip(results)
        .map(|(d, r)| FlaggedDetection {
            detection: *d,
            flagged: r.u_cls > theta_flag,
            result: r,
        })
        .collect())
}

/// One detection per object instance in the test scenes. Known instances
/// carry their true class; unknown ones are given a random known class.
/// The flag marks the deliberately mislabeled detections.
pub fn synthetic_detections(data: &SynthDataset, seed: u64) -> Vec<(Detection, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in data.scenes_in(SceneSplit::Test) {
        for inst in &data.scenes[s].instances {
            let unknown = is_unknown(inst.class);
            let class = if unknown { KNOWN_OBJECTS[rng.gen_range(0..KNOWN_OBJECTS.len())] } else { inst.class };
            let detection = Detection {
                scene: s,
                bbox: inst.bbox,
                class,
                score: rng.gen_range(0.5..1.0),
            };
            out.push((detection, unknown));
        }
    }
    out
}

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::proposal::{render_proposal, FeatureRecipe, Proposal};
use super::scene::{generate_scene, Instance, SceneParams, SyntheticScene};
use super::{auto_label, is_unknown, BBox, CLASS_NAMES, KNOWN_OBJECTS, NUM_CLASSES, UNKNOWN_OBJECTS};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_bytes, read_f64s, read_magic, read_u64, write_bytes, write_f64s, write_u64};

pub const DATA_MAGIC: &str = "RBFOOD-DATA 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalParams {
    /// Jittered copies of every ground-truth box.
    pub per_instance: usize,
    /// Shift and rescale amplitude, as a fraction of box size.
    pub jitter: f64,
    /// Background boxes per object proposal.
    pub background_ratio: f64,
    pub min_background: usize,
    pub max_background: usize,
    pub boundary_radius: usize,
    pub iou_threshold: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams {
            per_instance: 2,
            jitter: 0.1,
            background_ratio: 0.5,
            min_background: 12,
            max_background: 28,
            boundary_radius: 1,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchParams {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneParams,
    /// Inclusive range of known shapes per training scene.
    pub train_objects: (usize, usize),
    pub test_known: (usize, usize),
    pub test_unknown: (usize, usize),
    pub proposals: ProposalParams,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            train_scenes: 40,
            test_scenes: 20,
            scene: SceneParams::default(),
            train_objects: (2, 3),
            test_known: (1, 2),
            test_unknown: (1, 2),
            proposals: ProposalParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneSplit {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    TestKnown,
    TestOod,
    TestBackground,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::TestKnown, Split::TestOod, Split::TestBackground];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestKnown => "test_known",
            Split::TestOod => "test_ood",
            Split::TestBackground => "test_bg",
        }
    }

    fn index(self) -> u64 {
        Split::ALL.iter().position(|&s| s == self).expect("listed") as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalRecord {
    pub scene: usize,
    pub bbox: BBox,
    pub gt_class: Option<u8>,
    pub split: Split,
}

/// Scenes plus proposal boxes; features are rendered on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub scenes: Vec<SyntheticScene>,
    pub scene_splits: Vec<SceneSplit>,
    pub proposals: Vec<ProposalRecord>,
    pub boundary_radius: usize,
    pub iou_threshold: f64,
}

impl SynthDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.proposals.len()).filter(|&i| self.proposals[i].split == split).collect()
    }

    pub fn scenes_in(&self, split: SceneSplit) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| self.scene_splits[i] == split).collect()
    }

    pub fn render(&self, index: usize, recipe: &dyn FeatureRecipe) -> Result<Proposal> {
        let rec = &self.proposals[index];
        self.render_box(rec.scene, &rec.bbox, recipe)
    }

    pub fn render_box(&self, scene: usize, bbox: &BBox, recipe: &dyn FeatureRecipe) -> Result<Proposal> {
        render_proposal(&self.scenes[scene], bbox, recipe, self.boundary_radius, self.iou_threshold)
    }
}

fn jitter_box(b: &BBox, amount: f64, width: f64, height: f64, rng: &mut ChaCha8Rng) -> BBox {
    let mut j = |s: f64| s * rng.gen_range(-amount..=amount);
    let w = (b.w + j(b.w)).max(2.0).min(width);
    let h = (b.h + j(b.h)).max(2.0).min(height);
    let x = (b.x + j(b.w)).clamp(0.0, width - w);
    let y = (b.y + j(b.h)).clamp(0.0, height - h);
    BBox::new(x.round(), y.round(), w.round(), h.round())
}

fn scene_proposals(scene: &SyntheticScene, p: &ProposalParams, rng: &mut ChaCha8Rng) -> Vec<(BBox, Option<u8>)> {
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut out = Vec::new();
    for inst in &scene.instances {
        for _ in 0..p.per_instance {
            let b = jitter_box(&inst.bbox, p.jitter, w, h, rng);
            out.push((b, auto_label(&b, &scene.instances, p.iou_threshold)));
        }
    }
    let wanted = (out.len() as f64 * p.background_ratio).round() as usize;
    let mut added = 0;
    for _ in 0..wanted * 50 {
        if added == wanted {
            break;
        }
        let bw = rng.gen_range(p.min_background..=p.max_background) as f64;
        let bh = rng.gen_range(p.min_background..=p.max_background) as f64;
        let b = BBox::new(rng.gen_range(0..=(w - bw) as usize) as f64, rng.gen_range(0..=(h - bh) as usize) as f64, bw, bh);
        if auto_label(&b, &scene.instances, p.iou_threshold).is_none() {
            out.push((b, None));
            added += 1;
        }
    }
    out
}

fn pick_counts(classes: &[u8], range: (usize, usize), counts: &mut [usize; NUM_CLASSES], rng: &mut ChaCha8Rng) {
    let n = rng.gen_range(range.0..=range.1.max(range.0));
    for _ in 0..n {
        counts[*classes.choose(rng).expect("non-empty class list") as usize] += 1;
    }
}

/// Training scenes hold only known shapes; test scenes mix known and unknown.
pub fn build_dataset(params: &BenchParams, seed: u64) -> Result<SynthDataset> {
    let p = &params.proposals;
    if !(p.iou_threshold > 0.0 && p.iou_threshold < 1.0) {
        return Err(Error::config("bench.iou_threshold", "must lie in (0, 1)"));
    }
    if p.boundary_radius == 0 {
        return Err(Error::config("bench.boundary_radius", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::new();
    let mut scene_splits = Vec::new();
    let mut proposals = Vec::new();
    let total = params.train_scenes + params.test_scenes;
    for i in 0..total {
        let split = if i < params.train_scenes { SceneSplit::Train } else { SceneSplit::Test };
        let mut sp = params.scene.clone();
        sp.counts = [0; NUM_CLASSES];
        match split {
            SceneSplit::Train => pick_counts(&KNOWN_OBJECTS, params.train_objects, &mut sp.counts, &mut rng),
            SceneSplit::Test => {
                pick_counts(&KNOWN_OBJECTS, params.test_known, &mut sp.counts, &mut rng);
                pick_counts(&UNKNOWN_OBJECTS, params.test_unknown, &mut sp.counts, &mut rng);
            }
        }
        let scene = generate_scene(&sp, rng.gen())?;
        for (bbox, gt) in scene_proposals(&scene, p, &mut rng) {
            let split = match (split, gt) {
                (SceneSplit::Train, _) => Split::Train,
                (SceneSplit::Test, Some(c)) if is_unknown(c) => Split::TestOod,
                (SceneSplit::Test, Some(_)) => Split::TestKnown,
                (SceneSplit::Test, None) => Split::TestBackground,
            };
            proposals.push(ProposalRecord {
                scene: scenes.len(),
                bbox,
                gt_class: gt,
                split,
            });
        }
        scenes.push(scene);
        scene_splits.push(split);
    }
    Ok(SynthDataset {
        scenes,
        scene_splits,
        proposals,
        boundary_radius: p.boundary_radius,
        iou_threshold: p.iou_threshold,
    })
}

const NO_CLASS: u64 = u64::MAX;
const MAX_ARRAY: u64 = 1 << 26;

fn write_box(w: &mut impl Write, b: &BBox) -> Result<()> {
    write_f64s(w, &[b.x, b.y, b.w, b.h])
}

fn read_box(r: &mut impl Read) -> Result<BBox> {
    match read_f64s(r, 4)?[..] {
        [x, y, w, h] => Ok(BBox::new(x, y, w, h)),
        _ => Err(Error::Format("box needs four values".into())),
    }
}

fn read_class(r: &mut impl Read) -> Result<Option<u8>> {
    match read_u64(r)? {
        NO_CLASS => Ok(None),
        c if (c as usize) < NUM_CLASSES => Ok(Some(c as u8)),
        c => Err(Error::Format(format!("class id {c} out of range"))),
    }
}

/// Binary dataset: header line, scenes (image and label arrays, instances),
/// then proposal boxes with labels and splits.
pub fn write_dataset(w: &mut impl Write, data: &SynthDataset) -> Result<()> {
    w.write_all(DATA_MAGIC.as_bytes())?;
    w.write_all(b"\n")?;
    write_u64(w, data.boundary_radius as u64)?;
    write_f64s(w, &[data.iou_threshold])?;
    write_u64(w, data.scenes.len() as u64)?;
    for (scene, split) in data.scenes.iter().zip(&data.scene_splits) {
        write_u64(w, scene.width as u64)?;
        write_u64(w, scene.height as u64)?;
        write_u64(w, (*split == SceneSplit::Test) as u64)?;
        write_f64s(w, &scene.image)?;
        write_bytes(w, &scene.pixel_labels)?;
        write_u64(w, scene.instances.len() as u64)?;
        for inst in &scene.instances {
            write_u64(w, inst.class as u64)?;
            write_box(w, &inst.bbox)?;
            let mask: Vec<u8> = inst.mask.iter().map(|&m| m as u8).collect();
            write_bytes(w, &mask)?;
        }
    }
    write_u64(w, data.proposals.len() as u64)?;
    for p in &data.proposals {
        write_u64(w, p.scene as u64)?;
        write_box(w, &p.bbox)?;
        write_u64(w, p.gt_class.map_or(NO_CLASS, |c| c as u64))?;
        write_u64(w, p.split.index())?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<SynthDataset> {
    read_magic(r, DATA_MAGIC)?;
    let boundary_radius = read_u64(r)? as usize;
    let iou_threshold = *read_f64s(r, 1)?.first().ok_or_else(|| Error::Format("missing IoU threshold".into()))?;
    let n_scenes = read_u64(r)?;
    if n_scenes > MAX_ARRAY {
        return Err(Error::Format(format!("{n_scenes} scenes is implausible")));
    }
    let mut scenes = Vec::with_capacity(n_scenes as usize);
    let mut scene_splits = Vec::with_capacity(n_scenes as usize);
    for s in 0..n_scenes {
        let width = read_u64(r)? as usize;
        let height = read_u64(r)? as usize;
        let split = if read_u64(r)? == 1 { SceneSplit::Test } else { SceneSplit::Train };
        let image = read_f64s(r, MAX_ARRAY)?;
        let pixel_labels = read_bytes(r, MAX_ARRAY)?;
        if image.len() != width * height * 3 || pixel_labels.len() != width * height {
            return Err(Error::Format(format!("scene {s}: arrays do not match {width}x{height}")));
        }
        let n_inst = read_u64(r)?;
        let mut instances = Vec::new();
        for _ in 0..n_inst.min(MAX_ARRAY) {
            let class = read_class(r)?.ok_or_else(|| Error::Format("instance without class".into()))?;
            let bbox = read_box(r)?;
            let mask: Vec<bool> = read_bytes(r, MAX_ARRAY)?.into_iter().map(|b| b != 0).collect();
            if mask.len() != (bbox.w * bbox.h) as usize {
                return Err(Error::Format(format!("scene {s}: instance mask does not match its box")));
            }
            instances.push(Instance { bbox, class, mask });
        }
        scenes.push(SyntheticScene {
            width,
            height,
            image,
            pixel_labels,
            instances,
        });
        scene_splits.push(split);
    }
    let n_props = read_u64(r)?;
    let mut proposals = Vec::new();
    for _ in 0..n_props.min(MAX_ARRAY) {
        let scene = read_u64(r)? as usize;
        if scene >= scenes.len() {
            return Err(Error::Format(format!("proposal refers to missing scene {scene}")));
        }
        let bbox = read_box(r)?;
        let gt_class = read_class(r)?;
        let split = *Split::ALL
            .get(read_u64(r)? as usize)
            .ok_or_else(|| Error::Format("unknown split".into()))?;
        proposals.push(ProposalRecord {
            scene,
            bbox,
            gt_class,
            split,
        });
    }
    Ok(SynthDataset {
        scenes,
        scene_splits,
        proposals,
        boundary_radius,
        iou_threshold,
    })
}

/// `scene_id,proposal_id,split,gt_class` with class names (`background` for none).
pub fn write_index(w: &mut impl Write, data: &SynthDataset) -> Result<()> {
    writeln!(w, "scene_id,proposal_id,split,gt_class")?;
    for (i, p) in data.proposals.iter().enumerate() {
        let class = p.gt_class.map_or("background", |c| CLASS_NAMES[c as usize]);
        writeln!(w, "{},{},{},{}", p.scene, i, p.split.name(), class)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchParams {
        BenchParams {
            train_scenes: 3,
            test_scenes: 2,
            ..BenchParams::default()
        }
    }

    #[test]
    fn file_round_trip() {
        let d = build_dataset(&small(), 8).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        assert!(buf.starts_with(b"RBFOOD-DATA 1\n"));
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), d);
        assert!(read_dataset(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn splits_follow_scene_and_label() {
        let d = build_dataset(&small(), 3).unwrap();
        for p in &d.proposals {
            match d.scene_splits[p.scene] {
                SceneSplit::Train => assert_eq!(p.split, Split::Train),
                SceneSplit::Test => assert_ne!(p.split, Split::Train),
            }
        }
        let mut csv = Vec::new();
        write_index(&mut csv, &d).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), d.proposals.len() + 1);
        assert!(text.starts_with("scene_id,proposal_id,split,gt_class\n"));
    }
}

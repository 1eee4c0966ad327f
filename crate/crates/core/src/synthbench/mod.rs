//! Synthetic scenes of textured backgrounds and flat-colored shapes, with
//! held-out shape classes as unknowns, object proposals, and per-proposal
//! feature maps and pixel labels.

mod dataset;
mod proposal;
mod scene;

pub use dataset::{
    build_dataset, read_dataset, write_dataset, write_index, BenchParams, ProposalParams, ProposalRecord,
    SceneSplit, Split, SynthDataset, DATA_MAGIC,
};
pub use proposal::{
    extract_boundary_pixels, feature_recipe, recipe_names, render_proposal, FeatureRecipe,
    PixelLabel, Proposal, FEATURE_SIZE, LABEL_SIZE,
};
pub use scene::{generate_scene, Instance, SceneParams, SyntheticScene};

pub const NUM_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["ground", "sky", "wall", "square", "circle", "triangle", "star", "cross"];

pub const GROUND: u8 = 0;
pub const SKY: u8 = 1;
pub const WALL: u8 = 2;
pub const SQUARE: u8 = 3;
pub const CIRCLE: u8 = 4;
pub const TRIANGLE: u8 = 5;
pub const STAR: u8 = 6;
pub const CROSS: u8 = 7;

pub const BACKGROUND_CLASSES: [u8; 3] = [GROUND, SKY, WALL];
pub const KNOWN_OBJECTS: [u8; 3] = [SQUARE, CIRCLE, TRIANGLE];
pub const UNKNOWN_OBJECTS: [u8; 2] = [STAR, CROSS];
/// Every class that may appear in training data.
pub const KNOWN_CLASSES: [u8; 6] = [GROUND, SKY, WALL, SQUARE, CIRCLE, TRIANGLE];

pub fn is_background(class: u8) -> bool {
    BACKGROUND_CLASSES.contains(&class)
}

pub fn is_object(class: u8) -> bool {
    !is_background(class)
}

pub fn is_unknown(class: u8) -> bool {
    UNKNOWN_OBJECTS.contains(&class)
}

pub fn class_id(name: &str) -> Option<u8> {
    CLASS_NAMES.iter().position(|&n| n == name).map(|i| i as u8)
}

/// Axis-aligned box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let ih = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        if self == other && self.area() > 0.0 {
            return 1.0;
        }
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).min(1.0)
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.x + other.w <= self.x + self.w && other.y + other.h <= self.y + self.h
    }
}

/// Class of the best-overlapping instance if its IoU exceeds `iou_threshold`,
/// else `None` (background).
pub fn auto_label(bbox: &BBox, instances: &[Instance], iou_threshold: f64) -> Option<u8> {
    let mut best: Option<(f64, u8)> = None;
    for inst in instances {
        let iou = bbox.iou(&inst.bbox);
        if best.map_or(true, |(b, _)| iou > b) {
            best = Some((iou, inst.class));
        }
    }
    best.filter(|&(iou, _)| iou > iou_threshold).map(|(_, c)| c)
}

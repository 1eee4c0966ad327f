use std::fmt::Debug;

use super::{auto_label, is_background, BBox, SyntheticScene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side of the square feature map rendered for every proposal.
pub const FEATURE_SIZE: usize = 14;
/// Side of the square label map rendered for every proposal.
pub const LABEL_SIZE: usize = 28;

/// Training label of one 28x28 cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelLabel {
    Class(u8),
    /// Carries the nearest pixel class as well.
    Boundary(u8),
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// `[F, 14, 14]`.
    pub features: Tensor,
    /// Nearest-pixel class of each 28x28 cell, row-major.
    pub classes: Vec<u8>,
    pub boundary: Vec<bool>,
    /// Cells whose source neighbourhood mixes classes without being boundary.
    pub ignore: Vec<bool>,
    pub gt_class: Option<u8>,
}

impl Proposal {
    pub fn label(&self, i: usize) -> PixelLabel {
        if self.boundary[i] {
            PixelLabel::Boundary(self.classes[i])
        } else if self.ignore[i] {
            PixelLabel::Ignore
        } else {
            PixelLabel::Class(self.classes[i])
        }
    }
}

/// Turns an image region into a `[F, 14, 14]` feature map.
pub trait FeatureRecipe: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn channels(&self) -> usize;
    fn render(&self, scene: &SyntheticScene, bbox: &BBox) -> Vec<f64>;
}

/// Bilinear sample of channel `ch` at continuous pixel coordinates (pixel
/// `p` spans `[p, p + 1)`), clamped at the border.
fn bilinear(image: &[f64], width: usize, height: usize, x: f64, y: f64, ch: usize) -> f64 {
    let sx = (x - 0.5).clamp(0.0, (width - 1) as f64);
    let sy = (y - 0.5).clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let at = |x: usize, y: usize| image[(y * width + x) * 3 + ch];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

fn cell_center(bbox: &BBox, i: usize, j: usize, n: usize) -> (f64, f64) {
    (
        bbox.x + (i as f64 + 0.5) * bbox.w / n as f64,
        bbox.y + (j as f64 + 0.5) * bbox.h / n as f64,
    )
}

fn appearance(scene: &SyntheticScene, bbox: &BBox, out: &mut Vec<f64>) {
    let n = FEATURE_SIZE;
    for ch in 0..3 {
        for j in 0..n {
            for i in 0..n {
                let (x, y) = cell_center(bbox, i, j, n);
                out.push(bilinear(&scene.image, scene.width, scene.height, x, y, ch));
            }
        }
    }
    for axis in 0..2 {
        for j in 0..n {
            for i in 0..n {
                let t = if axis == 0 { i } else { j };
                out.push(t as f64 / (n - 1) as f64);
            }
        }
    }
}

/// RGB plus normalized cell coordinates (5 channels).
#[derive(Clone, Debug)]
pub struct Appearance;

impl FeatureRecipe for Appearance {
    fn name(&self) -> &'static str {
        "appearance"
    }

    fn channels(&self) -> usize {
        5
    }

    fn render(&self, scene: &SyntheticScene, bbox: &BBox) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels() * FEATURE_SIZE * FEATURE_SIZE);
        appearance(scene, bbox, &mut out);
        out
    }
}

/// Appearance plus a blurred view of a crop twice the box size (8 channels).
#[derive(Clone, Debug)]
pub struct Context {
    pub blur_radius: usize,
}

fn box_blur(scene: &SyntheticScene, r: usize) -> Vec<f64> {
    let (w, h) = (scene.width, scene.height);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (c, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = c.saturating_sub(r);
                let hi = (c + r).min(len - 1);
                for ch in 0..3 {
                    let mut s = 0.0;
                    for k in lo..=hi {
                        let (sx, sy) = if horizontal { (k, y) } else { (x, k) };
                        s += src[(sy * w + sx) * 3 + ch];
                    }
                    dst[(y * w + x) * 3 + ch] = s / (hi - lo + 1) as f64;
                }
            }
        }
        dst
    };
    pass(&pass(&scene.image, true), false)
}

impl FeatureRecipe for Context {
    fn name(&self) -> &'static str {
        "context"
    }

    fn channels(&self) -> usize {
        8
    }

    fn render(&self, scene: &SyntheticScene, bbox: &BBox) -> Vec<f64> {
        let n = FEATURE_SIZE;
        let mut out = Vec::with_capacity(self.channels() * n * n);
        appearance(scene, bbox, &mut out);
        let blurred = box_blur(scene, self.blur_radius);
        let (cx, cy) = (bbox.x + bbox.w / 2.0, bbox.y + bbox.h / 2.0);
        let x0 = (cx - bbox.w).max(0.0);
        let y0 = (cy - bbox.h).max(0.0);
        let x1 = (cx + bbox.w).min(scene.width as f64);
        let y1 = (cy + bbox.h).min(scene.height as f64);
        let wide = BBox::new(x0, y0, x1 - x0, y1 - y0);
        for ch in 0..3 {
            for j in 0..n {
                for i in 0..n {
                    let (x, y) = cell_center(&wide, i, j, n);
                    out.push(bilinear(&blurred, scene.width, scene.height, x, y, ch));
                }
            }
        }
        out
    }
}

pub type RecipeFactory = fn() -> Box<dyn FeatureRecipe>;

/// Registered feature recipes, by name.
pub const RECIPES: &[(&str, RecipeFactory)] = &[
    ("appearance", || Box::new(Appearance)),
    ("context", || Box::new(Context { blur_radius: 3 })),
];

pub fn recipe_names() -> Vec<&'static str> {
    RECIPES.iter().map(|(n, _)| *n).collect()
}

pub fn feature_recipe(name: &str) -> Result<Box<dyn FeatureRecipe>> {
    RECIPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f())
        .ok_or_else(|| {
            Error::config(
                "bench.recipe",
                format!("unknown feature recipe `{name}`; expected one of {:?}", recipe_names()),
            )
        })
}

/// Cells whose Chebyshev `radius` neighbourhood holds both an object and a
/// background class, for a row-major `size x size` label map.
pub fn extract_boundary_pixels(labels: &[u8], size: usize, radius: usize) -> Vec<bool> {
    // 2-D prefix counts of object and background cells
    let stride = size + 1;
    let mut obj = vec![0u32; stride * stride];
    let mut bg = vec![0u32; stride * stride];
    for y in 0..size {
        for x in 0..size {
            let is_bg = is_background(labels[y * size + x]) as u32;
            let k = (y + 1) * stride + x + 1;
            let (up, left, diag) = (y * stride + x + 1, (y + 1) * stride + x, y * stride + x);
            bg[k] = is_bg + bg[up] + bg[left] - bg[diag];
            obj[k] = (1 - is_bg) + obj[up] + obj[left] - obj[diag];
        }
    }
    let window = |p: &[u32], x0: usize, y0: usize, x1: usize, y1: usize| {
        p[y1 * stride + x1] + p[y0 * stride + x0] - p[y0 * stride + x1] - p[y1 * stride + x0]
    };
    let mut out = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (x0, y0) = (x.saturating_sub(radius), y.saturating_sub(radius));
            let (x1, y1) = ((x + radius + 1).min(size), (y + radius + 1).min(size));
            out[y * size + x] = window(&obj, x0, y0, x1, y1) > 0 && window(&bg, x0, y0, x1, y1) > 0;
        }
    }
    out
}

/// Renders features, 28x28 labels, boundary band and auto-label for `bbox`.
pub fn render_proposal(
    scene: &SyntheticScene,
    bbox: &BBox,
    recipe: &dyn FeatureRecipe,
    boundary_radius: usize,
    iou_threshold: f64,
) -> Result<Proposal> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::invalid(format!("degenerate proposal box {bbox:?}")));
    }
    let image = BBox::new(0.0, 0.0, scene.width as f64, scene.height as f64);
    if !image.contains(bbox) {
        return Err(Error::invalid(format!("proposal box {bbox:?} leaves the image")));
    }
    let n = LABEL_SIZE;
    let (w, h) = (scene.width, scene.height);
    let mut classes = Vec::with_capacity(n * n);
    let mut mixed = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = cell_center(bbox, i, j, n);
            let (px, py) = ((x.floor() as usize).min(w - 1), (y.floor() as usize).min(h - 1));
            classes.push(scene.label(px, py));
            let sx = (x - 0.5).clamp(0.0, (w - 1) as f64).floor() as usize;
            let sy = (y - 0.5).clamp(0.0, (h - 1) as f64).floor() as usize;
            let first = scene.label(sx, sy);
            let others = [(sx + 1, sy), (sx, sy + 1), (sx + 1, sy + 1)];
            mixed.push(
                others
                    .iter()
                    .any(|&(qx, qy)| scene.label(qx.min(w - 1), qy.min(h - 1)) != first),
            );
        }
    }
    let boundary = extract_boundary_pixels(&classes, n, boundary_radius);
    let ignore = mixed.iter().zip(&boundary).map(|(&m, &b)| m && !b).collect();
    let data = recipe.render(scene, bbox);
    let features = Tensor::new(vec![recipe.channels(), FEATURE_SIZE, FEATURE_SIZE], data)?;
    Ok(Proposal {
        bbox: *bbox,
        features,
        classes,
        boundary,
        ignore,
        gt_class: auto_label(bbox, &scene.instances, iou_threshold),
    })
}

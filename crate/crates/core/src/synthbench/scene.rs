use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BBox, CIRCLE, CROSS, GROUND, NUM_CLASSES, SKY, SQUARE, STAR, TRIANGLE, WALL};
use crate::error::{Error, Result};

/// Base RGB color per class.
const PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.40, 0.32, 0.20], // ground
    [0.55, 0.75, 0.95], // sky
    [0.62, 0.58, 0.55], // wall
    [0.90, 0.20, 0.20], // square
    [0.20, 0.30, 0.90], // circle
    [0.95, 0.85, 0.20], // triangle
    [0.80, 0.20, 0.85], // star
    [0.15, 0.85, 0.75], // cross
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Requested instance count per object class id.
    pub counts: [usize; NUM_CLASSES],
    pub min_size: usize,
    pub max_size: usize,
    /// Largest allowed box IoU between any two instances.
    pub max_overlap: f64,
    pub max_retries: usize,
    /// Per-pixel Gaussian noise on every channel.
    pub noise: f64,
    /// Uniform per-instance shift of the base color.
    pub color_jitter: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 64,
            height: 64,
            counts: [0; NUM_CLASSES],
            min_size: 14,
            max_size: 24,
            max_overlap: 0.1,
            max_retries: 500,
            noise: 0.03,
            color_jitter: 0.05,
        }
    }
}

/// One placed shape. `mask` covers `bbox` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub class: u8,
    pub mask: Vec<bool>,
}

impl Instance {
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (x0, y0) = (self.bbox.x as usize, self.bbox.y as usize);
        let (w, h) = (self.bbox.w as usize, self.bbox.h as usize);
        px >= x0 && py >= y0 && px < x0 + w && py < y0 + h && self.mask[(py - y0) * w + (px - x0)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    /// `height x width x 3`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub pixel_labels: Vec<u8>,
    pub instances: Vec<Instance>,
}

impl SyntheticScene {
    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.pixel_labels[y * self.width + x]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }
}

fn inside_shape(class: u8, u: f64, v: f64) -> bool {
    match class {
        SQUARE => u.abs() <= 0.85 && v.abs() <= 0.85,
        CIRCLE => u * u + v * v <= 1.0,
        TRIANGLE => v <= 0.9 && v >= -0.9 && u.abs() <= (v + 0.9) / 1.8,
        CROSS => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        STAR => {
            // five-pointed star: even-odd test against its ten-vertex outline
            let pts: Vec<(f64, f64)> = (0..10)
                .map(|k| {
                    let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
                    let r = if k % 2 == 0 { 1.0 } else { 0.45 };
                    (r * a.cos(), r * a.sin())
                })
                .collect();
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
                if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            inside
        }
        _ => false,
    }
}

/// Rasterizes a shape centred at `(cx, cy)` with half-size `r`; returns its
/// tight box and mask, or `None` if no pixel is covered.
fn rasterize(class: u8, cx: f64, cy: f64, r: f64, width: usize, height: usize) -> Option<Instance> {
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil() as usize).min(width);
    let y1 = ((cy + r).ceil() as usize).min(height);
    let hit = |x: usize, y: usize| inside_shape(class, (x as f64 + 0.5 - cx) / r, (y as f64 + 0.5 - cy) / r);
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            if hit(x, y) {
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
    }
    if bx0 == usize::MAX {
        return None;
    }
    let (w, h) = (bx1 - bx0, by1 - by0);
    let mask = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| hit(bx0 + x, by0 + y)).collect();
    Some(Instance {
        bbox: BBox::new(bx0 as f64, by0 as f64, w as f64, h as f64),
        class,
        mask,
    })
}

/// Sky, wall and ground bands with vertical gradients and noise, overlaid
/// with the requested shapes. Fails if a shape cannot be placed within the
/// retry budget.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<SyntheticScene> {
    let (w, h) = (params.width, params.height);
    if w < 64 || h < 64 {
        return Err(Error::invalid(format!("scene {w}x{h} is smaller than 64x64")));
    }
    if params.min_size < 4 || params.min_size > params.max_size || params.max_size > w.min(h) {
        return Err(Error::invalid(format!(
            "shape sizes {}..={} do not fit a {w}x{h} scene",
            params.min_size, params.max_size
        )));
    }
    if params.counts[..3].iter().any(|&c| c > 0) {
        return Err(Error::invalid("background classes cannot be placed as shapes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;

    let sky_end = (h as f64 * rng.gen_range(0.2..0.4)) as usize;
    let wall_end = (h as f64 * rng.gen_range(0.55..0.75)) as usize;
    let mut labels = vec![GROUND; w * h];
    let mut image = vec![0.0; w * h * 3];
    for y in 0..h {
        let (class, t) = if y < sky_end {
            (SKY, y as f64 / sky_end.max(1) as f64)
        } else if y < wall_end {
            (WALL, (y - sky_end) as f64 / (wall_end - sky_end).max(1) as f64)
        } else {
            (GROUND, (y - wall_end) as f64 / (h - wall_end).max(1) as f64)
        };
        let shade = 0.12 * (t - 0.5);
        for x in 0..w {
            labels[y * w + x] = class;
            for ch in 0..3 {
                image[(y * w + x) * 3 + ch] = PALETTE[class as usize][ch] + shade + noise.sample(&mut rng);
            }
        }
    }

    let mut order: Vec<u8> = (0..NUM_CLASSES as u8)
        .flat_map(|c| std::iter::repeat(c).take(params.counts[c as usize]))
        .collect();
    order.shuffle(&mut rng);
    let mut instances: Vec<Instance> = Vec::with_capacity(order.len());
    for class in order {
        let mut placed = None;
        for _ in 0..params.max_retries {
            let size = rng.gen_range(params.min_size..=params.max_size) as f64;
            let r = size / 2.0;
            let cx = rng.gen_range(r..w as f64 - r);
            let cy = rng.gen_range(r..h as f64 - r);
            let Some(inst) = rasterize(class, cx, cy, r, w, h) else { continue };
            if instances.iter().all(|o| o.bbox.iou(&inst.bbox) <= params.max_overlap) {
                placed = Some(inst);
                break;
            }
        }
        let inst = placed.ok_or_else(|| {
            Error::Placement(format!(
                "could not place a {} after {} attempts",
                super::CLASS_NAMES[class as usize],
                params.max_retries
            ))
        })?;
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-params.color_jitter..=params.color_jitter));
        let (x0, y0) = (inst.bbox.x as usize, inst.bbox.y as usize);
        let bw = inst.bbox.w as usize;
        for (i, _) in inst.mask.iter().enumerate().filter(|(_, &m)| m) {
            let (x, y) = (x0 + i % bw, y0 + i / bw);
            let shade = 0.06 * ((i / bw) as f64 / inst.bbox.h - 0.5);
            labels[y * w + x] = class;
            for ch in 0..3 {
                image[(y * w + x) * 3 + ch] = PALETTE[class as usize][ch] + jitter[ch] + shade + noise.sample(&mut rng);
            }
        }
        instances.push(inst);
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SyntheticScene {
        width: w,
        height: h,
        image,
        pixel_labels: labels,
        instances,
    })
}

//! Uncertainty grids and their text encodings.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const UMAP_MAGIC: &str = "UMAP 1";

/// Row-major `height x width` grid of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        UncertaintyMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        Ok(UncertaintyMap { width, height, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    /// `UMAP 1`, `width height`, then one line per row with six fractional digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("{UMAP_MAGIC}\n{} {}\n", self.width, self.height);
        for row in self.values.chunks(self.width.max(1)) {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(' ');
                }
                first = false;
                write!(s, "{v:.6}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(UMAP_MAGIC) {
            return Err(Error::Format(format!("missing `{UMAP_MAGIC}` header")));
        }
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| Error::Format("missing dimensions line".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad dimension `{t}`"))))
            .collect::<Result<_>>()?;
        let [width, height] = dims[..] else {
            return Err(Error::Format("dimensions line needs `width height`".into()));
        };
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing row {y}")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Format(format!("bad value `{t}` in row {y}"))))
                .collect::<Result<_>>()?;
            if row.len() != width {
                return Err(Error::Format(format!("row {y} has {} values, expected {width}", row.len())));
            }
            values.extend(row);
        }
        UncertaintyMap::new(width, height, values)
    }

    /// Plain 8-bit PGM where brighter means lower uncertainty.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.values.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|&t| pgm_level(t).to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// `round(255 * (1 - tau))`, clamped to the byte range.
pub fn pgm_level(tau: f64) -> u8 {
    (255.0 * (1.0 - tau)).round().clamp(0.0, 255.0) as u8
}

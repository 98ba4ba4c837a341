//! Binary masks, bounding boxes, and the box perturbation that simulates
//! clinician imprecision when drawing prompts.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Binary pixel grid; the ground-truth and predicted segmentation unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl Mask2D {
    /// `values` is row-major `height x width`, every element 0 or 1.
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "mask dimensions must be >= 1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "mask construction",
                format!("{} values", height * width),
                format!("{}", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask not binary: value {v}")));
        }
        Ok(Mask2D {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask2D {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(v <= 1);
        self.values[y * self.width + x] = v;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    /// True if every foreground pixel of `self` is foreground in `other`.
    pub fn subset_of(&self, other: &Mask2D) -> bool {
        self.height == other.height
            && self.width == other.width
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| a == 0 || b == 1)
    }
}

/// Integer pixel rectangle in the half-open convention
/// `[xmin, xmax) x [ymin, ymax)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub xmin: u32,
    pub ymin: u32,
    pub xmax: u32,
    pub ymax: u32,
}

impl BBox {
    pub fn new(xmin: u32, ymin: u32, xmax: u32, ymax: u32) -> Result<Self> {
        let b = BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        if xmin >= xmax || ymin >= ymax {
            return Err(Error::InvalidBox(format!("{b:?} has empty extent")));
        }
        Ok(b)
    }

    pub fn width(&self) -> u32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> u32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    /// Check the box against image bounds `(height, width)`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(Error::InvalidBox(format!("{self:?} has empty extent")));
        }
        if self.xmax as usize > width || self.ymax as usize > height {
            return Err(Error::InvalidBox(format!(
                "{self:?} exceeds image bounds {height}x{width}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.xmin && x < self.xmax && y >= self.ymin && y < self.ymax
    }
}

/// Per-role maximum absolute per-edge shift, in pixels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PerturbSpec {
    radii: BTreeMap<String, u32>,
}

impl PerturbSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, role: &str, radius: u32) -> Self {
        self.radii.insert(role.to_string(), radius);
        self
    }

    pub fn radius(&self, role: &str) -> u32 {
        self.radii.get(role).copied().unwrap_or(0)
    }

    pub fn roles(&self) -> impl Iterator<Item = (&str, u32)> {
        self.radii.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Threshold a real grid into a mask: output is 1 iff the value is strictly
/// greater than `threshold`.
pub fn binarize_mask<S: Scalar>(grid: &Tensor<S>, threshold: S) -> Result<Mask2D> {
    if grid.shape().len() != 2 {
        return Err(Error::shape(
            "binarize_mask",
            "2-D grid",
            format!("{:?}", grid.shape()),
        ));
    }
    if !grid.is_finite() {
        return Err(Error::NonFinite("binarize_mask input".into()));
    }
    let values = grid
        .data()
        .iter()
        .map(|&v| u8::from(v > threshold))
        .collect();
    Mask2D::new(grid.shape()[0], grid.shape()[1], values)
}

/// Tightest half-open box containing all foreground pixels.
pub fn mask_to_bbox(mask: &Mask2D) -> Result<BBox> {
    let mut xmin = usize::MAX;
    let mut ymin = usize::MAX;
    let mut xmax = 0usize;
    let mut ymax = 0usize;
    let mut found = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) == 1 {
                found = true;
                xmin = xmin.min(x);
                ymin = ymin.min(y);
                xmax = xmax.max(x);
                ymax = ymax.max(y);
            }
        }
    }
    if !found {
        return Err(Error::EmptyMask("mask_to_bbox needs >= 1 foreground pixel"));
    }
    BBox::new(xmin as u32, ymin as u32, xmax as u32 + 1, ymax as u32 + 1)
}

/// Shift each edge independently by a uniform integer in `[-radius, radius]`,
/// clamp to the image, and repair any axis that collapsed to a 1-pixel extent
/// at the original edge midpoint. Edges are drawn in the fixed order
/// (xmin, ymin, xmax, ymax).
pub fn perturb_bbox(
    bbox: &BBox,
    radius: u32,
    bounds: (usize, usize),
    rng: &mut impl Rng,
) -> Result<BBox> {
    let (height, width) = bounds;
    bbox.validate(height, width)?;
    let r = radius as i64;
    let mut draw = |edge: i64, limit: i64| -> i64 {
        let shift = if r == 0 { 0 } else { rng.random_range(-r..=r) };
        (edge + shift).clamp(0, limit)
    };
    let w = width as i64;
    let h = height as i64;
    let mut xmin = draw(bbox.xmin as i64, w);
    let mut ymin = draw(bbox.ymin as i64, h);
    let mut xmax = draw(bbox.xmax as i64, w);
    let mut ymax = draw(bbox.ymax as i64, h);

    if xmin >= xmax {
        let mid = ((bbox.xmin as i64 + bbox.xmax as i64) / 2).clamp(0, w - 1);
        xmin = mid;
        xmax = mid + 1;
    }
    if ymin >= ymax {
        let mid = ((bbox.ymin as i64 + bbox.ymax as i64) / 2).clamp(0, h - 1);
        ymin = mid;
        ymax = mid + 1;
    }
    BBox::new(xmin as u32, ymin as u32, xmax as u32, ymax as u32)
}

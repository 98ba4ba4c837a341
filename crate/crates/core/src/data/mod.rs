//! Synthetic dataset generation, 3-D volume slicing, splits, and the
//! on-disk sample format.

mod format;
mod split;
mod synth;
mod volume;

pub use format::{
    manifest_from_text, manifest_to_text, read_manifest, read_sample, read_volume, write_manifest,
    write_sample, write_volume,
};
pub use split::split_dataset;
pub use synth::{generate_dataset, generate_synthetic_sample, SyntheticConfig};
pub use volume::{slice_volume, SliceOutcome};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Mask2D;
use crate::tensor::Tensor;

/// Mask role present in every synthetic sample.
pub const ROLE_ORGAN: &str = "organ";
/// Mask role present in every synthetic sample.
pub const ROLE_LESION: &str = "lesion";

/// One 2-D image with at least one ground-truth mask per role.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case_id: String,
    /// Row-major `[H, W]` grid with values in [0, 1].
    pub image: Tensor<f32>,
    pub masks: BTreeMap<String, Mask2D>,
}

impl Sample {
    /// Check the type invariants: 2-D image in [0, 1], at least one mask,
    /// all masks matching the image shape.
    pub fn validate(&self) -> Result<()> {
        if self.case_id.is_empty() {
            return Err(Error::Validation("sample has empty case_id".into()));
        }
        if self.image.shape().len() != 2 {
            return Err(Error::shape(
                "sample image",
                "2-D grid",
                format!("{:?}", self.image.shape()),
            ));
        }
        if !self.image.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "sample {}: image values outside [0, 1]",
                self.case_id
            )));
        }
        if self.masks.is_empty() {
            return Err(Error::Validation(format!(
                "sample {} has no masks",
                self.case_id
            )));
        }
        let (h, w) = (self.image.shape()[0], self.image.shape()[1]);
        for (role, mask) in &self.masks {
            if mask.height() != h || mask.width() != w {
                return Err(Error::shape(
                    format!("sample {} mask '{}'", self.case_id, role),
                    format!("{h}x{w}"),
                    format!("{}x{}", mask.height(), mask.width()),
                ));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// A 3-D scan with per-role binary label volumes, sliced along z into
/// [`Sample`]s for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub case_id: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `[depth, H, W]`, values in [0, 1].
    pub image: Vec<f32>,
    /// Per-role row-major `[depth, H, W]` binary grids.
    pub masks: BTreeMap<String, Vec<u8>>,
}

impl Volume3D {
    pub fn validate(&self) -> Result<()> {
        if self.case_id.is_empty() {
            return Err(Error::Validation("volume has empty case_id".into()));
        }
        let n = self.depth * self.height * self.width;
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Validation(format!(
                "volume {} has zero extent",
                self.case_id
            )));
        }
        if self.image.len() != n {
            return Err(Error::shape(
                format!("volume {} image", self.case_id),
                format!("{n} values"),
                format!("{}", self.image.len()),
            ));
        }
        if self.masks.is_empty() {
            return Err(Error::Validation(format!(
                "volume {} has no masks",
                self.case_id
            )));
        }
        for (role, m) in &self.masks {
            if m.len() != n {
                return Err(Error::shape(
                    format!("volume {} mask '{}'", self.case_id, role),
                    format!("{n} values"),
                    format!("{}", m.len()),
                ));
            }
            if let Some(v) = m.iter().find(|&&v| v > 1) {
                return Err(Error::Validation(format!(
                    "volume {} mask '{}' not binary: value {v}",
                    self.case_id, role
                )));
            }
        }
        Ok(())
    }
}

/// Dataset split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::parse("split", format!("unknown split '{other}'"))),
        }
    }
}

/// Split bookkeeping plus an echo of the generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset: String,
    pub seed: u64,
    /// (case_id, split) in generation order.
    pub entries: Vec<(String, Split)>,
    /// Generation/slicing parameter echo.
    pub params: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Case ids assigned to one split, in manifest order.
    pub fn ids_for(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Splits must partition the id set: every id exactly once.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Validation("manifest has no cases".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in &self.entries {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate case_id '{id}'")));
            }
        }
        Ok(())
    }
}

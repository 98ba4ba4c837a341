//! Random z-axis slicing of labeled 3-D volumes into 2-D samples.

use std::collections::BTreeMap;

use rand::Rng;

use super::{Sample, Volume3D};
use crate::error::Result;
use crate::geometry::Mask2D;
use crate::tensor::Tensor;

/// Slices selected from a volume. `shortfall` is set when fewer eligible
/// slices existed than were requested.
#[derive(Debug, Clone)]
pub struct SliceOutcome {
    pub samples: Vec<Sample>,
    pub shortfall: bool,
}

/// Sample `slices_per_volume` z-indices uniformly without replacement from
/// the slices where every role's mask is non-empty. If fewer are eligible,
/// all of them are returned and `shortfall` is flagged instead of erroring.
/// Emitted samples are exact pass-throughs of the volume at the chosen z.
pub fn slice_volume(
    volume: &Volume3D,
    slices_per_volume: usize,
    rng: &mut impl Rng,
) -> Result<SliceOutcome> {
    volume.validate()?;
    if slices_per_volume == 0 {
        return Err(crate::error::Error::Validation(
            "slices_per_volume must be >= 1".into(),
        ));
    }
    let plane = volume.height * volume.width;
    let eligible: Vec<usize> = (0..volume.depth)
        .filter(|&z| {
            volume
                .masks
                .values()
                .all(|m| m[z * plane..(z + 1) * plane].iter().any(|&v| v == 1))
        })
        .collect();

    let (chosen, shortfall) = if eligible.len() <= slices_per_volume {
        (eligible.clone(), eligible.len() < slices_per_volume)
    } else {
        let mut picks = rand::seq::index::sample(rng, eligible.len(), slices_per_volume).into_vec();
        picks.sort_unstable();
        (picks.into_iter().map(|i| eligible[i]).collect(), false)
    };

    let samples = chosen
        .into_iter()
        .map(|z| {
            let image = volume.image[z * plane..(z + 1) * plane].to_vec();
            let mut masks = BTreeMap::new();
            for (role, m) in &volume.masks {
                masks.insert(
                    role.clone(),
                    Mask2D::new(volume.height, volume.width, m[z * plane..(z + 1) * plane].to_vec())?,
                );
            }
            Ok(Sample {
                case_id: format!("{}_z{:03}", volume.case_id, z),
                image: Tensor::new(vec![volume.height, volume.width], image)?,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SliceOutcome { samples, shortfall })
}

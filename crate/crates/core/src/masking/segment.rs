use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};
use crate::scene::SceneSpec;

/// Hole masks covering less than this fraction of the frame are rejected.
pub const MIN_MASK_FRACTION: f64 = 0.02;
/// Hole masks covering more than this fraction of the frame are rejected.
pub const MAX_MASK_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// The hole is the object itself.
    Inside,
    /// The hole is everything but the object.
    Outside,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Inside => "inside",
            Side::Outside => "outside",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inside" => Ok(Side::Inside),
            "outside" => Ok(Side::Outside),
            other => Err(Error::Parameter(format!("unknown side {other:?}"))),
        }
    }
}

/// Segmentation hole mask for one object, subject to the area filter.
pub fn gen_seg_mask(scene: &SceneSpec, object_index: usize, side: Side) -> Result<Mask> {
    let coverage = scene.coverage(object_index)?;
    let mask = match side {
        Side::Inside => coverage,
        Side::Outside => coverage.complement(),
    };
    let area = mask.coverage();
    if !(MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&area) {
        return Err(Error::FilterRejected(format!(
            "{side} mask of object {object_index} covers {:.2}% of the frame",
            area * 100.0
        )));
    }
    Ok(mask)
}

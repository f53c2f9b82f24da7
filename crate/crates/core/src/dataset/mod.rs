//! Face and group samples, class balancing, bootstrap replicas, image
//! preprocessing and the synthetic group-photo generator.

mod augment;
mod manifest;
mod sampling;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{
    augment, augment_with, denormalize, normalize, prepare_input, resize_bilinear, AugmentParams, INPUT_SIZE,
};
pub use manifest::{read_manifest, write_manifest, MANIFEST_FILE};
pub use sampling::{balance_subset, bootstrap_sample};
pub use synth::{synth_generate, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Happiness intensity bins 0 (neutral) through 5 (thrilled).
pub const NUM_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// A labelled face crop with its placement in the group photo.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    /// `3 x H x W`, values in `[0, 255]`.
    pub image: Tensor,
    pub label: usize,
    pub group_id: String,
    pub bbox: BBox,
}

impl FaceSample {
    pub fn new(image: Tensor, label: usize, group_id: impl Into<String>, bbox: BBox) -> Result<Self> {
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { label, classes: NUM_CLASSES });
        }
        if !(bbox.area() > 0.0) {
            return Err(Error::DegenerateGeometry(format!("bounding box {bbox:?} has no area")));
        }
        if image.rank() != 3 || image.dim(0) != 3 {
            return Err(Error::shape("FaceSample", image.shape(), &[3, 0, 0]));
        }
        Ok(FaceSample { image, label, group_id: group_id.into(), bbox })
    }

    pub fn bbox_area_px(&self) -> f64 {
        self.bbox.area()
    }

    pub fn centroid(&self) -> (f64, f64) {
        self.bbox.centroid()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSample {
    pub group_id: String,
    pub faces: Vec<FaceSample>,
    pub group_label: usize,
}

impl GroupSample {
    pub fn new(group_id: impl Into<String>, faces: Vec<FaceSample>, group_label: usize) -> Result<Self> {
        let group_id = group_id.into();
        if faces.is_empty() {
            return Err(Error::Empty("group faces"));
        }
        if let Some(f) = faces.iter().find(|f| f.group_id != group_id) {
            return Err(Error::Format(format!("face of group `{}` listed under group `{group_id}`", f.group_id)));
        }
        if group_label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { label: group_label, classes: NUM_CLASSES });
        }
        Ok(GroupSample { group_id, faces, group_label })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub groups: Vec<GroupSample>,
    pub per_class_counts: [usize; NUM_CLASSES],
}

impl DatasetManifest {
    pub fn new(split: Split, groups: Vec<GroupSample>) -> Self {
        let per_class_counts = class_counts(groups.iter().flat_map(|g| &g.faces));
        DatasetManifest { split, groups, per_class_counts }
    }

    pub fn faces(&self) -> impl Iterator<Item = &FaceSample> {
        self.groups.iter().flat_map(|g| g.faces.iter())
    }

    pub fn face_count(&self) -> usize {
        self.groups.iter().map(|g| g.faces.len()).sum()
    }

    /// Checks that the stored class histogram matches the faces.
    pub fn validate(&self) -> Result<()> {
        let actual = class_counts(self.faces());
        if actual != self.per_class_counts {
            return Err(Error::Format(format!(
                "per-class counts {:?} disagree with faces {actual:?}",
                self.per_class_counts
            )));
        }
        Ok(())
    }
}

pub fn class_counts<'a>(faces: impl IntoIterator<Item = &'a FaceSample>) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for f in faces {
        counts[f.label] += 1;
    }
    counts
}

//! Synthetic lesion datasets, dataset ingestion and the paired-view augmentation
//! used by self-supervised pre-training.

mod augment;
mod load;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{two_view_augment, AugmentConfig, ViewPair};
pub use load::load_dataset;
pub use synth::{
    generate_synthetic_dataset, render_sample, LesionKind, LesionRecipe, RenderedSample, SplitCounts, SyntheticSpec,
};

use crate::geometry::BBox;
use crate::raster::Image;

pub const LABELS_MANIFEST: &str = "labels.jsonl";
pub const BOXES_MANIFEST: &str = "boxes.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// The split named by the first component of a dataset-relative path; anything else counts as training data.
    pub fn of_path(path: &Path) -> Split {
        match path.components().next().and_then(|c| c.as_os_str().to_str()) {
            Some("val") => Split::Val,
            Some("test") => Split::Test,
            _ => Split::Train,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub split: Split,
    pub image: Image,
    pub label: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    /// Sorted; a sample's label indexes into this list.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Files ignored during folder ingestion (unsupported extension).
    pub skipped: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The class whose samples carry lesion boxes, when exactly one does.
    pub fn lesion_class(&self) -> Option<usize> {
        let mut with_boxes: Vec<usize> = self
            .samples
            .iter()
            .filter(|s| !s.boxes.is_empty())
            .map(|s| s.label)
            .collect();
        with_boxes.sort_unstable();
        with_boxes.dedup();
        match with_boxes.as_slice() {
            [k] => Some(*k),
            _ => None,
        }
    }
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub path: String,
    pub label: LabelName,
}

/// One line of `boxes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub path: String,
    pub label: LabelName,
    pub boxes: Vec<BBox>,
}

/// Class label as written in a manifest; numeric labels are accepted and treated as names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelName {
    Name(String),
    Id(u64),
}

impl LabelName {
    pub fn into_name(self) -> String {
        match self {
            LabelName::Name(s) => s,
            LabelName::Id(i) => i.to_string(),
        }
    }
}

#[cfg(test)]
mod tests;

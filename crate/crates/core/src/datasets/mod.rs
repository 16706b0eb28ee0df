//! Labelled detection datasets, clean/corrupted view pairs and the synthetic
//! shape benchmark.

pub mod coco;
pub mod synth;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::corruptions::{apply_corruption, sample_spec, CorruptionPool, CorruptionSpec};
use crate::error::Result;
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    /// Foreground class in `1..=K`; 0 is reserved for background.
    pub class_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub image_id: String,
    pub image: ImageTensor,
    pub labels: Vec<BoxLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleKind {
    Source,
    Target,
}

/// How a dataset is being loaded. Targets carry the source label space and
/// are rejected unless their class list matches it exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetRole {
    Source,
    Target { source_classes: Vec<String> },
}

impl DatasetRole {
    pub fn kind(&self) -> RoleKind {
        match self {
            DatasetRole::Source => RoleKind::Source,
            DatasetRole::Target { .. } => RoleKind::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub num_samples: usize,
    pub role: RoleKind,
}

/// Lazily reads images in ascending annotation-id order.
pub struct SampleIter {
    entries: std::vec::IntoIter<coco::ImageEntry>,
}

impl Iterator for SampleIter {
    type Item = Result<DatasetSample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.entries.next().map(|e| e.load())
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.entries.size_hint()
    }
}

/// Opens a COCO-style dataset directory (`annotations.json` + `images/`).
/// All annotations are validated before the iterator is returned.
pub fn load_dataset(path: &Path, role: DatasetRole) -> Result<(DatasetMeta, SampleIter)> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let ann = coco::read_annotations(path, &name, role)?;
    Ok((ann.meta, SampleIter { entries: ann.entries.into_iter() }))
}

/// Loads every sample into memory.
pub fn load_all(path: &Path, role: DatasetRole) -> Result<(DatasetMeta, Vec<DatasetSample>)> {
    let (meta, iter) = load_dataset(path, role)?;
    let samples = iter.collect::<Result<Vec<_>>>()?;
    Ok((meta, samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub image_id: String,
    pub original: ImageTensor,
    pub augmented: ImageTensor,
    pub labels: Vec<BoxLabel>,
    pub spec: CorruptionSpec,
}

/// Samples a corruption from `pool`, applies it with a seed drawn from the
/// same generator and pairs the result with the untouched labels.
pub fn make_view_pair(sample: &DatasetSample, pool: &CorruptionPool, rng: &mut impl Rng) -> Result<ViewPair> {
    let spec = sample_spec(pool, rng)?;
    let seed = rng.next_u64();
    let augmented = apply_corruption(&sample.image, &spec, seed)?;
    Ok(ViewPair {
        image_id: sample.image_id.clone(),
        original: sample.image.clone(),
        augmented,
        labels: sample.labels.clone(),
        spec,
    })
}

#[cfg(test)]
mod tests;

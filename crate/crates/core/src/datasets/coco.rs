//! COCO-style annotation files: `images[]`, `annotations[]` with `bbox` in
//! `[x, y, width, height]` pixels, and `categories[]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BoxLabel, DatasetMeta, DatasetRole, DatasetSample};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default)]
    pub info: Option<serde_json::Value>,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// A parsed and validated annotation file; images are read on demand.
#[derive(Debug, Clone)]
pub struct Annotations {
    pub meta: DatasetMeta,
    pub root: PathBuf,
    pub entries: Vec<ImageEntry>,
}

#[derive(Debug, Clone)]
pub struct ImageEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub labels: Vec<BoxLabel>,
}

pub fn read_annotations(root: &Path, name: &str, role: DatasetRole) -> Result<Annotations> {
    let ann_path = root.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let file: CocoFile =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", ann_path.display())))?;
    parse(root, name, role, file)
}

fn parse(root: &Path, name: &str, role: DatasetRole, file: CocoFile) -> Result<Annotations> {
    if file.categories.is_empty() {
        return Err(Error::Schema("no categories".into()));
    }
    let mut cats = file.categories.clone();
    cats.sort_by_key(|c| c.id);
    let mut class_of = HashMap::new();
    for (i, c) in cats.iter().enumerate() {
        if class_of.insert(c.id, i as u32 + 1).is_some() {
            return Err(Error::Schema(format!("duplicate category id {}", c.id)));
        }
    }
    let class_names: Vec<String> = cats.iter().map(|c| c.name.clone()).collect();
    if let DatasetRole::Target { source_classes } = &role {
        if source_classes != &class_names {
            return Err(Error::LabelSpaceMismatch {
                expected: source_classes.clone(),
                found: class_names,
            });
        }
    }

    let mut images: BTreeMap<u64, &CocoImage> = BTreeMap::new();
    let mut file_ids = HashSet::new();
    for img in &file.images {
        if images.insert(img.id, img).is_some() {
            return Err(Error::Schema(format!("duplicate image id {}", img.id)));
        }
        if !file_ids.insert(img.file_name.as_str()) {
            return Err(Error::Schema(format!("duplicate file name {}", img.file_name)));
        }
    }

    let mut labels: BTreeMap<u64, Vec<BoxLabel>> = BTreeMap::new();
    for ann in &file.annotations {
        let img = images
            .get(&ann.image_id)
            .ok_or_else(|| Error::Schema(format!("annotation {} references unknown image {}", ann.id, ann.image_id)))?;
        let class_id = *class_of
            .get(&ann.category_id)
            .ok_or_else(|| Error::Schema(format!("annotation {} has unknown category {}", ann.id, ann.category_id)))?;
        let [x, y, w, h] = ann.bbox;
        let raw = BBox::from_xywh(x, y, w, h);
        if !raw.is_valid() {
            return Err(Error::Schema(format!(
                "annotation {}: box {:?} has x2 <= x1 or y2 <= y1",
                ann.id,
                raw.to_array()
            )));
        }
        let bbox = raw.clamp_to(img.width as f64, img.height as f64);
        if !bbox.is_valid() {
            return Err(Error::Schema(format!("annotation {}: box lies outside the image", ann.id)));
        }
        labels.entry(ann.image_id).or_default().push(BoxLabel { class_id, bbox });
    }

    let image_root = root.join(IMAGE_DIR);
    let mut entries = Vec::with_capacity(images.len());
    for (id, img) in images {
        let path = image_root.join(&img.file_name);
        if !path.exists() {
            return Err(Error::MissingImage(path));
        }
        entries.push(ImageEntry {
            image_id: Path::new(&img.file_name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| id.to_string()),
            path,
            width: img.width,
            height: img.height,
            labels: labels.remove(&id).unwrap_or_default(),
        });
    }
    let meta = DatasetMeta {
        name: name.to_string(),
        num_classes: class_names.len(),
        class_names,
        num_samples: entries.len(),
        role: role.kind(),
    };
    Ok(Annotations { meta, root: root.to_path_buf(), entries })
}

impl ImageEntry {
    pub fn load(&self) -> Result<DatasetSample> {
        let image = ImageTensor::load(&self.path)?;
        if image.width() != self.width as usize || image.height() != self.height as usize {
            return Err(Error::Schema(format!(
                "{}: annotated size {}x{} differs from file {}x{}",
                self.path.display(),
                self.width,
                self.height,
                image.width(),
                image.height()
            )));
        }
        Ok(DatasetSample { image_id: self.image_id.clone(), image, labels: self.labels.clone() })
    }
}

/// Writes `annotations.json` plus `images/<image_id>.png`.
pub fn write_dataset(root: &Path, class_names: &[String], samples: &[DatasetSample]) -> Result<()> {
    let image_dir = root.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut file = CocoFile {
        categories: class_names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.clone() })
            .collect(),
        ..Default::default()
    };
    let mut ann_id = 1;
    for (i, s) in samples.iter().enumerate() {
        let file_name = format!("{}.png", s.image_id);
        s.image.save_png(&image_dir.join(&file_name))?;
        let image_id = i as u64 + 1;
        file.images.push(CocoImage {
            id: image_id,
            file_name,
            width: s.image.width() as u32,
            height: s.image.height() as u32,
        });
        for l in &s.labels {
            let b = l.bbox;
            file.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: l.class_id as u64,
                bbox: [b.x1, b.y1, b.width(), b.height()],
                area: Some(b.area()),
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    let path = root.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

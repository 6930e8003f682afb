//! COCO-style polygon datasets: parsing, canonical re-emission, splitting and
//! per-category ground-truth masks.
//!
//! Only polygon segmentations are supported. Void annotations live under a reserved
//! category named `"void"`; they never contribute to ground-truth masks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DatasetError;
use crate::imaging::{rasterize_polygon, BinaryMask, Point};

pub const VOID_CATEGORY_NAME: &str = "void";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub polygons: Vec<Vec<Point>>,
    pub is_void: bool,
}

/// A fully linked dataset. Construct through [`parse_dataset`] or [`Dataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageInfo>,
    categories: Vec<Category>,
    annotations: Vec<Annotation>,
    image_root: PathBuf,
}

impl Dataset {
    /// Validates referential integrity and polygon shape. `is_void` flags are
    /// derived from the reserved void category.
    pub fn new(
        images: Vec<ImageInfo>,
        categories: Vec<Category>,
        mut annotations: Vec<Annotation>,
        image_root: impl Into<PathBuf>,
    ) -> Result<Self, DatasetError> {
        let mut image_ids = BTreeSet::new();
        for img in &images {
            if img.width == 0 || img.height == 0 {
                return Err(DatasetError::EmptyImage(img.id));
            }
            if !image_ids.insert(img.id) {
                return Err(DatasetError::DuplicateId { kind: "image", id: img.id });
            }
        }
        let mut category_ids = BTreeSet::new();
        for cat in &categories {
            if !category_ids.insert(cat.id) {
                return Err(DatasetError::DuplicateId { kind: "category", id: cat.id });
            }
        }
        let void_id = categories
            .iter()
            .find(|c| c.name == VOID_CATEGORY_NAME)
            .map(|c| c.id);
        let mut ann_ids = BTreeSet::new();
        for ann in &mut annotations {
            if !ann_ids.insert(ann.id) {
                return Err(DatasetError::DuplicateId { kind: "annotation", id: ann.id });
            }
            if !image_ids.contains(&ann.image_id) {
                return Err(DatasetError::UnknownImage(ann.image_id));
            }
            if !category_ids.contains(&ann.category_id) {
                return Err(DatasetError::UnknownCategory(ann.category_id));
            }
            for poly in &ann.polygons {
                if poly.len() < 3 {
                    return Err(DatasetError::DegeneratePolygon {
                        annotation: ann.id,
                        vertices: poly.len(),
                    });
                }
                if poly.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(DatasetError::NonFiniteCoordinate(ann.id));
                }
            }
            ann.is_void = Some(ann.category_id) == void_id;
        }
        Ok(Self {
            images,
            categories,
            annotations,
            image_root: image_root.into(),
        })
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn image_root(&self) -> &Path {
        &self.image_root
    }

    pub fn image(&self, id: u64) -> Result<&ImageInfo, DatasetError> {
        self.images
            .iter()
            .find(|i| i.id == id)
            .ok_or(DatasetError::UnknownImage(id))
    }

    pub fn category(&self, id: u64) -> Result<&Category, DatasetError> {
        self.categories
            .iter()
            .find(|c| c.id == id)
            .ok_or(DatasetError::UnknownCategory(id))
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn image_path(&self, id: u64) -> Result<PathBuf, DatasetError> {
        Ok(self.image_root.join(&self.image(id)?.file_name))
    }

    pub fn void_category_id(&self) -> Option<u64> {
        self.category_by_name(VOID_CATEGORY_NAME).map(|c| c.id)
    }

    /// Categories that carry real labels (everything except void).
    pub fn labeled_categories(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter().filter(|c| c.name != VOID_CATEGORY_NAME)
    }

    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    pub fn next_annotation_id(&self) -> u64 {
        self.annotations.iter().map(|a| a.id + 1).max().unwrap_or(1)
    }

    /// Returns the void category id, creating it above every existing id if absent.
    pub fn ensure_void_category(&mut self) -> u64 {
        if let Some(id) = self.void_category_id() {
            return id;
        }
        let id = self.categories.iter().map(|c| c.id + 1).max().unwrap_or(1);
        self.categories.push(Category {
            id,
            name: VOID_CATEGORY_NAME.to_string(),
        });
        id
    }

    #[cfg(test)]
    pub(crate) fn annotations_mut(&mut self) -> &mut Vec<Annotation> {
        &mut self.annotations
    }

    /// Sub-dataset restricted to the given image ids, keeping all categories.
    pub fn subset(&self, image_ids: &BTreeSet<u64>) -> Dataset {
        Dataset {
            images: self
                .images
                .iter()
                .filter(|i| image_ids.contains(&i.id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| image_ids.contains(&a.image_id))
                .cloned()
                .collect(),
            image_root: self.image_root.clone(),
        }
    }

    /// Hex SHA-256 of the canonical document.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(write_dataset(self)))
    }
}

#[derive(Deserialize)]
struct RawDocument {
    images: Vec<RawImage>,
    categories: Vec<RawCategory>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: serde_json::Value,
}

fn parse_segmentation(ann_id: u64, seg: &serde_json::Value) -> Result<Vec<Vec<Point>>, DatasetError> {
    let polys = match seg {
        serde_json::Value::Array(polys) => polys,
        serde_json::Value::Object(_) => return Err(DatasetError::RleUnsupported(ann_id)),
        _ => return Err(DatasetError::BadSegmentation(ann_id)),
    };
    polys
        .iter()
        .map(|poly| {
            let coords = poly
                .as_array()
                .ok_or(DatasetError::BadSegmentation(ann_id))?
                .iter()
                .map(|v| v.as_f64().ok_or(DatasetError::BadSegmentation(ann_id)))
                .collect::<Result<Vec<f64>, _>>()?;
            if coords.len() % 2 != 0 {
                return Err(DatasetError::BadSegmentation(ann_id));
            }
            Ok(coords.chunks_exact(2).map(|xy| [xy[0], xy[1]]).collect())
        })
        .collect()
}

/// Parses a COCO-style JSON document. Unknown fields are ignored.
pub fn parse_dataset(bytes: &[u8], image_root: impl Into<PathBuf>) -> Result<Dataset, DatasetError> {
    let raw: RawDocument = serde_json::from_slice(bytes)?;
    let annotations = raw
        .annotations
        .iter()
        .map(|a| {
            Ok(Annotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                polygons: parse_segmentation(a.id, &a.segmentation)?,
                is_void: false,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Dataset::new(
        raw.images
            .into_iter()
            .map(|i| ImageInfo {
                id: i.id,
                file_name: i.file_name,
                width: i.width,
                height: i.height,
            })
            .collect(),
        raw.categories
            .into_iter()
            .map(|c| Category { id: c.id, name: c.name })
            .collect(),
        annotations,
        image_root,
    )
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_dataset(&bytes, root)
}

// Field order is alphabetical so the output is sorted regardless of serde_json features.
#[derive(Serialize)]
struct OutDocument<'a> {
    annotations: Vec<OutAnnotation>,
    categories: Vec<OutCategory<'a>>,
    images: Vec<OutImage<'a>>,
}

#[derive(Serialize)]
struct OutAnnotation {
    category_id: u64,
    id: u64,
    image_id: u64,
    segmentation: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct OutCategory<'a> {
    id: u64,
    name: &'a str,
}

#[derive(Serialize)]
struct OutImage<'a> {
    file_name: &'a str,
    height: usize,
    id: u64,
    width: usize,
}

/// Canonical COCO-style document with sorted keys.
pub fn write_dataset(ds: &Dataset) -> Vec<u8> {
    let doc = OutDocument {
        annotations: ds
            .annotations
            .iter()
            .map(|a| OutAnnotation {
                category_id: a.category_id,
                id: a.id,
                image_id: a.image_id,
                segmentation: a
                    .polygons
                    .iter()
                    .map(|p| p.iter().flat_map(|xy| [xy[0], xy[1]]).collect())
                    .collect(),
            })
            .collect(),
        categories: ds
            .categories
            .iter()
            .map(|c| OutCategory { id: c.id, name: &c.name })
            .collect(),
        images: ds
            .images
            .iter()
            .map(|i| OutImage {
                file_name: &i.file_name,
                height: i.height,
                id: i.id,
                width: i.width,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("dataset serialization is infallible");
    out.push(b'\n');
    out
}

fn scale_polygon(poly: &[Point], sx: f64, sy: f64) -> Vec<Point> {
    // half-pixel-center convention, matching resize_bilinear
    poly.iter()
        .map(|p| [(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5])
        .collect()
}

fn annotation_mask(ann: &Annotation, img: &ImageInfo, out_h: usize, out_w: usize) -> BinaryMask {
    let sx = out_w as f64 / img.width as f64;
    let sy = out_h as f64 / img.height as f64;
    let mut mask = BinaryMask::empty(out_h, out_w);
    for poly in &ann.polygons {
        let poly = if out_h == img.height && out_w == img.width {
            poly.clone()
        } else {
            scale_polygon(poly, sx, sy)
        };
        // polygons are validated at construction
        let m = rasterize_polygon(&poly, out_h, out_w).expect("validated polygon");
        mask = mask.union(&m);
    }
    mask
}

/// Mask of a single annotation at the native image resolution.
pub fn build_annotation_mask(ds: &Dataset, annotation_id: u64) -> Result<BinaryMask, DatasetError> {
    let ann = ds
        .annotations
        .iter()
        .find(|a| a.id == annotation_id)
        .ok_or(DatasetError::UnknownAnnotation(annotation_id))?;
    let img = ds.image(ann.image_id)?;
    Ok(annotation_mask(ann, img, img.height, img.width))
}

/// Union of the non-void polygons of `category_id` on `image_id`.
pub fn build_category_masks(
    ds: &Dataset,
    image_id: u64,
    category_id: u64,
) -> Result<BinaryMask, DatasetError> {
    let img = ds.image(image_id)?;
    build_category_mask_resized(ds, image_id, category_id, img.height, img.width)
}

/// Same as [`build_category_masks`] but rasterized at another resolution.
pub fn build_category_mask_resized(
    ds: &Dataset,
    image_id: u64,
    category_id: u64,
    out_h: usize,
    out_w: usize,
) -> Result<BinaryMask, DatasetError> {
    let img = ds.image(image_id)?;
    ds.category(category_id)?;
    Ok(ds
        .annotations_for(image_id)
        .filter(|a| a.category_id == category_id && !a.is_void)
        .fold(BinaryMask::empty(out_h, out_w), |acc, a| {
            acc.union(&annotation_mask(a, img, out_h, out_w))
        }))
}

/// Union of every void annotation on the image.
pub fn build_void_mask(ds: &Dataset, image_id: u64) -> Result<BinaryMask, DatasetError> {
    let img = ds.image(image_id)?;
    Ok(ds
        .annotations_for(image_id)
        .filter(|a| a.is_void)
        .fold(BinaryMask::empty(img.height, img.width), |acc, a| {
            acc.union(&annotation_mask(a, img, img.height, img.width))
        }))
}

/// Union of every labeled (non-void) annotation on the image.
pub fn build_labeled_mask(ds: &Dataset, image_id: u64) -> Result<BinaryMask, DatasetError> {
    let img = ds.image(image_id)?;
    Ok(ds
        .annotations_for(image_id)
        .filter(|a| !a.is_void)
        .fold(BinaryMask::empty(img.height, img.width), |acc, a| {
            acc.union(&annotation_mask(a, img, img.height, img.width))
        }))
}

/// Per-pixel label map: 0 for background, otherwise the category id; later
/// annotations overwrite earlier ones. Void pixels take `void_label`.
pub fn build_label_map(ds: &Dataset, image_id: u64, void_label: u64) -> Result<Vec<u64>, DatasetError> {
    let img = ds.image(image_id)?;
    let mut labels = vec![0u64; img.height * img.width];
    for ann in ds.annotations_for(image_id) {
        let mask = annotation_mask(ann, img, img.height, img.width);
        let label = if ann.is_void { void_label } else { ann.category_id };
        for (l, set) in labels.iter_mut().zip(mask.bits()) {
            if *set {
                *l = label;
            }
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self, DatasetError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DatasetError::BadFraction(train_fraction));
        }
        Ok(Self { train_fraction, seed })
    }
}

/// Seeded per-image split; the training side receives `ceil(f * n)` images.
pub fn split_dataset(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset), DatasetError> {
    if ds.images.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    SplitSpec::new(spec.train_fraction, spec.seed)?;
    let mut ids: Vec<u64> = ds.images.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_fraction * ids.len() as f64).ceil() as usize;
    let train: BTreeSet<u64> = ids[..n_train].iter().copied().collect();
    let val: BTreeSet<u64> = ids[n_train..].iter().copied().collect();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Annotation counts per category name, for summaries.
pub fn category_histogram(ds: &Dataset) -> BTreeMap<String, usize> {
    let names: HashMap<u64, &str> = ds.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut out = BTreeMap::new();
    for a in &ds.annotations {
        *out.entry(names[&a.category_id].to_string()).or_insert(0) += 1;
    }
    out
}

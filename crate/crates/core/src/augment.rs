//! Annotation augmentation (enlargement of thin objects, void regions), the
//! seeded image augmentation pipeline, and mask-to-polygon conversion.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::{image_png, load_image, write_bytes};
use crate::dataset::{build_annotation_mask, build_labeled_mask, Annotation, Dataset, ImageInfo};
use crate::error::{AugmentError, DatasetError};
use crate::imaging::{
    bbox_of_mask, blur_plane, dilate_mask, rasterize_polygon, reflect_index, BinaryMask, ImageTensor, Point, RangeTag,
};

// --- mask to polygons -------------------------------------------------------------

const MOORE: [(isize, isize); 8] = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)];

fn components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.bits()[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for (dr, dc) in MOORE {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if mask.bits()[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Moore-neighbour boundary trace through pixel centers, starting at the
/// first pixel in row-major order.
fn moore_trace(comp: &BinaryMask, start: usize) -> Vec<Point> {
    let (h, w) = (comp.height() as isize, comp.width() as isize);
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && comp.get(r as usize, c as usize);
    let s = ((start / comp.width()) as isize, (start % comp.width()) as isize);
    let mut cur = s;
    let mut back = (s.0, s.1 - 1);
    let first_back = back;
    let mut trace = vec![[s.1 as f64, s.0 as f64]];
    let limit = 4 * (comp.count() + 1) + 8;
    for _ in 0..limit {
        let bd = MOORE
            .iter()
            .position(|d| (cur.0 + d.0, cur.1 + d.1) == back)
            .expect("backtrack cell is a neighbour");
        let mut next = None;
        for k in 1..=8 {
            let d = MOORE[(bd + k) % 8];
            let cand = (cur.0 + d.0, cur.1 + d.1);
            if inside(cand.0, cand.1) {
                let prev = MOORE[(bd + k - 1) % 8];
                back = (cur.0 + prev.0, cur.1 + prev.1);
                next = Some(cand);
                break;
            }
        }
        let Some(n) = next else { break };
        cur = n;
        if cur == s && back == first_back {
            break;
        }
        trace.push([cur.1 as f64, cur.0 as f64]);
    }
    simplify(trace)
}

// Drops vertices lying strictly between their neighbours on a straight run.
fn simplify(points: Vec<Point>) -> Vec<Point> {
    if points.len() < 4 {
        return points;
    }
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b, c) = (points[(i + n - 1) % n], points[i], points[(i + 1) % n]);
        let d1 = [b[0] - a[0], b[1] - a[1]];
        let d2 = [c[0] - b[0], c[1] - b[1]];
        let cross = d1[0] * d2[1] - d1[1] * d2[0];
        let dot = d1[0] * d2[0] + d1[1] * d2[1];
        if cross == 0.0 && dot > 0.0 {
            continue;
        }
        out.push(b);
    }
    out
}

fn rect_decomposition(comp: &BinaryMask) -> Vec<Vec<Point>> {
    let (h, w) = (comp.height(), comp.width());
    let mut open: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rects = Vec::new();
    for r in 0..=h {
        let mut runs = BTreeSet::new();
        if r < h {
            let mut c = 0;
            while c < w {
                if comp.get(r, c) {
                    let c0 = c;
                    while c < w && comp.get(r, c) {
                        c += 1;
                    }
                    runs.insert((c0, c - 1));
                } else {
                    c += 1;
                }
            }
        }
        let mut next = BTreeMap::new();
        for (run, top) in std::mem::take(&mut open) {
            if runs.remove(&run) {
                next.insert(run, top);
            } else {
                rects.push((top, r - 1, run.0, run.1));
            }
        }
        for run in runs {
            next.insert(run, r);
        }
        open = next;
    }
    rects.sort_unstable();
    rects
        .into_iter()
        .map(|(r0, r1, c0, c1)| {
            let (x0, x1) = (c0 as f64 - 0.5, c1 as f64 + 0.5);
            let (y0, y1) = (r0 as f64 - 0.5, r1 as f64 + 0.5);
            vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
        })
        .collect()
}

#[cfg(test)]
fn rasterize_all(polys: &[Vec<Point>], h: usize, w: usize) -> BinaryMask {
    polys.iter().fold(BinaryMask::empty(h, w), |acc, p| {
        acc.union(&rasterize_polygon(p, h, w).expect("polygon has at least 3 vertices"))
    })
}

/// Polygons whose union rasterizes exactly to `mask`. Each 8-connected
/// component is traced; components the trace cannot reproduce (holes, slivers)
/// fall back to a rectangle decomposition.
pub fn mask_to_polygons(mask: &BinaryMask) -> Vec<Vec<Point>> {
    let (h, w) = (mask.height(), mask.width());
    let mut polys = Vec::new();
    for comp in components(mask) {
        let mut cm = BinaryMask::empty(h, w);
        for &p in &comp {
            cm.set(p / w, p % w, true);
        }
        let trace = moore_trace(&cm, comp[0]);
        if trace.len() >= 3 && rasterize_polygon(&trace, h, w).is_ok_and(|m| m == cm) {
            polys.push(trace);
        } else {
            polys.extend(rect_decomposition(&cm));
        }
    }
    polys
}

// --- annotation augmentation --------------------------------------------------------

pub const DEFAULT_THIN_THRESHOLD: usize = 10;

/// Which annotations [`enlarge_annotations`] dilates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnlargeSpec {
    pub categories: BTreeSet<u64>,
    pub radius: usize,
    /// Only annotations whose bounding box has a side no longer than this grow.
    pub thin_threshold: usize,
    /// Restrict to these images; `None` means every image.
    #[serde(default)]
    pub images: Option<BTreeSet<u64>>,
}

impl EnlargeSpec {
    pub fn new(categories: impl IntoIterator<Item = u64>, radius: usize) -> Self {
        Self { categories: categories.into_iter().collect(), radius, thin_threshold: DEFAULT_THIN_THRESHOLD, images: None }
    }
}

/// Dilates thin annotations of the targeted categories and re-derives their polygons.
pub fn enlarge_annotations(ds: &Dataset, spec: &EnlargeSpec) -> Result<Dataset, AugmentError> {
    for c in &spec.categories {
        ds.category(*c)?;
    }
    let mut annotations = ds.annotations().to_vec();
    for ann in annotations.iter_mut() {
        if ann.is_void
            || !spec.categories.contains(&ann.category_id)
            || spec.images.as_ref().is_some_and(|ids| !ids.contains(&ann.image_id))
        {
            continue;
        }
        let mask = build_annotation_mask(ds, ann.id)?;
        let Ok(bbox) = bbox_of_mask(&mask) else { continue };
        if bbox.min_side() > spec.thin_threshold {
            continue;
        }
        ann.polygons = mask_to_polygons(&dilate_mask(&mask, spec.radius));
    }
    Ok(Dataset::new(ds.images().to_vec(), ds.categories().to_vec(), annotations, ds.image_root())?)
}

/// Adds a void annotation covering `polygons` minus every labeled pixel.
pub fn add_void_annotation(ds: &Dataset, image_id: u64, polygons: &[Vec<Point>]) -> Result<Dataset, AugmentError> {
    let info = ds.image(image_id)?;
    if polygons.is_empty() {
        return Err(AugmentError::BadParameter { transform: "add_void".into(), message: "no polygons".into() });
    }
    let mut region = BinaryMask::empty(info.height, info.width);
    for poly in polygons {
        if poly.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFiniteCoordinate(ds.next_annotation_id()).into());
        }
        region = region.union(&rasterize_polygon(poly, info.height, info.width)?);
    }
    let clipped = region.difference(&build_labeled_mask(ds, image_id)?);
    let id = ds.next_annotation_id();
    if clipped.is_empty() {
        return Err(AugmentError::EmptyAfterClip(id));
    }
    let mut out = ds.clone();
    let void = out.ensure_void_category();
    let mut annotations = out.annotations().to_vec();
    annotations.push(Annotation { id, image_id, category_id: void, polygons: mask_to_polygons(&clipped), is_void: true });
    Ok(Dataset::new(out.images().to_vec(), out.categories().to_vec(), annotations, ds.image_root())?)
}

// --- decisions ----------------------------------------------------------------------

/// Review sample key: one `(image, category)` pair, written `"{image_id}-{category_id}"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId {
    pub image_id: u64,
    pub category_id: u64,
}

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.image_id, self.category_id)
    }
}

impl std::str::FromStr for SampleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once('-').ok_or_else(|| format!("malformed sample id {s:?}"))?;
        Ok(Self {
            image_id: a.parse().map_err(|_| format!("malformed sample id {s:?}"))?,
            category_id: b.parse().map_err(|_| format!("malformed sample id {s:?}"))?,
        })
    }
}

impl Serialize for SampleId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SampleId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Expert action on a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecisionAction {
    Enlarge {
        radius: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        thin_threshold: Option<usize>,
    },
    AddVoid {
        polygons: Vec<Vec<Point>>,
    },
    Note {
        text: String,
    },
}

impl DecisionAction {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |message: &str| AugmentError::BadParameter { transform: self.name().into(), message: message.into() };
        match self {
            DecisionAction::AddVoid { polygons } => {
                if polygons.is_empty() {
                    return Err(bad("at least one polygon required"));
                }
                if let Some(p) = polygons.iter().find(|p| p.len() < 3) {
                    return Err(bad(&format!("polygon with {} vertices", p.len())));
                }
                if polygons.iter().flatten().flatten().any(|v| !v.is_finite()) {
                    return Err(bad("non-finite coordinate"));
                }
                Ok(())
            }
            DecisionAction::Note { text } if text.trim().is_empty() => Err(bad("empty note")),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecisionAction::Enlarge { .. } => "enlarge",
            DecisionAction::AddVoid { .. } => "add_void",
            DecisionAction::Note { .. } => "note",
        }
    }
}

/// Applies one decision with the same calls a user would make directly.
pub fn apply_decision(ds: &Dataset, sample: SampleId, action: &DecisionAction) -> Result<Dataset, AugmentError> {
    action.validate()?;
    match action {
        DecisionAction::Enlarge { radius, thin_threshold } => {
            let mut spec = EnlargeSpec::new([sample.category_id], *radius);
            spec.thin_threshold = thin_threshold.unwrap_or(DEFAULT_THIN_THRESHOLD);
            spec.images = Some(BTreeSet::from([sample.image_id]));
            enlarge_annotations(ds, &spec)
        }
        DecisionAction::AddVoid { polygons } => add_void_annotation(ds, sample.image_id, polygons),
        DecisionAction::Note { .. } => Ok(ds.clone()),
    }
}

/// Folds decisions over `ds` in log order.
pub fn replay_decisions<'a>(
    ds: &Dataset,
    decisions: impl IntoIterator<Item = (SampleId, &'a DecisionAction)>,
) -> Result<Dataset, AugmentError> {
    decisions
        .into_iter()
        .try_fold(ds.clone(), |acc, (sample, action)| apply_decision(&acc, sample, action))
}

// --- image pipeline -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

fn default_hshift_limit() -> f64 {
    0.1
}
fn default_noise_sigma() -> f64 {
    0.02
}
fn default_perspective_scale() -> f64 {
    0.05
}
fn default_tiles() -> usize {
    8
}
fn default_clip_limit() -> f64 {
    2.0
}
fn default_sharpen_amount() -> f64 {
    0.5
}
fn default_sharpen_sigma() -> f64 {
    1.0
}
fn default_bc_limit() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HShiftParams {
    /// Largest shift as a fraction of the width.
    #[serde(default = "default_hshift_limit")]
    pub limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    #[serde(default = "default_noise_sigma")]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerspectiveParams {
    /// Largest corner displacement as a fraction of the image size.
    #[serde(default = "default_perspective_scale")]
    pub scale: f64,
    #[serde(default)]
    pub interpolation: Interpolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaheParams {
    #[serde(default = "default_tiles")]
    pub tiles: usize,
    #[serde(default = "default_clip_limit")]
    pub clip_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpenParams {
    #[serde(default = "default_sharpen_amount")]
    pub amount: f64,
    #[serde(default = "default_sharpen_sigma")]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrightnessContrastParams {
    #[serde(default = "default_bc_limit")]
    pub brightness_limit: f64,
    #[serde(default = "default_bc_limit")]
    pub contrast_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    HFlip,
    HShift(HShiftParams),
    Pad,
    GaussianNoise(NoiseParams),
    Perspective(PerspectiveParams),
    Clahe(ClaheParams),
    Sharpen(SharpenParams),
    BrightnessContrast(BrightnessContrastParams),
}

fn params<T: serde::de::DeserializeOwned>(name: &str, value: Value) -> Result<T, AugmentError> {
    let value = if value.is_null() { Value::Object(Default::default()) } else { value };
    serde_json::from_value(value).map_err(|e| AugmentError::BadParameter { transform: name.into(), message: e.to_string() })
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::HFlip => "hflip",
            Transform::HShift(_) => "hshift",
            Transform::Pad => "pad",
            Transform::GaussianNoise(_) => "gaussian_noise",
            Transform::Perspective(_) => "perspective",
            Transform::Clahe(_) => "clahe",
            Transform::Sharpen(_) => "sharpen",
            Transform::BrightnessContrast(_) => "brightness_contrast",
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Transform::HFlip | Transform::HShift(_) | Transform::Pad | Transform::Perspective(_))
    }

    pub fn from_parts(name: &str, value: Value) -> Result<Self, AugmentError> {
        let empty = |v: &Value| v.is_null() || v.as_object().is_some_and(|o| o.is_empty());
        Ok(match name {
            "hflip" | "pad" if !empty(&value) => {
                return Err(AugmentError::BadParameter { transform: name.into(), message: "takes no parameters".into() })
            }
            "hflip" => Transform::HFlip,
            "pad" => Transform::Pad,
            "hshift" => Transform::HShift(params(name, value)?),
            "gaussian_noise" => Transform::GaussianNoise(params(name, value)?),
            "perspective" => Transform::Perspective(params(name, value)?),
            "clahe" => Transform::Clahe(params(name, value)?),
            "sharpen" => Transform::Sharpen(params(name, value)?),
            "brightness_contrast" => Transform::BrightnessContrast(params(name, value)?),
            other => return Err(AugmentError::UnknownTransform(other.to_string())),
        })
    }

    fn params_value(&self) -> Value {
        let v = match self {
            Transform::HFlip | Transform::Pad => return Value::Object(Default::default()),
            Transform::HShift(p) => serde_json::to_value(p),
            Transform::GaussianNoise(p) => serde_json::to_value(p),
            Transform::Perspective(p) => serde_json::to_value(p),
            Transform::Clahe(p) => serde_json::to_value(p),
            Transform::Sharpen(p) => serde_json::to_value(p),
            Transform::BrightnessContrast(p) => serde_json::to_value(p),
        };
        v.expect("parameters serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStep {
    pub transform: Transform,
    /// Probability the step fires.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    pub seed: u64,
    pub steps: Vec<PlanStep>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    name: String,
    #[serde(default = "one")]
    p: f64,
    #[serde(default)]
    params: Value,
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    seed: u64,
    transforms: Vec<RawStep>,
}

impl AugmentationPlan {
    pub fn from_json(text: &str) -> Result<Self, AugmentError> {
        let raw: RawPlan = serde_json::from_str(text).map_err(AugmentError::Plan)?;
        let steps = raw
            .transforms
            .into_iter()
            .map(|s| {
                if !(0.0..=1.0).contains(&s.p) {
                    return Err(AugmentError::BadParameter {
                        transform: s.name,
                        message: format!("probability {} outside [0, 1]", s.p),
                    });
                }
                Ok(PlanStep { transform: Transform::from_parts(&s.name, s.params)?, p: s.p })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { seed: raw.seed, steps })
    }

    pub fn to_json(&self) -> String {
        let raw = RawPlan {
            seed: self.seed,
            transforms: self
                .steps
                .iter()
                .map(|s| RawStep { name: s.transform.name().into(), p: s.p, params: s.transform.params_value() })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("plan serializes")
    }

    /// Every transform with default parameters, each firing with probability `p`.
    pub fn all_defaults(seed: u64, p: f64) -> Self {
        let names = ["hflip", "hshift", "pad", "gaussian_noise", "perspective", "clahe", "sharpen", "brightness_contrast"];
        Self {
            seed,
            steps: names
                .iter()
                .map(|n| PlanStep { transform: Transform::from_parts(n, Value::Null).expect("known transform"), p })
                .collect(),
        }
    }
}

/// Masks keyed by caller-chosen ids (annotation or category ids).
pub type MaskSet = BTreeMap<u64, BinaryMask>;

fn warp_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    interp: Interpolation,
    src: impl Fn(usize, usize) -> Option<(f64, f64)>,
) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    for r in 0..out_h {
        for c in 0..out_w {
            let Some((y, x)) = src(r, c) else { continue };
            out[r * out_w + c] = match interp {
                Interpolation::Nearest => {
                    let (ry, rx) = (y.round(), x.round());
                    if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
                        0.0
                    } else {
                        plane[ry as usize * w + rx as usize]
                    }
                }
                Interpolation::Bilinear => {
                    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
                        0.0
                    } else {
                        let y = y.clamp(0.0, (h - 1) as f64);
                        let x = x.clamp(0.0, (w - 1) as f64);
                        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bottom * fy
                    }
                }
            };
        }
    }
    out
}

/// Geometric transform with fixed parameters: a source coordinate for every output pixel.
#[derive(Debug, Clone, Copy)]
enum Geometry {
    HFlip,
    Shift(isize),
    /// Reflect-pad by `(top, left)` to a square of the given side.
    Pad { top: usize, left: usize, side: usize },
    /// Row-major 3x3 matrix mapping output `(x, y, 1)` to source coordinates.
    Homography([f64; 9]),
}

impl Geometry {
    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Geometry::Pad { side, .. } => (*side, *side),
            _ => (h, w),
        }
    }

    fn apply_plane(&self, plane: &[f64], h: usize, w: usize, interp: Interpolation) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w);
        match *self {
            Geometry::HFlip => warp_plane(plane, h, w, oh, ow, Interpolation::Nearest, |r, c| {
                Some((r as f64, (w - 1 - c) as f64))
            }),
            Geometry::Shift(dx) => warp_plane(plane, h, w, oh, ow, Interpolation::Nearest, |r, c| {
                let sc = c as isize - dx;
                (sc >= 0 && sc < w as isize).then_some((r as f64, sc as f64))
            }),
            Geometry::Pad { top, left, .. } => warp_plane(plane, h, w, oh, ow, Interpolation::Nearest, |r, c| {
                let sr = reflect_index(r as isize - top as isize, h);
                let sc = reflect_index(c as isize - left as isize, w);
                Some((sr as f64, sc as f64))
            }),
            Geometry::Homography(m) => warp_plane(plane, h, w, oh, ow, interp, |r, c| {
                let (x, y) = (c as f64, r as f64);
                let z = m[6] * x + m[7] * y + m[8];
                if z.abs() < 1e-12 {
                    return None;
                }
                Some(((m[3] * x + m[4] * y + m[5]) / z, (m[0] * x + m[1] * y + m[2]) / z))
            }),
        }
    }
}

/// Homography taking `from[i]` to `to[i]` (points as `(x, y)`).
fn homography(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Option<[f64; 9]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ([x, y], [u, v]) = (from[i], to[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let s = a.lu().solve(&b)?;
    Some([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7], 1.0])
}

fn clahe_plane(plane: &[f64], h: usize, w: usize, p: &ClaheParams) -> Vec<f64> {
    const BINS: usize = 256;
    let ty = p.tiles.clamp(1, h);
    let tx = p.tiles.clamp(1, w);
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(BINS - 1);
    let row_edges: Vec<usize> = (0..=ty).map(|i| i * h / ty).collect();
    let col_edges: Vec<usize> = (0..=tx).map(|i| i * w / tx).collect();
    let mut luts = vec![[0.0f64; BINS]; ty * tx];
    for i in 0..ty {
        for j in 0..tx {
            let mut hist = [0.0f64; BINS];
            for r in row_edges[i]..row_edges[i + 1] {
                for c in col_edges[j]..col_edges[j + 1] {
                    hist[bin(plane[r * w + c])] += 1.0;
                }
            }
            let n = ((row_edges[i + 1] - row_edges[i]) * (col_edges[j + 1] - col_edges[j])) as f64;
            let clip = (p.clip_limit * n / BINS as f64).max(1.0);
            let excess: f64 = hist.iter().map(|v| (v - clip).max(0.0)).sum();
            for v in hist.iter_mut() {
                *v = v.min(clip) + excess / BINS as f64;
            }
            let mut acc = 0.0;
            for (k, v) in hist.iter().enumerate() {
                acc += v;
                luts[i * tx + j][k] = (acc / n).clamp(0.0, 1.0);
            }
        }
    }
    // tile centers for interpolation
    let centers = |edges: &[usize]| -> Vec<f64> { edges.windows(2).map(|e| (e[0] + e[1]) as f64 / 2.0 - 0.5).collect() };
    let (cy, cx) = (centers(&row_edges), centers(&col_edges));
    let locate = |centers: &[f64], v: f64| -> (usize, usize, f64) {
        if v <= centers[0] {
            return (0, 0, 0.0);
        }
        let last = centers.len() - 1;
        if v >= centers[last] {
            return (last, last, 0.0);
        }
        let i = centers.iter().rposition(|c| *c <= v).expect("v above first center");
        (i, i + 1, (v - centers[i]) / (centers[i + 1] - centers[i]))
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let (i0, i1, fy) = locate(&cy, r as f64);
        for c in 0..w {
            let (j0, j1, fx) = locate(&cx, c as f64);
            let b = bin(plane[r * w + c]);
            let top = luts[i0 * tx + j0][b] * (1.0 - fx) + luts[i0 * tx + j1][b] * fx;
            let bottom = luts[i1 * tx + j0][b] * (1.0 - fx) + luts[i1 * tx + j1][b] * fx;
            out[r * w + c] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn map_image(img: &ImageTensor, h: usize, w: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> ImageTensor {
    let mut data = Vec::with_capacity(img.channels() * h * w);
    for c in 0..img.channels() {
        data.extend(f(img.plane(c)).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    ImageTensor::new(img.channels(), h, w, data, RangeTag::Unit).expect("values clamped to unit range")
}

fn apply_geometry(img: &ImageTensor, masks: &MaskSet, g: Geometry, interp: Interpolation) -> (ImageTensor, MaskSet) {
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = g.out_size(h, w);
    let out = map_image(img, oh, ow, |p| g.apply_plane(p, h, w, interp));
    let masks = masks
        .iter()
        .map(|(k, m)| {
            let plane = g.apply_plane(&m.to_plane(), h, w, Interpolation::Nearest);
            (*k, BinaryMask::new(oh, ow, plane.iter().map(|v| *v >= 0.5).collect()).expect("mask size"))
        })
        .collect();
    (out, masks)
}

/// Applies one transform with parameters drawn from `rng`.
pub fn apply_transform(
    img: &ImageTensor,
    masks: &MaskSet,
    transform: &Transform,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, MaskSet), AugmentError> {
    let (h, w) = (img.height(), img.width());
    let bad = |message: String| AugmentError::BadParameter { transform: transform.name().into(), message };
    Ok(match transform {
        Transform::HFlip => apply_geometry(img, masks, Geometry::HFlip, Interpolation::Nearest),
        Transform::HShift(p) => {
            if !(0.0..=1.0).contains(&p.limit) {
                return Err(bad(format!("limit {} outside [0, 1]", p.limit)));
            }
            let max = (p.limit * w as f64).floor() as i64;
            let dx = if max > 0 { rng.random_range(-max..=max) } else { 0 };
            apply_geometry(img, masks, Geometry::Shift(dx as isize), Interpolation::Nearest)
        }
        Transform::Pad => {
            let side = h.max(w);
            let g = Geometry::Pad { top: (side - h) / 2, left: (side - w) / 2, side };
            apply_geometry(img, masks, g, Interpolation::Nearest)
        }
        Transform::Perspective(p) => {
            if !(0.0..0.5).contains(&p.scale) {
                return Err(bad(format!("scale {} outside [0, 0.5)", p.scale)));
            }
            let (fw, fh) = ((w - 1) as f64, (h - 1) as f64);
            let corners = [[0.0, 0.0], [fw, 0.0], [fw, fh], [0.0, fh]];
            let mut moved = corners;
            for pt in moved.iter_mut() {
                pt[0] += rng.random_range(-1.0..=1.0) * p.scale * w as f64;
                pt[1] += rng.random_range(-1.0..=1.0) * p.scale * h as f64;
            }
            // output pixel -> source pixel
            let m = homography(&moved, &corners).ok_or_else(|| bad("degenerate corner jitter".into()))?;
            apply_geometry(img, masks, Geometry::Homography(m), p.interpolation)
        }
        Transform::GaussianNoise(p) => {
            let normal = Normal::new(0.0, p.sigma).map_err(|e| bad(e.to_string()))?;
            let out = map_image(img, h, w, |plane| plane.iter().map(|v| v + normal.sample(rng)).collect());
            (out, masks.clone())
        }
        Transform::Clahe(p) => {
            if p.tiles == 0 || !(p.clip_limit > 0.0) {
                return Err(bad("tiles and clip_limit must be positive".into()));
            }
            (map_image(img, h, w, |plane| clahe_plane(plane, h, w, p)), masks.clone())
        }
        Transform::Sharpen(p) => {
            if !(p.sigma > 0.0) {
                return Err(bad("sigma must be positive".into()));
            }
            let out = map_image(img, h, w, |plane| {
                let blurred = blur_plane(plane, h, w, p.sigma);
                plane.iter().zip(&blurred).map(|(v, b)| v + p.amount * (v - b)).collect()
            });
            (out, masks.clone())
        }
        Transform::BrightnessContrast(p) => {
            let beta = rng.random_range(-p.brightness_limit..=p.brightness_limit);
            let alpha = 1.0 + rng.random_range(-p.contrast_limit..=p.contrast_limit);
            let out = map_image(img, h, w, |plane| plane.iter().map(|v| alpha * v + beta).collect());
            (out, masks.clone())
        }
    })
}

/// Runs the plan with a generator seeded from `seed`. Each step draws its
/// firing decision, then its parameters, so image and masks share every draw.
pub fn apply_augmentation_pipeline(
    img: &ImageTensor,
    masks: &MaskSet,
    plan: &AugmentationPlan,
    seed: u64,
) -> Result<(ImageTensor, MaskSet), AugmentError> {
    let mut img = img.to_unit()?;
    for m in masks.values() {
        if (m.height(), m.width()) != (img.height(), img.width()) {
            return Err(AugmentError::BadParameter { transform: "pipeline".into(), message: "mask size differs from image".into() });
        }
    }
    let mut masks = masks.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in &plan.steps {
        let fire: f64 = rng.random();
        if fire < step.p {
            (img, masks) = apply_transform(&img, &masks, &step.transform, &mut rng)?;
        }
    }
    Ok((img, masks))
}

/// Augments every image of `ds` with `plan` (per-image seed `plan.seed ^ image_id`),
/// writes the images as PNG under `out_dir`, and returns the re-annotated dataset
/// rooted there. Annotations moved entirely out of frame are dropped.
pub fn augment_dataset(ds: &Dataset, plan: &AugmentationPlan, out_dir: &Path) -> Result<Dataset, AugmentError> {
    let mut images: Vec<&ImageInfo> = ds.images().iter().collect();
    images.sort_by_key(|i| i.id);
    let results: Vec<(ImageInfo, Vec<Annotation>)> = images
        .par_iter()
        .map(|info| -> Result<_, AugmentError> {
            let img = load_image(&ds.image_path(info.id)?)?;
            if (img.height(), img.width()) != (info.height, info.width) {
                return Err(AugmentError::BadParameter {
                    transform: "pipeline".into(),
                    message: format!("image {} is {}x{}, dataset says {}x{}", info.id, img.height(), img.width(), info.height, info.width),
                });
            }
            let anns: Vec<&Annotation> = ds.annotations_for(info.id).collect();
            let masks: MaskSet = anns
                .iter()
                .map(|a| Ok((a.id, build_annotation_mask(ds, a.id)?)))
                .collect::<Result<_, DatasetError>>()?;
            let (out, masks) = apply_augmentation_pipeline(&img, &masks, plan, plan.seed ^ info.id)?;
            let file_name = format!("{}.png", info.id);
            write_bytes(&out_dir.join(&file_name), &image_png(&out)?)?;
            let new_info = ImageInfo { id: info.id, file_name, width: out.width(), height: out.height() };
            let new_anns = anns
                .iter()
                .filter_map(|a| {
                    let m = &masks[&a.id];
                    (!m.is_empty()).then(|| Annotation { polygons: mask_to_polygons(m), ..(*a).clone() })
                })
                .collect();
            Ok((new_info, new_anns))
        })
        .collect::<Result<_, _>>()?;
    let (new_images, anns): (Vec<ImageInfo>, Vec<Vec<Annotation>>) = results.into_iter().unzip();
    let mut annotations: Vec<Annotation> = anns.into_iter().flatten().collect();
    annotations.sort_by_key(|a| a.id);
    Ok(Dataset::new(new_images, ds.categories().to_vec(), annotations, out_dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_category_masks, build_void_mask, parse_dataset, Category};
    use proptest::prelude::*;
    use rand::Rng;

    fn dataset(h: usize, w: usize, anns: Vec<(u64, Vec<Vec<Point>>)>) -> Dataset {
        Dataset::new(
            vec![ImageInfo { id: 1, file_name: "a.png".into(), width: w, height: h }],
            vec![Category { id: 1, name: "cable".into() }, Category { id: 2, name: "tower".into() }],
            anns.into_iter()
                .enumerate()
                .map(|(i, (cat, polygons))| Annotation { id: i as u64 + 1, image_id: 1, category_id: cat, polygons, is_void: false })
                .collect(),
            ".",
        )
        .unwrap()
    }

    fn rect(r0: f64, c0: f64, r1: f64, c1: f64) -> Vec<Point> {
        vec![[c0, r0], [c1, r0], [c1, r1], [c0, r1]]
    }

    #[test]
    fn polygons_reproduce_masks() {
        let masks = [
            BinaryMask::from_fn(8, 8, |r, c| (2..6).contains(&r) && (1..7).contains(&c)),
            BinaryMask::from_fn(8, 8, |r, c| r == c),
            BinaryMask::from_fn(8, 8, |r, c| (1..7).contains(&r) && (1..7).contains(&c) && !(r == 3 && c == 3)),
            BinaryMask::from_fn(8, 8, |r, c| (r == 0 && c == 0) || (r == 5 && c > 2)),
            BinaryMask::from_fn(8, 8, |_, c| c == 4),
        ];
        for m in masks {
            let polys = mask_to_polygons(&m);
            assert!(polys.iter().all(|p| p.len() >= 3));
            assert_eq!(rasterize_all(&polys, 8, 8), m);
        }
        assert!(mask_to_polygons(&BinaryMask::empty(4, 4)).is_empty());
    }

    #[test]
    fn enlarge_line_to_band() {
        let ds = dataset(20, 20, vec![(1, vec![rect(2.0, 10.0, 17.0, 10.0)])]);
        let before = build_category_masks(&ds, 1, 1).unwrap();
        assert_eq!(bbox_of_mask(&before).unwrap().min_side(), 1);
        let out = enlarge_annotations(&ds, &EnlargeSpec::new([1], 2)).unwrap();
        let after = build_category_masks(&out, 1, 1).unwrap();
        for r in 2..=17 {
            let cols: Vec<usize> = (0..20).filter(|c| after.get(r, *c)).collect();
            assert_eq!(cols, vec![8, 9, 10, 11, 12]);
        }
        assert!(before.is_subset_of(&after));
    }

    #[test]
    fn enlarge_leaves_thick_and_other_categories() {
        let ds = dataset(30, 30, vec![(1, vec![rect(2.0, 2.0, 20.0, 20.0)]), (2, vec![rect(25.0, 1.0, 25.0, 20.0)])]);
        assert_eq!(enlarge_annotations(&ds, &EnlargeSpec::new([1], 2)).unwrap(), ds);
        assert_eq!(enlarge_annotations(&ds, &EnlargeSpec::new([], 2)).unwrap(), ds);
        assert!(matches!(
            enlarge_annotations(&ds, &EnlargeSpec::new([9], 2)),
            Err(AugmentError::Dataset(DatasetError::UnknownCategory(9)))
        ));
    }

    #[test]
    fn void_clipping() {
        let ds = dataset(10, 10, vec![(1, vec![rect(0.0, 4.0, 9.0, 5.0)])]);
        let out = add_void_annotation(&ds, 1, &[rect(2.0, 2.0, 7.0, 7.0)]).unwrap();
        assert_eq!(out.annotations().len(), 2);
        let void = build_void_mask(&out, 1).unwrap();
        assert_eq!(void.count(), 36 - 12);
        assert!(void.intersection(&build_labeled_mask(&out, 1).unwrap()).is_empty());
        assert!(out.void_category_id().is_some());
        assert!(out.annotations().last().unwrap().is_void);

        let empty = dataset(10, 10, vec![]);
        let out = add_void_annotation(&empty, 1, &[rect(1.0, 1.0, 3.0, 3.0)]).unwrap();
        assert_eq!(out.annotations().len(), 1);
        assert!(matches!(add_void_annotation(&empty, 7, &[rect(1.0, 1.0, 3.0, 3.0)]), Err(AugmentError::Dataset(_))));
        assert!(matches!(
            add_void_annotation(&ds, 1, &[rect(1.0, 4.0, 3.0, 5.0)]),
            Err(AugmentError::EmptyAfterClip(_))
        ));
    }

    #[test]
    fn decisions_replay_matches_direct_calls() {
        let ds = dataset(20, 20, vec![(1, vec![rect(2.0, 10.0, 17.0, 10.0)])]);
        let s = SampleId { image_id: 1, category_id: 1 };
        let log = [
            DecisionAction::Enlarge { radius: 2, thin_threshold: None },
            DecisionAction::Note { text: "background clutter".into() },
            DecisionAction::AddVoid { polygons: vec![rect(0.0, 0.0, 5.0, 5.0)] },
        ];
        let replayed = replay_decisions(&ds, log.iter().map(|a| (s, a))).unwrap();
        let mut spec = EnlargeSpec::new([1], 2);
        spec.images = Some(BTreeSet::from([1]));
        let direct = add_void_annotation(&enlarge_annotations(&ds, &spec).unwrap(), 1, &[rect(0.0, 0.0, 5.0, 5.0)]).unwrap();
        assert_eq!(replayed.digest(), direct.digest());
        let bad = DecisionAction::AddVoid { polygons: vec![vec![[0.0, 0.0], [1.0, 1.0]]] };
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&log[0]).unwrap();
        assert_eq!(json, r#"{"action":"enlarge","radius":2}"#);
        assert_eq!("12-3".parse::<SampleId>().unwrap(), SampleId { image_id: 12, category_id: 3 });
        assert!("12".parse::<SampleId>().is_err());
    }

    fn random_fixture(seed: u64) -> (ImageTensor, MaskSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
        let img = ImageTensor::new(3, 32, 32, data, RangeTag::Unit).unwrap();
        let mut masks = MaskSet::new();
        for k in 0..3 {
            let (r0, c0) = (rng.random_range(0..28), rng.random_range(0..28));
            let (r1, c1) = (rng.random_range(r0..32), rng.random_range(c0..32));
            masks.insert(k, BinaryMask::from_fn(32, 32, |r, c| (r0..=r1).contains(&r) && (c0..=c1).contains(&c)));
        }
        (img, masks)
    }

    #[test]
    fn identity_plan_and_double_flip() {
        let (img, masks) = random_fixture(1);
        let mut plan = AugmentationPlan::all_defaults(5, 0.0);
        assert_eq!(apply_augmentation_pipeline(&img, &masks, &plan, 5).unwrap(), (img.clone(), masks.clone()));
        plan.steps = vec![PlanStep { transform: Transform::HFlip, p: 1.0 }; 2];
        assert_eq!(apply_augmentation_pipeline(&img, &masks, &plan, 5).unwrap(), (img.clone(), masks.clone()));
        plan.steps.truncate(1);
        let (fi, fm) = apply_augmentation_pipeline(&img, &masks, &plan, 5).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(fi.get(1, r, c), img.get(1, r, 31 - c));
                assert_eq!(fm[&0].get(r, c), masks[&0].get(r, 31 - c));
            }
        }
    }

    #[test]
    fn photometric_steps_keep_masks_and_range() {
        let (img, masks) = random_fixture(2);
        for name in ["gaussian_noise", "clahe", "sharpen", "brightness_contrast"] {
            let plan = AugmentationPlan {
                seed: 0,
                steps: vec![PlanStep { transform: Transform::from_parts(name, Value::Null).unwrap(), p: 1.0 }],
            };
            let (out, m) = apply_augmentation_pipeline(&img, &masks, &plan, 9).unwrap();
            assert_eq!(m, masks);
            assert_ne!(out, img, "{name}");
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pad_makes_square() {
        let img = ImageTensor::new(1, 2, 4, (0..8).map(|v| v as f64 / 8.0).collect(), RangeTag::Unit).unwrap();
        let masks = MaskSet::from([(0, BinaryMask::from_fn(2, 4, |r, c| r == 0 && c == 1))]);
        let plan = AugmentationPlan { seed: 0, steps: vec![PlanStep { transform: Transform::Pad, p: 1.0 }] };
        let (out, m) = apply_augmentation_pipeline(&img, &masks, &plan, 0).unwrap();
        assert_eq!((out.height(), out.width()), (4, 4));
        // rows: reflect(-1)=0, 0, 1, reflect(2)=1
        assert_eq!(out.plane(0)[4..8], img.plane(0)[0..4]);
        assert_eq!(out.plane(0)[0..4], img.plane(0)[0..4]);
        assert!(m[&0].get(0, 1) && m[&0].get(1, 1) && m[&0].count() == 2);
    }

    #[test]
    fn plan_json() {
        let text = r#"{"seed": 7, "transforms": [
            {"name": "hflip", "p": 0.5},
            {"name": "hshift", "p": 1.0, "params": {"limit": 0.05}},
            {"name": "perspective", "params": {"interpolation": "nearest"}}]}"#;
        let plan = AugmentationPlan::from_json(text).unwrap();
        assert_eq!(plan.steps.len(), 3);
        assert_eq!(plan.steps[2].p, 1.0);
        assert_eq!(AugmentationPlan::from_json(&plan.to_json()).unwrap(), plan);
        assert!(matches!(
            AugmentationPlan::from_json(r#"{"seed": 1, "transforms": [{"name": "rotate"}]}"#),
            Err(AugmentError::UnknownTransform(n)) if n == "rotate"
        ));
        assert!(matches!(
            AugmentationPlan::from_json(r#"{"seed": 1, "transforms": [{"name": "hshift", "params": {"lmt": 1}}]}"#),
            Err(AugmentError::BadParameter { .. })
        ));
        assert!(AugmentationPlan::from_json(r#"{"seed": 1, "transforms": [{"name": "hflip", "p": 1.5}]}"#).is_err());
    }

    #[test]
    fn augment_dataset_writes_images() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        let img = ImageTensor::new(3, 6, 10, vec![0.5; 180], RangeTag::Unit).unwrap();
        std::fs::write(src.join("a.png"), image_png(&img).unwrap()).unwrap();
        let doc = r#"{"images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 6}],
            "categories": [{"id": 1, "name": "cable"}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "segmentation": [[1,1, 3,1, 3,3, 1,3]]}]}"#;
        let ds = parse_dataset(doc.as_bytes(), &src).unwrap();
        let plan = AugmentationPlan { seed: 3, steps: vec![PlanStep { transform: Transform::Pad, p: 1.0 }] };
        let out = augment_dataset(&ds, &plan, &dir.path().join("out")).unwrap();
        assert_eq!((out.images()[0].width, out.images()[0].height), (10, 10));
        assert!(dir.path().join("out/1.png").exists());
        // reflected padding mirrors source row 1 into the first padded row
        assert_eq!(build_category_masks(&out, 1, 1).unwrap().count(), 12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn enlarge_never_shrinks(r0 in 0usize..10, c0 in 0usize..10, dr in 0usize..6, dc in 0usize..2, radius in 0usize..3) {
            let ds = dataset(16, 16, vec![(1, vec![rect(r0 as f64, c0 as f64, (r0 + dr) as f64, (c0 + dc) as f64)])]);
            let before = build_category_masks(&ds, 1, 1).unwrap();
            let after = build_category_masks(&enlarge_annotations(&ds, &EnlargeSpec::new([1], radius)).unwrap(), 1, 1).unwrap();
            prop_assert!(before.is_subset_of(&after));
            prop_assert_eq!(after, dilate_mask(&before, radius));
        }

        #[test]
        fn random_masks_round_trip(bits in proptest::collection::vec(any::<bool>(), 100)) {
            let m = BinaryMask::new(10, 10, bits).unwrap();
            prop_assert_eq!(rasterize_all(&mask_to_polygons(&m), 10, 10), m);
        }

        #[test]
        fn pipeline_deterministic(seed in 0u64..1000) {
            let (img, masks) = random_fixture(seed);
            let plan = AugmentationPlan::all_defaults(seed, 0.5);
            let a = apply_augmentation_pipeline(&img, &masks, &plan, seed).unwrap();
            let b = apply_augmentation_pipeline(&img, &masks, &plan, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

//! Image and mask primitives shared by the explainers, metrics and augmentation code.
//!
//! Images are channel-major `(C, H, W)` grids of `f64`. Masks and saliency maps are
//! single-plane row-major grids. Every operation here is pure.

use serde::{Deserialize, Serialize};

use crate::error::ImagingError;

/// Value range an [`ImageTensor`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// Native pixel values in `[0, 255]`.
    Raw255,
    /// Pixel values scaled to `[0, 1]`.
    Unit,
    /// Per-channel standardized values.
    Normalized,
}

impl RangeTag {
    /// Upper bound of the range, if the range is bounded.
    pub fn max_value(self) -> Option<f64> {
        match self {
            RangeTag::Raw255 => Some(255.0),
            RangeTag::Unit => Some(1.0),
            RangeTag::Normalized => None,
        }
    }
}

/// Channel-major floating point image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    range: RangeTag,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        range: RangeTag,
    ) -> Result<Self, ImagingError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(ImagingError::EmptyDimensions);
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(ImagingError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some(max) = range.max_value() {
            if let Some(v) = data.iter().find(|v| !(0.0..=max).contains(*v)) {
                return Err(ImagingError::OutOfRange { value: *v, range });
            }
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    /// Image filled with a single value.
    pub fn filled(
        channels: usize,
        height: usize,
        width: usize,
        value: f64,
        range: RangeTag,
    ) -> Result<Self, ImagingError> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
            range,
        )
    }

    // Construction path for operations that keep values in range by construction.
    pub(crate) fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        range: RangeTag,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
            range,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// Rescales a `Raw255` image into `Unit` range; `Unit` images are returned unchanged.
    pub fn to_unit(&self) -> Result<ImageTensor, ImagingError> {
        match self.range {
            RangeTag::Unit => Ok(self.clone()),
            RangeTag::Raw255 => Ok(Self::from_parts(
                self.channels,
                self.height,
                self.width,
                self.data.iter().map(|v| v / 255.0).collect(),
                RangeTag::Unit,
            )),
            RangeTag::Normalized => Err(ImagingError::WrongRange {
                expected: RangeTag::Raw255,
                actual: RangeTag::Normalized,
            }),
        }
    }

    /// Multiplies every channel by a per-pixel weight plane.
    pub fn masked(&self, weights: &[f64]) -> ImageTensor {
        assert_eq!(weights.len(), self.plane_len(), "mask plane size mismatch");
        let n = self.plane_len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * weights[i % n])
            .collect();
        Self::from_parts(self.channels, self.height, self.width, data, self.range)
    }

    /// Applies `f` to every plane; each result must hold `h * w` values.
    pub(crate) fn map_planes(&self, h: usize, w: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> ImageTensor {
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            data.extend(f(self.plane(c)));
        }
        Self::from_parts(self.channels, h, w, data, self.range)
    }
}

/// Per-channel mean and standard deviation used to standardize images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationSpec {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, ImagingError> {
        if mean.len() != std.len() {
            return Err(ImagingError::ChannelMismatch {
                expected: mean.len(),
                actual: std.len(),
            });
        }
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(ImagingError::InvalidStd);
        }
        Ok(Self { mean, std })
    }

    /// ImageNet RGB statistics.
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

/// `out = (img / 255 - mean_c) / std_c` for a `Raw255` image.
pub fn normalize_image(
    img: &ImageTensor,
    spec: &NormalizationSpec,
) -> Result<ImageTensor, ImagingError> {
    if img.range != RangeTag::Raw255 {
        return Err(ImagingError::WrongRange {
            expected: RangeTag::Raw255,
            actual: img.range,
        });
    }
    if spec.mean.len() != img.channels || spec.std.len() != img.channels {
        return Err(ImagingError::ChannelMismatch {
            expected: img.channels,
            actual: spec.mean.len(),
        });
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(ImagingError::NonFinite);
    }
    let mut c = 0;
    Ok(img.map_planes(img.height, img.width, |plane| {
        let (mu, sigma) = (spec.mean[c], spec.std[c]);
        c += 1;
        plane.iter().map(|v| (v / 255.0 - mu) / sigma).collect()
    }))
    .map(|mut out| {
        out.range = RangeTag::Normalized;
        out
    })
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(
    img: &ImageTensor,
    spec: &NormalizationSpec,
) -> Result<ImageTensor, ImagingError> {
    if img.range != RangeTag::Normalized {
        return Err(ImagingError::WrongRange {
            expected: RangeTag::Normalized,
            actual: img.range,
        });
    }
    if spec.mean.len() != img.channels {
        return Err(ImagingError::ChannelMismatch {
            expected: img.channels,
            actual: spec.mean.len(),
        });
    }
    let mut c = 0;
    let mut out = img.map_planes(img.height, img.width, |plane| {
        let (mu, sigma) = (spec.mean[c], spec.std[c]);
        c += 1;
        plane.iter().map(|v| (v * sigma + mu) * 255.0).collect()
    });
    out.range = RangeTag::Raw255;
    Ok(out)
}

// Source sampling position for output index `i` under half-pixel centers.
fn source_coord(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinearly resamples a single plane with half-pixel centers and edge clamping.
pub fn resize_plane(
    plane: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if in_h == out_h && in_w == out_w {
        return plane.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, in_w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, in_h, out_h);
        let (r0, r1) = (&plane[y0 * in_w..][..in_w], &plane[y1 * in_w..][..in_w]);
        for &(x0, x1, fx) in &cols {
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn resize_bilinear(
    img: &ImageTensor,
    out_h: usize,
    out_w: usize,
) -> Result<ImageTensor, ImagingError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImagingError::EmptyDimensions);
    }
    let (in_h, in_w) = (img.height, img.width);
    Ok(img.map_planes(out_h, out_w, |p| resize_plane(p, in_h, in_w, out_h, out_w)))
}

/// Index into `[0, n)` under half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

pub(crate) fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * row[reflect_index(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| {
                    wt * tmp[reflect_index(y as isize + k as isize - radius, h) * w + x]
                })
                .sum();
        }
    }
    out
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, symmetric reflection at borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor, ImagingError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ImagingError::InvalidSigma(sigma));
    }
    let (h, w) = (img.height, img.width);
    Ok(img.map_planes(h, w, |p| blur_plane(p, h, w, sigma)))
}

/// Binary row-major mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, ImagingError> {
        if bits.len() != height * width {
            return Err(ImagingError::DataLength {
                expected: height * width,
                actual: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        assert!(self.same_shape(other), "mask shape mismatch");
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn to_plane(&self) -> Vec<f64> {
        self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }
}

/// Per-category relevance grid aligned to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub category: u64,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(
        category: u64,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, ImagingError> {
        if values.len() != height * width {
            return Err(ImagingError::DataLength {
                expected: height * width,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::NonFinite);
        }
        Ok(Self {
            category,
            height,
            width,
            values,
        })
    }

    /// Min-max normalized copy.
    ///
    /// A constant map has no spread to stretch: it becomes all ones when the
    /// constant is positive (uniform relevance) and all zeros otherwise.
    pub fn min_max_normalized(&self) -> SaliencyMap {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            });
        let values = if hi > lo {
            self.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else if hi > 0.0 {
            vec![1.0; self.values.len()]
        } else {
            vec![0.0; self.values.len()]
        };
        SaliencyMap {
            values,
            ..self.clone()
        }
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Pixel indices sorted by decreasing value, ties broken by row-major index.
    pub fn ranked_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|a, b| {
            self.values[*b]
                .total_cmp(&self.values[*a])
                .then_with(|| a.cmp(b))
        });
        idx
    }
}

/// Inclusive axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBoxRect {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBoxRect {
    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    pub fn min_side(&self) -> usize {
        (self.row_max - self.row_min + 1).min(self.col_max - self.col_min + 1)
    }

    pub fn intersection_area(&self, other: &BBoxRect) -> usize {
        let r0 = self.row_min.max(other.row_min);
        let r1 = self.row_max.min(other.row_max);
        let c0 = self.col_min.max(other.col_min);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            0
        } else {
            (r1 - r0 + 1) * (c1 - c0 + 1)
        }
    }

    pub fn iou(&self, other: &BBoxRect) -> f64 {
        let inter = self.intersection_area(other);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

/// Point `(x, y)` in pixel coordinates; pixel `(row, col)` has its center at `(col, row)`.
pub type Point = [f64; 2];

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    cross == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Even-odd point-in-polygon test; points on an edge count as inside.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if on_segment(p, a, b) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Sets every pixel whose center lies inside the polygon.
pub fn rasterize_polygon(
    poly: &[Point],
    height: usize,
    width: usize,
) -> Result<BinaryMask, ImagingError> {
    if poly.len() < 3 {
        return Err(ImagingError::DegeneratePolygon(poly.len()));
    }
    if poly.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(ImagingError::NonFinite);
    }
    let mut mask = BinaryMask::empty(height, width);
    if height == 0 || width == 0 {
        return Ok(mask);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let clamp_lo = |v: f64, n: usize| (v.ceil().max(0.0) as usize).min(n);
    let clamp_hi = |v: f64, n: usize| {
        if v < 0.0 {
            0
        } else {
            ((v.floor() as usize) + 1).min(n)
        }
    };
    for row in clamp_lo(y0, height)..clamp_hi(y1, height) {
        for col in clamp_lo(x0, width)..clamp_hi(x1, width) {
            if point_in_polygon([col as f64, row as f64], poly) {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

/// Dilation with a `(2r+1) x (2r+1)` square structuring element, clipped at the borders.
pub fn dilate_mask(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    let mut horizontal = BinaryMask::empty(h, w);
    for row in 0..h {
        for col in 0..w {
            let lo = col.saturating_sub(radius);
            let hi = (col + radius).min(w - 1);
            if (lo..=hi).any(|c| mask.get(row, c)) {
                horizontal.set(row, col, true);
            }
        }
    }
    let mut out = BinaryMask::empty(h, w);
    for row in 0..h {
        let lo = row.saturating_sub(radius);
        let hi = (row + radius).min(h - 1);
        for col in 0..w {
            if (lo..=hi).any(|r| horizontal.get(r, col)) {
                out.set(row, col, true);
            }
        }
    }
    out
}

/// Selects exactly `k` pixels: the largest values, ties broken by row-major index.
pub fn topk_binarize(sal: &SaliencyMap, k: usize) -> Result<BinaryMask, ImagingError> {
    let n = sal.height * sal.width;
    if k > n {
        return Err(ImagingError::TopKOutOfRange { k, pixels: n });
    }
    let mut mask = BinaryMask::empty(sal.height, sal.width);
    for i in sal.ranked_indices().into_iter().take(k) {
        mask.bits[i] = true;
    }
    Ok(mask)
}

pub fn bbox_of_mask(mask: &BinaryMask) -> Result<BBoxRect, ImagingError> {
    let mut rect: Option<BBoxRect> = None;
    for (i, _) in mask.bits.iter().enumerate().filter(|(_, b)| **b) {
        let (r, c) = (i / mask.width, i % mask.width);
        rect = Some(match rect {
            None => BBoxRect {
                row_min: r,
                row_max: r,
                col_min: c,
                col_max: c,
            },
            Some(b) => BBoxRect {
                row_min: b.row_min.min(r),
                row_max: b.row_max.max(r),
                col_min: b.col_min.min(c),
                col_max: b.col_max.max(c),
            },
        });
    }
    rect.ok_or(ImagingError::EmptyMask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(channels: usize, h: usize, w: usize, data: Vec<f64>) -> ImageTensor {
        ImageTensor::new(channels, h, w, data, RangeTag::Raw255).unwrap()
    }

    #[test]
    fn normalize_matches_hand_arithmetic() {
        let img = raw(3, 1, 1, vec![255.0, 0.0, 0.0]);
        let out = normalize_image(&img, &NormalizationSpec::imagenet()).unwrap();
        assert!((out.data()[0] - (1.0 - 0.485) / 0.229).abs() < 1e-12);
        assert!((out.data()[0] - 2.248908296943231).abs() < 1e-12);
        assert!((out.data()[1] - (-0.456 / 0.224)).abs() < 1e-12);
        assert!((out.data()[1] + 2.0357142857142856).abs() < 1e-12);
        assert_eq!(out.range(), RangeTag::Normalized);

        let img = raw(3, 1, 1, vec![0.485 * 255.0, 0.0, 0.0]);
        let out = normalize_image(&img, &NormalizationSpec::imagenet()).unwrap();
        assert!(out.data()[0].abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_bad_inputs() {
        let img = raw(1, 1, 1, vec![3.0]);
        assert!(matches!(
            normalize_image(&img, &NormalizationSpec::imagenet()),
            Err(ImagingError::ChannelMismatch { .. })
        ));
        let unit = ImageTensor::new(3, 1, 1, vec![0.5; 3], RangeTag::Unit).unwrap();
        assert!(normalize_image(&unit, &NormalizationSpec::imagenet()).is_err());
        assert!(NormalizationSpec::new(vec![0.0], vec![0.0]).is_err());
        let nan = ImageTensor::from_parts(1, 1, 1, vec![f64::NAN], RangeTag::Raw255);
        let spec = NormalizationSpec::new(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(normalize_image(&nan, &spec), Err(ImagingError::NonFinite)));
    }

    #[test]
    fn resize_half_pixel_row() {
        let img = ImageTensor::new(1, 1, 2, vec![0.0, 1.0], RangeTag::Unit).unwrap();
        let out = resize_bilinear(&img, 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageTensor::new(2, 3, 3, (0..18).map(|v| v as f64).collect(), RangeTag::Raw255)
            .unwrap();
        assert_eq!(resize_bilinear(&img, 3, 3).unwrap(), img);
        let c = ImageTensor::filled(1, 4, 5, 0.3, RangeTag::Unit).unwrap();
        let out = resize_bilinear(&c, 7, 2).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!(resize_bilinear(&c, 0, 2).is_err());
    }

    #[test]
    fn blur_basics() {
        let c = ImageTensor::filled(1, 6, 6, 0.7, RangeTag::Unit).unwrap();
        let out = gaussian_blur(&c, 1.3).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let mut data = vec![0.0; 15 * 15];
        data[7 * 15 + 7] = 1.0;
        let impulse = ImageTensor::new(1, 15, 15, data, RangeTag::Unit).unwrap();
        let out = gaussian_blur(&impulse, 2.0).unwrap();
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(gaussian_blur(&impulse, 0.0).unwrap(), impulse);
        assert!(gaussian_blur(&impulse, -1.0).is_err());
    }

    #[test]
    fn blur_preserves_mass_with_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..7 * 9).map(|_| rng.random::<f64>()).collect();
        let img = ImageTensor::new(1, 7, 9, data, RangeTag::Unit).unwrap();
        let before: f64 = img.data().iter().sum();
        // radius 15 exceeds both dimensions, exercising repeated reflection
        let after: f64 = gaussian_blur(&img, 5.0).unwrap().data().iter().sum();
        assert!(((after - before) / before).abs() < 1e-6);
    }

    #[test]
    fn rasterize_full_frame_and_errors() {
        let (h, w) = (5, 7);
        let rect = [
            [-0.5, -0.5],
            [w as f64 - 0.5, -0.5],
            [w as f64 - 0.5, h as f64 - 0.5],
            [-0.5, h as f64 - 0.5],
        ];
        assert_eq!(rasterize_polygon(&rect, h, w).unwrap(), BinaryMask::full(h, w));
        assert!(matches!(
            rasterize_polygon(&[[0.0, 0.0], [1.0, 1.0]], 4, 4),
            Err(ImagingError::DegeneratePolygon(2))
        ));
        assert!(rasterize_polygon(&[[0.0, 0.0], [f64::NAN, 1.0], [1.0, 0.0]], 4, 4).is_err());
    }

    // Independent oracle: a point is inside a triangle when it is on the same side
    // (or on the line) of all three edges.
    fn triangle_oracle(p: Point, t: &[Point; 3]) -> bool {
        let side = |a: Point, b: Point| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let d = [side(t[0], t[1]), side(t[1], t[2]), side(t[2], t[0])];
        let has_neg = d.iter().any(|v| *v < 0.0);
        let has_pos = d.iter().any(|v| *v > 0.0);
        !(has_neg && has_pos)
    }

    #[test]
    fn rasterize_triangle_matches_oracle() {
        let tri = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]];
        let mask = rasterize_polygon(&tri, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(mask.get(r, c), triangle_oracle([c as f64, r as f64], &tri), "({r},{c})");
            }
        }
        assert_eq!(mask.count(), 10);
    }

    #[test]
    fn rasterize_random_triangles_match_oracle() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pt = || [rng.random_range(-2.0..18.0), rng.random_range(-2.0..18.0)];
            let tri = [pt(), pt(), pt()];
            let mask = rasterize_polygon(&tri, 16, 16).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    assert_eq!(mask.get(r, c), triangle_oracle([c as f64, r as f64], &tri));
                }
            }
        }
    }

    #[test]
    fn dilate_vertical_line() {
        let line = BinaryMask::from_fn(10, 10, |_, c| c == 1);
        let out = dilate_mask(&line, 2);
        for r in 0..10 {
            for c in 0..10 {
                assert_eq!(out.get(r, c), c <= 3, "({r},{c})");
            }
        }
        let line = BinaryMask::from_fn(10, 10, |_, c| c == 5);
        let out = dilate_mask(&line, 2);
        assert_eq!(out.count(), 50);
        assert!(dilate_mask(&BinaryMask::empty(4, 4), 3).is_empty());
        assert_eq!(dilate_mask(&BinaryMask::full(4, 4), 3), BinaryMask::full(4, 4));
    }

    #[test]
    fn topk_rules() {
        let sal = SaliencyMap::new(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        assert!(topk_binarize(&sal, 0).unwrap().is_empty());
        let one = topk_binarize(&sal, 1).unwrap();
        assert_eq!(one.bits(), &[false, true, false, false]);
        let flat = SaliencyMap::new(1, 2, 3, vec![0.5; 6]).unwrap();
        let three = topk_binarize(&flat, 3).unwrap();
        assert_eq!(three.bits(), &[true, true, true, false, false, false]);
        assert!(topk_binarize(&flat, 7).is_err());
    }

    #[test]
    fn bbox_extrema() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 3, true);
        let b = bbox_of_mask(&m).unwrap();
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (2, 2, 3, 3));
        let mut m = BinaryMask::empty(4, 4);
        m.set(0, 0, true);
        m.set(3, 3, true);
        let b = bbox_of_mask(&m).unwrap();
        assert_eq!((b.row_min, b.row_max, b.col_min, b.col_max), (0, 3, 0, 3));
        assert!(matches!(bbox_of_mask(&BinaryMask::empty(2, 2)), Err(ImagingError::EmptyMask)));
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(proptest::bool::weighted(0.1), h * w)
            .prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
    }

    proptest! {
        #[test]
        fn normalize_round_trips(vals in proptest::collection::vec(0.0f64..=255.0, 12)) {
            let img = raw(3, 2, 2, vals.clone());
            let spec = NormalizationSpec::imagenet();
            let back = denormalize_image(&normalize_image(&img, &spec).unwrap(), &spec).unwrap();
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn resize_stays_within_bounds(
            vals in proptest::collection::vec(0.0f64..=1.0, 12),
            oh in 1usize..9, ow in 1usize..9,
        ) {
            let img = ImageTensor::new(1, 3, 4, vals.clone(), RangeTag::Unit).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = resize_bilinear(&img, oh, ow).unwrap();
            for v in out.data() {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn dilation_composes_away_from_borders(m in arb_mask(12, 12), a in 0usize..3, b in 0usize..3) {
            // keep the support far enough from the edge that no clipping happens
            let inner = BinaryMask::from_fn(24, 24, |r, c| {
                (6..18).contains(&r) && (6..18).contains(&c) && m.get(r - 6, c - 6)
            });
            let stepwise = dilate_mask(&dilate_mask(&inner, a), b);
            prop_assert_eq!(stepwise, dilate_mask(&inner, a + b));
        }

        #[test]
        fn dilation_is_superset(m in arb_mask(9, 7), r in 0usize..4) {
            prop_assert!(m.is_subset_of(&dilate_mask(&m, r)));
        }

        #[test]
        fn topk_population_is_k(vals in proptest::collection::vec(0.0f64..1.0, 20), k in 0usize..=20) {
            let sal = SaliencyMap::new(0, 4, 5, vals).unwrap();
            prop_assert_eq!(topk_binarize(&sal, k).unwrap().count(), k);
        }
    }
}

//! Black-box segmentation model contract, scalar scoring for attribution, toy
//! models with closed-form behaviour, and out-of-process inference adapters.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::imaging::{BinaryMask, ImageTensor, NormalizationSpec, RangeTag};

const SUM_TOLERANCE: f64 = 1e-5;

/// Per-pixel class distribution laid out class-major `(K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    classes: usize,
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl ScoreMap {
    pub fn new(classes: usize, height: usize, width: usize, probs: Vec<f64>) -> Result<Self, ModelError> {
        if classes == 0 || probs.len() != classes * height * width {
            return Err(ModelError::BadOutput(format!(
                "expected {} probabilities for shape ({classes}, {height}, {width}), got {}",
                classes * height * width,
                probs.len()
            )));
        }
        let n = height * width;
        for p in 0..n {
            let mut sum = 0.0;
            for k in 0..classes {
                let v = probs[k * n + p];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(ModelError::BadOutput(format!("invalid probability {v} at pixel {p}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(ModelError::BadOutput(format!("pixel {p} sums to {sum}")));
            }
        }
        Ok(Self { classes, height, width, probs })
    }

    /// Applies a per-pixel softmax over class logits.
    pub fn from_logits(classes: usize, height: usize, width: usize, logits: &[f64]) -> Result<Self, ModelError> {
        let n = height * width;
        if logits.len() != classes * n {
            return Err(ModelError::BadOutput("logit count does not match shape".into()));
        }
        let mut probs = vec![0.0; logits.len()];
        for p in 0..n {
            let max = (0..classes).map(|k| logits[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..classes).map(|k| (logits[k * n + p] - max).exp()).sum();
            for k in 0..classes {
                probs[k * n + p] = (logits[k * n + p] - max).exp() / sum;
            }
        }
        Self::new(classes, height, width, probs)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_plane(&self, class: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.probs[class * n..(class + 1) * n]
    }

    /// Winning class per pixel; ties go to the lower class index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        let n = self.height * self.width;
        (0..n)
            .map(|p| {
                (0..self.classes).fold(0, |best, k| {
                    if self.probs[k * n + p] > self.probs[best * n + p] {
                        k
                    } else {
                        best
                    }
                })
            })
            .collect()
    }

    pub fn argmax_mask(&self, class: usize) -> BinaryMask {
        let labels = self.argmax_labels();
        BinaryMask::new(self.height, self.width, labels.iter().map(|l| *l == class).collect())
            .expect("label count matches shape")
    }
}

/// Training stage a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    #[default]
    Base,
    Enhanced,
    Mobile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    /// Fixed input height, or `None` when the model accepts any size.
    #[serde(default)]
    pub height: Option<usize>,
    #[serde(default)]
    pub width: Option<usize>,
}

impl InputSpec {
    pub fn any_size(channels: usize) -> Self {
        Self { channels, height: None, width: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    pub stage: StageTag,
    pub input: InputSpec,
}

impl ModelDescriptor {
    pub fn new(model_id: impl Into<String>, stage: StageTag, input: InputSpec) -> Self {
        Self { model_id: model_id.into(), stage, input }
    }
}

/// Whether an adapter may serve overlapping forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    ConcurrentSafe,
    Exclusive,
}

/// How dataset category ids map onto model output classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassMap {
    /// Binary model: every category is the foreground class 1.
    #[default]
    Foreground,
    /// Category id `c` is output class `c`.
    Identity,
}

impl ClassMap {
    pub fn class_index(self, category: u64) -> usize {
        match self {
            ClassMap::Foreground => 1,
            ClassMap::Identity => category as usize,
        }
    }
}

pub trait SegmentationModel: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;

    /// Raw forward pass. Callers go through [`predict_scores`], which validates shapes.
    fn forward(&self, img: &ImageTensor) -> Result<ScoreMap, ModelError>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentSafe
    }

    fn class_map(&self) -> ClassMap {
        ClassMap::Foreground
    }

    fn introspection(&self) -> Option<&dyn Introspectable> {
        None
    }
}

fn check_input(desc: &ModelDescriptor, img: &ImageTensor) -> Result<(), ModelError> {
    let spec = desc.input;
    if img.channels() != spec.channels {
        return Err(ModelError::ShapeMismatch(format!(
            "model expects {} channels, image has {}",
            spec.channels,
            img.channels()
        )));
    }
    if spec.height.is_some_and(|h| h != img.height()) || spec.width.is_some_and(|w| w != img.width()) {
        return Err(ModelError::ShapeMismatch(format!(
            "model expects {:?}x{:?}, image is {}x{}",
            spec.height,
            spec.width,
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Validated forward pass: input shape is checked and the output must be a
/// normalized distribution aligned with the image.
pub fn predict_scores(model: &dyn SegmentationModel, img: &ImageTensor) -> Result<ScoreMap, ModelError> {
    check_input(model.descriptor(), img)?;
    let out = model.forward(img)?;
    if out.height != img.height() || out.width != img.width() {
        return Err(ModelError::BadOutput(format!(
            "output {}x{} does not match image {}x{}",
            out.height,
            out.width,
            img.height(),
            img.width()
        )));
    }
    Ok(out)
}

/// Output class index for a dataset category, checked against the model's class count.
pub fn class_for_category(model: &dyn SegmentationModel, out: &ScoreMap, category: u64) -> Result<usize, ModelError> {
    let class = model.class_map().class_index(category);
    if class >= out.classes {
        return Err(ModelError::UnknownClass { class, classes: out.classes });
    }
    Ok(class)
}

/// Mean probability of `class` over `region`; an empty region falls back to the whole map.
pub fn scalarize_class_score(out: &ScoreMap, class: usize, region: &BinaryMask) -> Result<f64, ModelError> {
    if class >= out.classes {
        return Err(ModelError::UnknownClass { class, classes: out.classes });
    }
    if region.height() != out.height || region.width() != out.width {
        return Err(ModelError::ShapeMismatch("region does not match output".into()));
    }
    let plane = out.class_plane(class);
    let count = region.count();
    if count == 0 {
        return Ok(plane.iter().sum::<f64>() / plane.len() as f64);
    }
    let sum: f64 = plane.iter().zip(region.bits()).filter(|(_, b)| **b).map(|(v, _)| v).sum();
    Ok(sum / count as f64)
}

/// Which pixels the attribution scalar averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRegion {
    /// Pixels the unperturbed image assigns to the class, frozen for all perturbed passes.
    #[default]
    FrozenArgmax,
    /// Every pixel.
    WholeImage,
}

pub fn target_region(out: &ScoreMap, class: usize, policy: ScoreRegion) -> BinaryMask {
    match policy {
        ScoreRegion::FrozenArgmax => out.argmax_mask(class),
        ScoreRegion::WholeImage => BinaryMask::full(out.height, out.width),
    }
}

/// Black-box scorer: the scalar the perturbation methods track across forward passes.
pub struct ClassScorer<'a> {
    model: &'a dyn SegmentationModel,
    class: usize,
    region: BinaryMask,
}

impl<'a> ClassScorer<'a> {
    /// Runs the unperturbed forward pass and freezes the target region.
    pub fn new(
        model: &'a dyn SegmentationModel,
        img: &ImageTensor,
        category: u64,
        policy: ScoreRegion,
    ) -> Result<Self, ModelError> {
        let out = predict_scores(model, img)?;
        let class = class_for_category(model, &out, category)?;
        let region = target_region(&out, class, policy);
        Ok(Self { model, class, region })
    }

    pub fn score(&self, img: &ImageTensor) -> Result<f64, ModelError> {
        let out = predict_scores(self.model, img)?;
        scalarize_class_score(&out, self.class, &self.region)
    }

    pub fn region(&self) -> &BinaryMask {
        &self.region
    }

    pub fn model(&self) -> &dyn SegmentationModel {
        self.model
    }
}

// --- toy models -----------------------------------------------------------------

fn intensity_scale(img: &ImageTensor) -> Result<f64, ModelError> {
    img.range()
        .max_value()
        .ok_or_else(|| ModelError::ShapeMismatch("toy models need raw or unit-range images".into()))
}

fn binary_map(height: usize, width: usize, fg: impl Iterator<Item = f64>) -> Result<ScoreMap, ModelError> {
    let fg: Vec<f64> = fg.collect();
    let mut probs: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
    probs.extend(fg);
    ScoreMap::new(2, height, width, probs)
}

/// Predicts the same foreground probability everywhere.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    desc: ModelDescriptor,
    foreground: f64,
}

impl ConstantModel {
    pub fn new(foreground: f64, channels: usize) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&foreground) {
            return Err(ModelError::Config(format!("foreground probability {foreground} outside [0, 1]")));
        }
        Ok(Self {
            desc: ModelDescriptor::new("toy:constant", StageTag::Base, InputSpec::any_size(channels)),
            foreground,
        })
    }
}

impl SegmentationModel for ConstantModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn forward(&self, img: &ImageTensor) -> Result<ScoreMap, ModelError> {
        let n = img.plane_len();
        binary_map(img.height(), img.width(), std::iter::repeat_n(self.foreground, n))
    }
}

/// Foreground probability equals the channel-mean pixel intensity, clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct BrightnessToyModel {
    desc: ModelDescriptor,
}

impl BrightnessToyModel {
    pub fn new(channels: usize) -> Self {
        Self {
            desc: ModelDescriptor::new("toy:brightness", StageTag::Base, InputSpec::any_size(channels)),
        }
    }
}

fn channel_mean(img: &ImageTensor, scale: f64) -> Vec<f64> {
    let n = img.plane_len();
    let c = img.channels() as f64;
    (0..n)
        .map(|p| (0..img.channels()).map(|ch| img.data()[ch * n + p]).sum::<f64>() / c / scale)
        .collect()
}

impl SegmentationModel for BrightnessToyModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn forward(&self, img: &ImageTensor) -> Result<ScoreMap, ModelError> {
        let scale = intensity_scale(img)?;
        let fg = channel_mean(img, scale);
        binary_map(img.height(), img.width(), fg.into_iter().map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Template region for [`RegionTemplateModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Template {
    /// Fixed pixel mask; images must match its size.
    Pixels { height: usize, width: usize, indices: Vec<usize> },
    /// Rectangle in fractions of the image size, `[top, bottom) x [left, right)`.
    Fractional { top: f64, left: f64, bottom: f64, right: f64 },
}

impl Template {
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Template::Pixels {
            height: mask.height(),
            width: mask.width(),
            indices: mask.bits().iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect(),
        }
    }

    /// The central box covering half of each dimension.
    pub fn center() -> Self {
        Template::Fractional { top: 0.25, left: 0.25, bottom: 0.75, right: 0.75 }
    }

    pub fn mask(&self, height: usize, width: usize) -> Result<BinaryMask, ModelError> {
        match self {
            Template::Pixels { height: th, width: tw, indices } => {
                if (*th, *tw) != (height, width) {
                    return Err(ModelError::ShapeMismatch(format!(
                        "template is {th}x{tw}, image is {height}x{width}"
                    )));
                }
                let mut m = BinaryMask::empty(height, width);
                for i in indices {
                    m.set(i / width, i % width, true);
                }
                Ok(m)
            }
            Template::Fractional { top, left, bottom, right } => {
                let r0 = (top * height as f64).floor() as usize;
                let r1 = ((bottom * height as f64).ceil() as usize).min(height);
                let c0 = (left * width as f64).floor() as usize;
                let c1 = ((right * width as f64).ceil() as usize).min(width);
                Ok(BinaryMask::from_fn(height, width, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c)))
            }
        }
    }
}

/// Foreground probability everywhere equals the mean intensity inside a fixed template.
#[derive(Debug, Clone)]
pub struct RegionTemplateModel {
    desc: ModelDescriptor,
    template: Template,
}

impl RegionTemplateModel {
    pub fn new(template: Template, channels: usize) -> Self {
        Self {
            desc: ModelDescriptor::new("toy:region", StageTag::Base, InputSpec::any_size(channels)),
            template,
        }
    }

    pub fn template(&self) -> &Template {
        &self.template
    }
}

impl SegmentationModel for RegionTemplateModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn forward(&self, img: &ImageTensor) -> Result<ScoreMap, ModelError> {
        let scale = intensity_scale(img)?;
        let template = self.template.mask(img.height(), img.width())?;
        let intensity = channel_mean(img, scale);
        let count = template.count().max(1) as f64;
        let score: f64 = intensity
            .iter()
            .zip(template.bits())
            .filter(|(_, b)| **b)
            .map(|(v, _)| v)
            .sum::<f64>()
            / count;
        binary_map(img.height(), img.width(), std::iter::repeat_n(score.clamp(0.0, 1.0), img.plane_len()))
    }
}

/// Layer activations and the gradient of the class score with respect to them.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrospectionRecord {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `(channels, height, width)` feature maps.
    pub activations: Vec<f64>,
    /// Same layout as `activations`.
    pub grads: Vec<f64>,
}

impl IntrospectionRecord {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        activations: Vec<f64>,
        grads: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = channels * height * width;
        if activations.len() != n || grads.len() != n {
            return Err(ModelError::BadOutput("activation and gradient shapes differ".into()));
        }
        Ok(Self { channels, height, width, activations, grads })
    }
}

pub trait Introspectable {
    /// Forward pass exposing the designated layer and the gradient of the
    /// frozen-region class score with respect to it.
    fn introspect(&self, img: &ImageTensor, category: u64) -> Result<(ScoreMap, IntrospectionRecord), ModelError>;
}

pub fn introspect_forward(
    model: &dyn SegmentationModel,
    img: &ImageTensor,
    category: u64,
) -> Result<(ScoreMap, IntrospectionRecord), ModelError> {
    let inner = model
        .introspection()
        .ok_or_else(|| ModelError::IntrospectionUnsupported(model.descriptor().model_id.clone()))?;
    check_input(model.descriptor(), img)?;
    inner.introspect(img, category)
}

/// One 3x3 convolution (edge-replicated borders) feeding a per-pixel linear
/// classifier with softmax. The attribution scalar is the mean class
/// probability over the frozen region, so gradients are available in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConvToyModel {
    desc: ModelDescriptor,
    in_channels: usize,
    filters: usize,
    classes: usize,
    /// `[filter][in_channel][ky][kx]`, flattened.
    conv: Vec<f64>,
    conv_bias: Vec<f64>,
    /// `[class][filter]`, flattened.
    head: Vec<f64>,
    head_bias: Vec<f64>,
    class_map: ClassMap,
}

impl LinearConvToyModel {
    pub fn seeded(in_channels: usize, filters: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let conv = draw(filters * in_channels * 9);
        let conv_bias = draw(filters);
        let head = draw(classes * filters);
        let head_bias = draw(classes);
        Self {
            desc: ModelDescriptor::new("toy:linear-conv", StageTag::Base, InputSpec::any_size(in_channels)),
            in_channels,
            filters,
            classes,
            conv,
            conv_bias,
            head,
            head_bias,
            class_map: if classes == 2 { ClassMap::Foreground } else { ClassMap::Identity },
        }
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    /// Activations of the convolution layer, `(filters, H, W)`.
    pub fn activations(&self, img: &ImageTensor) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let n = h * w;
        let mut out = vec![0.0; self.filters * n];
        for f in 0..self.filters {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = self.conv_bias[f];
                    for c in 0..self.in_channels {
                        let plane = img.plane(c);
                        for ky in 0..3 {
                            let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                            for kx in 0..3 {
                                let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                                acc += self.conv[((f * self.in_channels + c) * 3 + ky) * 3 + kx] * plane[sy * w + sx];
                            }
                        }
                    }
                    out[f * n + y * w + x] = acc;
                }
            }
        }
        out
    }

    pub fn scores_from_activations(&self, acts: &[f64], height: usize, width: usize) -> Result<ScoreMap, ModelError> {
        let n = height * width;
        let mut logits = vec![0.0; self.classes * n];
        for k in 0..self.classes {
            for p in 0..n {
                logits[k * n + p] = self.head_bias[k]
                    + (0..self.filters).map(|f| self.head[k * self.filters + f] * acts[f * n + p]).sum::<f64>();
            }
        }
        ScoreMap::from_logits(self.classes, height, width, &logits)
    }

    /// Attribution scalar as a function of the activations.
    pub fn score_from_activations(
        &self,
        acts: &[f64],
        height: usize,
        width: usize,
        class: usize,
        region: &BinaryMask,
    ) -> Result<f64, ModelError> {
        scalarize_class_score(&self.scores_from_activations(acts, height, width)?, class, region)
    }

    /// Closed-form gradient of [`Self::score_from_activations`].
    pub fn score_gradient(&self, out: &ScoreMap, class: usize, region: &BinaryMask) -> Vec<f64> {
        let n = out.height * out.width;
        let all = region.count() == 0;
        let weight = 1.0 / if all { n } else { region.count() } as f64;
        let pc = out.class_plane(class);
        let mut grads = vec![0.0; self.filters * n];
        for p in 0..n {
            if !all && !region.bits()[p] {
                continue;
            }
            for f in 0..self.filters {
                let expected: f64 = (0..self.classes).map(|k| out.probs[k * n + p] * self.head[k * self.filters + f]).sum();
                grads[f * n + p] = weight * pc[p] * (self.head[class * self.filters + f] - expected);
            }
        }
        grads
    }
}

impl SegmentationModel for LinearConvToyModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn forward(&self, img: &ImageTensor) -> Result<ScoreMap, ModelError> {
        let acts = self.activations(img);
        self.scores_from_activations(&acts, img.height(), img.width())
    }

    fn class_map(&self) -> ClassMap {
        self.class_map
    }

    fn introspection(&self) -> Option<&dyn Introspectable> {
        Some(self)
    }
}

impl Introspectable for LinearConvToyModel {
    fn introspect(&self, img: &ImageTensor, category: u64) -> Result<(ScoreMap, IntrospectionRecord), ModelError> {
        let acts = self.activations(img);
        let out = self.scores_from_activations(&acts, img.height(), img.width())?;
        let class = self.class_map.class_index(category);
        if class >= self.classes {
            return Err(ModelError::UnknownClass { class, classes: self.classes });
        }
        let region = target_region(&out, class, ScoreRegion::FrozenArgmax);
        let grads = self.score_gradient(&out, class, &region);
        let record = IntrospectionRecord::new(self.filters, img.height(), img.width(), acts, grads)?;
        Ok((out, record))
    }
}

// --- wire protocol --------------------------------------------------------------

/// One inference request: the image as base64 little-endian `f32` plus its `(C, H, W)` shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub image: String,
    pub shape: [usize; 3],
}

/// Either `probs` + `shape` (`(K, H, W)`) or an `error` message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_f32_b64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f32_b64(text: &str) -> Result<Vec<f64>, ModelError> {
    let bytes = B64.decode(text).map_err(|e| ModelError::Protocol(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(ModelError::Protocol("payload is not a whole number of f32 values".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

impl InferenceRequest {
    pub fn from_image(img: &ImageTensor) -> Self {
        Self {
            image: encode_f32_b64(img.data()),
            shape: [img.channels(), img.height(), img.width()],
        }
    }

    pub fn to_image(&self, range: RangeTag) -> Result<ImageTensor, ModelError> {
        let data = decode_f32_b64(&self.image)?;
        let [c, h, w] = self.shape;
        ImageTensor::new(c, h, w, data, range).map_err(|e| ModelError::Protocol(e.to_string()))
    }
}

impl InferenceResponse {
    pub fn from_scores(out: &ScoreMap) -> Self {
        Self {
            probs: Some(encode_f32_b64(&out.probs)),
            shape: Some([out.classes, out.height, out.width]),
            error: None,
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self { probs: None, shape: None, error: Some(message.into()) }
    }

    /// Decodes the payload. `f32` transport loses precision, so distributions are renormalized
    /// per pixel; with `logits` the payload is passed through a softmax instead.
    pub fn into_scores(self, logits: bool) -> Result<ScoreMap, ModelError> {
        if let Some(e) = self.error {
            return Err(ModelError::Backend(e));
        }
        let (probs, [k, h, w]) = match (self.probs, self.shape) {
            (Some(p), Some(s)) => (decode_f32_b64(&p)?, s),
            _ => return Err(ModelError::Protocol("response lacks probs/shape".into())),
        };
        if probs.len() != k * h * w {
            return Err(ModelError::Protocol("probs length does not match shape".into()));
        }
        if logits {
            return ScoreMap::from_logits(k, h, w, &probs);
        }
        let n = h * w;
        let mut probs = probs;
        for p in 0..n {
            let sum: f64 = (0..k).map(|c| probs[c * n + p]).sum();
            if sum > 0.0 && (sum - 1.0).abs() <= 1e-3 {
                for c in 0..k {
                    probs[c * n + p] /= sum;
                }
            }
        }
        ScoreMap::new(k, h, w, probs)
    }
}

/// Serves the line protocol for `model`: one JSON request per input line, one
/// JSON response per output line.
pub fn serve_lines(
    model: &dyn SegmentationModel,
    input_range: RangeTag,
    reader: impl BufRead,
    mut writer: impl Write,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<InferenceRequest>(&line) {
            Err(e) => InferenceResponse::failure(format!("bad request: {e}")),
            Ok(req) => match req.to_image(input_range).and_then(|img| predict_scores(model, &img)) {
                Ok(out) => InferenceResponse::from_scores(&out),
                Err(e) => InferenceResponse::failure(e.to_string()),
            },
        };
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Conversion the external side expects, applied to unit-range engine images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Send unit-range values untouched.
    #[default]
    Unit,
    /// Scale to `[0, 255]`.
    Raw255,
    /// Standardize with ImageNet statistics.
    Imagenet,
}

impl Preprocess {
    pub fn apply(self, img: &ImageTensor) -> Result<ImageTensor, ModelError> {
        let unit = img.to_unit().map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        match self {
            Preprocess::Unit => Ok(unit),
            Preprocess::Raw255 => {
                let data = unit.data().iter().map(|v| v * 255.0).collect();
                ImageTensor::new(unit.channels(), unit.height(), unit.width(), data, RangeTag::Raw255)
                    .map_err(|e| ModelError::ShapeMismatch(e.to_string()))
            }
            Preprocess::Imagenet => {
                let spec = NormalizationSpec::imagenet();
                if unit.channels() != spec.mean.len() {
                    return Err(ModelError::ShapeMismatch("imagenet statistics need 3 channels".into()));
                }
                let n = unit.plane_len();
                let data = unit
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - spec.mean[i / n]) / spec.std[i / n])
                    .collect();
                ImageTensor::new(unit.channels(), unit.height(), unit.width(), data, RangeTag::Normalized)
                    .map_err(|e| ModelError::ShapeMismatch(e.to_string()))
            }
        }
    }
}

/// Sends one serialized request line and returns the response line.
pub trait LineTransport: Send {
    fn round_trip(&mut self, line: &str) -> Result<String, ModelError>;
}

/// Child process speaking the line protocol over stdin/stdout.
pub struct ChildTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ChildTransport {
    pub fn spawn(command: &[String]) -> Result<Self, ModelError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| ModelError::Config("empty process command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ModelError::Backend(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }
}

impl LineTransport for ChildTransport {
    fn round_trip(&mut self, line: &str) -> Result<String, ModelError> {
        let io = |e: std::io::Error| ModelError::Backend(format!("inference process: {e}"));
        self.stdin.write_all(line.as_bytes()).map_err(io)?;
        self.stdin.write_all(b"\n").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut response = String::new();
        if self.stdout.read_line(&mut response).map_err(io)? == 0 {
            return Err(ModelError::Backend("inference process closed its output".into()));
        }
        Ok(response)
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Black-box adapter over a [`LineTransport`]; requests are serialized.
pub struct LineAdapter {
    desc: ModelDescriptor,
    transport: Mutex<Box<dyn LineTransport>>,
    preprocess: Preprocess,
    logits: bool,
    class_map: ClassMap,
}

impl LineAdapter {
    pub fn new(
        desc: ModelDescriptor,
        transport: Box<dyn LineTransport>,
        preprocess: Preprocess,
        logits: bool,
        class_map: ClassMap,
    ) -> Self {
        Self { desc, transport: Mutex::new(transport), preprocess, logits, class_map }
    }
}

impl SegmentationModel for LineAdapter {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn forward(&self, img: &ImageTensor) -> Result<ScoreMap, ModelError> {
        let req = InferenceRequest::from_image(&self.preprocess.apply(img)?);
        let line = serde_json::to_string(&req).map_err(|e| ModelError::Protocol(e.to_string()))?;
        let response = self
            .transport
            .lock()
            .map_err(|_| ModelError::Backend("transport lock poisoned".into()))?
            .round_trip(&line)?;
        let resp: InferenceResponse =
            serde_json::from_str(&response).map_err(|e| ModelError::Protocol(format!("bad response: {e}")))?;
        resp.into_scores(self.logits)
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Exclusive
    }

    fn class_map(&self) -> ClassMap {
        self.class_map
    }
}

/// Black-box adapter posting each request to an HTTP endpoint.
pub struct HttpAdapter {
    desc: ModelDescriptor,
    endpoint: String,
    client: reqwest::blocking::Client,
    preprocess: Preprocess,
    logits: bool,
    class_map: ClassMap,
}

impl HttpAdapter {
    pub fn new(
        desc: ModelDescriptor,
        endpoint: impl Into<String>,
        preprocess: Preprocess,
        logits: bool,
        class_map: ClassMap,
    ) -> Result<Self, ModelError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ModelError::Backend(e.to_string()))?;
        Ok(Self { desc, endpoint: endpoint.into(), client, preprocess, logits, class_map })
    }
}

impl SegmentationModel for HttpAdapter {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.desc
    }

    fn forward(&self, img: &ImageTensor) -> Result<ScoreMap, ModelError> {
        let req = InferenceRequest::from_image(&self.preprocess.apply(img)?);
        let body = serde_json::to_vec(&req).map_err(|e| ModelError::Protocol(e.to_string()))?;
        let resp = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| ModelError::Backend(e.to_string()))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| ModelError::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(ModelError::Backend(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes)
            )));
        }
        let resp: InferenceResponse =
            serde_json::from_slice(&bytes).map_err(|e| ModelError::Protocol(format!("bad response: {e}")))?;
        resp.into_scores(self.logits)
    }

    fn class_map(&self) -> ClassMap {
        self.class_map
    }
}

// --- registry -------------------------------------------------------------------

fn default_channels() -> usize {
    3
}

fn default_foreground() -> f64 {
    0.7
}

fn default_filters() -> usize {
    4
}

fn default_classes() -> usize {
    2
}

/// One model registry entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Constant {
        #[serde(default = "default_foreground")]
        foreground: f64,
        #[serde(default = "default_channels")]
        channels: usize,
    },
    Brightness {
        #[serde(default = "default_channels")]
        channels: usize,
    },
    Region {
        #[serde(default = "Template::center")]
        template: Template,
        #[serde(default = "default_channels")]
        channels: usize,
    },
    LinearConv {
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_filters")]
        filters: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    Process {
        command: Vec<String>,
        input: InputSpec,
        #[serde(default)]
        stage: StageTag,
        #[serde(default)]
        preprocess: Preprocess,
        #[serde(default)]
        logits: bool,
        #[serde(default)]
        class_map: ClassMap,
    },
    Http {
        endpoint: String,
        input: InputSpec,
        #[serde(default)]
        stage: StageTag,
        #[serde(default)]
        preprocess: Preprocess,
        #[serde(default)]
        logits: bool,
        #[serde(default)]
        class_map: ClassMap,
    },
}

/// Maps model ids to adapter specs. Built-in toy ids (`toy:constant`,
/// `toy:brightness`, `toy:region`, `toy:linear-conv`) resolve without an entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub models: BTreeMap<String, ModelSpec>,
}

impl ModelRegistry {
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))
    }

    fn builtin(id: &str) -> Option<ModelSpec> {
        Some(match id {
            "toy:constant" => ModelSpec::Constant { foreground: default_foreground(), channels: 3 },
            "toy:brightness" => ModelSpec::Brightness { channels: 3 },
            "toy:region" => ModelSpec::Region { template: Template::center(), channels: 3 },
            "toy:linear-conv" => ModelSpec::LinearConv { channels: 3, filters: 4, classes: 2, seed: 0 },
            _ => return None,
        })
    }

    pub fn spec(&self, id: &str) -> Result<ModelSpec, ModelError> {
        self.models
            .get(id)
            .cloned()
            .or_else(|| Self::builtin(id))
            .ok_or_else(|| ModelError::Config(format!("unknown model id {id:?}")))
    }

    pub fn resolve(&self, id: &str) -> Result<Box<dyn SegmentationModel>, ModelError> {
        let named = |mut desc: ModelDescriptor| {
            desc.model_id = id.to_string();
            desc
        };
        Ok(match self.spec(id)? {
            ModelSpec::Constant { foreground, channels } => {
                let mut m = ConstantModel::new(foreground, channels)?;
                m.desc = named(m.desc);
                Box::new(m)
            }
            ModelSpec::Brightness { channels } => {
                let mut m = BrightnessToyModel::new(channels);
                m.desc = named(m.desc);
                Box::new(m)
            }
            ModelSpec::Region { template, channels } => {
                let mut m = RegionTemplateModel::new(template, channels);
                m.desc = named(m.desc);
                Box::new(m)
            }
            ModelSpec::LinearConv { channels, filters, classes, seed } => {
                let mut m = LinearConvToyModel::seeded(channels, filters, classes, seed);
                m.desc = named(m.desc);
                Box::new(m)
            }
            ModelSpec::Process { command, input, stage, preprocess, logits, class_map } => {
                let transport = ChildTransport::spawn(&command)?;
                Box::new(LineAdapter::new(
                    ModelDescriptor::new(id, stage, input),
                    Box::new(transport),
                    preprocess,
                    logits,
                    class_map,
                ))
            }
            ModelSpec::Http { endpoint, input, stage, preprocess, logits, class_map } => Box::new(HttpAdapter::new(
                ModelDescriptor::new(id, stage, input),
                endpoint,
                preprocess,
                logits,
                class_map,
            )?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Cursor, Read};
    use std::net::TcpListener;

    fn unit(c: usize, h: usize, w: usize, data: Vec<f64>) -> ImageTensor {
        ImageTensor::new(c, h, w, data, RangeTag::Unit).unwrap()
    }

    #[test]
    fn constant_model_predicts_constant() {
        let m = ConstantModel::new(0.7, 3).unwrap();
        let out = predict_scores(&m, &unit(3, 2, 3, vec![0.1; 18])).unwrap();
        assert!(out.class_plane(0).iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(out.class_plane(1).iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(matches!(
            predict_scores(&m, &unit(1, 2, 2, vec![0.0; 4])),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn brightness_model_follows_pixels() {
        let m = BrightnessToyModel::new(1);
        let out = predict_scores(&m, &unit(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.class_plane(1), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn scalarize_rules() {
        let out = ScoreMap::new(2, 1, 3, vec![0.2, 0.5, 0.9, 0.8, 0.5, 0.1]).unwrap();
        let mut one = BinaryMask::empty(1, 3);
        one.set(0, 0, true);
        assert!((scalarize_class_score(&out, 1, &one).unwrap() - 0.8).abs() < 1e-12);
        let empty = BinaryMask::empty(1, 3);
        assert!((scalarize_class_score(&out, 1, &empty).unwrap() - (0.8 + 0.5 + 0.1) / 3.0).abs() < 1e-12);
        let uniform = ScoreMap::new(2, 1, 3, vec![0.6, 0.6, 0.6, 0.4, 0.4, 0.4]).unwrap();
        for region in [one.clone(), empty.clone(), BinaryMask::full(1, 3)] {
            assert!((scalarize_class_score(&uniform, 1, &region).unwrap() - 0.4).abs() < 1e-12);
        }
        assert!(matches!(scalarize_class_score(&out, 2, &one), Err(ModelError::UnknownClass { .. })));
    }

    #[test]
    fn score_map_validates_distribution() {
        assert!(ScoreMap::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(ScoreMap::new(2, 1, 1, vec![-0.1, 1.1]).is_err());
        let s = ScoreMap::from_logits(3, 1, 2, &[0.0, 5.0, 1.0, 5.0, 2.0, 5.0]).unwrap();
        assert_eq!(s.argmax_labels(), vec![2, 0]);
    }

    #[test]
    fn linear_conv_constant_image_gives_constant_activations() {
        let m = LinearConvToyModel::seeded(3, 4, 2, 7);
        let acts = m.activations(&unit(3, 5, 6, vec![0.4; 90]));
        for f in 0..4 {
            let plane = &acts[f * 30..(f + 1) * 30];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn introspection_capability() {
        let img = unit(3, 4, 4, vec![0.5; 48]);
        assert!(introspect_forward(&LinearConvToyModel::seeded(3, 2, 2, 1), &img, 1).is_ok());
        assert!(matches!(
            introspect_forward(&BrightnessToyModel::new(3), &img, 1),
            Err(ModelError::IntrospectionUnsupported(_))
        ));
    }

    #[test]
    fn template_masks() {
        let m = Template::center().mask(4, 4).unwrap();
        assert_eq!(m.count(), 4);
        assert!(m.get(1, 1) && m.get(2, 2) && !m.get(0, 0));
        let t = Template::from_mask(&m);
        assert_eq!(t.mask(4, 4).unwrap(), m);
        assert!(t.mask(5, 4).is_err());
    }

    #[test]
    fn wire_codec_and_line_adapter() {
        let model = BrightnessToyModel::new(1);
        let img = unit(1, 2, 2, vec![0.25, 0.5, 0.75, 1.0]);
        let req = serde_json::to_string(&InferenceRequest::from_image(&img)).unwrap();
        let mut out = Vec::new();
        serve_lines(&model, RangeTag::Unit, Cursor::new(format!("{req}\n\n{{oops\n")), &mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 2);
        let ok: InferenceResponse = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(ok.clone().into_scores(false).unwrap().class_plane(1), &[0.25, 0.5, 0.75, 1.0]);
        let bad: InferenceResponse = serde_json::from_str(lines[1]).unwrap();
        assert!(matches!(bad.into_scores(false), Err(ModelError::Backend(_))));

        struct InProcess(BrightnessToyModel);
        impl LineTransport for InProcess {
            fn round_trip(&mut self, line: &str) -> Result<String, ModelError> {
                let mut out = Vec::new();
                serve_lines(&self.0, RangeTag::Unit, Cursor::new(line.to_string()), &mut out).unwrap();
                Ok(String::from_utf8(out).unwrap())
            }
        }
        let adapter = LineAdapter::new(
            ModelDescriptor::new("remote", StageTag::Mobile, InputSpec::any_size(1)),
            Box::new(InProcess(BrightnessToyModel::new(1))),
            Preprocess::Unit,
            false,
            ClassMap::Foreground,
        );
        assert_eq!(adapter.concurrency(), Concurrency::Exclusive);
        let scores = predict_scores(&adapter, &img).unwrap();
        assert_eq!(scores.class_plane(1), &[0.25, 0.5, 0.75, 1.0]);
        assert!(introspect_forward(&adapter, &img, 1).is_err());
    }

    #[test]
    fn http_adapter_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // read headers + body
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(end) = text.find("\r\n\r\n") {
                    let len: usize = text[..end]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                        .unwrap();
                    if buf.len() >= end + 4 + len {
                        let req: InferenceRequest = serde_json::from_slice(&buf[end + 4..end + 4 + len]).unwrap();
                        let img = req.to_image(RangeTag::Unit).unwrap();
                        let out = BrightnessToyModel::new(1).forward(&img).unwrap();
                        let body = serde_json::to_vec(&InferenceResponse::from_scores(&out)).unwrap();
                        write!(stream, "HTTP/1.1 200 OK\r\ncontent-length: {}\r\nconnection: close\r\n\r\n", body.len()).unwrap();
                        stream.write_all(&body).unwrap();
                        break;
                    }
                }
            }
        });
        let adapter = HttpAdapter::new(
            ModelDescriptor::new("http", StageTag::Base, InputSpec::any_size(1)),
            format!("http://{addr}/predict"),
            Preprocess::Unit,
            false,
            ClassMap::Foreground,
        )
        .unwrap();
        let img = unit(1, 1, 2, vec![0.125, 0.5]);
        let out = predict_scores(&adapter, &img).unwrap();
        assert_eq!(out.class_plane(1), &[0.125, 0.5]);
        server.join().unwrap();
    }

    #[test]
    fn registry_resolves_builtins_and_entries() {
        let reg: ModelRegistry = serde_json::from_str(
            r#"{"models": {"bright1": {"kind": "brightness", "channels": 1},
                           "remote": {"kind": "http", "endpoint": "http://localhost:1/x",
                                      "input": {"channels": 3, "height": 700, "width": 700},
                                      "stage": "mobile", "preprocess": "imagenet"}}}"#,
        )
        .unwrap();
        assert_eq!(reg.resolve("bright1").unwrap().descriptor().input.channels, 1);
        assert_eq!(reg.resolve("toy:region").unwrap().descriptor().model_id, "toy:region");
        let remote = reg.resolve("remote").unwrap();
        assert_eq!(remote.descriptor().stage, StageTag::Mobile);
        assert!(reg.resolve("nope").is_err());
    }

    #[test]
    fn preprocess_imagenet_matches_normalize() {
        let img = unit(3, 1, 1, vec![1.0, 0.0, 0.5]);
        let out = Preprocess::Imagenet.apply(&img).unwrap();
        assert!((out.data()[0] - 2.248908296943231).abs() < 1e-12);
    }
}

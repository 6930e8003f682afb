use std::path::PathBuf;

use thiserror::Error;

use crate::imaging::RangeTag;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImagingError {
    #[error("image dimensions must be positive")]
    EmptyDimensions,
    #[error("expected {expected} values, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("value {value} outside the {range:?} range")]
    OutOfRange { value: f64, range: RangeTag },
    #[error("expected a {expected:?} image, got {actual:?}")]
    WrongRange { expected: RangeTag, actual: RangeTag },
    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("standard deviations must be positive and finite")]
    InvalidStd,
    #[error("non-finite value")]
    NonFinite,
    #[error("invalid blur sigma {0}")]
    InvalidSigma(f64),
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
    #[error("top-{k} requested from {pixels} pixels")]
    TopKOutOfRange { k: usize, pixels: usize },
    #[error("mask is empty")]
    EmptyMask,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image {0} has zero width or height")]
    EmptyImage(u64),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("unknown image id {0}")]
    UnknownImage(u64),
    #[error("unknown category id {0}")]
    UnknownCategory(u64),
    #[error("unknown annotation id {0}")]
    UnknownAnnotation(u64),
    #[error("annotation {annotation} has a polygon with {vertices} vertices")]
    DegeneratePolygon { annotation: u64, vertices: usize },
    #[error("annotation {0} has a non-finite coordinate")]
    NonFiniteCoordinate(u64),
    #[error("annotation {0} uses RLE segmentation, which is not supported")]
    RleUnsupported(u64),
    #[error("annotation {0} has a malformed segmentation")]
    BadSegmentation(u64),
    #[error("invalid dataset JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model output: {0}")]
    BadOutput(String),
    #[error("class index {class} outside the model's {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("model {0} does not expose introspection")]
    IntrospectionUnsupported(String),
    #[error("inference backend failed: {0}")]
    Backend(String),
    #[error("inference protocol error: {0}")]
    Protocol(String),
    #[error("model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExplainError {
    #[error("invalid RISE configuration: {0}")]
    InvalidConfig(String),
    #[error("expected mask value is zero")]
    ZeroExpectation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("dimensions do not match")]
    ShapeMismatch,
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,
    #[error("saliency map has zero energy")]
    ZeroEnergy,
    #[error("no class present in prediction or ground truth")]
    NoClasses,
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("validation set is empty")]
    EmptySet,
    #[error("every sample was skipped")]
    AllSkipped,
    #[error("no methods to rank")]
    NoMethods,
    #[error("method {method} lacks the {metric} column")]
    MissingMetric { method: String, metric: &'static str },
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("invalid report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("unknown transform {0:?}")]
    UnknownTransform(String),
    #[error("invalid parameter for {transform}: {message}")]
    BadParameter { transform: String, message: String },
    #[error("sample {0} is read-only")]
    ReadOnly(String),
    #[error("void clipping removed every labeled pixel of annotation {0}")]
    EmptyAfterClip(u64),
    #[error("invalid plan JSON: {0}")]
    Plan(#[source] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error("image codec: {0}")]
    Codec(String),
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

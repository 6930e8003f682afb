//! Explainability toolkit for semantic segmentation models: saliency generation,
//! plausibility and faithfulness metrics, method ranking, COCO dataset handling and
//! annotation augmentation.

pub mod artifact;
pub mod augment;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod report;

pub use error::{AugmentError, ArtifactError, DatasetError, ExplainError, ImagingError, MetricError, ModelError, ReportError};

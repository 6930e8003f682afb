//! Saliency generation: RISE (black-box random masking) and GradCAM over the
//! introspection interface.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ExplainError, ModelError};
use crate::imaging::{resize_plane, ImageTensor, SaliencyMap};
use crate::model::{
    introspect_forward, ClassScorer, Concurrency, IntrospectionRecord, ModelDescriptor, ScoreRegion, SegmentationModel,
};

/// Masks evaluated per parallel batch. Memory stays bounded at `CHUNK` masks.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiseMode {
    /// Random Bernoulli grids, bilinearly upsampled with a random sub-cell shift.
    MonteCarlo,
    /// Every binary grid, nearest-upsampled, weighted by its probability under `keep_prob`.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiseConfig {
    pub n_masks: usize,
    pub grid: usize,
    pub keep_prob: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub mode: RiseMode,
    #[serde(default)]
    pub region: ScoreRegion,
}

impl RiseConfig {
    /// Monte Carlo defaults: 4000 masks on a 7x7 grid, keep probability 0.5.
    pub fn for_image(img: &ImageTensor, seed: u64) -> Self {
        Self {
            n_masks: 4000,
            grid: 7,
            keep_prob: 0.5,
            height: img.height(),
            width: img.width(),
            seed,
            mode: RiseMode::MonteCarlo,
            region: ScoreRegion::FrozenArgmax,
        }
    }

    pub fn exhaustive(grid: usize, height: usize, width: usize) -> Self {
        Self {
            n_masks: 1 << (grid * grid).min(16),
            grid,
            keep_prob: 0.5,
            height,
            width,
            seed: 0,
            mode: RiseMode::Exhaustive,
            region: ScoreRegion::FrozenArgmax,
        }
    }

    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.grid == 0 || self.height == 0 || self.width == 0 {
            return Err(ExplainError::InvalidConfig("grid and output size must be positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(ExplainError::InvalidConfig(format!("keep_prob {} outside (0, 1)", self.keep_prob)));
        }
        match self.mode {
            RiseMode::MonteCarlo if self.n_masks == 0 => Err(ExplainError::InvalidConfig("n_masks must be positive".into())),
            RiseMode::Exhaustive if self.grid * self.grid > 16 => Err(ExplainError::InvalidConfig(format!(
                "exhaustive enumeration of a {0}x{0} grid is too large",
                self.grid
            ))),
            _ => Ok(()),
        }
    }

    /// Number of masks this configuration evaluates.
    pub fn mask_count(&self) -> usize {
        match self.mode {
            RiseMode::MonteCarlo => self.n_masks,
            RiseMode::Exhaustive => 1 << (self.grid * self.grid),
        }
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Mask `index` and its weight in the expectation (`1/N` for Monte Carlo,
    /// the grid probability under enumeration).
    pub fn mask(&self, index: usize) -> (Vec<f64>, f64) {
        let (s, h, w) = (self.grid, self.height, self.width);
        match self.mode {
            RiseMode::Exhaustive => {
                let mut kept = 0;
                let grid: Vec<bool> = (0..s * s)
                    .map(|b| {
                        let on = (index >> b) & 1 == 1;
                        kept += on as i32;
                        on
                    })
                    .collect();
                let mut mask = vec![0.0; h * w];
                for y in 0..h {
                    let gy = (y * s / h).min(s - 1);
                    for x in 0..w {
                        let gx = (x * s / w).min(s - 1);
                        mask[y * w + x] = if grid[gy * s + gx] { 1.0 } else { 0.0 };
                    }
                }
                let p = self.keep_prob;
                let weight = p.powi(kept) * (1.0 - p).powi((s * s) as i32 - kept);
                (mask, weight)
            }
            RiseMode::MonteCarlo => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(index as u64);
                let grid: Vec<f64> = (0..s * s)
                    .map(|_| if rng.random_bool(self.keep_prob) { 1.0 } else { 0.0 })
                    .collect();
                let cell_h = h.div_ceil(s);
                let cell_w = w.div_ceil(s);
                let dy = rng.random_range(0..cell_h) as f64;
                let dx = rng.random_range(0..cell_w) as f64;
                let coord = |i: usize, shift: f64, cell: usize| -> (usize, usize, f64) {
                    let g = ((i as f64 + shift + 0.5) / cell as f64 - 0.5).clamp(0.0, (s - 1) as f64);
                    let g0 = g.floor() as usize;
                    let g1 = (g0 + 1).min(s - 1);
                    (g0, g1, g - g0 as f64)
                };
                let cols: Vec<_> = (0..w).map(|x| coord(x, dx, cell_w)).collect();
                let mut mask = vec![0.0; h * w];
                for y in 0..h {
                    let (y0, y1, fy) = coord(y, dy, cell_h);
                    for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let top = grid[y0 * s + x0] * (1.0 - fx) + grid[y0 * s + x1] * fx;
                        let bottom = grid[y1 * s + x0] * (1.0 - fx) + grid[y1 * s + x1] * fx;
                        mask[y * w + x] = top * (1.0 - fy) + bottom * fy;
                    }
                }
                (mask, 1.0 / self.n_masks as f64)
            }
        }
    }
}

/// All masks of the configuration. Only sensible for small configurations.
pub fn generate_rise_masks(cfg: &RiseConfig) -> Result<Vec<Vec<f64>>, ExplainError> {
    cfg.validate()?;
    Ok((0..cfg.mask_count()).map(|i| cfg.mask(i).0).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainResult {
    pub saliency: SaliencyMap,
    pub method: String,
    pub config_digest: String,
    pub model: ModelDescriptor,
    pub seed: u64,
}

/// RISE saliency for `category`. Masks are scored in parallel (unless the
/// model is exclusive) and summed in mask-index order.
pub fn explain_rise(
    model: &dyn SegmentationModel,
    img: &ImageTensor,
    category: u64,
    cfg: &RiseConfig,
) -> Result<ExplainResult, ExplainError> {
    cfg.validate()?;
    if (cfg.height, cfg.width) != (img.height(), img.width()) {
        return Err(ExplainError::InvalidConfig(format!(
            "config is {}x{}, image is {}x{}",
            cfg.height,
            cfg.width,
            img.height(),
            img.width()
        )));
    }
    let expected_mask = cfg.keep_prob;
    if expected_mask <= 0.0 {
        return Err(ExplainError::ZeroExpectation);
    }
    let scorer = ClassScorer::new(model, img, category, cfg.region)?;
    let total = cfg.mask_count();
    let evaluate = |i: usize| -> Result<(Vec<f64>, f64), ModelError> {
        let (mask, weight) = cfg.mask(i);
        let score = scorer.score(&img.masked(&mask))?;
        Ok((mask, weight * score))
    };
    let mut acc = vec![0.0; img.plane_len()];
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let batch: Vec<(Vec<f64>, f64)> = match model.concurrency() {
            Concurrency::ConcurrentSafe => (start..end).into_par_iter().map(evaluate).collect::<Result<_, _>>()?,
            Concurrency::Exclusive => (start..end).map(evaluate).collect::<Result<_, _>>()?,
        };
        for (mask, ws) in batch {
            for (a, m) in acc.iter_mut().zip(&mask) {
                *a += ws * m;
            }
        }
        start = end;
    }
    for a in &mut acc {
        *a /= expected_mask;
    }
    let saliency = SaliencyMap::new(category, img.height(), img.width(), acc)?;
    Ok(ExplainResult {
        saliency,
        method: "RISE".into(),
        config_digest: cfg.digest(),
        model: model.descriptor().clone(),
        seed: cfg.seed,
    })
}

/// GradCAM map from an introspection record, upsampled to `height x width`
/// and min-max normalized.
pub fn gradcam_from_record(
    record: &IntrospectionRecord,
    category: u64,
    height: usize,
    width: usize,
) -> Result<SaliencyMap, ExplainError> {
    let n = record.height * record.width;
    let mut cam = vec![0.0; n];
    for k in 0..record.channels {
        let grads = &record.grads[k * n..(k + 1) * n];
        let alpha = grads.iter().sum::<f64>() / n as f64;
        for (c, a) in cam.iter_mut().zip(&record.activations[k * n..(k + 1) * n]) {
            *c += alpha * a;
        }
    }
    for c in &mut cam {
        *c = c.max(0.0);
    }
    let up = resize_plane(&cam, record.height, record.width, height, width);
    Ok(SaliencyMap::new(category, height, width, up)?.min_max_normalized())
}

pub fn explain_gradcam(
    model: &dyn SegmentationModel,
    img: &ImageTensor,
    category: u64,
) -> Result<ExplainResult, ExplainError> {
    let (_, record) = introspect_forward(model, img, category)?;
    let saliency = gradcam_from_record(&record, category, img.height(), img.width())?;
    Ok(ExplainResult {
        saliency,
        method: "GradCAM".into(),
        config_digest: hex::encode(Sha256::digest(b"gradcam")),
        model: model.descriptor().clone(),
        seed: 0,
    })
}

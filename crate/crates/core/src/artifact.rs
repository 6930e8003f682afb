//! On-disk formats: saliency maps as raw little-endian `f32` plus a JSON sidecar
//! and a grayscale PNG preview; PNG encoding of images and masks.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::ArtifactError;
use crate::explain::ExplainResult;
use crate::imaging::{BinaryMask, ImageTensor, RangeTag, SaliencyMap};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub category: u64,
    pub config_digest: String,
    pub height: usize,
    pub method: String,
    pub model_id: String,
    pub seed: u64,
    pub width: usize,
}

/// Paths written by [`write_saliency_artifact`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyPaths {
    pub raw: PathBuf,
    pub sidecar: PathBuf,
    pub preview: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |e| ArtifactError::Io(path.to_path_buf(), e)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn saliency_raw_bytes(sal: &SaliencyMap) -> Vec<u8> {
    sal.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

/// 8-bit grayscale PNG of the min-max normalized map.
pub fn saliency_preview_png(sal: &SaliencyMap) -> Result<Vec<u8>, ArtifactError> {
    let norm = sal.min_max_normalized();
    let pixels = norm.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = GrayImage::from_raw(sal.width as u32, sal.height as u32, pixels)
        .ok_or_else(|| ArtifactError::Malformed("saliency buffer size".into()))?;
    encode(img)
}

fn encode<P>(img: image::ImageBuffer<P, Vec<u8>>) -> Result<Vec<u8>, ArtifactError>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| ArtifactError::Codec(e.to_string()))?;
    Ok(out.into_inner())
}

/// Writes `<stem>.f32`, `<stem>.json` and `<stem>.png` into `dir`.
pub fn write_saliency_artifact(dir: &Path, stem: &str, result: &ExplainResult) -> Result<SaliencyPaths, ArtifactError> {
    let sal = &result.saliency;
    let paths = SaliencyPaths {
        raw: dir.join(format!("{stem}.f32")),
        sidecar: dir.join(format!("{stem}.json")),
        preview: dir.join(format!("{stem}.png")),
    };
    let sidecar = SaliencySidecar {
        category: sal.category,
        config_digest: result.config_digest.clone(),
        height: sal.height,
        method: result.method.clone(),
        model_id: result.model.model_id.clone(),
        seed: result.seed,
        width: sal.width,
    };
    write_bytes(&paths.raw, &saliency_raw_bytes(sal))?;
    let mut json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    json.push(b'\n');
    write_bytes(&paths.sidecar, &json)?;
    write_bytes(&paths.preview, &saliency_preview_png(sal)?)?;
    Ok(paths)
}

pub fn read_saliency_artifact(raw: &Path, sidecar: &Path) -> Result<(SaliencyMap, SaliencySidecar), ArtifactError> {
    let meta: SaliencySidecar = serde_json::from_slice(&std::fs::read(sidecar).map_err(io_err(sidecar))?)
        .map_err(|e| ArtifactError::Malformed(e.to_string()))?;
    let bytes = std::fs::read(raw).map_err(io_err(raw))?;
    if bytes.len() != meta.height * meta.width * 4 {
        return Err(ArtifactError::Malformed(format!(
            "{} bytes for a {}x{} map",
            bytes.len(),
            meta.height,
            meta.width
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((SaliencyMap::new(meta.category, meta.height, meta.width, values)?, meta))
}

/// Loads a PNG/JPEG as a unit-range RGB tensor.
pub fn load_image(path: &Path) -> Result<ImageTensor, ArtifactError> {
    let img = image::open(path).map_err(|e| ArtifactError::Codec(format!("{}: {e}", path.display())))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, ArtifactError> {
    let img = image::load_from_memory(bytes).map_err(|e| ArtifactError::Codec(e.to_string()))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

fn rgb_to_tensor(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px.0[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(3, h, w, data, RangeTag::Unit).expect("decoded image is well formed")
}

/// PNG of a raw or unit-range image with one or three channels.
pub fn image_png(img: &ImageTensor) -> Result<Vec<u8>, ArtifactError> {
    let unit = img.to_unit()?;
    let (h, w) = (unit.height(), unit.width());
    let byte = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match unit.channels() {
        1 => encode(
            GrayImage::from_raw(w as u32, h as u32, unit.data().iter().map(|v| byte(*v)).collect()).expect("buffer size"),
        ),
        3 => {
            let n = h * w;
            let mut buf = Vec::with_capacity(3 * n);
            for p in 0..n {
                for c in 0..3 {
                    buf.push(byte(unit.data()[c * n + p]));
                }
            }
            encode(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
        }
        c => Err(ArtifactError::Malformed(format!("cannot encode {c}-channel image"))),
    }
}

/// Black/white PNG of a mask.
pub fn mask_png(mask: &BinaryMask) -> Result<Vec<u8>, ArtifactError> {
    let pixels = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    encode(
        GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels).expect("buffer size"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputSpec, ModelDescriptor, StageTag};

    #[test]
    fn saliency_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let result = ExplainResult {
            saliency: SaliencyMap::new(4, 2, 3, vec![0.0, 0.5, 1.0, 2.0, 0.25, 0.125]).unwrap(),
            method: "RISE".into(),
            config_digest: "abc".into(),
            model: ModelDescriptor::new("toy:brightness", StageTag::Base, InputSpec::any_size(3)),
            seed: 42,
        };
        let paths = write_saliency_artifact(dir.path(), "s", &result).unwrap();
        let (sal, meta) = read_saliency_artifact(&paths.raw, &paths.sidecar).unwrap();
        assert_eq!(sal, result.saliency);
        assert_eq!(meta.model_id, "toy:brightness");
        let preview = image::load_from_memory(&std::fs::read(&paths.preview).unwrap()).unwrap().to_luma8();
        assert_eq!(preview.as_raw(), &vec![0, 64, 128, 255, 32, 16]);
    }

    #[test]
    fn image_png_round_trip() {
        let img = ImageTensor::new(3, 2, 2, (0..12).map(|i| i as f64 * 20.0).collect(), RangeTag::Raw255).unwrap();
        let back = decode_image(&image_png(&img).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a * 255.0 - b).abs() < 1e-9);
        }
    }
}

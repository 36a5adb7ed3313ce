use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Reserved mask value excluded from training losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDims);
        }
        if labels.len() != width * height {
            return Err(Error::DimMismatch {
                what: "mask pixel count",
                expected: width * height,
                found: labels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Every non-ignore label must be below `n_classes`.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        for (index, &value) in self.labels.iter().enumerate() {
            if value != IGNORE_LABEL && value as usize >= n_classes {
                return Err(Error::LabelOutOfRange {
                    value,
                    index,
                    n_classes,
                });
            }
        }
        Ok(())
    }

    /// Largest non-ignore label, if any.
    pub fn max_label(&self) -> Option<u8> {
        self.labels
            .iter()
            .copied()
            .filter(|&v| v != IGNORE_LABEL)
            .max()
    }
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDims);
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimMismatch {
                what: "rgb byte count",
                expected: width * height * 3,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Interleaved H×W×3 values scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    super::write_atomic(path, &bytes)
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    if info.width == 0 || info.height == 0 {
        return Err(Error::ZeroDims);
    }
    Ok((info, buf))
}

/// Sidecar path holding the visualization palette of a mask.
pub fn palette_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("palette.json")
}

/// Deterministic display color for a class id.
pub fn palette_color(class_id: u8) -> [u8; 3] {
    if class_id == 0 {
        return [0, 0, 0];
    }
    let x = SplitMix64::new(class_id as u64).next_u64();
    [
        (x >> 16) as u8 | 0x20,
        (x >> 32) as u8 | 0x20,
        (x >> 48) as u8 | 0x20,
    ]
}

/// Writes an 8-bit grayscale PNG where pixel value equals class id, plus a
/// JSON palette sidecar for viewing.
pub fn write_mask_png(mask: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mask.width == 0 || mask.height == 0 {
        return Err(Error::ZeroDims);
    }
    encode_png(
        path,
        mask.width,
        mask.height,
        png::ColorType::Grayscale,
        &mask.labels,
    )?;
    let n = mask.max_label().map_or(0, |m| m as usize + 1);
    let palette: Vec<[u8; 3]> = (0..n).map(|c| palette_color(c as u8)).collect();
    let json = serde_json::to_string(&palette).expect("palette serializes");
    super::write_atomic(&palette_path(path), json.as_bytes())
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    let (info, buf) = decode_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::PngFormat {
            expected: "single-channel",
            found: format!("{:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    MaskImage::new(info.width as usize, info.height as usize, buf)
}

pub fn write_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    encode_png(
        path.as_ref(),
        img.width,
        img.height,
        png::ColorType::Rgb,
        &img.data,
    )
}

/// Reads an 8-bit PNG as RGB. Grayscale is replicated, alpha is dropped.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let (info, buf) = decode_png(path)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::PngFormat {
            expected: "rgb",
            found: format!("{:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        other => {
            return Err(Error::PngFormat {
                expected: "rgb",
                found: format!("{other:?}"),
            })
        }
    };
    RgbImage::new(info.width as usize, info.height as usize, data)
}

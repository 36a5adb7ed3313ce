//! On-disk formats: FT01 tensors, dataset manifests, mask and image PNGs.

mod image;
mod manifest;
mod tensor;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use image::{
    palette_color, palette_path, read_mask_png, read_rgb_png, write_mask_png, write_rgb_png,
    MaskImage, RgbImage, IGNORE_LABEL,
};
pub use manifest::{
    read_manifest, relative_to, write_manifest, DatasetManifest, SampleRecord, MANIFEST_VERSION,
};
pub use tensor::{
    read_tensor, write_tensor, Dtype, FeatureTensor, TensorData, MAGIC, MAX_ELEMENTS,
};

/// Writes `bytes` to a sibling temp file and renames it over `path`, creating
/// parent directories as needed.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a JSON value atomically with a trailing newline.
pub fn write_json<T: serde::Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path.as_ref(), s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

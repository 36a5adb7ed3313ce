//! Turning cluster assignments into image-resolution masks and a synthetic
//! (image, mask) dataset.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterModel};
use crate::error::{Error, Result};
use crate::tensorio::{self, DatasetManifest, MaskImage, SampleRecord, IGNORE_LABEL};

/// Cluster ids at feature resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimMismatch {
                what: "label grid cells",
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

    pub fn into_mask(self) -> Result<MaskImage> {
        MaskImage::new(self.width, self.height, self.labels)
    }
}

/// Many-to-one relabeling from cluster ids to semantic class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub n_classes: usize,
    /// `mapping[cluster] = class`.
    pub mapping: Vec<u8>,
}

impl ClassMap {
    pub fn new(mapping: Vec<u8>, n_classes: usize) -> Result<Self> {
        let cm = Self { n_classes, mapping };
        cm.validate()?;
        Ok(cm)
    }

    pub fn identity(k: usize) -> Self {
        Self {
            n_classes: k,
            mapping: (0..k as u8).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > IGNORE_LABEL as usize {
            return Err(Error::invalid(
                "n_classes",
                format!("{} out of 1..=255", self.n_classes),
            ));
        }
        if let Some(&bad) = self.mapping.iter().find(|&&c| c as usize >= self.n_classes) {
            return Err(Error::invalid(
                "mapping",
                format!("class {bad} not below n_classes {}", self.n_classes),
            ));
        }
        Ok(())
    }

    pub fn class_of(&self, cluster: u8) -> Option<u8> {
        self.mapping.get(cluster as usize).copied()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cm: ClassMap = tensorio::read_json(path)?;
        cm.validate()?;
        Ok(cm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tensorio::write_json(self, path)
    }
}

/// Nearest-neighbor upsampling: output pixel (x, y) takes the label of cell
/// (floor((x + 0.5)·w / out_w), floor((y + 0.5)·h / out_h)).
pub fn upsample_labels(grid: &LabelGrid, out_w: usize, out_h: usize) -> Result<MaskImage> {
    if out_w == 0 || out_h == 0 || grid.width == 0 || grid.height == 0 {
        return Err(Error::ZeroDims);
    }
    if out_w < grid.width || out_h < grid.height {
        return Err(Error::invalid(
            "target dims",
            format!(
                "{out_w}x{out_h} is smaller than the {}x{} grid",
                grid.width, grid.height
            ),
        ));
    }
    // floor((2x + 1)·w / (2·out_w)) in exact integer arithmetic.
    let src_x: Vec<usize> = (0..out_w)
        .map(|x| (2 * x + 1) * grid.width / (2 * out_w))
        .collect();
    let mut labels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = (2 * y + 1) * grid.height / (2 * out_h);
        let row = &grid.labels[sy * grid.width..(sy + 1) * grid.width];
        labels.extend(src_x.iter().map(|&sx| row[sx]));
    }
    MaskImage::new(out_w, out_h, labels)
}

/// Relabels every non-ignore pixel through `cm`.
pub fn apply_classmap(mask: &MaskImage, cm: &ClassMap) -> Result<MaskImage> {
    let labels = mask
        .labels
        .iter()
        .map(|&v| {
            if v == IGNORE_LABEL {
                Ok(v)
            } else {
                cm.class_of(v).ok_or(Error::UnmappedCluster { id: v })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MaskImage::new(mask.width, mask.height, labels)
}

/// Reads only the width and height of a PNG.
pub(crate) fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

pub const SYNTH_MANIFEST: &str = "manifest.json";

/// Labels every sample of `manifest_in` with `model`, writes the masks under
/// `out_dir/masks/` and returns (and writes) a manifest whose `mask_path`
/// points at them. Output depends only on the inputs.
pub fn synth_dataset(
    manifest_in: &DatasetManifest,
    model: &ClusterModel,
    cm: Option<&ClassMap>,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if let Some(cm) = cm {
        cm.validate()?;
        if cm.mapping.len() < model.k() {
            return Err(Error::invalid(
                "classmap",
                format!("{} entries for {} clusters", cm.mapping.len(), model.k()),
            ));
        }
    }
    let n_classes = cm.map_or(model.k(), |cm| cm.n_classes);
    for s in &manifest_in.samples {
        if s.feature_path.is_none() {
            return Err(Error::MissingField {
                id: s.id.clone(),
                field: "feature_path",
            });
        }
    }
    let mask_dir = out_dir.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut out = DatasetManifest::new(manifest_in.feature_layer, out_dir);

    let records = manifest_in
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<SampleRecord> {
            let feat_rel = s.feature_path.as_deref().expect("checked above");
            let features = tensorio::read_tensor(manifest_in.resolve(feat_rel))?;
            let grid = clustering::assign(model, &features)?;
            let image_path = manifest_in.resolve(&s.image_path);
            let (w, h) = png_dims(&image_path)?;
            let mut mask = upsample_labels(&grid, w, h)?;
            if let Some(cm) = cm {
                mask = apply_classmap(&mask, cm)?;
            }
            mask.validate(n_classes)?;
            let mask_path = mask_dir.join(format!("{i:05}.png"));
            tensorio::write_mask_png(&mask, &mask_path)?;

            let mut rec = s.clone();
            rec.image_path = out.relative_path(&image_path)?;
            rec.feature_path = Some(out.relative_path(&manifest_in.resolve(feat_rel))?);
            if let Some(l) = &s.latent_path {
                rec.latent_path = Some(out.relative_path(&manifest_in.resolve(l))?);
            }
            rec.mask_path = Some(out.relative_path(&mask_path)?);
            Ok(rec)
        })
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.in_sample(&manifest_in.samples[i].id)))
        .collect::<Result<Vec<_>>>()?;
    out.samples = records;
    tensorio::write_manifest(&out, out_dir.join(SYNTH_MANIFEST))?;
    Ok(out)
}

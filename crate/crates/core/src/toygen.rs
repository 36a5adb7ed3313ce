//! Procedural stand-in for a pretrained generator.
//!
//! Each sample is a cartoon face (disk, eyes, mouth and optional extra parts)
//! with known per-pixel regions. Feature maps embed the majority region of
//! every cell plus Gaussian noise, latents are standard normal, and a "hat"
//! bar is drawn exactly when the latent lies on the positive side of a fixed
//! hidden direction. Every output is a deterministic function of the config
//! and seeds.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentdir;
use crate::rng::{mix_seed, SplitMix64};
use crate::tensorio::{self, DatasetManifest, FeatureTensor, MaskImage, RgbImage, SampleRecord};

pub const BACKGROUND: u8 = 0;
pub const FACE: u8 = 1;
pub const EYES: u8 = 2;
pub const MOUTH: u8 = 3;
pub const NOSE: u8 = 4;
pub const BROWS: u8 = 5;
pub const NECK: u8 = 6;
pub const EARS: u8 = 7;
pub const MAX_REGIONS: usize = 8;

const BASE_COLORS: [[f64; 3]; MAX_REGIONS] = [
    [0.10, 0.15, 0.30],
    [0.90, 0.72, 0.58],
    [0.25, 0.55, 0.95],
    [0.80, 0.12, 0.18],
    [0.65, 0.40, 0.30],
    [0.30, 0.18, 0.08],
    [0.70, 0.55, 0.45],
    [0.95, 0.60, 0.50],
];
const HAT_COLOR: [f64; 3] = [0.15, 0.75, 0.25];
const COLOR_JITTER: f64 = 0.06;
const PIXEL_NOISE: f64 = 0.02;
/// Layer index recorded in toy manifests.
pub const TOY_LAYER: i32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub image_size: usize,
    pub feature_size: usize,
    pub feature_dim: usize,
    /// background, face, eyes, mouth, then nose, brows, neck, ears.
    pub n_regions: usize,
    pub noise_sigma: f64,
    pub latent_dim: usize,
    pub dataset_seed: u64,
    /// Give the hat its own class id (`n_regions`) instead of background.
    #[serde(default)]
    pub attr_class: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            feature_size: 16,
            feature_dim: 24,
            n_regions: 4,
            noise_sigma: 0.1,
            latent_dim: 16,
            dataset_seed: 0,
            attr_class: false,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(dataset_seed: u64) -> Self {
        Self {
            dataset_seed,
            ..Self::default()
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_regions + self.attr_class as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid("image_size", "must be at least 16"));
        }
        if self.feature_size == 0 || !self.image_size.is_multiple_of(self.feature_size) {
            return Err(Error::invalid(
                "feature_size",
                format!(
                    "{} must divide image_size {}",
                    self.feature_size, self.image_size
                ),
            ));
        }
        if !(2..=MAX_REGIONS).contains(&self.n_regions) {
            return Err(Error::invalid(
                "n_regions",
                format!("{} not in 2..=8", self.n_regions),
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::invalid(
                "noise_sigma",
                "must be finite and non-negative",
            ));
        }
        if self.feature_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("feature_dim/latent_dim", "must be positive"));
        }
        Ok(())
    }
}

pub struct ToySample {
    pub image: RgbImage,
    /// `feature_dim × feature_size × feature_size`.
    pub features: FeatureTensor,
    pub gt_mask: MaskImage,
    pub latent: Vec<f64>,
    pub attr_label: u8,
}

/// Dataset-level state: region embeddings and the hidden attribute direction.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    cfg: ToyConfig,
    embeddings: Vec<f64>,
    attr_direction: Vec<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl ToyGenerator {
    pub fn new(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(cfg.dataset_seed);
        let rows = cfg.n_classes();
        let d = cfg.feature_dim;
        let min_sep = 3.0 * cfg.noise_sigma * (d as f64).sqrt();
        let mut embeddings = Vec::new();
        for attempt in 0.. {
            if attempt == 1000 {
                return Err(Error::invalid(
                    "noise_sigma",
                    "could not draw embeddings separated by 3·sigma·sqrt(D)",
                ));
            }
            embeddings = (0..rows * d).map(|_| rng.next_gaussian()).collect();
            if Self::separated(&embeddings, d, min_sep) {
                break;
            }
        }
        let mut attr_direction: Vec<f64> =
            (0..cfg.latent_dim).map(|_| rng.next_gaussian()).collect();
        let norm = attr_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        attr_direction.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            cfg: cfg.clone(),
            embeddings,
            attr_direction,
        })
    }

    fn separated(e: &[f64], d: usize, min_sep: f64) -> bool {
        let rows: Vec<&[f64]> = e.chunks_exact(d).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dist = distance(rows[i], rows[j]);
                if dist < min_sep || dist == 0.0 {
                    return false;
                }
            }
        }
        true
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Region embedding matrix, `n_classes × feature_dim` row-major.
    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    /// The hidden unit direction that decides the attribute.
    pub fn attr_direction(&self) -> &[f64] {
        &self.attr_direction
    }

    pub fn sample(&self, sample_seed: u64) -> Result<ToySample> {
        let cfg = &self.cfg;
        let mut rng = SplitMix64::new(sample_seed);

        // Latents are rounded to f32 first so the stored file and the
        // attribute rule agree exactly.
        let latent: Vec<f64> = (0..cfg.latent_dim)
            .map(|_| rng.next_gaussian() as f32 as f64)
            .collect();
        let score: f64 = latent
            .iter()
            .zip(&self.attr_direction)
            .map(|(a, b)| a * b)
            .sum();
        let attr_label = (score > 0.0) as u8;

        let size = cfg.image_size;
        let s = size as f64 / 64.0;
        let cx = size as f64 / 2.0 + rng.uniform(-4.0, 4.0) * s;
        let cy = size as f64 / 2.0 + 2.0 * s + rng.uniform(-3.0, 3.0) * s;
        let r = (22.0 + rng.uniform(-2.0, 2.0)) * s;

        let jitter = |rng: &mut SplitMix64, base: [f64; 3]| -> [f64; 3] {
            base.map(|c| (c + rng.uniform(-COLOR_JITTER, COLOR_JITTER)).clamp(0.0, 1.0))
        };
        let mut colors = [[0.0; 3]; MAX_REGIONS];
        for (c, base) in colors.iter_mut().zip(BASE_COLORS) {
            *c = jitter(&mut rng, base);
        }
        let hat_color = jitter(&mut rng, HAT_COLOR);

        let has = |region: u8| (region as usize) < cfg.n_regions;
        let in_disk = |px: f64, py: f64, x0: f64, y0: f64, rad: f64| {
            (px - x0).powi(2) + (py - y0).powi(2) <= rad * rad
        };
        let in_rect = |px: f64, py: f64, x0: f64, x1: f64, y0: f64, y1: f64| {
            px >= x0 && px < x1 && py >= y0 && py < y1
        };
        let (ex, ey, er) = (0.42 * r, cy - 0.24 * r, 0.32 * r);
        let hat_bottom = cy - r - s;

        let mut regions = vec![BACKGROUND; size * size];
        let mut hat = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut region = BACKGROUND;
                if has(EARS)
                    && (in_disk(px, py, cx - r, cy, 0.18 * r)
                        || in_disk(px, py, cx + r, cy, 0.18 * r))
                {
                    region = EARS;
                }
                if has(NECK)
                    && in_rect(
                        px,
                        py,
                        cx - 0.35 * r,
                        cx + 0.35 * r,
                        cy + 0.7 * r,
                        (cy + 1.3 * r).min(size as f64 - 2.0 * s),
                    )
                {
                    region = NECK;
                }
                if in_disk(px, py, cx, cy, r) {
                    region = FACE;
                }
                if has(EYES)
                    && (in_disk(px, py, cx - ex, ey, er) || in_disk(px, py, cx + ex, ey, er))
                {
                    region = EYES;
                }
                if has(BROWS)
                    && (in_rect(
                        px,
                        py,
                        cx - ex - 0.3 * r,
                        cx - ex + 0.3 * r,
                        cy - 0.62 * r,
                        cy - 0.52 * r,
                    ) || in_rect(
                        px,
                        py,
                        cx + ex - 0.3 * r,
                        cx + ex + 0.3 * r,
                        cy - 0.62 * r,
                        cy - 0.52 * r,
                    ))
                {
                    region = BROWS;
                }
                if has(NOSE) && in_disk(px, py, cx, cy + 0.12 * r, 0.12 * r) {
                    region = NOSE;
                }
                if has(MOUTH)
                    && in_rect(
                        px,
                        py,
                        cx - 0.5 * r,
                        cx + 0.5 * r,
                        cy + 0.28 * r,
                        cy + 0.74 * r,
                    )
                {
                    region = MOUTH;
                }
                let i = y * size + x;
                regions[i] = region;
                hat[i] = attr_label == 1
                    && region == BACKGROUND
                    && in_rect(px, py, cx - 0.8 * r, cx + 0.8 * r, 2.0 * s, hat_bottom);
            }
        }

        let hat_class = cfg.n_regions as u8;
        let gt: Vec<u8> = regions
            .iter()
            .zip(&hat)
            .map(|(&reg, &h)| if h && cfg.attr_class { hat_class } else { reg })
            .collect();

        let mut pixels = Vec::with_capacity(size * size * 3);
        for (&reg, &h) in regions.iter().zip(&hat) {
            let base = if h { hat_color } else { colors[reg as usize] };
            for c in base {
                let v = (c + PIXEL_NOISE * rng.next_gaussian()).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }

        let fs = cfg.feature_size;
        let d = cfg.feature_dim;
        let cell_gt = majority_downsample(&gt, size, size / fs, cfg.n_classes());
        let mut features = vec![0f32; d * fs * fs];
        for (cell, &class) in cell_gt.iter().enumerate() {
            let e = &self.embeddings[class as usize * d..(class as usize + 1) * d];
            for (ch, &v) in e.iter().enumerate() {
                features[ch * fs * fs + cell] = (v + cfg.noise_sigma * rng.next_gaussian()) as f32;
            }
        }

        Ok(ToySample {
            image: RgbImage::new(size, size, pixels)?,
            features: FeatureTensor::from_f32(&[d, fs, fs], features)?,
            gt_mask: MaskImage::new(size, size, gt)?,
            latent,
            attr_label,
        })
    }
}

/// Majority label of each `cell×cell` block of a square `size×size` label
/// image; ties go to the lowest label.
fn majority_downsample(labels: &[u8], size: usize, cell: usize, n_labels: usize) -> Vec<u8> {
    let out = size / cell;
    let mut grid = Vec::with_capacity(out * out);
    let mut hist = vec![0usize; n_labels.max(1)];
    for gy in 0..out {
        for gx in 0..out {
            hist.iter_mut().for_each(|h| *h = 0);
            for y in gy * cell..(gy + 1) * cell {
                for &l in &labels[y * size + gx * cell..y * size + (gx + 1) * cell] {
                    hist[l as usize] += 1;
                }
            }
            let mut best = 0;
            for (l, &count) in hist.iter().enumerate() {
                if count > hist[best] {
                    best = l;
                }
            }
            grid.push(best as u8);
        }
    }
    grid
}

/// Ground truth at feature resolution: the majority class of each cell, as
/// used when the feature maps were built.
pub fn feature_resolution_mask(gt: &MaskImage, feature_size: usize) -> Result<MaskImage> {
    if gt.width != gt.height || feature_size == 0 || !gt.width.is_multiple_of(feature_size) {
        return Err(Error::invalid(
            "feature_size",
            format!(
                "{} does not divide a {}x{} mask",
                feature_size, gt.width, gt.height
            ),
        ));
    }
    let n = gt.max_label().map_or(1, |m| m as usize + 1);
    let grid = majority_downsample(&gt.labels, gt.width, gt.width / feature_size, n);
    MaskImage::new(feature_size, feature_size, grid)
}

/// Single sample with dataset-level state rebuilt from `cfg`.
pub fn toy_sample(cfg: &ToyConfig, sample_seed: u64) -> Result<ToySample> {
    ToyGenerator::new(cfg)?.sample(sample_seed)
}

pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    mix_seed(dataset_seed, index as u64)
}

pub const TOY_MANIFEST: &str = "manifest.json";
pub const TOY_CONFIG: &str = "toygen.json";

/// Writes `n` samples under `out_dir` (images/, features/, latents/,
/// masks/) together with `manifest.json` and the generating config.
/// Sample ids are `s00000`, `s00001`, ...
pub fn toy_dataset(
    cfg: &ToyConfig,
    n: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    toy_dataset_range(cfg, 0, n, out_dir)
}

/// Like [`toy_dataset`] for sample indices `start..start + n`, so held-out
/// sets can share a dataset seed without overlapping the training samples.
pub fn toy_dataset_range(
    cfg: &ToyConfig,
    start: usize,
    n: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let out_dir = out_dir.as_ref();
    let gen = ToyGenerator::new(cfg)?;
    for sub in ["images", "features", "latents", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let records = (start..start + n)
        .into_par_iter()
        .map(|index| -> Result<SampleRecord> {
            let id = format!("s{index:05}");
            let sample = gen.sample(sample_seed(cfg.dataset_seed, index))?;
            let image = format!("images/{id}.png");
            let features = format!("features/{id}.ft01");
            let latent = format!("latents/{id}.ft01");
            let mask = format!("masks/{id}.png");
            tensorio::write_rgb_png(&sample.image, out_dir.join(&image))?;
            tensorio::write_tensor(&sample.features, out_dir.join(&features))?;
            latentdir::write_latent(&sample.latent, out_dir.join(&latent))?;
            tensorio::write_mask_png(&sample.gt_mask, out_dir.join(&mask))?;
            Ok(SampleRecord {
                id,
                image_path: image,
                feature_path: Some(features),
                latent_path: Some(latent),
                mask_path: Some(mask),
                attr_label: Some(sample.attr_label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(TOY_LAYER, out_dir);
    manifest.samples = records;
    tensorio::write_json(cfg, out_dir.join(TOY_CONFIG))?;
    tensorio::write_manifest(&manifest, out_dir.join(TOY_MANIFEST))?;
    Ok(manifest)
}

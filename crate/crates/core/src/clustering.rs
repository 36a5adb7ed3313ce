//! K-means over per-pixel feature vectors.
//!
//! Points are streamed in fixed-size chunks. Per-chunk work may run on the
//! rayon pool, but every partial result is collected in chunk order and
//! reduced sequentially, so results do not depend on the worker count.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::LabelGrid;
use crate::rng::{mix_seed, SplitMix64};
use crate::tensorio::{self, DatasetManifest, FeatureTensor};

/// Points per chunk for in-memory datasets.
pub const DEFAULT_CHUNK_POINTS: usize = 4096;
/// Streams longer than this switch to minibatch updates by default.
pub const MINIBATCH_THRESHOLD: usize = 1 << 22;
pub const DEFAULT_MINIBATCH: usize = 65_536;

enum Storage {
    Memory {
        data: Vec<f32>,
        chunk_points: usize,
    },
    Files {
        paths: Vec<PathBuf>,
        height: usize,
        width: usize,
    },
}

/// A stream of `n_points` feature vectors of length `dim`, read in chunks.
///
/// File-backed datasets hold one chunk per feature map (C×H×W on disk,
/// transposed to H·W rows of C values on load), so only one map per worker
/// is resident at a time.
pub struct PixelDataset {
    dim: usize,
    n_points: usize,
    feature_layer: i32,
    l2_normalized: bool,
    storage: Storage,
}

impl std::fmt::Debug for PixelDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PixelDataset")
            .field("dim", &self.dim)
            .field("n_points", &self.n_points)
            .field("feature_layer", &self.feature_layer)
            .field("l2_normalized", &self.l2_normalized)
            .finish()
    }
}

pub(crate) fn l2_normalize_rows(data: &mut [f32], dim: usize) {
    for row in data.chunks_exact_mut(dim) {
        let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
    }
}

/// Transposes a C×H×W map to H·W rows of C values.
pub(crate) fn chw_to_rows(chw: &[f32], channels: usize, pixels: usize) -> Vec<f32> {
    let mut rows = vec![0f32; chw.len()];
    for c in 0..channels {
        let plane = &chw[c * pixels..(c + 1) * pixels];
        for (p, &v) in plane.iter().enumerate() {
            rows[p * channels + c] = v;
        }
    }
    rows
}

impl PixelDataset {
    /// In-memory dataset from row-major `n × dim` values.
    pub fn from_rows(data: Vec<f32>, dim: usize) -> Result<Self> {
        Self::from_rows_chunked(data, dim, DEFAULT_CHUNK_POINTS)
    }

    pub fn from_rows_chunked(data: Vec<f32>, dim: usize, chunk_points: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                what: "row length",
                expected: dim,
                found: data.len() % dim,
            });
        }
        if chunk_points == 0 {
            return Err(Error::invalid("chunk_points", "must be positive"));
        }
        Ok(Self {
            dim,
            n_points: data.len() / dim,
            feature_layer: -1,
            l2_normalized: false,
            storage: Storage::Memory { data, chunk_points },
        })
    }

    /// Streams the feature maps referenced by a manifest, in manifest order.
    /// Only headers are checked here; payloads are read chunk by chunk.
    pub fn from_manifest(manifest: &DatasetManifest, l2_normalize: bool) -> Result<Self> {
        let mut paths = Vec::with_capacity(manifest.samples.len());
        let mut shape: Option<Vec<u64>> = None;
        for s in &manifest.samples {
            let rel = s
                .feature_path
                .as_deref()
                .ok_or_else(|| Error::MissingField {
                    id: s.id.clone(),
                    field: "feature_path",
                })?;
            let path = manifest.resolve(rel);
            let dims = read_tensor_dims(&path).map_err(|e| e.in_sample(&s.id))?;
            if dims.len() != 3 {
                return Err(Error::DimMismatch {
                    what: "feature tensor rank",
                    expected: 3,
                    found: dims.len(),
                }
                .in_sample(&s.id));
            }
            match &shape {
                None => shape = Some(dims),
                Some(first) if *first != dims => {
                    return Err(Error::invalid(
                        "feature dims",
                        format!("{dims:?} differs from first sample's {first:?}"),
                    )
                    .in_sample(&s.id))
                }
                _ => {}
            }
            paths.push(path);
        }
        let shape = shape.ok_or(Error::Empty("manifest has no samples"))?;
        let (dim, height, width) = (shape[0] as usize, shape[1] as usize, shape[2] as usize);
        if dim == 0 {
            return Err(Error::invalid("dim", "feature channel count is zero"));
        }
        Ok(Self {
            dim,
            n_points: paths.len() * height * width,
            feature_layer: manifest.feature_layer,
            l2_normalized: l2_normalize,
            storage: Storage::Files {
                paths,
                height,
                width,
            },
        })
    }

    pub fn with_feature_layer(mut self, layer: i32) -> Self {
        self.feature_layer = layer;
        self
    }

    /// Normalizes every point to unit L2 norm (zero vectors stay zero).
    pub fn l2_normalized(mut self) -> Self {
        if !self.l2_normalized {
            if let Storage::Memory { data, .. } = &mut self.storage {
                l2_normalize_rows(data, self.dim);
            }
            self.l2_normalized = true;
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn feature_layer(&self) -> i32 {
        self.feature_layer
    }

    pub fn is_l2_normalized(&self) -> bool {
        self.l2_normalized
    }

    pub fn chunk_points(&self) -> usize {
        match &self.storage {
            Storage::Memory { chunk_points, .. } => *chunk_points,
            Storage::Files { height, width, .. } => height * width,
        }
    }

    pub fn n_chunks(&self) -> usize {
        self.n_points.div_ceil(self.chunk_points())
    }

    /// Rows of chunk `i`; global index of its first point is
    /// `i * chunk_points()`.
    pub fn chunk(&self, i: usize) -> Result<Cow<'_, [f32]>> {
        match &self.storage {
            Storage::Memory { data, chunk_points } => {
                let start = i * chunk_points * self.dim;
                let end = ((i + 1) * chunk_points * self.dim).min(data.len());
                Ok(Cow::Borrowed(&data[start..end]))
            }
            Storage::Files {
                paths,
                height,
                width,
            } => {
                let t = tensorio::read_tensor(&paths[i])?;
                let expected = [self.dim as u64, *height as u64, *width as u64];
                if t.dims() != expected {
                    return Err(Error::invalid(
                        "feature dims",
                        format!("{:?} changed to {:?} while streaming", expected, t.dims()),
                    ));
                }
                let mut rows = chw_to_rows(t.as_f32()?, self.dim, height * width);
                if self.l2_normalized {
                    l2_normalize_rows(&mut rows, self.dim);
                }
                Ok(Cow::Owned(rows))
            }
        }
    }

    pub fn point(&self, index: usize) -> Result<Vec<f32>> {
        let cp = self.chunk_points();
        let chunk = self.chunk(index / cp)?;
        let local = index % cp;
        Ok(chunk[local * self.dim..(local + 1) * self.dim].to_vec())
    }

    /// Runs `f(chunk_index, rows)` over all chunks on the rayon pool and
    /// returns the results in chunk order.
    fn map_chunks<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &[f32]) -> T + Sync + Send,
    {
        (0..self.n_chunks())
            .into_par_iter()
            .map(|i| self.chunk(i).map(|rows| f(i, &rows)))
            .collect()
    }
}

fn read_tensor_dims(path: &Path) -> Result<Vec<u64>> {
    use std::io::Read;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::new();
    file.take(4 + 4 + 8 * 8)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    if head.len() < 8 || head[..4] != tensorio::MAGIC {
        // Let the full decoder produce the precise error.
        return Ok(tensorio::read_tensor(path)?.dims().to_vec());
    }
    let ndim = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
    if ndim == 0 || head.len() < 8 + 8 * ndim {
        return Ok(tensorio::read_tensor(path)?.dims().to_vec());
    }
    Ok((0..ndim)
        .map(|i| {
            let b = &head[8 + 8 * i..16 + 8 * i];
            u64::from_le_bytes(b.try_into().expect("8 bytes"))
        })
        .collect())
}

/// Cluster index for each point (r_nk = 1 iff `labels[n] == k`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<u32>,
}

/// K centroids plus the provenance needed to reproduce masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    centroids_f32: Vec<f32>,
    pub feature_layer: i32,
    pub l2_normalized: bool,
    pub inertia_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    k: usize,
    dim: usize,
    feature_layer: i32,
    l2_normalized: bool,
    inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn from_centroids(k: usize, dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("k/dim", "must be positive"));
        }
        if centroids.len() != k * dim {
            return Err(Error::DimMismatch {
                what: "centroid values",
                expected: k * dim,
                found: centroids.len(),
            });
        }
        let centroids_f32 = centroids.iter().map(|&v| v as f32).collect();
        Ok(Self {
            k,
            dim,
            centroids,
            centroids_f32,
            feature_layer: -1,
            l2_normalized: false,
            inertia_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    fn set_centroids(&mut self, centroids: Vec<f64>) {
        self.centroids_f32 = centroids.iter().map(|&v| v as f32).collect();
        self.centroids = centroids;
    }

    /// Nearest centroid by 32-bit squared distance; lowest index wins ties.
    #[inline]
    pub fn nearest(&self, x: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for (k, c) in self.centroids_f32.chunks_exact(self.dim).enumerate() {
            let d: f32 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    #[inline]
    fn sq_dist64(&self, x: &[f32], k: usize) -> f64 {
        x.iter()
            .zip(self.centroid(k))
            .map(|(&a, &b)| {
                let d = a as f64 - b;
                d * d
            })
            .sum()
    }

    /// Writes centroids as a K×D FT01 tensor at `path` and the remaining
    /// fields as JSON next to it (`path` with a `.json` extension).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let t = FeatureTensor::from_f32(&[self.k, self.dim], self.centroids_f32.clone())?;
        tensorio::write_tensor(&t, path)?;
        tensorio::write_json(
            &ModelSidecar {
                k: self.k,
                dim: self.dim,
                feature_layer: self.feature_layer,
                l2_normalized: self.l2_normalized,
                inertia_history: self.inertia_history.clone(),
            },
            sidecar_path(path),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t = tensorio::read_tensor(path)?;
        let meta: ModelSidecar = tensorio::read_json(sidecar_path(path))?;
        if t.dims() != [meta.k as u64, meta.dim as u64] {
            return Err(Error::invalid(
                "centroids",
                format!(
                    "tensor dims {:?} disagree with k={} dim={}",
                    t.dims(),
                    meta.k,
                    meta.dim
                ),
            ));
        }
        let centroids = t.as_f32()?.iter().map(|&v| v as f64).collect();
        let mut model = Self::from_centroids(meta.k, meta.dim, centroids)?;
        model.feature_layer = meta.feature_layer;
        model.l2_normalized = meta.l2_normalized;
        model.inertia_history = meta.inertia_history;
        Ok(model)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn check_dim(model: &ClusterModel, data: &PixelDataset) -> Result<()> {
    if model.dim != data.dim() {
        return Err(Error::DimMismatch {
            what: "feature dimension",
            expected: model.dim,
            found: data.dim(),
        });
    }
    Ok(())
}

/// k-means++ seeding: first centroid uniform, each next one drawn with
/// probability proportional to squared distance from the nearest chosen one.
pub fn kmeanspp_init(data: &PixelDataset, k: usize, seed: u64) -> Result<ClusterModel> {
    let n = data.n_points();
    if n == 0 {
        return Err(Error::Empty("dataset has no points"));
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(
            "k",
            format!("{k} exceeds the {n} available points"),
        ));
    }
    let dim = data.dim();
    let cp = data.chunk_points();
    let mut rng = SplitMix64::new(seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = data.point(rng.next_index(n))?;
    centroids.extend(first.iter().map(|&v| v as f64));

    let mut min_d2 = vec![f64::INFINITY; n];
    let mut latest = first;
    for _ in 1..k {
        let c = &latest;
        let updates = data.map_chunks(|_, rows| {
            rows.chunks_exact(dim)
                .map(|x| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() as f64)
                .collect::<Vec<f64>>()
        })?;
        for (i, d2s) in updates.into_iter().enumerate() {
            for (slot, d) in min_d2[i * cp..].iter_mut().zip(d2s) {
                if d < *slot {
                    *slot = d;
                }
            }
        }
        let total: f64 = min_d2.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::invalid(
                "k",
                format!("dataset has fewer than {k} distinct points"),
            ));
        }
        let target = rng.next_f64() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let pick = pick.expect("total > 0 implies a positive weight");
        latest = data.point(pick)?;
        centroids.extend(latest.iter().map(|&v| v as f64));
    }

    let mut model = ClusterModel::from_centroids(k, dim, centroids)?;
    model.feature_layer = data.feature_layer();
    model.l2_normalized = data.is_l2_normalized();
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Points per minibatch step; `None` runs full-batch Lloyd.
    pub minibatch_size: Option<usize>,
    /// Seed for minibatch chunk draws.
    pub seed: u64,
}

impl Default for LloydConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            rel_tol: 1e-4,
            minibatch_size: None,
            seed: 0,
        }
    }
}

/// Minibatch size used when none is requested explicitly.
pub fn auto_minibatch(n_points: usize) -> Option<usize> {
    (n_points > MINIBATCH_THRESHOLD).then_some(DEFAULT_MINIBATCH)
}

struct Farthest {
    dist: f64,
    index: usize,
    cluster: usize,
    point: Vec<f32>,
}

struct ChunkStats {
    sums: Vec<f64>,
    counts: Vec<u64>,
    inertia: f64,
    farthest: Vec<Farthest>,
}

/// Keeps the `cap` farthest points, ordered by distance descending then
/// index ascending.
fn push_farthest(list: &mut Vec<Farthest>, cand: Farthest, cap: usize) {
    let pos = list
        .iter()
        .position(|f| cand.dist > f.dist || (cand.dist == f.dist && cand.index < f.index))
        .unwrap_or(list.len());
    if pos < cap {
        list.insert(pos, cand);
        list.truncate(cap);
    }
}

fn chunk_stats(model: &ClusterModel, chunk: usize, rows: &[f32], cp: usize) -> ChunkStats {
    let (k, dim) = (model.k, model.dim);
    let mut stats = ChunkStats {
        sums: vec![0.0; k * dim],
        counts: vec![0; k],
        inertia: 0.0,
        farthest: Vec::new(),
    };
    for (local, x) in rows.chunks_exact(dim).enumerate() {
        let (c, _) = model.nearest(x);
        let d = model.sq_dist64(x, c);
        stats.inertia += d;
        stats.counts[c] += 1;
        for (s, &v) in stats.sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
            *s += v as f64;
        }
        let worst = stats.farthest.last().map(|f| f.dist);
        if stats.farthest.len() < k || worst.is_some_and(|w| d > w) {
            push_farthest(
                &mut stats.farthest,
                Farthest {
                    dist: d,
                    index: chunk * cp + local,
                    cluster: c,
                    point: x.to_vec(),
                },
                k,
            );
        }
    }
    stats
}

/// Lloyd iterations from `init`. Each iteration records J for the new
/// assignment against the previous centroids, so the full-batch history is
/// non-increasing.
pub fn lloyd_fit(
    data: &PixelDataset,
    init: &ClusterModel,
    cfg: &LloydConfig,
) -> Result<ClusterModel> {
    check_dim(init, data)?;
    if cfg.max_iters == 0 {
        return Err(Error::invalid("max_iters", "must be at least 1"));
    }
    if data.n_points() == 0 {
        return Err(Error::Empty("dataset has no points"));
    }
    match cfg.minibatch_size {
        Some(0) => Err(Error::invalid("minibatch_size", "must be positive")),
        Some(b) => minibatch_fit(data, init, cfg, b),
        None => full_batch_fit(data, init, cfg),
    }
}

/// Best of `restarts` independent k-means++ + Lloyd runs, ranked by the
/// final inertia (lowest restart index wins ties). Restart `r` seeds its
/// initialization with `mix_seed(seed, r)`.
pub fn fit_restarts(
    data: &PixelDataset,
    k: usize,
    seed: u64,
    restarts: usize,
    cfg: &LloydConfig,
) -> Result<(ClusterModel, f64)> {
    if restarts == 0 {
        return Err(Error::invalid("restarts", "must be at least 1"));
    }
    let mut best: Option<(ClusterModel, f64)> = None;
    for r in 0..restarts {
        let init = kmeanspp_init(data, k, mix_seed(seed, r as u64))?;
        let model = lloyd_fit(data, &init, cfg)?;
        let j = inertia(&model, data)?;
        if best.as_ref().is_none_or(|(_, b)| j < *b) {
            best = Some((model, j));
        }
    }
    Ok(best.expect("at least one restart"))
}

fn converged(history: &[f64], rel_tol: f64) -> bool {
    match history {
        [.., last] if *last == 0.0 => true,
        [.., prev, last] => (prev - last) / prev < rel_tol,
        _ => false,
    }
}

fn full_batch_fit(
    data: &PixelDataset,
    init: &ClusterModel,
    cfg: &LloydConfig,
) -> Result<ClusterModel> {
    let mut model = init.clone();
    model.inertia_history.clear();
    let (k, dim) = (model.k, model.dim);
    let cp = data.chunk_points();

    for _ in 0..cfg.max_iters {
        let parts = data.map_chunks(|i, rows| chunk_stats(&model, i, rows, cp))?;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0u64; k];
        let mut inertia = 0.0;
        let mut farthest: Vec<Farthest> = Vec::new();
        for part in parts {
            for (s, p) in sums.iter_mut().zip(&part.sums) {
                *s += p;
            }
            for (c, p) in counts.iter_mut().zip(&part.counts) {
                *c += p;
            }
            inertia += part.inertia;
            for f in part.farthest {
                push_farthest(&mut farthest, f, k);
            }
        }

        // Empty clusters take over the farthest remaining points.
        let mut candidates = farthest.into_iter();
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            for cand in candidates.by_ref() {
                if counts[cand.cluster] > 1 {
                    counts[cand.cluster] -= 1;
                    for (s, &v) in sums[cand.cluster * dim..(cand.cluster + 1) * dim]
                        .iter_mut()
                        .zip(&cand.point)
                    {
                        *s -= v as f64;
                    }
                    counts[empty] = 1;
                    for (s, &v) in sums[empty * dim..(empty + 1) * dim]
                        .iter_mut()
                        .zip(&cand.point)
                    {
                        *s = v as f64;
                    }
                    break;
                }
            }
        }

        let mut next = model.centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (m, s) in next[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..])
                {
                    *m = s / n;
                }
            }
        }
        model.set_centroids(next);
        model.inertia_history.push(inertia);
        if converged(&model.inertia_history, cfg.rel_tol) {
            break;
        }
    }
    Ok(model)
}

fn minibatch_fit(
    data: &PixelDataset,
    init: &ClusterModel,
    cfg: &LloydConfig,
    batch: usize,
) -> Result<ClusterModel> {
    let mut model = init.clone();
    model.inertia_history.clear();
    let (k, dim) = (model.k, model.dim);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut seen = vec![0u64; k];
    let steps_per_pass = data.n_points().div_ceil(batch);
    let mut labels = Vec::with_capacity(batch);

    for _ in 0..cfg.max_iters {
        for _ in 0..steps_per_pass {
            let chunk = data.chunk(rng.next_index(data.n_chunks()))?;
            let n_rows = chunk.len() / dim;
            let picks: Vec<usize> = if n_rows <= batch {
                (0..n_rows).collect()
            } else {
                (0..batch).map(|_| rng.next_index(n_rows)).collect()
            };
            labels.clear();
            labels.extend(
                picks
                    .iter()
                    .map(|&r| model.nearest(&chunk[r * dim..(r + 1) * dim]).0),
            );
            let mut centroids = std::mem::take(&mut model.centroids);
            for (&r, &c) in picks.iter().zip(&labels) {
                seen[c] += 1;
                let eta = 1.0 / seen[c] as f64;
                let x = &chunk[r * dim..(r + 1) * dim];
                for (m, &v) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *m += eta * (v as f64 - *m);
                }
            }
            model.set_centroids(centroids);
        }
        let j = inertia(&model, data)?;
        model.inertia_history.push(j);
        if converged(&model.inertia_history, cfg.rel_tol) {
            break;
        }
    }
    Ok(model)
}

/// Sum of squared distances from each point to its assigned centroid,
/// accumulated in f64 in chunk order.
pub fn inertia(model: &ClusterModel, data: &PixelDataset) -> Result<f64> {
    check_dim(model, data)?;
    let dim = model.dim;
    let parts = data.map_chunks(|_, rows| {
        rows.chunks_exact(dim)
            .map(|x| model.sq_dist64(x, model.nearest(x).0))
            .sum::<f64>()
    })?;
    Ok(parts.into_iter().sum())
}

/// Labels for every point of the dataset, in stream order.
pub fn assign_points(model: &ClusterModel, data: &PixelDataset) -> Result<Assignment> {
    check_dim(model, data)?;
    let dim = model.dim;
    let parts = data.map_chunks(|_, rows| {
        rows.chunks_exact(dim)
            .map(|x| model.nearest(x).0 as u32)
            .collect::<Vec<_>>()
    })?;
    Ok(Assignment {
        labels: parts.into_iter().flatten().collect(),
    })
}

/// Labels each pixel of a C×H×W feature map with its nearest centroid.
pub fn assign(model: &ClusterModel, features: &FeatureTensor) -> Result<LabelGrid> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::DimMismatch {
            what: "feature tensor rank",
            expected: 3,
            found: shape.len(),
        });
    }
    let (channels, height, width) = (shape[0], shape[1], shape[2]);
    if channels != model.dim {
        return Err(Error::DimMismatch {
            what: "feature channels",
            expected: model.dim,
            found: channels,
        });
    }
    if model.k > 255 {
        return Err(Error::invalid("k", "label grids hold at most 255 clusters"));
    }
    let mut rows = chw_to_rows(features.as_f32()?, channels, height * width);
    if model.l2_normalized {
        l2_normalize_rows(&mut rows, channels);
    }
    let labels = rows
        .par_chunks(channels * width)
        .flat_map_iter(|row| row.chunks_exact(channels).map(|x| model.nearest(x).0 as u8))
        .collect();
    LabelGrid::new(width, height, labels)
}

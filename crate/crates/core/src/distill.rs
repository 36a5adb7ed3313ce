//! Distillation into a small fully-convolutional segmentation network.
//!
//! Architecture (all stride 1, spatial size preserved):
//! conv 3×3 (3→16, pad 1) → ReLU → conv 3×3 dilation 2 (16→32, pad 2) →
//! ReLU → conv 1×1 (32→n_classes). Forward and backward passes are written
//! out by hand and are generic over `f32` (training) and `f64` (gradient
//! checks, bit-reproducibility runs).

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, SplitMix64};
use crate::tensorio::{
    self, DatasetManifest, FeatureTensor, MaskImage, RgbImage, SampleRecord, IGNORE_LABEL,
};

pub const IN_CHANNELS: usize = 3;
pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;
pub const CONV2_DILATION: usize = 2;
/// Smallest image side the network accepts.
pub const MIN_SIDE: usize = 5;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Network weights. Convolution kernels are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnParams<T> {
    pub n_classes: usize,
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub conv3_w: Vec<T>,
    pub conv3_b: Vec<T>,
}

const TENSOR_NAMES: [&str; 6] = [
    "conv1_weight",
    "conv1_bias",
    "conv2_weight",
    "conv2_bias",
    "conv3_weight",
    "conv3_bias",
];

impl<T: Real> FcnParams<T> {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            n_classes,
            conv1_w: vec![T::zero(); CONV1_CHANNELS * IN_CHANNELS * 9],
            conv1_b: vec![T::zero(); CONV1_CHANNELS],
            conv2_w: vec![T::zero(); CONV2_CHANNELS * CONV1_CHANNELS * 9],
            conv2_b: vec![T::zero(); CONV2_CHANNELS],
            conv3_w: vec![T::zero(); n_classes * CONV2_CHANNELS],
            conv3_b: vec![T::zero(); n_classes],
        }
    }

    pub fn shapes(n_classes: usize) -> [Vec<usize>; 6] {
        [
            vec![CONV1_CHANNELS, IN_CHANNELS, 3, 3],
            vec![CONV1_CHANNELS],
            vec![CONV2_CHANNELS, CONV1_CHANNELS, 3, 3],
            vec![CONV2_CHANNELS],
            vec![n_classes, CONV2_CHANNELS, 1, 1],
            vec![n_classes],
        ]
    }

    pub fn tensors(&self) -> [&Vec<T>; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_shapes(&self) -> Result<()> {
        for (t, shape) in self.tensors().iter().zip(Self::shapes(self.n_classes)) {
            let want: usize = shape.iter().product();
            if t.len() != want {
                return Err(Error::DimMismatch {
                    what: "parameter tensor",
                    expected: want,
                    found: t.len(),
                });
            }
        }
        Ok(())
    }

    pub fn convert<U: Real>(&self) -> FcnParams<U> {
        let conv = |v: &Vec<T>| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().expect("real")).expect("real"))
                .collect()
        };
        FcnParams {
            n_classes: self.n_classes,
            conv1_w: conv(&self.conv1_w),
            conv1_b: conv(&self.conv1_b),
            conv2_w: conv(&self.conv2_w),
            conv2_b: conv(&self.conv2_b),
            conv3_w: conv(&self.conv3_w),
            conv3_b: conv(&self.conv3_b),
        }
    }

    /// Writes one FT01 tensor per parameter plus `params.json` listing the
    /// shapes. Values are stored as f32.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut entries = Vec::new();
        for ((name, t), shape) in TENSOR_NAMES
            .iter()
            .zip(self.tensors())
            .zip(Self::shapes(self.n_classes))
        {
            let data: Vec<f32> = t.iter().map(|v| v.to_f32().expect("real")).collect();
            let file = format!("{name}.ft01");
            tensorio::write_tensor(&FeatureTensor::from_f32(&shape, data)?, dir.join(&file))?;
            entries.push(TensorEntry {
                name: name.to_string(),
                file,
                dims: shape,
            });
        }
        tensorio::write_json(
            &ParamsManifest {
                n_classes: self.n_classes,
                tensors: entries,
            },
            dir.join(PARAMS_MANIFEST),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ParamsManifest = tensorio::read_json(dir.join(PARAMS_MANIFEST))?;
        if meta.n_classes < 2 {
            return Err(Error::invalid("n_classes", "must be at least 2"));
        }
        let mut params = Self::zeros(meta.n_classes);
        let shapes = Self::shapes(meta.n_classes);
        for ((name, slot), shape) in TENSOR_NAMES.iter().zip(params.tensors_mut()).zip(shapes) {
            let entry = meta
                .tensors
                .iter()
                .find(|e| e.name == *name)
                .ok_or_else(|| Error::invalid("params", format!("missing tensor {name}")))?;
            let t = tensorio::read_tensor(dir.join(&entry.file))?;
            if t.shape() != shape {
                return Err(Error::invalid(
                    "params",
                    format!("{name} has dims {:?}, expected {shape:?}", t.shape()),
                ));
            }
            *slot = t.as_f32()?.iter().map(|&v| cast(v as f64)).collect();
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(params)
    }
}

pub const PARAMS_MANIFEST: &str = "params.json";
pub const LOSS_CURVE: &str = "loss_curve.json";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamsManifest {
    n_classes: usize,
    tensors: Vec<TensorEntry>,
}

/// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
pub fn fcn_init<T: Real>(n_classes: usize, seed: u64) -> Result<FcnParams<T>> {
    if !(2..=IGNORE_LABEL as usize).contains(&n_classes) {
        return Err(Error::invalid(
            "n_classes",
            format!("{n_classes} not in 2..=255"),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let mut p = FcnParams::zeros(n_classes);
    let fill = |rng: &mut SplitMix64, w: &mut Vec<T>, fan_in: usize| {
        let std = (2.0 / fan_in as f64).sqrt();
        for v in w.iter_mut() {
            *v = cast(std * rng.next_gaussian());
        }
    };
    fill(&mut rng, &mut p.conv1_w, IN_CHANNELS * 9);
    fill(&mut rng, &mut p.conv2_w, CONV1_CHANNELS * 9);
    fill(&mut rng, &mut p.conv3_w, CONV2_CHANNELS);
    Ok(p)
}

/// H×W×3 image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimMismatch {
                what: "image values",
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

    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| cast(v as f64 / 255.0)).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::invalid(
                "image",
                format!(
                    "{}x{} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
                    self.width, self.height
                ),
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input image"));
        }
        Ok(())
    }

    /// Channel planes, `3 × (H·W)`.
    fn planes(&self) -> Vec<T> {
        let n = self.width * self.height;
        let mut out = vec![T::zero(); 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        out
    }
}

/// Per-pixel class scores, stored class-major (`n_classes` planes of H·W).
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub width: usize,
    pub height: usize,
    pub n_classes: usize,
    pub planes: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn at(&self, x: usize, y: usize, class: usize) -> T {
        self.planes[class * self.width * self.height + y * self.width + x]
    }
}

/// 3×3 convolution with zero padding equal to the dilation.
#[allow(clippy::too_many_arguments)]
fn conv3x3<T: Real>(
    input: &[T],
    cin: usize,
    weights: &[T],
    bias: &[T],
    cout: usize,
    dil: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let n = h * w;
    let mut out = vec![T::zero(); cout * n];
    for o in 0..cout {
        let plane_out = &mut out[o * n..(o + 1) * n];
        plane_out.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..cin {
            let plane_in = &input[c * n..(c + 1) * n];
            for ky in 0..3 {
                let dy = (ky as isize - 1) * dil as isize;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..3 {
                    let dx = (kx as isize - 1) * dil as isize;
                    let (x0, x1) = valid_range(dx, w);
                    let wv = weights[((o * cin + c) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * w;
                        let src = &plane_in[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        let dst = &mut plane_out[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a 3×3 convolution: accumulates into `dw`, `db` and, when
/// given, `dinput`.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Real>(
    input: &[T],
    cin: usize,
    weights: &[T],
    dout: &[T],
    cout: usize,
    dil: usize,
    h: usize,
    w: usize,
    dw: &mut [T],
    db: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    let n = h * w;
    for o in 0..cout {
        let g = &dout[o * n..(o + 1) * n];
        let mut bsum = T::zero();
        for &v in g {
            bsum += v;
        }
        db[o] += bsum;
        for c in 0..cin {
            let plane_in = &input[c * n..(c + 1) * n];
            for ky in 0..3 {
                let dy = (ky as isize - 1) * dil as isize;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..3 {
                    let dx = (kx as isize - 1) * dil as isize;
                    let (x0, x1) = valid_range(dx, w);
                    let widx = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let wv = weights[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let src_start =
                            ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                        let len = x1 - x0;
                        let src = &plane_in[src_start as usize..src_start as usize + len];
                        let gr = &g[y * w + x0..y * w + x1];
                        for (&a, &b) in gr.iter().zip(src) {
                            acc += a * b;
                        }
                        if let Some(din) = dinput.as_deref_mut() {
                            let dst = &mut din
                                [c * n + src_start as usize..c * n + src_start as usize + len];
                            for (d, &b) in dst.iter_mut().zip(gr) {
                                *d += wv * b;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// Output rows (or columns) whose shifted source index stays inside `0..len`.
#[inline]
fn valid_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(lo as isize) as usize;
    (lo.min(len), hi.min(len))
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v.iter_mut() {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

struct Activations<T> {
    input: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    logits: Vec<T>,
}

fn forward_cached<T: Real>(p: &FcnParams<T>, image: &Image<T>) -> Activations<T> {
    let (h, w) = (image.height, image.width);
    let n = h * w;
    let input = image.planes();
    let mut a1 = conv3x3(
        &input,
        IN_CHANNELS,
        &p.conv1_w,
        &p.conv1_b,
        CONV1_CHANNELS,
        1,
        h,
        w,
    );
    relu_in_place(&mut a1);
    let mut a2 = conv3x3(
        &a1,
        CONV1_CHANNELS,
        &p.conv2_w,
        &p.conv2_b,
        CONV2_CHANNELS,
        CONV2_DILATION,
        h,
        w,
    );
    relu_in_place(&mut a2);
    let mut logits = vec![T::zero(); p.n_classes * n];
    for k in 0..p.n_classes {
        let out = &mut logits[k * n..(k + 1) * n];
        out.iter_mut().for_each(|v| *v = p.conv3_b[k]);
        for c in 0..CONV2_CHANNELS {
            let wv = p.conv3_w[k * CONV2_CHANNELS + c];
            for (o, &a) in out.iter_mut().zip(&a2[c * n..(c + 1) * n]) {
                *o += wv * a;
            }
        }
    }
    Activations {
        input,
        a1,
        a2,
        logits,
    }
}

pub fn fcn_forward<T: Real>(p: &FcnParams<T>, image: &Image<T>) -> Result<Logits<T>> {
    p.check_shapes()?;
    image.check()?;
    let acts = forward_cached(p, image);
    Ok(Logits {
        width: image.width,
        height: image.height,
        n_classes: p.n_classes,
        planes: acts.logits,
    })
}

/// Per-pixel argmax; the lowest class index wins ties.
pub fn fcn_predict<T: Real>(p: &FcnParams<T>, image: &Image<T>) -> Result<MaskImage> {
    let logits = fcn_forward(p, image)?;
    let n = image.width * image.height;
    let labels = (0..n)
        .map(|px| {
            let mut best = 0;
            for k in 1..p.n_classes {
                if logits.planes[k * n + px] > logits.planes[best * n + px] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    MaskImage::new(image.width, image.height, labels)
}

/// One training pair.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub image: Image<T>,
    pub mask: MaskImage,
}

/// Sum of per-pixel cross-entropy over labeled pixels and the gradient of
/// `scale ×` that sum.
fn example_loss_grad<T: Real>(p: &FcnParams<T>, ex: &Example<T>, scale: T) -> (f64, FcnParams<T>) {
    let (h, w) = (ex.image.height, ex.image.width);
    let n = h * w;
    let nc = p.n_classes;
    let acts = forward_cached(p, &ex.image);
    let mut grads = FcnParams::zeros(nc);

    let mut loss = 0.0f64;
    let mut dlogits = vec![T::zero(); nc * n];
    let mut probs = vec![T::zero(); nc];
    for (px, &label) in ex.mask.labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let mut max = acts.logits[px];
        for k in 1..nc {
            max = max.max(acts.logits[k * n + px]);
        }
        let mut sum = T::zero();
        for (k, pr) in probs.iter_mut().enumerate() {
            *pr = (acts.logits[k * n + px] - max).exp();
            sum += *pr;
        }
        let lse = max + sum.ln();
        loss += (lse - acts.logits[label as usize * n + px])
            .to_f64()
            .expect("real");
        for (k, &pr) in probs.iter().enumerate() {
            let target = if k == label as usize {
                T::one()
            } else {
                T::zero()
            };
            dlogits[k * n + px] = (pr / sum - target) * scale;
        }
    }

    // conv3 (1×1)
    let mut da2 = vec![T::zero(); CONV2_CHANNELS * n];
    for k in 0..nc {
        let g = &dlogits[k * n..(k + 1) * n];
        let mut bsum = T::zero();
        for &v in g {
            bsum += v;
        }
        grads.conv3_b[k] += bsum;
        for c in 0..CONV2_CHANNELS {
            let a = &acts.a2[c * n..(c + 1) * n];
            let mut acc = T::zero();
            for (&gv, &av) in g.iter().zip(a) {
                acc += gv * av;
            }
            grads.conv3_w[k * CONV2_CHANNELS + c] += acc;
            let wv = p.conv3_w[k * CONV2_CHANNELS + c];
            for (d, &gv) in da2[c * n..(c + 1) * n].iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
    }
    for (d, &a) in da2.iter_mut().zip(&acts.a2) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }

    let mut da1 = vec![T::zero(); CONV1_CHANNELS * n];
    conv3x3_backward(
        &acts.a1,
        CONV1_CHANNELS,
        &p.conv2_w,
        &da2,
        CONV2_CHANNELS,
        CONV2_DILATION,
        h,
        w,
        &mut grads.conv2_w,
        &mut grads.conv2_b,
        Some(&mut da1),
    );
    for (d, &a) in da1.iter_mut().zip(&acts.a1) {
        if a <= T::zero() {
            *d = T::zero();
        }
    }
    conv3x3_backward(
        &acts.input,
        IN_CHANNELS,
        &p.conv1_w,
        &da1,
        CONV1_CHANNELS,
        1,
        h,
        w,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
        None,
    );
    (loss, grads)
}

fn check_batch<T: Real>(p: &FcnParams<T>, batch: &[Example<T>]) -> Result<usize> {
    p.check_shapes()?;
    let mut labeled = 0;
    for ex in batch {
        ex.image.check()?;
        if ex.mask.width != ex.image.width || ex.mask.height != ex.image.height {
            return Err(Error::DimMismatch {
                what: "mask pixels vs image pixels",
                expected: ex.image.width * ex.image.height,
                found: ex.mask.labels.len(),
            });
        }
        ex.mask.validate(p.n_classes)?;
        labeled += ex
            .mask
            .labels
            .iter()
            .filter(|&&l| l != IGNORE_LABEL)
            .count();
    }
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(labeled)
}

/// Mean cross-entropy over all labeled pixels of the batch and its gradient.
/// Per-example work runs in parallel; gradients are summed in batch order.
pub fn loss_and_grad<T: Real>(p: &FcnParams<T>, batch: &[Example<T>]) -> Result<(T, FcnParams<T>)> {
    let labeled = check_batch(p, batch)?;
    let scale: T = T::one() / cast(labeled as f64);
    let parts: Vec<(f64, FcnParams<T>)> = batch
        .par_iter()
        .map(|ex| example_loss_grad(p, ex, scale))
        .collect();
    let mut total = 0.0f64;
    let mut grads = FcnParams::zeros(p.n_classes);
    for (loss, g) in parts {
        total += loss;
        for (acc, part) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    Ok((cast(total / labeled as f64), grads))
}

/// Mean cross-entropy only.
pub fn batch_loss<T: Real>(p: &FcnParams<T>, batch: &[Example<T>]) -> Result<T> {
    loss_and_grad(p, batch).map(|(l, _)| l)
}

/// SGD with momentum: `v ← momentum·v − lr·grad`, `p ← p + v`. Returns the
/// batch loss measured before the update.
pub fn fcn_train_step<T: Real>(
    params: &mut FcnParams<T>,
    velocity: &mut FcnParams<T>,
    batch: &[Example<T>],
    lr: T,
    momentum: T,
) -> Result<T> {
    if velocity.n_classes != params.n_classes {
        return Err(Error::DimMismatch {
            what: "velocity classes",
            expected: params.n_classes,
            found: velocity.n_classes,
        });
    }
    let (loss, grads) = loss_and_grad(params, batch)?;
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grads.tensors())
    {
        for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi - lr * gi;
            *pi += *vi;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr < 10.0) {
            return Err(Error::invalid("lr", format!("{} not in (0, 10)", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("{} not in [0, 1)", self.momentum),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub params: FcnParams<T>,
    /// Mean step loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains from `fcn_init(n_classes, cfg.seed)` on in-memory examples,
/// reshuffling every epoch with the reference RNG.
pub fn train_on<T: Real>(
    examples: &[Example<T>],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("no training examples"));
    }
    let mut params = fcn_init::<T>(n_classes, cfg.seed)?;
    check_batch(&params, examples)?;
    let mut velocity = FcnParams::zeros(n_classes);
    let mut rng = SplitMix64::new(mix_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let (lr, momentum) = (cast::<T>(cfg.lr), cast::<T>(cfg.momentum));
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<T>> = idx.iter().map(|&i| examples[i].clone()).collect();
            let loss = match fcn_train_step(&mut params, &mut velocity, &batch, lr, momentum) {
                Ok(l) => l,
                // A batch made only of ignore pixels carries no signal.
                Err(Error::NoLabeledPixels) => continue,
                Err(e) => return Err(e),
            };
            sum += loss.to_f64().expect("real");
            steps += 1;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(
                "parameters after an epoch (lower the learning rate)",
            ));
        }
        loss_curve.push(if steps > 0 { sum / steps as f64 } else { 0.0 });
    }
    Ok(TrainOutput { params, loss_curve })
}

/// Loads every (image, mask) pair of a manifest.
pub fn load_examples<T: Real>(manifest: &DatasetManifest) -> Result<Vec<Example<T>>> {
    if manifest.samples.is_empty() {
        return Err(Error::Empty("manifest has no samples"));
    }
    let examples = manifest
        .samples
        .par_iter()
        .map(|s| -> Result<Example<T>> {
            let mask_rel = s.mask_path.as_deref().ok_or_else(|| Error::MissingField {
                id: s.id.clone(),
                field: "mask_path",
            })?;
            let rgb = tensorio::read_rgb_png(manifest.resolve(&s.image_path))
                .map_err(|e| e.in_sample(&s.id))?;
            let mask = tensorio::read_mask_png(manifest.resolve(mask_rel))
                .map_err(|e| e.in_sample(&s.id))?;
            if (mask.width, mask.height) != (rgb.width, rgb.height) {
                return Err(Error::invalid(
                    "mask",
                    format!(
                        "{}x{} mask for a {}x{} image",
                        mask.width, mask.height, rgb.width, rgb.height
                    ),
                )
                .in_sample(&s.id));
            }
            Ok(Example {
                image: Image::from_rgb(&rgb),
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (examples[0].image.width, examples[0].image.height);
    if let Some((i, _)) = examples
        .iter()
        .enumerate()
        .find(|(_, e)| (e.image.width, e.image.height) != (w, h))
    {
        return Err(Error::invalid(
            "image dims",
            format!("differ from the first sample's {w}x{h}"),
        )
        .in_sample(&manifest.samples[i].id));
    }
    Ok(examples)
}

/// Trains on every (image, mask) pair of a manifest.
pub fn fcn_train<T: Real>(
    manifest: &DatasetManifest,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    let examples = load_examples::<T>(manifest)?;
    train_on(&examples, n_classes, cfg)
}

pub const PREDICT_MANIFEST: &str = "manifest.json";

/// Predicts a mask for every image of `manifest_in`, writing
/// `out_dir/masks/{index:05}.png` and `out_dir/manifest.json`.
pub fn predict_dataset<T: Real>(
    p: &FcnParams<T>,
    manifest_in: &DatasetManifest,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if manifest_in.samples.is_empty() {
        return Err(Error::Empty("manifest has no samples"));
    }
    let mask_dir = out_dir.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut out = DatasetManifest::new(manifest_in.feature_layer, out_dir);
    out.samples = manifest_in
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<SampleRecord> {
            let image_path = manifest_in.resolve(&s.image_path);
            let rgb = tensorio::read_rgb_png(&image_path)?;
            let mask = fcn_predict(p, &Image::from_rgb(&rgb))?;
            let mask_path = mask_dir.join(format!("{i:05}.png"));
            tensorio::write_mask_png(&mask, &mask_path)?;
            let mut rec = SampleRecord::new(s.id.clone(), out.relative_path(&image_path)?);
            rec.mask_path = Some(out.relative_path(&mask_path)?);
            Ok(rec)
        })
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.in_sample(&manifest_in.samples[i].id)))
        .collect::<Result<Vec<_>>>()?;
    tensorio::write_manifest(&out, out_dir.join(PREDICT_MANIFEST))?;
    Ok(out)
}

/// ReLU on/off state of every hidden unit (both layers, channel-major).
pub fn activation_pattern<T: Real>(p: &FcnParams<T>, image: &Image<T>) -> Vec<bool> {
    let acts = forward_cached(p, image);
    acts.a1
        .iter()
        .chain(&acts.a2)
        .map(|&a| a > T::zero())
        .collect()
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_params: usize,
    /// Worst relative error over parameters whose `±h` perturbation leaves
    /// every ReLU in the same state.
    pub max_rel_err: f64,
    /// Parameters whose `±h` perturbation flips at least one ReLU. The loss
    /// is not smooth over that interval, so they are re-checked with a step
    /// small enough to keep the pattern fixed.
    pub n_kink: usize,
    pub max_rel_err_kink: f64,
    /// Worst relative error at step `h` over all parameters, kinks included.
    pub max_rel_err_raw: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Central-difference gradient check of [`loss_and_grad`] in 64-bit mode.
pub fn gradient_check(
    p: &FcnParams<f64>,
    batch: &[Example<f64>],
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", "must be positive"));
    }
    let (_, grads) = loss_and_grad(p, batch)?;
    let pattern = |q: &FcnParams<f64>| -> Vec<Vec<bool>> {
        batch
            .iter()
            .map(|ex| activation_pattern(q, &ex.image))
            .collect()
    };
    let base = pattern(p);
    let central = |t: usize, i: usize, step: f64| -> Result<(f64, bool)> {
        let mut plus = p.clone();
        plus.tensors_mut()[t][i] += step;
        let mut minus = p.clone();
        minus.tensors_mut()[t][i] -= step;
        let smooth = pattern(&plus) == base && pattern(&minus) == base;
        let fd = (batch_loss(&plus, batch)? - batch_loss(&minus, batch)?) / (2.0 * step);
        Ok((fd, smooth))
    };
    let mut report = GradCheckReport {
        n_params: 0,
        max_rel_err: 0.0,
        n_kink: 0,
        max_rel_err_kink: 0.0,
        max_rel_err_raw: 0.0,
    };
    for t in 0..6 {
        for i in 0..p.tensors()[t].len() {
            let an = grads.tensors()[t][i];
            let (fd, smooth) = central(t, i, h)?;
            let err = rel_err(fd, an);
            report.n_params += 1;
            report.max_rel_err_raw = report.max_rel_err_raw.max(err);
            if smooth {
                report.max_rel_err = report.max_rel_err.max(err);
                continue;
            }
            report.n_kink += 1;
            let mut step = h;
            let fine = loop {
                step /= 10.0;
                let (fd, smooth) = central(t, i, step)?;
                if smooth || step < h * 1e-6 {
                    break rel_err(fd, an);
                }
            };
            report.max_rel_err_kink = report.max_rel_err_kink.max(fine);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Kernel index of (out, in, ky, kx) for a layer with `cin` inputs.
    fn tap(o: usize, cin: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * cin + c) * 3 + ky) * 3 + kx
    }

    fn random_image(seed: u64, w: usize, h: usize) -> Image<f64> {
        let mut rng = SplitMix64::new(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.next_f64()).collect()).unwrap()
    }

    fn random_mask(seed: u64, w: usize, h: usize, nc: usize) -> MaskImage {
        let mut rng = SplitMix64::new(seed);
        MaskImage::new(w, h, (0..w * h).map(|_| rng.next_index(nc) as u8).collect()).unwrap()
    }

    #[test]
    fn init_deterministic_with_zero_bias() {
        let a = fcn_init::<f64>(4, 9).unwrap();
        assert_eq!(a, fcn_init::<f64>(4, 9).unwrap());
        assert_ne!(a, fcn_init::<f64>(4, 10).unwrap());
        for b in [&a.conv1_b, &a.conv2_b, &a.conv3_b] {
            assert!(b.iter().all(|&v| v == 0.0));
        }
        assert!(fcn_init::<f64>(1, 0).is_err());
    }

    #[test]
    fn init_std_matches_he() {
        let p = fcn_init::<f64>(3, 21).unwrap();
        let n = p.conv1_w.len() as f64;
        assert_eq!(n, 432.0);
        let mean = p.conv1_w.iter().sum::<f64>() / n;
        let std = (p.conv1_w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = (2.0f64 / 27.0).sqrt();
        assert!((std / want - 1.0).abs() < 0.1, "std {std} vs {want}");
    }

    #[test]
    fn zero_network_is_uniform() {
        let p = FcnParams::<f64>::zeros(5);
        let img = random_image(1, 6, 7);
        let logits = fcn_forward(&p, &img).unwrap();
        assert!(logits.planes.iter().all(|&v| v == 0.0));
        let ex = Example {
            image: img.clone(),
            mask: random_mask(2, 6, 7, 5),
        };
        let loss = batch_loss(&p, &[ex]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(fcn_predict(&p, &img)
            .unwrap()
            .labels
            .iter()
            .all(|&l| l == 0));
    }

    #[test]
    fn output_dims_preserved() {
        let p = fcn_init::<f32>(3, 0).unwrap();
        let img = Image::<f32>::new(32, 32, vec![0.5; 32 * 32 * 3]).unwrap();
        let logits = fcn_forward(&p, &img).unwrap();
        assert_eq!((logits.width, logits.height), (32, 32));
        assert_eq!(logits.planes.len(), 3 * 32 * 32);
        assert_eq!(
            fcn_predict(&p, &img).unwrap(),
            fcn_predict(&p, &img).unwrap()
        );
    }

    #[test]
    fn hand_computed_minimal_instance() {
        // A 5×5 image whose only non-zero value is channel 0 at the center
        // (2, 2). Kernels: conv1 has one active tap (out 0, in 0, center,
        // weight 2) and bias -0.5 on out 0; conv2 reads out-0 of conv1 at its
        // center tap with weight 3 into out 0; conv3 maps conv2 out 0 to
        // class 1 with weight 0.5 and bias 0.1.
        let mut p = FcnParams::<f64>::zeros(2);
        p.conv1_w[tap(0, IN_CHANNELS, 0, 1, 1)] = 2.0;
        p.conv1_b[0] = -0.5;
        p.conv2_w[tap(0, CONV1_CHANNELS, 0, 1, 1)] = 3.0;
        p.conv3_w[CONV2_CHANNELS] = 0.5;
        p.conv3_b[1] = 0.1;
        let mut data = vec![0.0; 5 * 5 * 3];
        data[(2 * 5 + 2) * 3] = 1.0;
        let img = Image::new(5, 5, data).unwrap();
        let logits = fcn_forward(&p, &img).unwrap();
        // center: a1 = relu(2·1 − 0.5) = 1.5; a2 = relu(3·1.5) = 4.5;
        // logit1 = 0.5·4.5 + 0.1 = 2.35. elsewhere a1 = relu(−0.5) = 0,
        // so logit1 = 0.1.
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(logits.at(x, y, 0), 0.0);
                let want = if (x, y) == (2, 2) { 2.35 } else { 0.1 };
                assert!((logits.at(x, y, 1) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dilated_tap_reaches_two_pixels() {
        // conv2 right tap (kx = 2) with dilation 2 reads two pixels to the right.
        let mut p = FcnParams::<f64>::zeros(2);
        p.conv1_w[tap(0, IN_CHANNELS, 0, 1, 1)] = 1.0;
        p.conv2_w[tap(0, CONV1_CHANNELS, 0, 1, 2)] = 1.0;
        p.conv3_w[CONV2_CHANNELS] = 1.0;
        let mut data = vec![0.0; 7 * 5 * 3];
        data[(2 * 7 + 4) * 3] = 1.0;
        let img = Image::new(7, 5, data).unwrap();
        let logits = fcn_forward(&p, &img).unwrap();
        assert_eq!(logits.at(2, 2, 1), 1.0);
        let total: f64 = (0..5)
            .flat_map(|y| (0..7).map(move |x| (x, y)))
            .map(|(x, y)| logits.at(x, y, 1))
            .sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = fcn_init::<f64>(3, 5).unwrap();
        let batch = vec![Example {
            image: random_image(6, 5, 5),
            mask: random_mask(7, 5, 5, 3),
        }];
        let report = gradient_check(&p, &batch, 1e-3).unwrap();
        assert_eq!(report.n_params, p.n_params());
        assert!(report.max_rel_err < 1e-3, "{report:?}");
        assert!(report.max_rel_err_kink < 1e-3, "{report:?}");
    }

    #[test]
    fn activation_pattern_tracks_relu() {
        let mut p = FcnParams::<f64>::zeros(2);
        p.conv1_b[0] = 1.0;
        let pat = activation_pattern(&p, &random_image(0, 5, 5));
        assert_eq!(pat.len(), (CONV1_CHANNELS + CONV2_CHANNELS) * 25);
        assert_eq!(pat.iter().filter(|&&b| b).count(), 25);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = fcn_init::<f64>(3, 1).unwrap();
        let before = p.clone();
        let mut v = FcnParams::zeros(3);
        let batch = vec![Example {
            image: random_image(2, 6, 6),
            mask: random_mask(3, 6, 6, 3),
        }];
        let loss = fcn_train_step(&mut p, &mut v, &batch, 0.0, 0.9).unwrap();
        assert!(loss > 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn all_ignore_batch_rejected() {
        let mut p = fcn_init::<f64>(3, 1).unwrap();
        let mut v = FcnParams::zeros(3);
        let batch = vec![Example {
            image: random_image(2, 6, 6),
            mask: MaskImage::filled(6, 6, 255).unwrap(),
        }];
        assert!(matches!(
            fcn_train_step(&mut p, &mut v, &batch, 0.1, 0.9),
            Err(Error::NoLabeledPixels)
        ));
    }

    #[test]
    fn ignore_pixels_do_not_contribute() {
        let p = fcn_init::<f64>(3, 4).unwrap();
        let img = random_image(1, 6, 6);
        let mut mask = random_mask(2, 6, 6, 3);
        let (l1, g1) = loss_and_grad(
            &p,
            &[Example {
                image: img.clone(),
                mask: mask.clone(),
            }],
        )
        .unwrap();
        // Flip the label of a pixel and then ignore it: the remaining
        // pixels' mean loss and gradient must match a mask that simply
        // ignores it.
        mask.labels[0] = 255;
        let (l2, _) = loss_and_grad(
            &p,
            &[Example {
                image: img.clone(),
                mask: mask.clone(),
            }],
        )
        .unwrap();
        mask.labels[0] = (mask.labels[1] + 1) % 3;
        assert_ne!(l1, l2);
        let _ = g1;
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = fcn_init::<f64>(3, 0).unwrap();
        let small = Image::new(4, 5, vec![0.0; 60]).unwrap();
        assert!(fcn_forward(&p, &small).is_err());
        let mut nan = random_image(0, 5, 5);
        nan.data[3] = f64::NAN;
        assert!(matches!(fcn_forward(&p, &nan), Err(Error::NonFinite(_))));
        assert!(matches!(fcn_predict(&p, &nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let p = fcn_init::<f64>(3, 2).unwrap();
        let (w, h) = (20, 18);
        let base = random_image(3, w + 4, h + 4);
        let crop = |dx: usize, dy: usize| {
            let mut data = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                let row = (y + dy) * (w + 4) + dx;
                data.extend_from_slice(&base.data[row * 3..(row + w) * 3]);
            }
            Image::new(w, h, data).unwrap()
        };
        let a = fcn_forward(&p, &crop(0, 0)).unwrap();
        let b = fcn_forward(&p, &crop(2, 3)).unwrap();
        // Receptive field radius is 3; compare pixels at least 3 from every
        // border in both crops.
        for y in 3..h - 3 - 3 {
            for x in 3..w - 3 - 2 {
                for k in 0..3 {
                    assert!((a.at(x + 2, y + 3, k) - b.at(x, y, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = fcn_init::<f32>(4, 3).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(FcnParams::<f32>::load(dir.path()).unwrap(), p);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ex = vec![Example {
            image: random_image(1, 6, 6),
            mask: random_mask(1, 6, 6, 2),
        }];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_on(&ex, 2, &cfg).unwrap();
        assert!(out.loss_curve.is_empty());
        assert_eq!(out.params, fcn_init::<f64>(2, cfg.seed).unwrap());
    }

    #[test]
    fn train_config_validation() {
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 10.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}

//! Linear attribute directions in latent space.
//!
//! A logistic-regression classifier separates latents with and without an
//! attribute; its unit-normalized weight vector is the direction along which
//! latents are pushed to introduce or amplify the attribute.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{self, DatasetManifest, FeatureTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub w: Vec<f64>,
    pub b: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDirection {
    /// Unit-length direction.
    pub g: Vec<f64>,
    /// Offset so that `w·g + bias > 0` predicts the attribute.
    pub bias: f64,
    pub train_accuracy: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionConfig {
    pub l2_penalty: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for DirectionConfig {
    fn default() -> Self {
        Self {
            l2_penalty: 1e-3,
            max_iters: 5000,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Numerically stable ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    pairs: &'a [LatentPair],
    l2: f64,
}

impl Problem<'_> {
    /// Mean logistic loss plus (λ/2)‖θ‖²; the bias (last entry) is not
    /// penalized.
    fn loss(&self, params: &[f64]) -> f64 {
        let (theta, c) = params.split_at(params.len() - 1);
        let data: f64 = self
            .pairs
            .iter()
            .map(|p| {
                let z = dot(&p.w, theta) + c[0];
                let s = if p.b == 1 { 1.0 } else { -1.0 };
                softplus(-s * z)
            })
            .sum::<f64>()
            / self.pairs.len() as f64;
        data + 0.5 * self.l2 * dot(theta, theta)
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (theta, c) = params.split_at(params.len() - 1);
        let n = self.pairs.len() as f64;
        let mut grad = vec![0.0; params.len()];
        for p in self.pairs {
            let z = dot(&p.w, theta) + c[0];
            let s = if p.b == 1 { 1.0 } else { -1.0 };
            let coef = -s * sigmoid(-s * z) / n;
            for (g, &x) in grad.iter_mut().zip(&p.w) {
                *g += coef * x;
            }
            *grad.last_mut().expect("bias slot") += coef;
        }
        for (g, &t) in grad.iter_mut().zip(theta) {
            *g += self.l2 * t;
        }
        grad
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn validate_pairs(pairs: &[LatentPair]) -> Result<usize> {
    let first = pairs.first().ok_or(Error::Empty("no latent pairs"))?;
    let dim = first.w.len();
    if dim == 0 {
        return Err(Error::invalid("latent", "zero-length latent vector"));
    }
    let mut seen = [false; 2];
    for p in pairs {
        if p.w.len() != dim {
            return Err(Error::DimMismatch {
                what: "latent dimension",
                expected: dim,
                found: p.w.len(),
            });
        }
        if p.b > 1 {
            return Err(Error::invalid("label", format!("{} is not 0 or 1", p.b)));
        }
        if p.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector"));
        }
        seen[p.b as usize] = true;
    }
    match seen {
        [true, true] => Ok(dim),
        [false, _] => Err(Error::SingleClass { present: 1 }),
        [_, false] => Err(Error::SingleClass { present: 0 }),
    }
}

/// Fits the direction and also returns the objective value after every
/// accepted step (first entry is the starting value).
pub fn fit_direction_traced(
    pairs: &[LatentPair],
    cfg: &DirectionConfig,
) -> Result<(LatentDirection, Vec<f64>)> {
    let dim = validate_pairs(pairs)?;
    if cfg.l2_penalty.is_nan() || cfg.l2_penalty < 0.0 || cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(Error::invalid(
            "l2_penalty/tol",
            "must be non-negative / positive",
        ));
    }
    let problem = Problem {
        pairs,
        l2: cfg.l2_penalty,
    };
    // Gradient descent is deterministic from the zero start; the seed is
    // carried for reproducibility records only.
    let mut params = vec![0.0; dim + 1];
    let mut loss = problem.loss(&params);
    let mut history = vec![loss];
    let mut step = 1.0;
    for _ in 0..cfg.max_iters {
        let grad = problem.gradient(&params);
        let gnorm2 = dot(&grad, &grad);
        if gnorm2.sqrt() < cfg.tol {
            break;
        }
        // Armijo backtracking from a step slightly larger than the last one.
        step *= 2.0;
        let mut accepted = false;
        while step > 1e-20 {
            let trial: Vec<f64> = params
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - step * g)
                .collect();
            let trial_loss = problem.loss(&trial);
            if trial_loss <= loss - 0.5 * step * gnorm2 {
                params = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(loss);
    }

    let (theta, c) = params.split_at(dim);
    let norm = dot(theta, theta).sqrt();
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::invalid("pairs", "fitted weight vector is zero"));
    }
    let g: Vec<f64> = theta.iter().map(|t| t / norm).collect();
    let bias = c[0] / norm;
    let correct = pairs
        .iter()
        .filter(|p| (dot(&p.w, &g) + bias > 0.0) == (p.b == 1))
        .count();
    Ok((
        LatentDirection {
            g,
            bias,
            train_accuracy: correct as f64 / pairs.len() as f64,
            n_pairs: pairs.len(),
        },
        history,
    ))
}

/// L2-regularized logistic regression by full-batch gradient descent with
/// backtracking line search; the weight vector is returned unit-normalized.
pub fn fit_direction(pairs: &[LatentPair], cfg: &DirectionConfig) -> Result<LatentDirection> {
    fit_direction_traced(pairs, cfg).map(|(d, _)| d)
}

/// `w + alpha·g`.
pub fn manipulate(w: &[f64], dir: &LatentDirection, alpha: f64) -> Result<Vec<f64>> {
    if w.len() != dir.g.len() {
        return Err(Error::DimMismatch {
            what: "latent dimension",
            expected: dir.g.len(),
            found: w.len(),
        });
    }
    Ok(w.iter().zip(&dir.g).map(|(x, g)| x + alpha * g).collect())
}

#[derive(Serialize, Deserialize)]
struct DirectionSidecar {
    bias: f64,
    train_accuracy: f64,
    n_pairs: usize,
}

pub const DIRECTION_TENSOR: &str = "direction.ft01";
pub const DIRECTION_META: &str = "direction.json";

impl LatentDirection {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let g: Vec<f32> = self.g.iter().map(|&v| v as f32).collect();
        tensorio::write_tensor(
            &FeatureTensor::from_f32(&[g.len()], g)?,
            dir.join(DIRECTION_TENSOR),
        )?;
        tensorio::write_json(
            &DirectionSidecar {
                bias: self.bias,
                train_accuracy: self.train_accuracy,
                n_pairs: self.n_pairs,
            },
            dir.join(DIRECTION_META),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let g = read_latent(dir.join(DIRECTION_TENSOR))?;
        let meta: DirectionSidecar = tensorio::read_json(dir.join(DIRECTION_META))?;
        Ok(Self {
            g,
            bias: meta.bias,
            train_accuracy: meta.train_accuracy,
            n_pairs: meta.n_pairs,
        })
    }
}

/// Reads a latent stored as an f32 FT01 tensor of any shape, flattened.
pub fn read_latent(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let t = tensorio::read_tensor(path)?;
    Ok(t.as_f32()?.iter().map(|&v| v as f64).collect())
}

pub fn write_latent(w: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    tensorio::write_tensor(&FeatureTensor::from_f32(&[data.len()], data)?, path)
}

/// Collects (latent, label) pairs; every sample must carry both.
pub fn pairs_from_manifest(manifest: &DatasetManifest) -> Result<Vec<LatentPair>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            let path = s
                .latent_path
                .as_deref()
                .ok_or_else(|| Error::MissingField {
                    id: s.id.clone(),
                    field: "latent_path",
                })?;
            let b = s.attr_label.ok_or_else(|| Error::MissingField {
                id: s.id.clone(),
                field: "attr_label",
            })?;
            let w = read_latent(manifest.resolve(path)).map_err(|e| e.in_sample(&s.id))?;
            Ok(LatentPair { w, b })
        })
        .collect()
}

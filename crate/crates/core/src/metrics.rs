//! Confusion matrices, mean IoU and cluster-to-class matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::ClassMap;
use crate::tensorio::{self, DatasetManifest, MaskImage, IGNORE_LABEL};

/// Pixel counts indexed by (predicted id, ground-truth class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_pred: usize,
    n_gt: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_pred: usize, n_gt: usize) -> Self {
        Self {
            n_pred,
            n_gt,
            counts: vec![0; n_pred * n_gt],
        }
    }

    pub fn from_counts(n_pred: usize, n_gt: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_pred * n_gt {
            return Err(Error::DimMismatch {
                what: "confusion entries",
                expected: n_pred * n_gt,
                found: counts.len(),
            });
        }
        Ok(Self {
            n_pred,
            n_gt,
            counts,
        })
    }

    pub fn n_pred(&self) -> usize {
        self.n_pred
    }

    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.n_gt + gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one (prediction, ground truth) pair. Pixels whose ground truth is
    /// the ignore label are skipped.
    pub fn accumulate(&mut self, pred: &MaskImage, gt: &MaskImage) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(Error::DimMismatch {
                what: "mask pixels",
                expected: gt.labels.len(),
                found: pred.labels.len(),
            });
        }
        let mut local = vec![0u64; self.counts.len()];
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p as usize >= self.n_pred {
                return Err(Error::invalid(
                    "prediction",
                    format!("id {p} not below {} predicted classes", self.n_pred),
                ));
            }
            if g as usize >= self.n_gt {
                return Err(Error::invalid(
                    "ground truth",
                    format!("class {g} not below {} classes", self.n_gt),
                ));
            }
            local[p as usize * self.n_gt + g as usize] += 1;
        }
        for (c, l) in self.counts.iter_mut().zip(local) {
            *c += l;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if (self.n_pred, self.n_gt) != (other.n_pred, other.n_gt) {
            return Err(Error::invalid(
                "confusion shape",
                format!(
                    "{}x{} vs {}x{}",
                    self.n_pred, self.n_gt, other.n_pred, other.n_gt
                ),
            ));
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
        Ok(())
    }

    /// Folds predicted rows through a class map, giving a square C×C matrix.
    pub fn relabel(&self, cm: &ClassMap) -> Result<ConfusionMatrix> {
        if cm.n_classes != self.n_gt {
            return Err(Error::DimMismatch {
                what: "class map classes",
                expected: self.n_gt,
                found: cm.n_classes,
            });
        }
        let mut out = ConfusionMatrix::new(self.n_gt, self.n_gt);
        for p in 0..self.n_pred {
            let c = cm
                .class_of(p as u8)
                .ok_or(Error::UnmappedCluster { id: p as u8 })? as usize;
            for g in 0..self.n_gt {
                out.counts[c * self.n_gt + g] += self.get(p, g);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// IoU per class; `None` for classes absent from both prediction and
    /// ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Dataset-aggregate IoU per class and their unweighted mean over classes
/// with non-empty union.
pub fn mean_iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    if cm.n_pred != cm.n_gt {
        return Err(Error::DimMismatch {
            what: "confusion matrix must be square",
            expected: cm.n_gt,
            found: cm.n_pred,
        });
    }
    let n = cm.n_gt;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let pred_total: u64 = (0..n).map(|g| cm.get(c, g)).sum();
            let gt_total: u64 = (0..n).map(|p| cm.get(p, c)).sum();
            let union = pred_total + gt_total - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Empty("every class has zero union"));
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    OneToOne,
    Majority,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_to_one" => Ok(MatchMode::OneToOne),
            "majority" => Ok(MatchMode::Majority),
            _ => Err(Error::invalid("match", format!("unknown mode {s:?}"))),
        }
    }
}

fn majority_class(cm: &ConfusionMatrix, p: usize) -> u8 {
    let mut best = 0;
    for g in 1..cm.n_gt {
        if cm.get(p, g) > cm.get(p, best) {
            best = g;
        }
    }
    best as u8
}

/// Maps predicted ids to ground-truth classes.
///
/// `OneToOne` solves the assignment problem maximizing matched pixel counts;
/// clusters left over get their majority class. `Majority` sends each
/// cluster to its most frequent class.
pub fn match_clusters(cm: &ConfusionMatrix, mode: MatchMode) -> Result<ClassMap> {
    if cm.n_pred == 0 || cm.n_gt == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut mapping: Vec<u8> = (0..cm.n_pred).map(|p| majority_class(cm, p)).collect();
    if mode == MatchMode::OneToOne {
        if cm.n_pred < cm.n_gt {
            return Err(Error::invalid(
                "match",
                format!(
                    "one_to_one needs at least as many clusters ({}) as classes ({})",
                    cm.n_pred, cm.n_gt
                ),
            ));
        }
        // Rows are classes, columns clusters; minimize negated counts.
        let cost: Vec<Vec<i64>> = (0..cm.n_gt)
            .map(|g| (0..cm.n_pred).map(|p| -(cm.get(p, g) as i64)).collect())
            .collect();
        for (g, p) in hungarian_min(&cost).into_iter().enumerate() {
            mapping[p] = g as u8;
        }
    }
    ClassMap::new(mapping, cm.n_gt)
}

/// Total counts on the (cluster, mapped class) cells.
pub fn matched_intersection(cm: &ConfusionMatrix, map: &ClassMap) -> u64 {
    (0..cm.n_pred)
        .map(|p| cm.get(p, map.mapping[p] as usize))
        .sum()
}

/// Minimum-cost assignment of every row to a distinct column for an n×m cost
/// matrix with n ≤ m (potentials-based Hungarian method, O(n²·m)).
/// Returns the chosen column for each row.
pub fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian_min needs rows <= columns");
    const INF: i64 = i64::MAX / 4;
    // 1-based; column 0 and row 0 are sentinels.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub n_pixels: u64,
    pub mapping: Vec<u8>,
}

impl EvalReport {
    /// Matches `cm` with `mode` and scores the relabeled matrix.
    pub fn from_confusion(cm: &ConfusionMatrix, mode: MatchMode) -> Result<Self> {
        let map = match_clusters(cm, mode)?;
        let square = cm.relabel(&map)?;
        let iou = mean_iou(&square)?;
        Ok(Self {
            per_class: iou.per_class,
            mean: iou.mean,
            n_pixels: cm.total(),
            mapping: map.mapping,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("class  iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("{c:>5}  {v:.4}\n")),
                None => s.push_str(&format!("{c:>5}  -\n")),
            }
        }
        s.push_str(&format!(
            " mean  {:.4}\npixels {}\n",
            self.mean, self.n_pixels
        ));
        s
    }
}

/// Scores every sample of `pred` against the sample with the same id in
/// `gt`. Predicted ids are matched to classes with `mode`; the predicted id
/// range is padded up to the class count so `OneToOne` always applies.
pub fn evaluate_manifests(
    pred: &DatasetManifest,
    gt: &DatasetManifest,
    mode: MatchMode,
) -> Result<EvalReport> {
    if pred.samples.is_empty() {
        return Err(Error::Empty("prediction manifest has no samples"));
    }
    let load = |m: &DatasetManifest, id: &str| -> Result<MaskImage> {
        let s = m
            .get(id)
            .ok_or_else(|| Error::invalid("ground truth", format!("no sample with id {id}")))?;
        let rel = s.mask_path.as_deref().ok_or_else(|| Error::MissingField {
            id: s.id.clone(),
            field: "mask_path",
        })?;
        tensorio::read_mask_png(m.resolve(rel)).map_err(|e| e.in_sample(id))
    };
    let pairs = pred
        .samples
        .iter()
        .map(|s| Ok((load(pred, &s.id)?, load(gt, &s.id)?)))
        .collect::<Result<Vec<_>>>()?;
    let max_label = |m: &MaskImage| {
        m.labels
            .iter()
            .filter(|&&l| l != IGNORE_LABEL)
            .max()
            .copied()
    };
    let n_gt = pairs
        .iter()
        .filter_map(|(_, g)| max_label(g))
        .max()
        .map_or(0, |l| l as usize + 1);
    let n_pred = pairs
        .iter()
        .filter_map(|(p, _)| max_label(p))
        .max()
        .map_or(0, |l| l as usize + 1);
    if n_gt == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let mut cm = ConfusionMatrix::new(n_pred.max(n_gt), n_gt);
    for (i, (p, g)) in pairs.iter().enumerate() {
        cm.accumulate(p, g)
            .map_err(|e| e.in_sample(&pred.samples[i].id))?;
    }
    EvalReport::from_confusion(&cm, mode)
}

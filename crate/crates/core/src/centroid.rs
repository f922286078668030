//! Per-class, per-domain feature centroids with exponential memory, and the
//! centroid alignment penalty.
//!
//! **Batch centroids.** For one image's `[h, w, C]` feature map and a class
//! map on the same grid, class `k`'s batch centroid is the sum of feature
//! vectors at class-`k` pixels divided by the *total* pixel count — exactly
//! as the update rule is written, so rare classes get proportionally small
//! centroids. (A per-class-count mode is available for comparison.) An
//! optional validity mask restricts the numerator to selected pixels; the
//! divisor in total mode stays the full grid size. Classes with no
//! contributing pixel produce nothing.
//!
//! **The bank.** Each domain keeps one running centroid per class, updated as
//! `C <- gamma * C + C_batch` when the class appears in a batch and
//! `C <- gamma * C` when it does not, which reproduces the closed form
//! `sum_x gamma^(t-x) * C_batch_x`. There is no `(1 - gamma)` normalization;
//! both domains share the rule, so the scale cancels once aligned.
//!
//! **Alignment loss.** `L_T = sum_k ||C_k^s - C_k^t||_2^2 + alpha *
//! ||C_k^s - C_k^t||_1` over classes present in *both* banks after the
//! current batch is incorporated (optionally treating absent centroids as
//! zero). Gradients flow only through the current batch's contribution; the
//! decayed history enters as a constant.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorRef};

/// Divisor used by batch centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidNormalize {
    /// Divide every class's feature sum by the total pixel count (default).
    Total,
    /// Divide by the class's own pixel count (plain per-class mean).
    PerClass,
}

/// Downsamples a full-resolution class map to the feature grid by nearest
/// neighbor (source pixel `floor((i + 0.5) * in / out)`).
pub fn downsample_labels(labels: &[usize], h: usize, w: usize, fh: usize, fw: usize) -> Result<Vec<usize>> {
    if labels.len() != h * w {
        return Err(Error::shape(format!("{} labels for a {h}x{w} grid", labels.len())));
    }
    if fh == 0 || fw == 0 || fh > h || fw > w {
        return Err(Error::invalid(format!("cannot downsample {h}x{w} to {fh}x{fw}")));
    }
    let mut out = Vec::with_capacity(fh * fw);
    for y in 0..fh {
        let sy = (((y as f64 + 0.5) * h as f64 / fh as f64).floor() as usize).min(h - 1);
        for x in 0..fw {
            let sx = (((x as f64 + 0.5) * w as f64 / fw as f64).floor() as usize).min(w - 1);
            out.push(labels[sy * w + sx]);
        }
    }
    Ok(out)
}

/// Same nearest-neighbor reduction for a boolean mask.
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, fh: usize, fw: usize) -> Result<Vec<bool>> {
    let as_labels: Vec<usize> = mask.iter().map(|b| usize::from(*b)).collect();
    let down = downsample_labels(&as_labels, h, w, fh, fw)?;
    Ok(down.into_iter().map(|v| v != 0).collect())
}

/// Per-class feature sums of one image on the graph, plus the counts needed
/// to turn them into centroids.
pub struct ClassSums {
    /// Per class: summed feature vector `[C]`, absent if no pixel qualified.
    pub sums: Vec<Option<TensorRef>>,
    /// Per class: number of contributing pixels.
    pub counts: Vec<usize>,
    /// Total grid size (the `Total`-mode divisor contribution).
    pub grid: usize,
}

/// Computes per-class masked feature sums for one `[h, w, C]` map. `labels`
/// live on the same grid; `valid`, when given, gates contributions.
pub fn class_sums(
    g: &mut Graph,
    features: TensorRef,
    labels: &[usize],
    valid: Option<&[bool]>,
    k_classes: usize,
) -> Result<ClassSums> {
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("features must be [H, W, C], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if labels.len() != h * w {
        return Err(Error::shape(format!("{} labels for a {h}x{w} feature grid", labels.len())));
    }
    if let Some(v) = valid {
        if v.len() != h * w {
            return Err(Error::shape(format!("{} mask entries for a {h}x{w} grid", v.len())));
        }
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k_classes) {
        return Err(Error::invalid(format!("class {bad} out of range for {k_classes} classes")));
    }
    let mut sums = Vec::with_capacity(k_classes);
    let mut counts = Vec::with_capacity(k_classes);
    for k in 0..k_classes {
        let mut count = 0usize;
        let mut mask = Tensor::zeros(&[h, w, 1]);
        for i in 0..h * w {
            let ok = labels[i] == k && valid.map_or(true, |v| v[i]);
            if ok {
                mask.data_mut()[i] = 1.0;
                count += 1;
            }
        }
        counts.push(count);
        if count == 0 {
            sums.push(None);
            continue;
        }
        let m = g.constant(mask);
        let mb = g.broadcast_to(m, &shape)?;
        let masked = g.mul(mb, features)?;
        let rows = g.sum_axis(masked, 0, false)?; // [W, C]
        let sum = g.sum_axis(rows, 0, false)?; // [C]
        sums.push(Some(sum));
    }
    Ok(ClassSums { sums, counts, grid: h * w })
}

/// Combines per-image sums into batch centroids (graph refs, `[C]` each).
pub fn batch_centroids(
    g: &mut Graph,
    parts: &[ClassSums],
    norm: CentroidNormalize,
) -> Result<Vec<Option<TensorRef>>> {
    if parts.is_empty() {
        return Err(Error::invalid("batch centroids need at least one image".to_string()));
    }
    let k_classes = parts[0].sums.len();
    if parts.iter().any(|p| p.sums.len() != k_classes) {
        return Err(Error::invalid("images disagree on the class count".to_string()));
    }
    let total_grid: usize = parts.iter().map(|p| p.grid).sum();
    let mut out = Vec::with_capacity(k_classes);
    for k in 0..k_classes {
        let mut acc: Option<TensorRef> = None;
        let mut count = 0usize;
        for p in parts {
            count += p.counts[k];
            if let Some(s) = p.sums[k] {
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s)?,
                });
            }
        }
        let divisor = match norm {
            CentroidNormalize::Total => total_grid,
            CentroidNormalize::PerClass => count,
        };
        out.push(match acc {
            None => None,
            Some(a) => Some(g.scale(a, 1.0 / divisor as f64)?),
        });
    }
    Ok(out)
}

/// Running per-class centroids for one domain.
#[derive(Debug, Clone)]
pub struct CentroidBank {
    pub k_classes: usize,
    pub dim: usize,
    pub gamma: f64,
    centroids: Vec<Vec<f64>>,
    seen: Vec<bool>,
    /// Batches incorporated so far.
    pub updates: u64,
}

impl CentroidBank {
    pub fn new(k_classes: usize, dim: usize, gamma: f64) -> Result<CentroidBank> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("decay must lie in (0, 1), got {gamma}")));
        }
        if k_classes == 0 || dim == 0 {
            return Err(Error::invalid("bank needs at least one class and one feature".to_string()));
        }
        Ok(CentroidBank {
            k_classes,
            dim,
            gamma,
            centroids: vec![vec![0.0; dim]; k_classes],
            seen: vec![false; k_classes],
            updates: 0,
        })
    }

    pub fn seen(&self, k: usize) -> bool {
        self.seen[k]
    }

    /// The running centroid, present once the class has appeared.
    pub fn centroid(&self, k: usize) -> Option<&[f64]> {
        self.seen[k].then(|| self.centroids[k].as_slice())
    }

    /// Incorporates one batch of centroids: decay everything, add what's
    /// present.
    pub fn update(&mut self, batch: &[Option<Vec<f64>>]) -> Result<()> {
        self.check_batch_shape(batch)?;
        for (k, b) in batch.iter().enumerate() {
            if self.seen[k] {
                for v in &mut self.centroids[k] {
                    *v *= self.gamma;
                }
            }
            if let Some(b) = b {
                for (c, add) in self.centroids[k].iter_mut().zip(b) {
                    *c += add;
                }
                self.seen[k] = true;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// What [`update`](Self::update) would store, without mutating: per
    /// class, `gamma * C_old + C_batch` with absent parts dropped.
    pub fn peek_updated(&self, batch: &[Option<Vec<f64>>]) -> Result<Vec<Option<Vec<f64>>>> {
        self.check_batch_shape(batch)?;
        let mut out = Vec::with_capacity(self.k_classes);
        for (k, b) in batch.iter().enumerate() {
            let old = self.seen[k].then(|| {
                self.centroids[k].iter().map(|v| v * self.gamma).collect::<Vec<f64>>()
            });
            out.push(match (old, b) {
                (Some(mut o), Some(b)) => {
                    for (c, add) in o.iter_mut().zip(b) {
                        *c += add;
                    }
                    Some(o)
                }
                (Some(o), None) => Some(o),
                (None, Some(b)) => Some(b.clone()),
                (None, None) => None,
            });
        }
        Ok(out)
    }

    fn check_batch_shape(&self, batch: &[Option<Vec<f64>>]) -> Result<()> {
        if batch.len() != self.k_classes {
            return Err(Error::invalid(format!(
                "batch has {} classes, bank has {}",
                batch.len(),
                self.k_classes
            )));
        }
        if let Some(bad) = batch.iter().flatten().find(|v| v.len() != self.dim) {
            return Err(Error::invalid(format!(
                "batch centroid has {} features, bank stores {}",
                bad.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Graph refs of the bank state *after* incorporating a batch whose
    /// centroids are live graph values: `const(gamma * C_old) + C_batch`.
    /// Only the batch term carries gradient.
    pub fn updated_refs(
        &self,
        g: &mut Graph,
        batch: &[Option<TensorRef>],
    ) -> Result<Vec<Option<TensorRef>>> {
        if batch.len() != self.k_classes {
            return Err(Error::invalid(format!(
                "batch has {} classes, bank has {}",
                batch.len(),
                self.k_classes
            )));
        }
        let mut out = Vec::with_capacity(self.k_classes);
        for (k, b) in batch.iter().enumerate() {
            let old = self.seen[k].then(|| {
                let decayed: Vec<f64> = self.centroids[k].iter().map(|v| v * self.gamma).collect();
                g.constant(Tensor::new(vec![self.dim], decayed).expect("bank dims are consistent"))
            });
            out.push(match (old, b) {
                (Some(o), Some(b)) => Some(g.add(o, *b)?),
                (Some(o), None) => Some(o),
                (None, Some(b)) => Some(*b),
                (None, None) => None,
            });
        }
        Ok(out)
    }
}

/// `L_T` over two banks' post-update states: squared L2 plus `alpha` times L1
/// of each common class's difference. Classes missing on either side are
/// skipped unless `absent_as_zero` substitutes a zero centroid for a side
/// that has the class unseen (classes absent from both are always skipped).
pub fn consistence_loss(
    g: &mut Graph,
    source: &[Option<TensorRef>],
    target: &[Option<TensorRef>],
    alpha: f64,
    absent_as_zero: bool,
) -> Result<TensorRef> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "banks disagree on class count: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be nonnegative, got {alpha}")));
    }
    let mut total: Option<TensorRef> = None;
    for (s, t) in source.iter().zip(target) {
        let (s, t) = match (s, t, absent_as_zero) {
            (Some(s), Some(t), _) => (*s, *t),
            (None, None, _) => continue,
            (Some(s), None, true) => {
                let dim = g.value(*s).numel();
                let z = g.constant(Tensor::zeros(&[dim]));
                (*s, z)
            }
            (None, Some(t), true) => {
                let dim = g.value(*t).numel();
                let z = g.constant(Tensor::zeros(&[dim]));
                (z, *t)
            }
            _ => continue,
        };
        let d = g.sub(s, t)?;
        let sq = g.mul(d, d)?;
        let l2 = g.sum_all(sq)?;
        let term = if alpha == 0.0 {
            l2
        } else {
            let ad = g.abs(d)?;
            let l1 = g.sum_all(ad)?;
            let l1s = g.scale(l1, alpha)?;
            g.add(l2, l1s)?
        };
        total = Some(match total {
            None => term,
            Some(t0) => g.add(t0, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.scalar(0.0)),
    }
}

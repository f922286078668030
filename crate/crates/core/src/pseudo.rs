//! Self-paced pseudo-labels for unlabeled target images.
//!
//! From a `[H, W, K]` probability map, each pixel gets a tentative class
//! `yhat = argmax_k P[k]`, a confidence `mx = max_k P[k]`, a self-information
//! `l = -ln(mx)`, and the ranking score `ml = mx * l`. Low `ml` means a
//! confident pixel.
//!
//! Thresholds are class-balanced: pooling every pixel of tentative class `k`
//! across the whole split, `lambda[k]` is the `portion`-quantile of the
//! ascending `ml` values (`sorted[floor(portion * len)]`); a pixel is
//! selected (`v = 1`) iff `ml < lambda[yhat]` — a strict inequality, so at a
//! knife-edge tie the pixel stays out. Classes nobody voted for get
//! `lambda = 0`, which selects nothing.
//!
//! The curriculum widens the selection over epochs: starting at 25% and
//! adding 5 points per epoch, capped at 55%.
//!
//! Two reduced modes support comparison runs: a single pooled threshold
//! shared by every class (no class balancing), and plain probability-ranked
//! selection (`score = -mx`, i.e. keep the most probable pixels) instead of
//! the `ml` ranking.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::Tensor;

/// How pixels are scored and thresholded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Class-balanced thresholds over the `mx * (-ln mx)` score. Default.
    Balanced,
    /// One pooled threshold over the same score, shared by all classes.
    Pooled,
    /// Class-balanced thresholds over `-mx` (most-probable-first).
    ProbabilityRanked,
}

/// Per-pixel statistics of one probability map.
#[derive(Debug, Clone)]
pub struct PixelStats {
    pub height: usize,
    pub width: usize,
    /// Tentative class per pixel (argmax; ties take the smallest class).
    pub yhat: Vec<usize>,
    /// Max probability per pixel.
    pub mx: Vec<f64>,
    /// Selection score per pixel (depends on the mode).
    pub score: Vec<f64>,
    pub k_classes: usize,
}

/// Computes per-pixel stats from a `[H, W, K]` probability map.
pub fn pixel_stats(probmap: &Tensor, mode: SelectionMode) -> Result<PixelStats> {
    let s = probmap.shape();
    if s.len() != 3 || s[2] < 2 {
        return Err(Error::shape(format!(
            "probability map must be [H, W, K>=2], got {s:?}"
        )));
    }
    let (h, w, k) = (s[0], s[1], s[2]);
    let n = h * w;
    let mut yhat = vec![0usize; n];
    let mut mx = vec![0.0f64; n];
    let mut score = vec![0.0f64; n];
    for p in 0..n {
        let row = &probmap.data()[p * k..(p + 1) * k];
        let mut best = 0usize;
        for (c, v) in row.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid(format!("invalid probability {v} at pixel {p}")));
            }
            if *v > row[best] {
                best = c;
            }
        }
        let m = row[best];
        if m <= 0.0 {
            return Err(Error::invalid(format!("all-zero probability row at pixel {p}")));
        }
        yhat[p] = best;
        mx[p] = m;
        score[p] = match mode {
            SelectionMode::Balanced | SelectionMode::Pooled => m * -m.ln(),
            SelectionMode::ProbabilityRanked => -m,
        };
    }
    Ok(PixelStats { height: h, width: w, yhat, mx, score, k_classes: k })
}

/// Class-balanced thresholds for one selection round.
#[derive(Debug, Clone)]
pub struct Thresholds {
    /// Per-class cutoff; selection keeps `score < lambda[yhat]`.
    pub lambda: Vec<f64>,
    /// The portion that produced the cutoffs.
    pub portion: f64,
    /// Pixels pooled per class.
    pub pooled_counts: Vec<usize>,
}

/// Pools scores by tentative class across a split. Feed every image's stats,
/// then call [`determine_thresholds`].
#[derive(Debug, Clone)]
pub struct ScorePool {
    per_class: Vec<Vec<f64>>,
}

impl ScorePool {
    pub fn new(k_classes: usize) -> ScorePool {
        ScorePool { per_class: vec![Vec::new(); k_classes] }
    }

    pub fn add(&mut self, stats: &PixelStats) -> Result<()> {
        if stats.k_classes != self.per_class.len() {
            return Err(Error::invalid(format!(
                "stats have {} classes, pool expects {}",
                stats.k_classes,
                self.per_class.len()
            )));
        }
        for (y, s) in stats.yhat.iter().zip(&stats.score) {
            self.per_class[*y].push(*s);
        }
        Ok(())
    }

    pub fn k_classes(&self) -> usize {
        self.per_class.len()
    }
}

/// Computes the per-class quantile cutoffs.
///
/// `portion` must lie in `(0, 1]`; each class's ascending scores are cut at
/// index `floor(portion * len)` (clamped to the last element when `portion =
/// 1`). With `SelectionMode::Pooled`, pass the pool through
/// [`determine_thresholds_pooled`] instead.
pub fn determine_thresholds(pool: &ScorePool, portion: f64) -> Result<Thresholds> {
    if !(portion > 0.0 && portion <= 1.0) {
        return Err(Error::invalid(format!("portion must be in (0, 1], got {portion}")));
    }
    let mut lambda = Vec::with_capacity(pool.per_class.len());
    let mut pooled_counts = Vec::with_capacity(pool.per_class.len());
    for scores in &pool.per_class {
        pooled_counts.push(scores.len());
        lambda.push(quantile_cutoff(scores, portion));
    }
    Ok(Thresholds { lambda, portion, pooled_counts })
}

/// Single shared cutoff: all classes pooled together, every class gets the
/// same lambda.
pub fn determine_thresholds_pooled(pool: &ScorePool, portion: f64) -> Result<Thresholds> {
    if !(portion > 0.0 && portion <= 1.0) {
        return Err(Error::invalid(format!("portion must be in (0, 1], got {portion}")));
    }
    let mut all: Vec<f64> = Vec::new();
    for scores in &pool.per_class {
        all.extend_from_slice(scores);
    }
    let cut = quantile_cutoff(&all, portion);
    Ok(Thresholds {
        lambda: vec![cut; pool.per_class.len()],
        portion,
        pooled_counts: pool.per_class.iter().map(Vec::len).collect(),
    })
}

fn quantile_cutoff(scores: &[f64], portion: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must be finite"));
    let idx = ((portion * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Applies thresholds to one image's stats: `v = score < lambda[yhat]`.
pub fn select_weights(stats: &PixelStats, thresholds: &Thresholds) -> Result<Vec<bool>> {
    if thresholds.lambda.len() != stats.k_classes {
        return Err(Error::invalid(format!(
            "{} thresholds for {} classes",
            thresholds.lambda.len(),
            stats.k_classes
        )));
    }
    Ok(stats
        .yhat
        .iter()
        .zip(&stats.score)
        .map(|(y, s)| *s < thresholds.lambda[*y])
        .collect())
}

/// Selection portion for an epoch: `min(25 + 5 * epoch, 55)` percent,
/// computed in integer arithmetic before the single division.
pub fn curriculum_portion(epoch: usize) -> f64 {
    let percent = (25 + 5 * epoch.min(6)).min(55);
    percent as f64 / 100.0
}

/// One image's pseudo-labels: tentative classes and the selection mask.
#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub height: usize,
    pub width: usize,
    pub yhat: Vec<usize>,
    pub v: Vec<bool>,
}

impl PseudoLabels {
    pub fn from_stats(stats: &PixelStats, thresholds: &Thresholds) -> Result<PseudoLabels> {
        Ok(PseudoLabels {
            height: stats.height,
            width: stats.width,
            yhat: stats.yhat.clone(),
            v: select_weights(stats, thresholds)?,
        })
    }

    pub fn selected_count(&self) -> usize {
        self.v.iter().filter(|b| **b).count()
    }

    /// Writes `<stem>.pseudo.pgm` (class ids) and `<stem>.vmask.pgm`
    /// (selection mask) into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        pgm::save_class_mask(
            &dir.join(format!("{stem}.pseudo.pgm")),
            self.width,
            self.height,
            &self.yhat,
        )?;
        pgm::save_binary_mask(
            &dir.join(format!("{stem}.vmask.pgm")),
            self.width,
            self.height,
            &self.v,
        )
    }
}

/// Writes a `class,lambda,count,selected` CSV describing one selection round.
pub fn write_thresholds_csv(
    path: &Path,
    thresholds: &Thresholds,
    selected_per_class: &[usize],
) -> Result<()> {
    let mut out = String::from("class,lambda,count,selected\n");
    for (k, lambda) in thresholds.lambda.iter().enumerate() {
        let count = thresholds.pooled_counts.get(k).copied().unwrap_or(0);
        let sel = selected_per_class.get(k).copied().unwrap_or(0);
        out.push_str(&format!("{k},{lambda:.9e},{count},{sel}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

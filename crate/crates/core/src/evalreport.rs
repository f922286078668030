//! Segmentation evaluation: per-class intersection-over-union, report
//! assembly, and the CSV formats shared by the command-line tools.

use std::path::Path;

use crate::error::{Error, Result};

/// Exact per-class pixel counts backing the IoU computation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoUCounts {
    pub k_classes: usize,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Confusion counts, `confusion[gt * k + pred]`.
    pub confusion: Vec<u64>,
}

impl IoUCounts {
    pub fn new(k_classes: usize) -> IoUCounts {
        IoUCounts {
            k_classes,
            intersection: vec![0; k_classes],
            union: vec![0; k_classes],
            confusion: vec![0; k_classes * k_classes],
        }
    }

    /// Accumulates one prediction/ground-truth pair of equal extent.
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels but ground truth has {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= self.k_classes || g >= self.k_classes {
                return Err(Error::invalid(format!(
                    "class id out of range: pred {p}, gt {g}, k {}",
                    self.k_classes
                )));
            }
            self.confusion[g * self.k_classes + p] += 1;
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IoUCounts) -> Result<()> {
        if self.k_classes != other.k_classes {
            return Err(Error::invalid("cannot merge counts with different class counts"));
        }
        for k in 0..self.k_classes {
            self.intersection[k] += other.intersection[k];
            self.union[k] += other.union[k];
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both prediction and
    /// ground truth (their union is empty).
    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.k_classes)
            .map(|k| {
                if self.union[k] == 0 {
                    None
                } else {
                    Some(self.intersection[k] as f64 / self.union[k] as f64)
                }
            })
            .collect()
    }
}

/// Evaluation summary for one model on one split.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub k_classes: usize,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<u64>,
    pub n_images: usize,
}

impl EvalReport {
    pub fn from_counts(counts: &IoUCounts, n_images: usize) -> EvalReport {
        EvalReport {
            k_classes: counts.k_classes,
            per_class: counts.per_class(),
            confusion: counts.confusion.clone(),
            n_images,
        }
    }

    /// IoU of the lesion-free class.
    pub fn iou_normal(&self) -> Option<f64> {
        self.per_class[0]
    }

    /// Mean IoU over the non-background classes that occur.
    pub fn iou_disease(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class[1..].iter().flatten().copied().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }

    /// Unweighted mean over classes that occur in prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// Deterministic plain-text report used by the evaluation command.
    pub fn to_text(&self, digest: &str, seeds: &[u64]) -> String {
        let mut out = String::new();
        out.push_str(&format!("images = {}\n", self.n_images));
        out.push_str(&format!("config_digest = {digest}\n"));
        let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("seeds = {}\n", seeds.join(",")));
        for (k, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("iou_class_{k} = {}\n", percent(*v))),
                None => out.push_str(&format!("iou_class_{k} = absent\n")),
            }
        }
        out.push_str(&format!(
            "iou_n = {}\n",
            self.iou_normal().map(percent).unwrap_or_else(|| "absent".into())
        ));
        out.push_str(&format!(
            "iou_d = {}\n",
            self.iou_disease().map(percent).unwrap_or_else(|| "absent".into())
        ));
        out.push_str(&format!("miou = {}\n", percent(self.miou())));
        out.push_str("confusion (rows = ground truth, cols = prediction):\n");
        for g in 0..self.k_classes {
            let row: Vec<String> = (0..self.k_classes)
                .map(|p| self.confusion[g * self.k_classes + p].to_string())
                .collect();
            out.push_str(&format!("  {}\n", row.join(" ")));
        }
        out
    }
}

/// IoU fractions rendered as percentage points with two decimals.
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// One row of the ablation table; IoU values are fractions in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub iou_n: f64,
    pub iou_d: f64,
    pub miou: f64,
}

/// Writes the ablation study table: one row per variant, columns in
/// percentage points.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = String::from("variant,iou_n,iou_d,miou\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.variant,
            percent(r.iou_n),
            percent(r.iou_d),
            percent(r.miou)
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

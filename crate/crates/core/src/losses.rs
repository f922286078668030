//! Training losses: image-level classification, pixel-level segmentation with
//! self-paced target supervision, and the adversarial critic objective with
//! its gradient penalty.
//!
//! All losses are built as graph nodes so they can be combined, logged, and
//! differentiated (including the gradient penalty, which differentiates a
//! gradient).

use crate::error::{Error, Result};
use crate::pseudo::PseudoLabels;
use crate::tensor::{Graph, Tensor, TensorRef};

/// Probabilities below this are clamped before taking logarithms; each clamp
/// event is counted and reported so callers can flag degenerate predictions.
pub const PROB_FLOOR: f64 = 1e-12;

/// One image-level classification sample: a probability vector over classes
/// and the index of the true class.
#[derive(Clone, Copy)]
pub struct ClassSample {
    /// Rank-1 probability vector of length `k` (softmax output).
    pub probs: TensorRef,
    /// True class index.
    pub class: usize,
}

/// Mean negative log-likelihood of the true class, pooled over every sample
/// from both domains. Returns the loss node and the number of probabilities
/// that had to be clamped away from zero.
pub fn classification_loss(g: &mut Graph, samples: &[ClassSample]) -> Result<(TensorRef, usize)> {
    if samples.is_empty() {
        return Err(Error::invalid("classification loss needs at least one sample"));
    }
    let mut clamped = 0usize;
    let mut total: Option<TensorRef> = None;
    for s in samples {
        let shape = g.value(s.probs).shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::shape(format!(
                "class probabilities must be rank-1, got {shape:?}"
            )));
        }
        if s.class >= shape[0] {
            return Err(Error::invalid(format!(
                "class index {} out of range for {} classes",
                s.class, shape[0]
            )));
        }
        let p_true = g.slice(s.probs, 0, s.class, 1)?;
        if g.value(p_true).data()[0] < PROB_FLOOR {
            clamped += 1;
        }
        let safe = g.clamp_min(p_true, PROB_FLOOR)?;
        let lp = g.log(safe)?;
        let nll = g.neg(lp)?;
        let nll = g.sum_all(nll)?;
        total = Some(match total {
            Some(t) => g.add(t, nll)?,
            None => nll,
        });
    }
    let sum = total.expect("non-empty batch");
    let mean = g.scale(sum, 1.0 / samples.len() as f64)?;
    Ok((mean, clamped))
}

/// One pixel-labelled segmentation sample (source domain).
pub struct SourceSegSample<'a> {
    /// Per-pixel class probabilities, shape `[H, W, K]`.
    pub probmap: TensorRef,
    /// Row-major ground-truth class ids, length `H*W`.
    pub labels: &'a [usize],
}

/// One self-paced segmentation sample (target domain).
pub struct TargetSegSample<'a> {
    /// Per-pixel class probabilities, shape `[H, W, K]`.
    pub probmap: TensorRef,
    /// Pseudo labels and their selection mask for this image.
    pub pseudo: &'a PseudoLabels,
    /// Per-class selection thresholds acting as the self-paced reward.
    pub lambda: &'a [f64],
}

fn check_probmap(g: &Graph, r: TensorRef) -> Result<(usize, usize, usize)> {
    let shape = g.value(r).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "probability map must be rank-3 [H, W, K], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Builds the per-pixel probability of a chosen class as an `[H, W, 1]` node
/// by masking the map with a one-hot constant and summing over channels.
fn class_probability_plane(
    g: &mut Graph,
    probmap: TensorRef,
    classes: &[usize],
    h: usize,
    w: usize,
    k: usize,
) -> Result<TensorRef> {
    let mut mask = vec![0.0; h * w * k];
    for (pix, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::invalid(format!(
                "label {c} out of range for {k} classes"
            )));
        }
        mask[pix * k + c] = 1.0;
    }
    let mask = g.constant(Tensor::new(vec![h, w, k], mask)?);
    let picked = g.mul(probmap, mask)?;
    g.sum_axis(picked, 2, true)
}

/// Counts probabilities that will be clamped when the selector mask (if any)
/// keeps their pixel.
fn count_floor_hits(plane: &Tensor, keep: Option<&[bool]>) -> usize {
    plane
        .data()
        .iter()
        .enumerate()
        .filter(|(i, &p)| p < PROB_FLOOR && keep.map_or(true, |m| m[*i]))
        .count()
}

/// Segmentation loss over both domains.
///
/// The source term is the mean per-pixel cross-entropy against the ground
/// truth, averaged over source images. The target term sums, per selected
/// pixel, the pseudo-class probability times its negative log, minus the
/// per-class threshold reward; the sum is averaged over all pixels of the
/// image and then over target images. Selection masks and pseudo classes are
/// constants — only the probabilities carry gradient.
///
/// Returns the loss node and the number of clamped probabilities.
pub fn segmentation_loss(
    g: &mut Graph,
    source: &[SourceSegSample<'_>],
    target: &[TargetSegSample<'_>],
) -> Result<(TensorRef, usize)> {
    if source.is_empty() {
        return Err(Error::invalid("segmentation loss needs at least one source sample"));
    }
    let mut clamped = 0usize;

    let mut src_total: Option<TensorRef> = None;
    for s in source {
        let (h, w, k) = check_probmap(g, s.probmap)?;
        if s.labels.len() != h * w {
            return Err(Error::shape(format!(
                "label map has {} entries for a {h}x{w} image",
                s.labels.len()
            )));
        }
        let p_true = class_probability_plane(g, s.probmap, s.labels, h, w, k)?;
        clamped += count_floor_hits(g.value(p_true), None);
        let safe = g.clamp_min(p_true, PROB_FLOOR)?;
        let lp = g.log(safe)?;
        let nll = g.neg(lp)?;
        let sum = g.sum_all(nll)?;
        let mean = g.scale(sum, 1.0 / (h * w) as f64)?;
        src_total = Some(match src_total {
            Some(t) => g.add(t, mean)?,
            None => mean,
        });
    }
    let src_sum = src_total.expect("non-empty source batch");
    let source_term = g.scale(src_sum, 1.0 / source.len() as f64)?;

    let mut tgt_total: Option<TensorRef> = None;
    for t in target {
        let (h, w, k) = check_probmap(g, t.probmap)?;
        if t.pseudo.height != h || t.pseudo.width != w {
            return Err(Error::shape(format!(
                "pseudo labels are {}x{} but the probability map is {h}x{w}",
                t.pseudo.height, t.pseudo.width
            )));
        }
        if t.lambda.len() != k {
            return Err(Error::shape(format!(
                "{} thresholds for {k} classes",
                t.lambda.len()
            )));
        }
        let p_pseudo = class_probability_plane(g, t.probmap, &t.pseudo.yhat, h, w, k)?;
        clamped += count_floor_hits(g.value(p_pseudo), Some(&t.pseudo.v));
        let safe = g.clamp_min(p_pseudo, PROB_FLOOR)?;
        let lp = g.log(safe)?;
        let nlp = g.neg(lp)?;
        // Confidence-weighted surprisal p * (-log p) at the pseudo class.
        let weighted = g.mul(safe, nlp)?;
        let vmask: Vec<f64> = t.pseudo.v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let vmask = g.constant(Tensor::new(vec![h, w, 1], vmask)?);
        let kept = g.mul(weighted, vmask)?;
        let kept_sum = g.sum_all(kept)?;
        // The reward is constant with respect to every parameter.
        let reward: f64 = t
            .pseudo
            .v
            .iter()
            .zip(t.pseudo.yhat.iter())
            .filter(|(&keep, _)| keep)
            .map(|(_, &c)| t.lambda[c])
            .sum();
        let reward = g.scalar(reward);
        let diff = g.sub(kept_sum, reward)?;
        let mean = g.scale(diff, 1.0 / (h * w) as f64)?;
        tgt_total = Some(match tgt_total {
            Some(acc) => g.add(acc, mean)?,
            None => mean,
        });
    }

    let loss = match tgt_total {
        Some(sum) => {
            let target_term = g.scale(sum, 1.0 / target.len() as f64)?;
            g.add(source_term, target_term)?
        }
        None => source_term,
    };
    Ok((loss, clamped))
}

/// Mean critic score on the source batch minus the mean on the target batch.
pub fn critic_score_gap(
    g: &mut Graph,
    source_scores: &[TensorRef],
    target_scores: &[TensorRef],
) -> Result<TensorRef> {
    if source_scores.is_empty() || target_scores.is_empty() {
        return Err(Error::invalid("score gap needs both batches nonempty"));
    }
    let mean_of = |g: &mut Graph, scores: &[TensorRef]| -> Result<TensorRef> {
        let mut total: Option<TensorRef> = None;
        for &s in scores {
            if !g.value(s).shape().is_empty() {
                return Err(Error::shape("critic scores must be scalars".to_string()));
            }
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        let sum = total.expect("non-empty");
        g.scale(sum, 1.0 / scores.len() as f64)
    };
    let ms = mean_of(g, source_scores)?;
    let mt = mean_of(g, target_scores)?;
    g.sub(ms, mt)
}

/// A point at which the gradient penalty is evaluated: the critic's input
/// node and the scalar score computed from it.
#[derive(Clone, Copy)]
pub struct PenaltyPoint {
    pub input: TensorRef,
    pub score: TensorRef,
}

/// Sum over groups of the mean squared deviation of the critic's input
/// gradient norm from one. Each group is averaged independently and the
/// group results are added, so evaluating at the real source points and the
/// real target points yields one penalty term per domain.
///
/// The norm is the Euclidean norm over every element of the input, and the
/// whole expression is made of ordinary graph nodes, so the penalty itself
/// is differentiable with respect to the critic's parameters.
pub fn gradient_penalty(g: &mut Graph, groups: &[Vec<PenaltyPoint>]) -> Result<TensorRef> {
    let mut total = g.scalar(0.0);
    for group in groups {
        if group.is_empty() {
            return Err(Error::invalid("gradient penalty group must be nonempty"));
        }
        let mut group_sum: Option<TensorRef> = None;
        for pt in group {
            if !g.value(pt.score).shape().is_empty() {
                return Err(Error::shape("penalty scores must be scalars".to_string()));
            }
            let grads = g.grad_refs(pt.score, &[pt.input])?;
            let grad = grads[0].ok_or_else(|| {
                Error::invalid("critic score does not depend on the penalty input")
            })?;
            let sq = g.mul(grad, grad)?;
            let ssq = g.sum_all(sq)?;
            let norm = g.sqrt(ssq)?;
            let dev = g.add_scalar(norm, -1.0)?;
            let term = g.mul(dev, dev)?;
            group_sum = Some(match group_sum {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let sum = group_sum.expect("non-empty group");
        let mean = g.scale(sum, 1.0 / group.len() as f64)?;
        total = g.add(total, mean)?;
    }
    Ok(total)
}

/// The critic's objective: score gap minus `xi` times the gradient penalty.
/// The critic ascends this value (the training step minimizes its negation);
/// the generator step minimizes the unpenalized gap with the critic frozen.
pub fn wasserstein_critic_objective(
    g: &mut Graph,
    source_scores: &[TensorRef],
    target_scores: &[TensorRef],
    penalty_groups: &[Vec<PenaltyPoint>],
    xi: f64,
) -> Result<TensorRef> {
    if xi < 0.0 {
        return Err(Error::invalid("penalty weight must be nonnegative"));
    }
    let gap = critic_score_gap(g, source_scores, target_scores)?;
    if xi == 0.0 || penalty_groups.is_empty() {
        return Ok(gap);
    }
    let pen = gradient_penalty(g, penalty_groups)?;
    let weighted = g.scale(pen, xi)?;
    g.sub(gap, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::{determine_thresholds, pixel_stats, select_weights, ScorePool, SelectionMode, Thresholds};
    use crate::tensor::finite_diff_check;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn classification_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2], &[1.0, 0.0]));
        let (loss, clamped) = classification_loss(&mut g, &[ClassSample { probs: p, class: 0 }]).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn classification_half_probability_is_ln_two() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2], &[0.5, 0.5]));
        let (loss, _) = classification_loss(&mut g, &[ClassSample { probs: p, class: 1 }]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn classification_pools_both_domains() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        let b = g.constant(t(&[2], &[0.5, 0.5]));
        let (loss, _) = classification_loss(
            &mut g,
            &[ClassSample { probs: a, class: 0 }, ClassSample { probs: b, class: 0 }],
        )
        .unwrap();
        let expect = (0.0 + std::f64::consts::LN_2) / 2.0;
        assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
        assert!((g.value(loss).data()[0] - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn classification_flags_clamped_probability() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2], &[0.0, 1.0]));
        let (loss, clamped) = classification_loss(&mut g, &[ClassSample { probs: p, class: 0 }]).unwrap();
        assert_eq!(clamped, 1);
        assert!(g.value(loss).data()[0].is_finite());
        assert!((g.value(loss).data()[0] - (1e-12f64).ln().abs()).abs() < 1e-9);
    }

    fn uniform_pseudo(h: usize, w: usize, yhat: usize, v: bool) -> PseudoLabels {
        PseudoLabels {
            height: h,
            width: w,
            yhat: vec![yhat; h * w],
            v: vec![v; h * w],
        }
    }

    #[test]
    fn perfect_source_and_empty_selection_is_zero() {
        let mut g = Graph::new();
        // 1x2 source image predicted perfectly.
        let sp = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let labels = [0usize, 1];
        let tp = g.constant(t(&[1, 1, 2], &[0.7, 0.3]));
        let pseudo = uniform_pseudo(1, 1, 0, false);
        let th = [0.5, 0.5];
        let (loss, _) = segmentation_loss(
            &mut g,
            &[SourceSegSample { probmap: sp, labels: &labels }],
            &[TargetSegSample { probmap: tp, pseudo: &pseudo, lambda: &th }],
        )
        .unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn single_target_pixel_matches_hand_arithmetic() {
        // Selected pixel with probability 0.9 at its pseudo class and
        // threshold 0.1: 0.9 * (-ln 0.9) - 0.1 = -0.00518...
        let mut g = Graph::new();
        let sp = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let labels = [0usize];
        let tp = g.constant(t(&[1, 1, 2], &[0.9, 0.1]));
        let pseudo = uniform_pseudo(1, 1, 0, true);
        let th = [0.1, 0.1];
        let (loss, _) = segmentation_loss(
            &mut g,
            &[SourceSegSample { probmap: sp, labels: &labels }],
            &[TargetSegSample { probmap: tp, pseudo: &pseudo, lambda: &th }],
        )
        .unwrap();
        let expect = 0.9 * (-(0.9f64.ln())) - 0.1;
        assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
        assert!((expect - (-0.00518)).abs() < 1e-5);
    }

    /// Evaluates only the target term for an arbitrary binary mask.
    fn target_term_value(probmap: &Tensor, yhat: &[usize], v: &[bool], lambda: &[f64]) -> f64 {
        let (h, w, k) = (probmap.shape()[0], probmap.shape()[1], probmap.shape()[2]);
        let mut sum = 0.0;
        for pix in 0..h * w {
            if !v[pix] {
                continue;
            }
            let p = probmap.data()[pix * k + yhat[pix]].max(PROB_FLOOR);
            sum += p * (-p.ln()) - lambda[yhat[pix]];
        }
        sum / (h * w) as f64
    }

    #[test]
    fn selection_rule_minimizes_the_target_term() {
        let mut rng = crate::rngutil::derive_rng(77, "selfpaced-minimizer");
        for trial in 0..30 {
            let (h, w, k) = (6, 5, 3);
            let mut data = vec![0.0; h * w * k];
            for pix in 0..h * w {
                let mut row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                data[pix * k..(pix + 1) * k].copy_from_slice(&row);
            }
            let probmap = t(&[h, w, k], &data);
            let stats = pixel_stats(&probmap, SelectionMode::Balanced).unwrap();
            let mut pool = ScorePool::new(k);
            pool.add(&stats).unwrap();
            let th = determine_thresholds(&pool, 0.4).unwrap();
            let v_star = select_weights(&stats, &th).unwrap();
            let best = target_term_value(&probmap, &stats.yhat, &v_star, &th.lambda);
            // Random alternative masks never beat the selection rule.
            for _ in 0..20 {
                let v_alt: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
                let alt = target_term_value(&probmap, &stats.yhat, &v_alt, &th.lambda);
                assert!(
                    best <= alt + 1e-12,
                    "trial {trial}: selected mask {best} beaten by random mask {alt}"
                );
            }
        }
    }

    #[test]
    fn segmentation_loss_matches_direct_formula() {
        let mut rng = crate::rngutil::derive_rng(5, "segloss-oracle");
        let (h, w, k) = (4, 4, 3);
        let mut sdata = vec![0.0; h * w * k];
        let mut tdata = vec![0.0; h * w * k];
        for pix in 0..h * w {
            for (buf, _) in [(&mut sdata, 0), (&mut tdata, 1)] {
                let mut row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                buf[pix * k..(pix + 1) * k].copy_from_slice(&row);
            }
        }
        let labels: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..k)).collect();
        let tmap = t(&[h, w, k], &tdata);
        let stats = pixel_stats(&tmap, SelectionMode::Balanced).unwrap();
        let mut pool = ScorePool::new(k);
        pool.add(&stats).unwrap();
        let th = determine_thresholds(&pool, 0.5).unwrap();
        let v = select_weights(&stats, &th).unwrap();
        let pseudo = PseudoLabels { height: h, width: w, yhat: stats.yhat.clone(), v: v.clone() };

        let mut g = Graph::new();
        let sp = g.constant(t(&[h, w, k], &sdata));
        let tp = g.constant(tmap.clone());
        let (loss, _) = segmentation_loss(
            &mut g,
            &[SourceSegSample { probmap: sp, labels: &labels }],
            &[TargetSegSample { probmap: tp, pseudo: &pseudo, lambda: &th.lambda }],
        )
        .unwrap();

        let mut src = 0.0;
        for pix in 0..h * w {
            src += -(sdata[pix * k + labels[pix]].ln());
        }
        src /= (h * w) as f64;
        let tgt = target_term_value(&tmap, &stats.yhat, &v, &th.lambda);
        assert!((g.value(loss).data()[0] - (src + tgt)).abs() < 1e-12);
    }

    #[test]
    fn segmentation_gradient_passes_finite_differences() {
        // Differentiate through softmax -> loss so probabilities stay valid
        // while the perturbed variable is unconstrained.
        let (h, w, k) = (3, 3, 2);
        let mut rng = crate::rngutil::derive_rng(11, "segloss-fd");
        let logits: Vec<f64> = (0..h * w * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..k)).collect();
        let pseudo = PseudoLabels {
            height: h,
            width: w,
            yhat: (0..h * w).map(|i| i % k).collect(),
            v: (0..h * w).map(|i| i % 3 != 0).collect(),
        };
        let th = Thresholds { lambda: vec![0.25, 0.3], portion: 0.5, pooled_counts: vec![0, 0] };
        let labels2 = labels.clone();
        let pseudo2 = pseudo.clone();
        let th2 = th.clone();
        let err = finite_diff_check(
            move |g, x| {
                let sm = g.softmax(x, 2)?;
                let (loss, _) = segmentation_loss(
                    g,
                    &[SourceSegSample { probmap: sm, labels: &labels2 }],
                    &[TargetSegSample { probmap: sm, pseudo: &pseudo2, lambda: &th2.lambda }],
                )?;
                Ok(loss)
            },
            &Tensor::new(vec![h, w, k], logits).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn score_gap_of_identical_outputs_is_zero() {
        let mut g = Graph::new();
        let a = g.scalar(0.42);
        let b = g.scalar(0.42);
        let gap = critic_score_gap(&mut g, &[a, a], &[b, b]).unwrap();
        assert_eq!(g.value(gap).data()[0], 0.0);
    }

    #[test]
    fn score_gap_means_per_domain() {
        let mut g = Graph::new();
        let s1 = g.scalar(0.9);
        let s2 = g.scalar(0.7);
        let t1 = g.scalar(0.3);
        let gap = critic_score_gap(&mut g, &[s1, s2], &[t1]).unwrap();
        assert!((g.value(gap).data()[0] - 0.5).abs() < 1e-15);
        let obj = wasserstein_critic_objective(&mut g, &[s1, s2], &[t1], &[], 0.0).unwrap();
        assert!((g.value(obj).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unit_norm_linear_critic_has_exactly_zero_penalty() {
        // Linear map with weight vector (0.5, 0.5, 0.5, 0.5): squared norm
        // 4 * 0.25 = 1.0 exactly in binary floating point.
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4], &[0.3, -1.2, 0.8, 2.0]), true);
        let wv = g.constant(t(&[4, 1], &[0.5, 0.5, 0.5, 0.5]));
        let y = g.matmul(x, wv).unwrap();
        let score = g.sum_all(y).unwrap();
        let pen = gradient_penalty(&mut g, &[vec![PenaltyPoint { input: x, score }]]).unwrap();
        assert_eq!(g.value(pen).data()[0], 0.0);

        let x2 = g.leaf(t(&[1, 4], &[5.0, 5.0, -5.0, 0.1]), true);
        let y2 = g.matmul(x2, wv).unwrap();
        let score2 = g.sum_all(y2).unwrap();
        let pen2 = gradient_penalty(
            &mut g,
            &[
                vec![PenaltyPoint { input: x, score }],
                vec![PenaltyPoint { input: x2, score: score2 }],
            ],
        )
        .unwrap();
        assert_eq!(g.value(pen2).data()[0], 0.0);
    }

    #[test]
    fn penalty_value_matches_hand_computation() {
        // score = sum(w . x) with w = (3, 4): gradient norm 5, penalty (5-1)^2 = 16.
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0.1, 0.2]), true);
        let wv = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, wv).unwrap();
        let score = g.sum_all(y).unwrap();
        let pen = gradient_penalty(&mut g, &[vec![PenaltyPoint { input: x, score }]]).unwrap();
        assert!((g.value(pen).data()[0] - 16.0).abs() < 1e-12);

        let obj = wasserstein_critic_objective(
            &mut g,
            &[score],
            &[score],
            &[vec![PenaltyPoint { input: x, score }]],
            10.0,
        )
        .unwrap();
        assert!((g.value(obj).data()[0] - (0.0 - 160.0)).abs() < 1e-10);
    }

    #[test]
    fn penalty_gradient_reaches_critic_parameters() {
        // The penalty differentiates a gradient; check the second-order path
        // against finite differences on the critic weights.
        let err = finite_diff_check(
            move |g, wv| {
                let x = g.constant(t(&[3], &[0.4, -0.3, 0.9]));
                let h = g.mul(x, wv)?;
                let s = g.sum_all(h)?;
                let score = g.sigmoid(s)?;
                gradient_penalty(g, &[vec![PenaltyPoint { input: x, score }]])
            },
            &t(&[3], &[0.7, -1.1, 0.4]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn full_objective_gradient_passes_finite_differences() {
        // Critic = sigmoid of a weighted sum; objective includes the gap and
        // both real-point penalty groups.
        let xs = t(&[3], &[0.2, 0.5, -0.4]);
        let xt = t(&[3], &[-0.6, 0.1, 0.3]);
        let err = finite_diff_check(
            move |g, wv| {
                let src = g.constant(xs.clone());
                let tgt = g.constant(xt.clone());
                let score_of = |g: &mut Graph, input: TensorRef| -> crate::error::Result<TensorRef> {
                    let h = g.mul(input, wv)?;
                    let s = g.sum_all(h)?;
                    g.sigmoid(s)
                };
                let ss = score_of(g, src)?;
                let st = score_of(g, tgt)?;
                wasserstein_critic_objective(
                    g,
                    &[ss],
                    &[st],
                    &[
                        vec![PenaltyPoint { input: src, score: ss }],
                        vec![PenaltyPoint { input: tgt, score: st }],
                    ],
                    10.0,
                )
            },
            &t(&[3], &[0.9, -0.2, 0.35]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}

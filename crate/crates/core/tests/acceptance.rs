//! Release gate for the whole crate: one test per shipping criterion, each
//! printing a single `ACCEPTANCE <name>: PASS|FAIL` line with its measured
//! numbers. Every check here validates library behavior against an
//! independent in-file oracle (explicit loops, closed forms, hand values) or
//! against an end-to-end experiment outcome — never against the library's
//! own internals.

use std::path::PathBuf;
use std::time::Instant;

use adaseg_core::attention::{DualAttention, NormalizeAxis};
use adaseg_core::centroid::{consistence_loss, CentroidBank};
use adaseg_core::config::Config;
use adaseg_core::dataset::{self, Domain, Split};
use adaseg_core::gate::{apply_gate, quantify, quantify_scalar};
use adaseg_core::losses::{
    classification_loss, gradient_penalty, segmentation_loss, wasserstein_critic_objective,
    ClassSample, PenaltyPoint, SourceSegSample, TargetSegSample,
};
use adaseg_core::networks::{Critic, Generator, FEATURE_CHANNELS};
use adaseg_core::optim::{AdamConfig, AdamState};
use adaseg_core::params::ParamStore;
use adaseg_core::pseudo::{
    curriculum_portion, determine_thresholds, determine_thresholds_pooled, pixel_stats,
    select_weights, PseudoLabels, ScorePool, SelectionMode, Thresholds,
};
use adaseg_core::rngutil::derive_rng;
use adaseg_core::superpixel::{refine_selection, slic, SuperpixelMap};
use adaseg_core::synth::{generate_dataset, SynthSettings};
use adaseg_core::tensor::{finite_diff_check, Padding, UpsampleMode};
use adaseg_core::trainer::{
    evaluate, pseudo_label_set, run_reference_supervised, run_variant, Model, TrainSettings,
    Trainer, VariantSpec,
};
use adaseg_core::{Graph, Result, Tensor, TensorRef};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Prints the one-line verdict for a criterion and fails the test if it did
/// not hold.
fn verdict(name: &str, pass: bool, details: &str) {
    let s = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {name}: {s} - {details}");
    assert!(pass, "{name}: {details}");
}

fn workspace_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

// ---------------------------------------------------------------------------
// Gradient suite: every differentiable op and each composed block against
// central finite differences.
// ---------------------------------------------------------------------------

struct WorstErr {
    val: f64,
    at: String,
}

impl WorstErr {
    fn new() -> WorstErr {
        WorstErr { val: 0.0, at: String::from("-") }
    }
    fn update(&mut self, err: f64, what: &str) {
        if err > self.val {
            self.val = err;
            self.at = what.to_string();
        }
    }
}

/// Random tensor with entries from `lo..hi`.
fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random tensor with magnitudes in `margin..hi`, random sign: keeps inputs
/// away from the kinks of abs / leaky_relu / clamp.
fn rt_signed_away(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(margin..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// FD-checks `f` wrapped into a scalar through a fixed random weighting
/// (so every output element influences the objective).
fn check_weighted<F>(name: &str, seed: u64, x: &Tensor, worst: &mut WorstErr, f: F)
where
    F: Fn(&mut Graph, TensorRef) -> Result<TensorRef>,
{
    // Discover the output shape once, then freeze the weights.
    let shape = {
        let mut g = Graph::new();
        let xr = g.leaf(x.clone(), false);
        let out = f(&mut g, xr).unwrap_or_else(|e| panic!("{name}: {e}"));
        g.value(out).shape().to_vec()
    };
    let mut wrng = derive_rng(seed ^ 0x5eed, name);
    let w = Tensor::from_fn(&shape, |_| wrng.gen_range(0.5..1.5));
    let err = finite_diff_check(
        |g, xr| {
            let y = f(g, xr)?;
            let wr = g.constant(w.clone());
            let p = g.mul(y, wr)?;
            g.sum_all(p)
        },
        x,
        1e-5,
    )
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    worst.update(err, name);
}

/// Central finite differences with respect to one named parameter of a
/// store-backed forward function, compared against the pulled analytic
/// gradient.
fn param_fd_check<F>(
    store: &mut ParamStore,
    id: adaseg_core::params::ParamId,
    eps: f64,
    forward: F,
) -> f64
where
    F: Fn(&mut Graph, &adaseg_core::params::Binding) -> Result<TensorRef>,
{
    // Analytic gradient.
    let analytic = {
        let mut g = Graph::new();
        let bind = store.bind(&mut g, true);
        let out = forward(&mut g, &bind).expect("forward");
        g.backward(out).expect("backward");
        g.grad(bind.get(id)).map(|t| t.clone()).unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let out = forward(&mut g, &bind).expect("forward");
        g.value(out).item()
    };
    let n = store.value(id).numel();
    let mut max_rel = 0.0f64;
    for i in 0..n {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let fp = eval(store);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let fm = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / f64::max(1e-12, a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[test]
fn gradients_match_finite_differences() {
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..21).collect();
    let mut worst = WorstErr::new();

    for &seed in &seeds {
        let mut rng = derive_rng(seed, "grad-suite");

        // --- elementwise and shape ops ---
        let x = rt(&mut rng, &[3, 4, 2], -2.0, 2.0);
        let other = rt(&mut rng, &[3, 4, 2], -2.0, 2.0);
        let ot = other.clone();
        check_weighted("add", seed, &x, &mut worst, move |g, xr| {
            let o = g.constant(ot.clone());
            g.add(xr, o)
        });
        let ot = other.clone();
        check_weighted("sub", seed, &x, &mut worst, move |g, xr| {
            let o = g.constant(ot.clone());
            g.sub(o, xr)
        });
        let ot = other.clone();
        check_weighted("mul", seed, &x, &mut worst, move |g, xr| {
            let o = g.constant(ot.clone());
            g.mul(xr, o)
        });
        let denom = rt_signed_away(&mut rng, &[3, 4, 2], 0.5, 2.0);
        let dn = denom.clone();
        check_weighted("div-num", seed, &x, &mut worst, move |g, xr| {
            let d = g.constant(dn.clone());
            g.div(xr, d)
        });
        let num = rt(&mut rng, &[3, 4, 2], -2.0, 2.0);
        check_weighted("div-den", seed, &denom, &mut worst, move |g, xr| {
            let n = g.constant(num.clone());
            g.div(n, xr)
        });
        check_weighted("neg", seed, &x, &mut worst, |g, xr| Ok(g.neg(xr)?));
        check_weighted("scale", seed, &x, &mut worst, |g, xr| g.scale(xr, 0.7));
        check_weighted("add_scalar", seed, &x, &mut worst, |g, xr| g.add_scalar(xr, 0.3));
        check_weighted("exp", seed, &x, &mut worst, |g, xr| g.exp(xr));
        check_weighted("sigmoid", seed, &x, &mut worst, |g, xr| g.sigmoid(xr));
        let pos = rt(&mut rng, &[3, 4], 0.2, 3.0);
        check_weighted("log", seed, &pos, &mut worst, |g, xr| g.log(xr));
        check_weighted("sqrt", seed, &pos, &mut worst, |g, xr| g.sqrt(xr));
        let away = rt_signed_away(&mut rng, &[3, 4, 2], 0.2, 2.0);
        check_weighted("abs", seed, &away, &mut worst, |g, xr| g.abs(xr));
        check_weighted("leaky_relu", seed, &away, &mut worst, |g, xr| g.leaky_relu(xr, 0.2));
        // clamp_min at 0.1: inputs keep a margin on both sides of the knee.
        let clamp_in = Tensor::from_fn(&[3, 4], |i| {
            let v = away.data()[i % away.numel()];
            if v > 0.0 {
                v + 0.3
            } else {
                v
            }
        });
        check_weighted("clamp_min", seed, &clamp_in, &mut worst, |g, xr| g.clamp_min(xr, 0.1));

        // --- linear algebra and shape plumbing ---
        let a = rt(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rt(&mut rng, &[4, 2], -1.0, 1.0);
        let bt = b.clone();
        check_weighted("matmul-left", seed, &a, &mut worst, move |g, xr| {
            let br = g.constant(bt.clone());
            g.matmul(xr, br)
        });
        let at = a.clone();
        check_weighted("matmul-right", seed, &b, &mut worst, move |g, xr| {
            let ar = g.constant(at.clone());
            g.matmul(ar, xr)
        });
        check_weighted("transpose2d", seed, &a, &mut worst, |g, xr| g.transpose2d(xr));
        check_weighted("reshape", seed, &x, &mut worst, |g, xr| g.reshape(xr, &[6, 4]));
        let sm = rt(&mut rng, &[4, 5], -3.0, 3.0);
        check_weighted("softmax-axis0", seed, &sm, &mut worst, |g, xr| g.softmax(xr, 0));
        check_weighted("softmax-axis1", seed, &sm, &mut worst, |g, xr| g.softmax(xr, 1));
        check_weighted("sum_all", seed, &x, &mut worst, |g, xr| g.sum_all(xr));
        check_weighted("mean_all", seed, &x, &mut worst, |g, xr| g.mean_all(xr));
        check_weighted("sum_axis", seed, &x, &mut worst, |g, xr| g.sum_axis(xr, 1, false));
        check_weighted("mean_axis-keep", seed, &x, &mut worst, |g, xr| {
            g.mean_axis(xr, 1, true)
        });
        let small = rt(&mut rng, &[1, 4, 1], -1.0, 1.0);
        check_weighted("broadcast_to", seed, &small, &mut worst, |g, xr| {
            g.broadcast_to(xr, &[3, 4, 2])
        });
        let ot = other.clone();
        check_weighted("concat", seed, &x, &mut worst, move |g, xr| {
            let o = g.constant(ot.clone());
            g.concat(&[xr, o], 2)
        });
        let sl = rt(&mut rng, &[4, 6, 2], -1.0, 1.0);
        check_weighted("slice", seed, &sl, &mut worst, |g, xr| g.slice(xr, 1, 1, 3));

        // --- convolution and upsampling ---
        let ci = rt(&mut rng, &[6, 6, 2], -1.0, 1.0);
        let ck = rt(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
        let ckt = ck.clone();
        check_weighted("conv2d-input", seed, &ci, &mut worst, move |g, xr| {
            let k = g.constant(ckt.clone());
            g.conv2d(xr, k, 1, 1, Padding::Same)
        });
        let cit = ci.clone();
        check_weighted("conv2d-kernel", seed, &ck, &mut worst, move |g, xr| {
            let i = g.constant(cit.clone());
            g.conv2d(i, xr, 1, 1, Padding::Same)
        });
        let ckt = ck.clone();
        check_weighted("conv2d-stride2-valid", seed, &ci, &mut worst, move |g, xr| {
            let k = g.constant(ckt.clone());
            g.conv2d(xr, k, 2, 1, Padding::Valid)
        });
        let cit = ci.clone();
        check_weighted("conv2d-dilation2", seed, &ck, &mut worst, move |g, xr| {
            let i = g.constant(cit.clone());
            g.conv2d(i, xr, 1, 2, Padding::Same)
        });
        let ui = rt(&mut rng, &[3, 3, 2], -1.0, 1.0);
        check_weighted("upsample-bilinear", seed, &ui, &mut worst, |g, xr| {
            g.upsample(xr, 7, 7, UpsampleMode::Bilinear)
        });
        check_weighted("upsample-nearest", seed, &ui, &mut worst, |g, xr| {
            g.upsample(xr, 6, 6, UpsampleMode::Nearest)
        });

        // --- composed blocks ---
        // Full prediction path: backbone + attention + both heads.
        let mut gen_store = ParamStore::new();
        let mut grng = derive_rng(seed, "grad-suite/gen");
        let generator =
            Generator::init(&mut gen_store, &mut grng, 2, 2, NormalizeAxis::First).unwrap();
        // Nonzero residual scalars so attention participates.
        *gen_store.value_mut(generator.attention.delta) = Tensor::scalar(0.4);
        *gen_store.value_mut(generator.attention.tau) = Tensor::scalar(-0.3);
        let image = rt(&mut rng, &[8, 8, 3], 0.0, 1.0);
        {
            let gs = &gen_store;
            let gr = &generator;
            check_weighted("generator-composed", seed, &image, &mut worst, move |g, xr| {
                let bind = gs.bind(g, false);
                let fused = gr.features(g, &bind, xr)?;
                let probs = gr.classifier.forward(g, &bind, fused)?;
                let logits = gr.segmenter.logits(g, &bind, fused, 8, 8)?;
                let pm = gr.segmenter.probabilities(g, logits)?;
                let pm_sum = g.sum_all(pm)?;
                let probs_sum = g.sum_all(probs)?;
                let combined = g.add(pm_sum, probs_sum)?;
                // Keep curvature: square the combination.
                g.mul(combined, combined)
            });
        }
        // Parameter-side gradients through the same composition.
        let param_targets = [
            generator.attention.delta,
            generator.attention.tau,
            generator.classifier.weight,
        ];
        for &pid in &param_targets {
            let img = image.clone();
            let gr = &generator;
            let err = param_fd_check(&mut gen_store, pid, 1e-5, |g, bind| {
                let xr = g.constant(img.clone());
                let fused = gr.features(g, bind, xr)?;
                let probs = gr.classifier.forward(g, bind, fused)?;
                let logits = gr.segmenter.logits(g, bind, fused, 8, 8)?;
                let pm = gr.segmenter.probabilities(g, logits)?;
                let pm_sum = g.sum_all(pm)?;
                let probs_sum = g.sum_all(probs)?;
                g.add(pm_sum, probs_sum)
            });
            worst.update(err, "generator-params");
        }

        // Critic block (input side + one parameter tensor).
        let mut cr_store = ParamStore::new();
        let mut crng = derive_rng(seed, "grad-suite/critic");
        let critic = Critic::init(&mut cr_store, &mut crng, "critic", 1).unwrap();
        let cin = rt(&mut rng, &[8, 8, 1], -1.0, 1.0);
        {
            let cs = &cr_store;
            let cr = &critic;
            check_weighted("critic-composed", seed, &cin, &mut worst, move |g, xr| {
                let bind = cs.bind(g, false);
                cr.score(g, &bind, xr)
            });
        }
        {
            let first_param = cr_store.ids().next().unwrap();
            let cinp = cin.clone();
            let cr = &critic;
            let err = param_fd_check(&mut cr_store, first_param, 1e-5, |g, bind| {
                let xr = g.constant(cinp.clone());
                cr.score(g, bind, xr)
            });
            worst.update(err, "critic-params");
        }

        // Gate: scores through sigmoid (stay in (0,1)), then entropy weight,
        // then the residual multiplicative application.
        let pre = rt(&mut rng, &[2, 2, 1], -2.0, 2.0);
        let feats = rt(&mut rng, &[4, 4, 3], -1.0, 1.0);
        let ft = feats.clone();
        check_weighted("gate-scores", seed, &pre, &mut worst, move |g, xr| {
            let p = g.sigmoid(xr)?;
            let w = quantify(g, p)?;
            let f = g.constant(ft.clone());
            apply_gate(g, w, f)
        });
        let pt = pre.clone();
        check_weighted("gate-features", seed, &feats, &mut worst, move |g, xr| {
            let p0 = g.constant(pt.clone());
            let p = g.sigmoid(p0)?;
            let w = quantify(g, p)?;
            apply_gate(g, w, xr)
        });

        // Image-level loss through its softmax inputs.
        let zc = rt(&mut rng, &[2], -1.5, 1.5);
        check_weighted("classification-loss", seed, &zc, &mut worst, |g, xr| {
            let p = g.softmax(xr, 0)?;
            let (l, _) = classification_loss(
                g,
                &[ClassSample { probs: p, class: 1 }, ClassSample { probs: p, class: 0 }],
            )?;
            Ok(l)
        });

        // Pixel loss (source term + self-paced target term) through logits.
        let zl = rt(&mut rng, &[4, 4, 2], -1.5, 1.5);
        let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..2usize)).collect();
        let pl = PseudoLabels {
            height: 4,
            width: 4,
            yhat: (0..16).map(|i| (i / 2) % 2).collect(),
            v: (0..16).map(|i| i % 3 != 0).collect(),
        };
        let lam = vec![0.3, 0.4];
        check_weighted("segmentation-loss", seed, &zl, &mut worst, move |g, xr| {
            let pm = g.softmax(xr, 2)?;
            let (l, _) = segmentation_loss(
                g,
                &[SourceSegSample { probmap: pm, labels: &labels }],
                &[TargetSegSample { probmap: pm, pseudo: &pl, lambda: &lam }],
            )?;
            Ok(l)
        });

        // Centroid alignment through one side's centroid coordinates.
        let zt = rt(&mut rng, &[6], -1.0, 1.0);
        let tgt = rt(&mut rng, &[6], -1.0, 1.0);
        check_weighted("consistence-loss", seed, &zt, &mut worst, move |g, xr| {
            let s0 = g.slice(xr, 0, 0, 3)?;
            let s1 = g.slice(xr, 0, 3, 3)?;
            let t = g.constant(tgt.clone());
            let t0 = g.slice(t, 0, 0, 3)?;
            let t1 = g.slice(t, 0, 3, 3)?;
            consistence_loss(g, &[Some(s0), Some(s1)], &[Some(t0), None], 1.0, true)
        });

        // Critic objective with the gradient penalty: differentiating it
        // exercises gradients-of-gradients.
        let wv = rt_signed_away(&mut rng, &[4], 0.3, 1.2);
        let pts: Vec<Tensor> = (0..4).map(|_| rt(&mut rng, &[4], -1.0, 1.0)).collect();
        check_weighted("wgan-objective", seed, &wv, &mut worst, move |g, xr| {
            let mut groups: Vec<Vec<PenaltyPoint>> = vec![Vec::new(), Vec::new()];
            let mut s_scores = Vec::new();
            let mut t_scores = Vec::new();
            for (i, p) in pts.iter().enumerate() {
                let pr = g.leaf(p.clone(), true);
                let prod = g.mul(pr, xr)?;
                let score = g.sum_all(prod)?;
                // A mild nonlinearity keeps the penalty's own gradient alive.
                let score = g.mul(score, score)?;
                if i % 2 == 0 {
                    s_scores.push(score);
                    groups[0].push(PenaltyPoint { input: pr, score });
                } else {
                    t_scores.push(score);
                    groups[1].push(PenaltyPoint { input: pr, score });
                }
            }
            wasserstein_critic_objective(g, &s_scores, &t_scores, &groups, 10.0)
        });
    }

    // A gradient-blocking spot check: y = x + detach(x) must backprop 1.
    let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5);
    let mut g = Graph::new();
    let xr = g.leaf(x, true);
    let d = g.detach(xr);
    let y = g.add(xr, d).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    let blocked = g.grad(xr).unwrap().data().iter().all(|&v| v == 1.0);

    let dt = t0.elapsed().as_secs_f64();
    let pass = worst.val <= 1e-6 && blocked && dt < 120.0;
    verdict(
        "gradient-suite",
        pass,
        &format!(
            "max rel err {:.2e} (at {}), detach blocks gradient: {}, {} seeds in {:.1}s (limit 120s)",
            worst.val,
            worst.at,
            blocked,
            seeds.len(),
            dt
        ),
    );
}

// ---------------------------------------------------------------------------
// Pseudo-label pipeline against an explicit-loop oracle.
// ---------------------------------------------------------------------------

fn random_probmap(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[h, w, k]);
    for p in 0..h * w {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(0.02..1.0)).collect();
        let s: f64 = row.iter().sum();
        for (c, v) in row.iter().enumerate() {
            t.data_mut()[p * k + c] = v / s;
        }
    }
    t
}

/// Jittered rectangular-block oversegmentation (enough structure for the
/// vote, trivially correct by construction).
fn random_blocks(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SuperpixelMap {
    let mut rcuts = vec![0usize, h];
    let mut ccuts = vec![0usize, w];
    for _ in 0..3 {
        rcuts.push(rng.gen_range(1..h));
        ccuts.push(rng.gen_range(1..w));
    }
    rcuts.sort_unstable();
    rcuts.dedup();
    ccuts.sort_unstable();
    ccuts.dedup();
    let band = |cuts: &[usize], v: usize| -> usize {
        cuts.windows(2).position(|win| v >= win[0] && v < win[1]).unwrap()
    };
    let cols = ccuts.len() - 1;
    let mut labels = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = (band(&rcuts, y) * cols + band(&ccuts, x)) as u32;
        }
    }
    SuperpixelMap { height: h, width: w, labels, count: (rcuts.len() - 1) * cols }
}

struct OracleStats {
    yhat: Vec<usize>,
    score: Vec<f64>,
}

/// Explicit per-pixel argmax / confidence / ranking score.
fn oracle_stats(map: &Tensor, mode: SelectionMode) -> OracleStats {
    let (h, w, k) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut yhat = vec![0usize; h * w];
    let mut score = vec![0f64; h * w];
    for p in 0..h * w {
        let mut best = 0usize;
        for c in 1..k {
            if map.data()[p * k + c] > map.data()[p * k + best] {
                best = c;
            }
        }
        let m = map.data()[p * k + best];
        yhat[p] = best;
        score[p] = match mode {
            SelectionMode::Balanced | SelectionMode::Pooled => m * -m.ln(),
            SelectionMode::ProbabilityRanked => -m,
        };
    }
    OracleStats { yhat, score }
}

/// Explicit class-balanced cutoffs: ascending sort per tentative class, take
/// `sorted[floor(portion * len)]`; empty classes cut at zero.
fn oracle_lambda(stats: &[&OracleStats], k: usize, portion: f64, pooled: bool) -> Vec<f64> {
    let cut = |scores: &mut Vec<f64>| -> f64 {
        if scores.is_empty() {
            return 0.0;
        }
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((portion * scores.len() as f64).floor() as usize).min(scores.len() - 1);
        scores[idx]
    };
    if pooled {
        let mut all: Vec<f64> = Vec::new();
        for s in stats {
            all.extend_from_slice(&s.score);
        }
        let c = cut(&mut all);
        return vec![c; k];
    }
    (0..k)
        .map(|class| {
            let mut scores: Vec<f64> = Vec::new();
            for s in stats {
                for (y, sc) in s.yhat.iter().zip(&s.score) {
                    if *y == class {
                        scores.push(*sc);
                    }
                }
            }
            cut(&mut scores)
        })
        .collect()
}

/// Explicit frozen-vote neighborhood refinement.
fn oracle_refine(
    yhat: &[usize],
    v: &[bool],
    sp: &SuperpixelMap,
    k: usize,
    h: usize,
    w: usize,
) -> (Vec<usize>, Vec<bool>, usize) {
    let mut out_y = yhat.to_vec();
    let mut out_v = v.to_vec();
    let mut flipped = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if v[i] {
                continue;
            }
            let mut votes = vec![0usize; k];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if v[j] && sp.labels[j] == sp.labels[i] {
                        votes[yhat[j]] += 1;
                    }
                }
            }
            let mut k_best = 0usize;
            let mut c_best = 0usize;
            for (c, &n) in votes.iter().enumerate() {
                if n > c_best {
                    k_best = c;
                    c_best = n;
                }
            }
            if c_best > 4 {
                out_v[i] = true;
                out_y[i] = k_best;
                flipped += 1;
            }
        }
    }
    (out_y, out_v, flipped)
}

#[test]
fn pseudo_label_pipeline_matches_explicit_oracle() {
    let t0 = Instant::now();
    let mut rng = derive_rng(2024, "pseudo-oracle");
    let mut checked = 0usize;
    let mut max_fraction_miss = 0.0f64;

    for i in 0..100 {
        let k = [2usize, 3, 4][i % 3];
        let portion = [0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55][i % 7];
        let map = random_probmap(&mut rng, 16, 16, k);

        // Library pipeline.
        let stats = pixel_stats(&map, SelectionMode::Balanced).unwrap();
        let mut pool = ScorePool::new(k);
        pool.add(&stats).unwrap();
        let th = determine_thresholds(&pool, portion).unwrap();
        let v = select_weights(&stats, &th).unwrap();
        let labels = PseudoLabels::from_stats(&stats, &th).unwrap();
        let sp = random_blocks(&mut rng, 16, 16);
        let refined = refine_selection(&labels, &sp, k, false).unwrap();

        // Oracle.
        let os = oracle_stats(&map, SelectionMode::Balanced);
        let ol = oracle_lambda(&[&os], k, portion, false);
        let ov: Vec<bool> =
            os.yhat.iter().zip(&os.score).map(|(y, s)| *s < ol[*y]).collect();
        let (ory, orv, orf) = oracle_refine(&os.yhat, &ov, &sp, k, 16, 16);

        assert_eq!(stats.yhat, os.yhat, "instance {i}: tentative classes");
        let bits_equal = th
            .lambda
            .iter()
            .zip(&ol)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(bits_equal, "instance {i}: thresholds {:?} vs {:?}", th.lambda, ol);
        assert_eq!(v, ov, "instance {i}: selection mask");
        assert_eq!(labels.v, ov, "instance {i}: labels mask");
        assert_eq!(refined.labels.yhat, ory, "instance {i}: refined classes");
        assert_eq!(refined.labels.v, orv, "instance {i}: refined mask");
        assert_eq!(refined.flipped, orf, "instance {i}: flip count");

        // Selection fraction per nonempty class within one pixel of the
        // portion.
        for class in 0..k {
            let total = os.yhat.iter().filter(|y| **y == class).count();
            if total == 0 {
                continue;
            }
            let sel = os
                .yhat
                .iter()
                .zip(&ov)
                .filter(|(y, b)| **y == class && **b)
                .count();
            let miss = (sel as f64 - portion * total as f64).abs();
            max_fraction_miss = max_fraction_miss.max(miss);
            assert!(
                miss <= 1.0 + 1e-9,
                "instance {i} class {class}: {sel} of {total} selected at portion {portion}"
            );
        }
        checked += 1;
    }

    // The reduced modes agree with their oracles too.
    for i in 0..10 {
        let k = [2usize, 3, 4][i % 3];
        let map = random_probmap(&mut rng, 16, 16, k);
        let sp_stats = pixel_stats(&map, SelectionMode::Pooled).unwrap();
        let mut pool = ScorePool::new(k);
        pool.add(&sp_stats).unwrap();
        let th = determine_thresholds_pooled(&pool, 0.4).unwrap();
        let os = oracle_stats(&map, SelectionMode::Pooled);
        let ol = oracle_lambda(&[&os], k, 0.4, true);
        assert!(th.lambda.iter().zip(&ol).all(|(a, b)| a.to_bits() == b.to_bits()));

        let pr_stats = pixel_stats(&map, SelectionMode::ProbabilityRanked).unwrap();
        let os = oracle_stats(&map, SelectionMode::ProbabilityRanked);
        assert_eq!(pr_stats.yhat, os.yhat);
        assert!(pr_stats.score.iter().zip(&os.score).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    // Cross-image pooling: thresholds over a five-map split match the oracle
    // pooling the same maps.
    let maps: Vec<Tensor> = (0..5).map(|_| random_probmap(&mut rng, 16, 16, 3)).collect();
    let lib_stats: Vec<_> = maps
        .iter()
        .map(|m| pixel_stats(m, SelectionMode::Balanced).unwrap())
        .collect();
    let mut pool = ScorePool::new(3);
    for s in &lib_stats {
        pool.add(s).unwrap();
    }
    let th = determine_thresholds(&pool, 0.35).unwrap();
    let oracle: Vec<OracleStats> =
        maps.iter().map(|m| oracle_stats(m, SelectionMode::Balanced)).collect();
    let refs: Vec<&OracleStats> = oracle.iter().collect();
    let ol = oracle_lambda(&refs, 3, 0.35, false);
    assert!(th.lambda.iter().zip(&ol).all(|(a, b)| a.to_bits() == b.to_bits()));

    let dt = t0.elapsed().as_secs_f64();
    verdict(
        "pseudo-label-oracle",
        checked == 100 && dt < 60.0,
        &format!(
            "{checked} instances exact (16x16, K in {{2,3,4}}), worst fraction miss {max_fraction_miss:.3} px, {dt:.1}s (limit 60s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Curriculum schedule.
// ---------------------------------------------------------------------------

#[test]
fn curriculum_portions_follow_the_schedule() {
    let want = [25u32, 30, 35, 40, 45, 50, 55, 55, 55, 55, 55];
    let got: Vec<u32> = (0..=10).map(|e| (curriculum_portion(e) * 100.0).round() as u32).collect();
    let exact = (0..=10).all(|e| curriculum_portion(e) == f64::from(want[e]) / 100.0);
    verdict(
        "curriculum-schedule",
        got.as_slice() == want && exact,
        &format!("epochs 0..=10 -> {got:?} percent"),
    );
}

// ---------------------------------------------------------------------------
// Attention identities and the loop oracle.
// ---------------------------------------------------------------------------

/// Independent loop implementation of both attention branches on a tiny map.
#[allow(clippy::too_many_arguments)]
fn attention_oracle(
    fm: &Tensor,
    k: [&Tensor; 3],
    b: [&Tensor; 3],
    delta: f64,
    tau: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w, c) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
    let n = h * w;
    let proj = |kk: &Tensor, bb: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            for co in 0..c {
                let mut acc = bb.data()[co];
                for ci in 0..c {
                    acc += fm.data()[p * c + ci] * kk.data()[ci * c + co];
                }
                out[p * c + co] = acc;
            }
        }
        out
    };
    let c1 = proj(k[0], b[0]);
    let c2 = proj(k[1], b[1]);
    let c3 = proj(k[2], b[2]);
    // Spatial: E[i][j] = <C1[i], C2[j]>, columns softmaxed.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..c).map(|q| c1[i * c + q] * c2[j * c + q]).sum();
        }
    }
    let mut msm = vec![0.0; n * n];
    for j in 0..n {
        let mx = (0..n).map(|i| m[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|i| (m[i * n + j] - mx).exp()).sum();
        for i in 0..n {
            msm[i * n + j] = (m[i * n + j] - mx).exp() / z;
        }
    }
    let mut fp = vec![0.0; n * c];
    for i in 0..n {
        for q in 0..c {
            let att: f64 = (0..n).map(|j| msm[i * n + j] * c3[j * c + q]).sum();
            fp[i * c + q] = delta * att + fm.data()[i * c + q];
        }
    }
    // Channel: E[i][j] = <X[:,i], X[:,j]>, columns softmaxed; out mixes
    // channels with G[i][j].
    let x = fm.data();
    let mut e = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            e[i * c + j] = (0..n).map(|p| x[p * c + i] * x[p * c + j]).sum();
        }
    }
    let mut gsm = vec![0.0; c * c];
    for j in 0..c {
        let mx = (0..c).map(|i| e[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|i| (e[i * c + j] - mx).exp()).sum();
        for i in 0..c {
            gsm[i * c + j] = (e[i * c + j] - mx).exp() / z;
        }
    }
    let mut fc = vec![0.0; n * c];
    for p in 0..n {
        for i in 0..c {
            let att: f64 = (0..c).map(|j| gsm[i * c + j] * x[p * c + j]).sum();
            fc[p * c + i] = tau * att + x[p * c + i];
        }
    }
    (fp, fc, msm, gsm)
}

#[test]
fn attention_identities_and_loop_oracle() {
    // Fresh block: residual scalars are zero, so both branches reproduce
    // their input bit for bit.
    let mut store = ParamStore::new();
    let mut rng = derive_rng(3, "acc-attn");
    let att = DualAttention::init(&mut store, &mut rng, "att", 3, NormalizeAxis::First).unwrap();
    let fm = Tensor::from_fn(&[2, 2, 3], |i| ((i * 7 % 11) as f64 - 5.0) * 0.21);
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let fr = g.constant(fm.clone());
    let (fp, _) = att.spatial(&mut g, &bind, fr).unwrap();
    let (fc, _) = att.channel(&mut g, &bind, fr).unwrap();
    let identity = g.value(fp).data() == fm.data() && g.value(fc).data() == fm.data();

    // Nonzero scalars: both branches match the loop oracle on 2x2x3 within
    // 1e-6, and the attention matrices are column-stochastic within 1e-6.
    *store.value_mut(att.delta) = Tensor::scalar(0.45);
    *store.value_mut(att.tau) = Tensor::scalar(-0.6);
    let mut max_dev = 0.0f64;
    let mut max_col_dev = 0.0f64;
    for seed in 0..8u64 {
        let mut r = derive_rng(seed, "acc-attn-in");
        let fm = Tensor::from_fn(&[2, 2, 3], |_| r.gen_range(-1.5..1.5));
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let fr = g.constant(fm.clone());
        let (fp, m) = att.spatial(&mut g, &bind, fr).unwrap();
        let (fc, gm) = att.channel(&mut g, &bind, fr).unwrap();
        let (ofp, ofc, om, og) = attention_oracle(
            &fm,
            [
                store.value(att.p1_kernel()),
                store.value(att.p2_kernel()),
                store.value(att.p3_kernel()),
            ],
            [
                store.value(att.p1_bias()),
                store.value(att.p2_bias()),
                store.value(att.p3_bias()),
            ],
            0.45,
            -0.6,
        );
        for (a, b) in g.value(fp).data().iter().zip(&ofp) {
            max_dev = max_dev.max((a - b).abs());
        }
        for (a, b) in g.value(fc).data().iter().zip(&ofc) {
            max_dev = max_dev.max((a - b).abs());
        }
        for (a, b) in g.value(m).data().iter().zip(&om) {
            max_dev = max_dev.max((a - b).abs());
        }
        for (a, b) in g.value(gm).data().iter().zip(&og) {
            max_dev = max_dev.max((a - b).abs());
        }
        // Column sums of both matrices.
        for (mat, dim) in [(m, 4usize), (gm, 3usize)] {
            let v = g.value(mat);
            for j in 0..dim {
                let s: f64 = (0..dim).map(|i| v.data()[i * dim + j]).sum();
                max_col_dev = max_col_dev.max((s - 1.0).abs());
            }
        }
    }

    let pass = identity && max_dev <= 1e-6 && max_col_dev <= 1e-6;
    verdict(
        "attention-identities",
        pass,
        &format!(
            "zero-scalar identity bit-exact: {identity}, loop-oracle max dev {max_dev:.2e}, column-sum max dev {max_col_dev:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Transferability gate.
// ---------------------------------------------------------------------------

#[test]
fn gate_bounds_identities_and_gradient() {
    // Scalar identities on the closed interval.
    let at_half = quantify_scalar(0.5);
    let at_zero = quantify_scalar(0.0);
    let at_one = quantify_scalar(1.0);
    let exact = at_half == 0.0 && at_zero == 1.0 && at_one == 1.0;

    // Range and extreme behavior on a dense grid.
    let mut in_range = true;
    let mut near_extreme = f64::MAX;
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        let w = quantify_scalar(p);
        in_range &= (0.0..=1.0).contains(&w);
    }
    for p in [1e-6, 1.0 - 1e-6] {
        near_extreme = near_extreme.min(quantify_scalar(p));
    }

    // Graph form agrees with the scalar form.
    let mut g = Graph::new();
    let ps: Vec<f64> = (1..40).map(|i| i as f64 / 40.0).collect();
    let scores = g.constant(Tensor::new(vec![ps.len()], ps.clone()).unwrap());
    let w = quantify(&mut g, scores).unwrap();
    let mut graph_matches = true;
    for (i, p) in ps.iter().enumerate() {
        graph_matches &= (g.value(w).data()[i] - quantify_scalar(*p)).abs() < 1e-12;
    }

    // Residual application never shrinks a feature.
    let mut rng = derive_rng(12, "acc-gate");
    let mut never_shrinks = true;
    for _ in 0..5 {
        let wmap = Tensor::from_fn(&[4, 4, 1], |_| rng.gen_range(1e-6..1.0 - 1e-6));
        let feats = Tensor::from_fn(&[8, 8, 5], |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let sr = g.constant(wmap);
        let wq = quantify(&mut g, sr).unwrap();
        let fr = g.constant(feats.clone());
        let gated = apply_gate(&mut g, wq, fr).unwrap();
        for (a, b) in g.value(gated).data().iter().zip(feats.data()) {
            never_shrinks &= a.abs() >= b.abs();
        }
    }

    // Gradient check through sigmoid -> entropy weight -> application.
    let pre = Tensor::from_fn(&[2, 2, 1], |i| (i as f64 - 1.3) * 0.8);
    let feats = Tensor::from_fn(&[4, 4, 2], |i| ((i * 5 % 13) as f64 - 6.0) * 0.2);
    let ft = feats.clone();
    let err = finite_diff_check(
        move |g, xr| {
            let p = g.sigmoid(xr)?;
            let wq = quantify(g, p)?;
            let f = g.constant(ft.clone());
            let gated = apply_gate(g, wq, f)?;
            let sq = g.mul(gated, gated)?;
            g.sum_all(sq)
        },
        &pre,
        1e-5,
    )
    .unwrap();

    let pass =
        exact && in_range && near_extreme > 0.999 && graph_matches && never_shrinks && err <= 1e-6;
    verdict(
        "transferability-gate",
        pass,
        &format!(
            "W(0.5)={at_half}, W(0)={at_zero}, W(1)={at_one}, extremes -> {near_extreme:.6}, graph==scalar: {graph_matches}, |gated|>=|orig|: {never_shrinks}, grad err {err:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Centroid bank: recurrence vs closed form, limit, hand values.
// ---------------------------------------------------------------------------

#[test]
fn centroid_recurrence_limit_and_hand_values() {
    // 50 random steps with occasional absences; bank state must equal
    // sum_{x present} gamma^(t-x) c_x.
    let mut rng = derive_rng(50, "acc-centroid");
    let gamma = 0.7;
    let dim = 3;
    let mut bank = CentroidBank::new(2, dim, gamma).unwrap();
    let mut history: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    let mut max_dev = 0.0f64;
    for t in 1..=50usize {
        let batch: Vec<Option<Vec<f64>>> = (0..2)
            .map(|_| {
                rng.gen_bool(0.8)
                    .then(|| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        bank.update(&batch).unwrap();
        history.push(batch);
        for k in 0..2 {
            let mut closed = vec![0.0f64; dim];
            let mut any = false;
            for (x, b) in history.iter().enumerate() {
                if let Some(c) = &b[k] {
                    any = true;
                    let pw = gamma.powi((t - (x + 1)) as i32);
                    for (acc, v) in closed.iter_mut().zip(c) {
                        *acc += pw * v;
                    }
                }
            }
            match bank.centroid(k) {
                Some(c) if any => {
                    for (a, b) in c.iter().zip(&closed) {
                        max_dev = max_dev.max((a - b).abs());
                    }
                }
                None if !any => {}
                _ => panic!("seen flag disagrees with history at step {t}"),
            }
        }
    }

    // Constant input: C_30 within 1e-4 of c / (1 - gamma).
    let mut limit_bank = CentroidBank::new(1, 2, 0.7).unwrap();
    let c = vec![1.0, -0.5];
    for _ in 0..30 {
        limit_bank.update(&[Some(c.clone())]).unwrap();
    }
    let lim = limit_bank.centroid(0).unwrap();
    let limit_dev = lim
        .iter()
        .zip(&c)
        .map(|(a, b)| (a - b / 0.3).abs())
        .fold(0.0f64, f64::max);

    // Hand values through the loss itself.
    let hand = |s: &[f64], t: &[f64], alpha: f64| -> f64 {
        let mut g = Graph::new();
        let sr = g.constant(Tensor::new(vec![s.len()], s.to_vec()).unwrap());
        let tr = g.constant(Tensor::new(vec![t.len()], t.to_vec()).unwrap());
        let l = consistence_loss(&mut g, &[Some(sr)], &[Some(tr)], alpha, false).unwrap();
        g.value(l).item()
    };
    let zero = hand(&[1.5, -2.0], &[1.5, -2.0], 1.0);
    let four = hand(&[3.0], &[1.0], 0.0);
    let twenty_five = hand(&[3.0, 4.0], &[0.0, 0.0], 0.0);
    let mixed = hand(&[1.0, 1.0], &[0.0, 0.0], 0.5); // 2 + 0.5 * 2 = 3
    let hands = zero == 0.0 && four == 4.0 && twenty_five == 25.0 && mixed == 3.0;

    let pass = max_dev <= 1e-6 && limit_dev <= 1e-4 && hands;
    verdict(
        "centroid-bank",
        pass,
        &format!(
            "recurrence vs closed form max dev {max_dev:.2e} (50 steps), limit dev {limit_dev:.2e} at t=30, hand values ({zero}; {four}; {twenty_five}; {mixed})"
        ),
    );
}

// ---------------------------------------------------------------------------
// Critic penalty identity and ascent on separated Gaussians.
// ---------------------------------------------------------------------------

#[test]
fn critic_penalty_zero_and_gaussian_ascent() {
    // A critic whose gradient has exactly unit norm: score = <e0, p>. The
    // squared-deviation penalty must be exactly zero, bit for bit.
    let mut g = Graph::new();
    let onehot = g.constant(Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
    let mut group = Vec::new();
    for i in 0..3 {
        let p = g.leaf(Tensor::from_fn(&[3], |j| (i + j) as f64 * 0.37 - 0.5), true);
        let prod = g.mul(p, onehot).unwrap();
        let score = g.sum_all(prod).unwrap();
        group.push(PenaltyPoint { input: p, score });
    }
    let pen = gradient_penalty(&mut g, &[group]).unwrap();
    let exact_zero = g.value(pen).item().to_bits() == 0.0f64.to_bits();

    // Critic ascent: a small MLP maximizing the penalized objective on two
    // separated 2-D Gaussians must widen the smoothed score gap over 200
    // steps, monotonically.
    let mut rng = derive_rng(77, "acc-wgan");
    let sample = |rng: &mut ChaCha8Rng, cx: f64, cy: f64| -> Tensor {
        let g1: f64 = rng.gen_range(-1.0..1.0);
        let g2: f64 = rng.gen_range(-1.0..1.0);
        Tensor::new(vec![1, 2], vec![cx + 0.4 * g1, cy + 0.4 * g2]).unwrap()
    };
    let src: Vec<Tensor> = (0..12).map(|_| sample(&mut rng, 2.0, 2.0)).collect();
    let tgt: Vec<Tensor> = (0..12).map(|_| sample(&mut rng, -2.0, -2.0)).collect();

    let mut store = ParamStore::new();
    let mut prng = derive_rng(5, "acc-wgan-init");
    let w1 = store
        .register(
            "w1".to_string(),
            Tensor::from_fn(&[2, 16], |_| prng.gen_range(-0.5..0.5)),
        )
        .unwrap();
    let b1 = store.register("b1".to_string(), Tensor::zeros(&[1, 16])).unwrap();
    let w2 = store
        .register(
            "w2".to_string(),
            Tensor::from_fn(&[16, 1], |_| prng.gen_range(-0.5..0.5)),
        )
        .unwrap();
    let b2 = store.register("b2".to_string(), Tensor::zeros(&[1, 1])).unwrap();

    let mut adam = AdamState::new(&store);
    let cfg = AdamConfig::new(2e-3);
    let mut gaps = Vec::with_capacity(200);
    for _ in 0..200 {
        let mut g = Graph::new();
        let bind = store.bind(&mut g, true);
        let mut s_scores = Vec::new();
        let mut t_scores = Vec::new();
        let mut groups: Vec<Vec<PenaltyPoint>> = vec![Vec::new(), Vec::new()];
        let mut fwd = |g: &mut Graph,
                       bind: &adaseg_core::params::Binding,
                       pt: &Tensor|
         -> (TensorRef, TensorRef) {
            let p = g.leaf(pt.clone(), true);
            let h = g.matmul(p, bind.get(w1)).unwrap();
            let h = g.add(h, bind.get(b1)).unwrap();
            let h = g.leaky_relu(h, 0.2).unwrap();
            let o = g.matmul(h, bind.get(w2)).unwrap();
            let o = g.add(o, bind.get(b2)).unwrap();
            let s = g.sum_all(o).unwrap();
            (p, s)
        };
        for pt in &src {
            let (p, s) = fwd(&mut g, &bind, pt);
            s_scores.push(s);
            groups[0].push(PenaltyPoint { input: p, score: s });
        }
        for pt in &tgt {
            let (p, s) = fwd(&mut g, &bind, pt);
            t_scores.push(s);
            groups[1].push(PenaltyPoint { input: p, score: s });
        }
        let obj = wasserstein_critic_objective(&mut g, &s_scores, &t_scores, &groups, 10.0)
            .unwrap();
        // Record the raw gap before the update.
        let mean =
            |g: &Graph, v: &[TensorRef]| v.iter().map(|r| g.value(*r).item()).sum::<f64>() / v.len() as f64;
        gaps.push(mean(&g, &s_scores) - mean(&g, &t_scores));
        let loss = g.neg(obj).unwrap();
        store.clear_grads();
        g.backward(loss).unwrap();
        store.pull_grads(&g, &bind);
        adam.step(&mut store, &cfg).unwrap();
    }
    // Smooth with a 20-step window, then demand nondecreasing and overall
    // growth.
    let window = 20usize;
    let smoothed: Vec<f64> = (0..=gaps.len() - window)
        .map(|i| gaps[i..i + window].iter().sum::<f64>() / window as f64)
        .collect();
    let mut monotone = true;
    for w in smoothed.windows(2) {
        monotone &= w[1] >= w[0] - 1e-9;
    }
    let grew = *smoothed.last().unwrap() > smoothed[0];

    let pass = exact_zero && monotone && grew;
    verdict(
        "critic-penalty-and-ascent",
        pass,
        &format!(
            "unit-norm penalty exactly zero: {exact_zero}, smoothed gap {:.4} -> {:.4}, monotone: {monotone}",
            smoothed[0],
            smoothed.last().unwrap()
        ),
    );
}

// ---------------------------------------------------------------------------
// End-to-end adaptation on the default benchmark.
// ---------------------------------------------------------------------------

#[test]
fn adaptation_beats_source_only_baseline() {
    let cfg = Config::from_file(&workspace_file("configs/default.txt")).unwrap();
    let synth = SynthSettings::from_config(&cfg).unwrap();
    let data_seed = cfg.u64_or("data.seed", 12345).unwrap();
    let base = TrainSettings::from_config(&cfg, synth.k_classes, 1).unwrap();

    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    generate_dataset(&synth, data_seed, &data).unwrap();

    let seeds = [1u64, 2, 3];
    let mut bl = Vec::new();
    let mut bl_al = Vec::new();
    let mut ours = Vec::new();
    let mut max_minutes = 0.0f64;
    for &seed in &seeds {
        for (name, sink) in
            [("BL", &mut bl), ("BL+AL", &mut bl_al), ("Ours", &mut ours)]
        {
            let run = root.path().join(format!("{}-s{seed}", name.replace('+', "_")));
            let t = Instant::now();
            let cell = run_variant(&base, name, &data, &run, seed).unwrap();
            let minutes = t.elapsed().as_secs_f64() / 60.0;
            max_minutes = max_minutes.max(minutes);
            println!(
                "  e2e {name} seed {seed}: mIoU {:.2} (IoU_n {:.2}, IoU_d {:.2}) in {minutes:.1} min",
                cell.miou, cell.iou_n, cell.iou_d
            );
            sink.push(cell.miou);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let per_seed_gain: Vec<f64> = ours.iter().zip(&bl).map(|(o, b)| o - b).collect();
    let every_seed = per_seed_gain.iter().all(|d| *d >= 5.0);
    let vs_adversarial = mean(&ours) >= mean(&bl_al);
    let in_time = max_minutes < 20.0;

    let pass = every_seed && vs_adversarial && in_time;
    verdict(
        "end-to-end-adaptation",
        pass,
        &format!(
            "mIoU gains over source-only per seed {:?} (need >= 5 each), mean full {:.2} vs mean adversarial-only {:.2}, slowest variant {:.1} min (limit 20)",
            per_seed_gain.iter().map(|d| (d * 100.0).round() / 100.0).collect::<Vec<_>>(),
            mean(&ours),
            mean(&bl_al)
        ),
    );
}

// ---------------------------------------------------------------------------
// Ablation identities: baseline bitwise, refinement-only diff.
// ---------------------------------------------------------------------------

fn tiny_dataset(dir: &std::path::Path) {
    let set = SynthSettings {
        k_classes: 2,
        size: 32,
        lesion_free: 0.4,
        source_train: 9,
        source_val: 0,
        source_test: 3,
        target_train: 5,
        target_val: 0,
        target_test: 3,
    };
    generate_dataset(&set, 12, dir).unwrap();
}

fn tiny_train_settings(seed: u64) -> TrainSettings {
    let cfg = Config::parse("train.epochs = 2\ntrain.warmup = 1\ntrain.batch = 3\n").unwrap();
    TrainSettings::from_config(&cfg, 2, seed).unwrap()
}

#[test]
fn baseline_bitwise_and_refinement_only_diff() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());

    // Part one: the source-only variant's loss trajectory equals, bit for
    // bit, an independent training loop with every adaptation mechanism
    // structurally absent.
    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(
        tiny_train_settings(21),
        VariantSpec::parse("BL").unwrap(),
        data.path(),
        run_a.path(),
    )
    .unwrap();
    let full = trainer.run().unwrap();
    let reference =
        run_reference_supervised(&tiny_train_settings(21), data.path(), run_b.path()).unwrap();
    let mut bitwise = full.log.len() == reference.len();
    for (a, b) in full.log.iter().zip(&reference) {
        bitwise &= a.l_c.to_bits() == b.l_c.to_bits()
            && a.l_s.to_bits() == b.l_s.to_bits()
            && a.l_w.to_bits() == b.l_w.to_bits()
            && a.l_t.to_bits() == b.l_t.to_bits()
            && a.total.to_bits() == b.total.to_bits()
            && a.lr.to_bits() == b.lr.to_bits();
    }
    let csv_a = std::fs::read(run_a.path().join("train-log.csv")).unwrap();
    let csv_b = std::fs::read(run_b.path().join("train-log.csv")).unwrap();
    bitwise &= csv_a == csv_b;

    // Part two: the no-refinement variant differs from the full variant only
    // in the neighborhood-vote invocation. Same model, same data, one
    // labeling pass each way: identical thresholds and pre-refinement masks;
    // the final masks differ exactly by the vote's flips (selection only
    // ever turns on).
    let flags_ours = VariantSpec::parse("Ours").unwrap();
    let flags_wosp = VariantSpec::parse("Ours-woSP").unwrap();
    let flags_differ_only_in_refine = flags_ours.adversarial == flags_wosp.adversarial
        && flags_ours.pseudo_labels == flags_wosp.pseudo_labels
        && flags_ours.representation_transfer == flags_wosp.representation_transfer
        && flags_ours.transferability_gate == flags_wosp.transferability_gate
        && flags_ours.superpixel_refine
        && !flags_wosp.superpixel_refine;

    let settings = tiny_train_settings(4);
    let model = Model::init(&settings, &flags_ours).unwrap();
    let targets = dataset::load_split(data.path(), Domain::Target, Split::Train).unwrap();
    let maps: Vec<SuperpixelMap> =
        targets.iter().map(|s| slic(&s.image, &settings.slic).unwrap()).collect();

    let plain = pseudo_label_set(&model, &targets, 0.25, SelectionMode::Balanced, None).unwrap();
    let refined =
        pseudo_label_set(&model, &targets, 0.25, SelectionMode::Balanced, Some((&maps, false)))
            .unwrap();

    let mut same_thresholds = plain.thresholds.lambda.len() == refined.thresholds.lambda.len();
    for (a, b) in plain.thresholds.lambda.iter().zip(&refined.thresholds.lambda) {
        same_thresholds &= a.to_bits() == b.to_bits();
    }
    let mut pre_matches = true;
    let mut diff_is_vote = true;
    let mut total_flips = 0usize;
    for (i, raw) in plain.labels.iter().enumerate() {
        pre_matches &= refined.pre_refine[i].v == raw.v && refined.pre_refine[i].yhat == raw.yhat;
        // Replaying the vote on the raw masks must land exactly on the
        // refined output.
        let replay = refine_selection(raw, &maps[i], model.k_classes, false).unwrap();
        diff_is_vote &= replay.labels.v == refined.labels[i].v
            && replay.labels.yhat == refined.labels[i].yhat;
        // And the diff only ever adds selections.
        for (before, after) in raw.v.iter().zip(&refined.labels[i].v) {
            if *before != *after {
                diff_is_vote &= *after;
                total_flips += 1;
            }
        }
    }
    diff_is_vote &= total_flips == refined.flipped && plain.flipped == 0;

    let pass = bitwise && flags_differ_only_in_refine && same_thresholds && pre_matches && diff_is_vote;
    verdict(
        "ablation-identities",
        pass,
        &format!(
            "source-only trajectory bitwise-identical: {bitwise}, flag diff is refine-only: {flags_differ_only_in_refine}, selection-mask diff is exactly the vote ({total_flips} flips, additions only): {diff_is_vote}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Loss recomposition and byte-identical reruns.
// ---------------------------------------------------------------------------

#[test]
fn losses_recompose_and_reruns_are_identical() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let cfg =
        Config::parse("train.epochs = 3\ntrain.warmup = 1\ntrain.batch = 3\nhyper.mu = 1\n")
            .unwrap();
    let settings = TrainSettings::from_config(&cfg, 2, 33).unwrap();

    let mut logs = Vec::new();
    let mut csvs = Vec::new();
    let mut max_resid = 0.0f64;
    for _ in 0..2 {
        let run = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(
            settings.clone(),
            VariantSpec::parse("Ours").unwrap(),
            data.path(),
            run.path(),
        )
        .unwrap();
        let outcome = trainer.run().unwrap();
        for row in &outcome.log {
            let recomposed =
                row.l_c + row.l_s + settings.eta * row.l_w + settings.mu * row.l_t;
            max_resid = max_resid.max((row.total - recomposed).abs());
        }
        csvs.push(std::fs::read(run.path().join("train-log.csv")).unwrap());
        logs.push(outcome.log);
    }
    let identical = csvs[0] == csvs[1];
    let adaptation_rows = logs[0].iter().filter(|r| r.l_w != 0.0 || r.l_t != 0.0).count();

    let pass = max_resid <= 1e-6 && identical && adaptation_rows > 0;
    verdict(
        "recomposition-and-determinism",
        pass,
        &format!(
            "max |total - (L_C + L_S + eta*L_W + mu*L_T)| = {max_resid:.2e} over {} steps ({adaptation_rows} with live adaptation terms), rerun CSV byte-identical: {identical}",
            logs[0].len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Cross-check: evaluation reports are reproducible and sane on a trained
// checkpoint (exercises the save/load/eval path the experiment relies on).
// ---------------------------------------------------------------------------

#[test]
fn checkpoint_evaluation_reports_are_stable() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let run = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(
        tiny_train_settings(8),
        VariantSpec::parse("BL+PL+SRT").unwrap(),
        data.path(),
        run.path(),
    )
    .unwrap();
    let outcome = trainer.run().unwrap();
    let restored = Model::load(&outcome.final_checkpoint).unwrap();
    let test = dataset::load_split(data.path(), Domain::Target, Split::Test).unwrap();
    let a = evaluate(&restored, &test).unwrap();
    let b = evaluate(&restored, &test).unwrap();
    let stable = a.to_csv() == b.to_csv();
    let bounded = a.miou() >= 0.0 && a.miou() <= 100.0;
    verdict(
        "checkpoint-eval-stability",
        stable && bounded,
        &format!("repeat evaluation identical: {stable}, mIoU {:.2} within bounds: {bounded}", a.miou()),
    );
}

//! Confidence gate over the critic's realness scores.
//!
//! A per-location score `p` in `(0, 1)` from the critic is turned into a
//! transferability weight `W = 1 - H(p)`, where `H` is the base-2 entropy of
//! a Bernoulli(p) variable. Locations the critic is sure about (`p` near 0 or
//! 1) get `W` near 1; maximally ambiguous locations (`p = 0.5`) get `W = 0`.
//! The weight map is upsampled to feature resolution and applied as
//! `F_w = (1 + W) * F_o`, so gating never shrinks a feature: `|F_w| >= |F_o|`
//! element-wise.

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorRef, UpsampleMode};

/// Base-2 entropy of a Bernoulli(p). Defined on the closed interval
/// `[0, 1]` with the `0 * log 0 = 0` convention.
pub fn bernoulli_entropy(p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "probability out of range: {p}");
    let term = |q: f64| if q == 0.0 { 0.0 } else { -q * q.log2() };
    term(p) + term(1.0 - p)
}

/// Scalar form of the weight: `1 - H2(p)`.
pub fn quantify_scalar(p: f64) -> f64 {
    1.0 - bernoulli_entropy(p)
}

/// Graph form of `W = 1 - H2(scores)`, element-wise over a score map.
/// Scores must lie strictly inside `(0, 1)` (the critic's sigmoid guarantees
/// this); the closed-interval endpoints are only reachable through the scalar
/// helper.
pub fn quantify(g: &mut Graph, scores: TensorRef) -> Result<TensorRef> {
    {
        let v = g.value(scores);
        if let Some(bad) = v.data().iter().find(|p| **p <= 0.0 || **p >= 1.0) {
            return Err(Error::invalid(format!(
                "gate scores must lie strictly in (0, 1), got {bad}"
            )));
        }
    }
    let ln2_inv = 1.0 / std::f64::consts::LN_2;
    let p = scores;
    let one = {
        let shape = g.value(scores).shape().to_vec();
        g.constant(crate::tensor::Tensor::full(&shape, 1.0))
    };
    let q = g.sub(one, p)?;
    let logp = g.log(p)?;
    let logq = g.log(q)?;
    let plogp = g.mul(p, logp)?;
    let qlogq = g.mul(q, logq)?;
    let s = g.add(plogp, qlogq)?; // = -ln(2) * H2(p)
    let h = g.scale(s, -ln2_inv)?;
    let negh = g.neg(h)?;
    g.add_scalar(negh, 1.0)
}

/// Applies a weight map `[gh, gw, 1]` to features `[fh, fw, C]`:
/// bilinear-upsamples `W` to the feature grid, broadcasts it across channels,
/// and returns `(1 + W) * F_o`.
pub fn apply_gate(g: &mut Graph, w: TensorRef, features: TensorRef) -> Result<TensorRef> {
    let ws = g.value(w).shape().to_vec();
    let fs = g.value(features).shape().to_vec();
    if ws.len() != 3 || ws[2] != 1 {
        return Err(Error::shape(format!("gate weights must be [H, W, 1], got {ws:?}")));
    }
    if fs.len() != 3 {
        return Err(Error::shape(format!("gated features must be [H, W, C], got {fs:?}")));
    }
    let w_up = if ws[0] == fs[0] && ws[1] == fs[1] {
        w
    } else {
        g.upsample(w, fs[0], fs[1], UpsampleMode::Bilinear)?
    };
    let w_b = g.broadcast_to(w_up, &fs)?;
    let gain = g.add_scalar(w_b, 1.0)?;
    g.mul(gain, features)
}

/// Replaces a single-location score map with its spatial mean, so one weight
/// gates the whole image.
pub fn pool_scores(g: &mut Graph, scores: TensorRef) -> Result<TensorRef> {
    let s = g.value(scores).shape().to_vec();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::shape(format!("score map must be [H, W, 1], got {s:?}")));
    }
    let m = g.mean_all(scores)?;
    let one = g.reshape(m, &[1, 1, 1])?;
    g.broadcast_to(one, &s)
}

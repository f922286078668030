//! Dual self-attention over backbone feature maps.
//!
//! Two branches run on the same `[H, W, C]` map and are fused by element-wise
//! sum:
//!
//! * **Spatial**: three learned 1x1 projections produce `C1, C2, C3`; the
//!   pairwise-similarity matrix `E = C1 * C2^T` over the `N = H*W` positions
//!   is normalized into `M`, and position `i` receives `delta * sum_j M[i][j]
//!   * C3[j]` added to its original feature.
//! * **Channel**: the Gram matrix `X^T X` over channels is normalized into
//!   `G`, and channel `i` receives `tau * sum_j G[i][j] * X[:, j]` on top of
//!   itself. No projections are learned for this branch.
//!
//! Normalization runs over the *first* index of the attention matrix (each
//! column sums to 1); `NormalizeAxis::Second` switches to row-normalization
//! for comparison runs. The residual scalars `delta` and `tau` start at zero,
//! so a freshly initialized block is an exact identity (plus-identity fusion).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Graph, Padding, Tensor, TensorRef};

/// Which index of the attention matrix the softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeAxis {
    /// Columns sum to one (normalize over the first index). Default.
    First,
    /// Rows sum to one.
    Second,
}

impl NormalizeAxis {
    fn softmax_axis(self) -> usize {
        match self {
            NormalizeAxis::First => 0,
            NormalizeAxis::Second => 1,
        }
    }
}

/// One learned 1x1 projection (kernel `[1, 1, C, C]` plus bias).
struct Proj {
    kernel: ParamId,
    bias: ParamId,
}

impl Proj {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Proj> {
        let std = (2.0 / channels as f64).sqrt();
        let kernel = Tensor::from_fn(&[1, 1, channels, channels], |_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        });
        Ok(Proj {
            kernel: store.register(format!("{name}.kernel"), kernel)?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[channels]))?,
        })
    }

    fn apply(&self, g: &mut Graph, bind: &Binding, x: TensorRef) -> Result<TensorRef> {
        let y = g.conv2d(x, bind.get(self.kernel), 1, 1, Padding::Same)?;
        let shape = g.value(y).shape().to_vec();
        let b = g.broadcast_to(bind.get(self.bias), &shape)?;
        g.add(y, b)
    }
}

/// Residual dual-attention block: learned spatial projections, the two
/// residual scalars, and the shared normalization setting.
pub struct DualAttention {
    p1: Proj,
    p2: Proj,
    p3: Proj,
    /// Residual weight of the spatial branch; initialized to 0.
    pub delta: ParamId,
    /// Residual weight of the channel branch; initialized to 0.
    pub tau: ParamId,
    pub axis: NormalizeAxis,
    channels: usize,
}

impl DualAttention {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        axis: NormalizeAxis,
    ) -> Result<DualAttention> {
        Ok(DualAttention {
            p1: Proj::init(store, rng, &format!("{prefix}.proj1"), channels)?,
            p2: Proj::init(store, rng, &format!("{prefix}.proj2"), channels)?,
            p3: Proj::init(store, rng, &format!("{prefix}.proj3"), channels)?,
            delta: store.register(format!("{prefix}.delta"), Tensor::scalar(0.0))?,
            tau: store.register(format!("{prefix}.tau"), Tensor::scalar(0.0))?,
            axis,
            channels,
        })
    }

    fn check_input(&self, g: &Graph, fm: TensorRef) -> Result<(usize, usize, usize)> {
        let s = g.value(fm).shape();
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::shape(format!(
                "attention expects [H, W, {}], got {s:?}",
                self.channels
            )));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Spatial branch. Returns `(F_p, M)`: the attended map and the `N x N`
    /// position-attention matrix.
    pub fn spatial(
        &self,
        g: &mut Graph,
        bind: &Binding,
        fm: TensorRef,
    ) -> Result<(TensorRef, TensorRef)> {
        let (h, w, c) = self.check_input(g, fm)?;
        let n = h * w;
        let c1 = self.p1.apply(g, bind, fm)?;
        let c2 = self.p2.apply(g, bind, fm)?;
        let c3 = self.p3.apply(g, bind, fm)?;
        let c1r = g.reshape(c1, &[n, c])?;
        let c2r = g.reshape(c2, &[n, c])?;
        let c3r = g.reshape(c3, &[n, c])?;
        let c2t = g.transpose2d(c2r)?;
        let e = g.matmul(c1r, c2t)?;
        let m = g.softmax(e, self.axis.softmax_axis())?;
        let attended = g.matmul(m, c3r)?;
        let attended_map = g.reshape(attended, &[h, w, c])?;
        let fp = self.residual(g, bind, self.delta, attended_map, fm)?;
        Ok((fp, m))
    }

    /// Channel branch. Returns `(F_c, G)`: the attended map and the `C x C`
    /// channel-attention matrix.
    pub fn channel(
        &self,
        g: &mut Graph,
        bind: &Binding,
        fm: TensorRef,
    ) -> Result<(TensorRef, TensorRef)> {
        let (h, w, c) = self.check_input(g, fm)?;
        let n = h * w;
        let x = g.reshape(fm, &[n, c])?;
        let xt = g.transpose2d(x)?;
        let e = g.matmul(xt, x)?;
        let gm = g.softmax(e, self.axis.softmax_axis())?;
        // Channel i of the output mixes channel j with weight G[i][j]:
        // attended = X * G^T.
        let gt = g.transpose2d(gm)?;
        let attended = g.matmul(x, gt)?;
        let attended_map = g.reshape(attended, &[h, w, c])?;
        let fc = self.residual(g, bind, self.tau, attended_map, fm)?;
        Ok((fc, gm))
    }

    fn residual(
        &self,
        g: &mut Graph,
        bind: &Binding,
        scalar: ParamId,
        attended: TensorRef,
        fm: TensorRef,
    ) -> Result<TensorRef> {
        let shape = g.value(fm).shape().to_vec();
        let s = g.reshape(bind.get(scalar), &[1, 1, 1])?;
        let sb = g.broadcast_to(s, &shape)?;
        let scaled = g.mul(sb, attended)?;
        g.add(scaled, fm)
    }

    /// Full block: `F_o = F_p + F_c`.
    pub fn fused(&self, g: &mut Graph, bind: &Binding, fm: TensorRef) -> Result<TensorRef> {
        let (fp, _) = self.spatial(g, bind, fm)?;
        let (fc, _) = self.channel(g, bind, fm)?;
        fuse_attention(g, fp, fc)
    }
}

/// Element-wise sum of the two branch outputs.
pub fn fuse_attention(g: &mut Graph, fp: TensorRef, fc: TensorRef) -> Result<TensorRef> {
    g.add(fp, fc)
}

//! Model components: shared backbone, attention-fused features, the two
//! prediction heads, and the domain critic.
//!
//! All maps are `[H, W, C]`. The backbone downsamples by 4 overall
//! (two stride-2 stages), so inputs must have spatial extents divisible by 4.
//! Channel widths are fixed at {8, 16, 32, 32}; the final stage sums three
//! parallel dilated 3x3 convolutions (dilations 1, 2, 4) for a wider
//! receptive field at constant resolution.
//!
//! * `Classifier` (image head): global average pool -> linear -> softmax over
//!   image-level classes.
//! * `Segmenter` (pixel head): three parallel dilated 3x3 convs (16 channels
//!   each, dilations 1, 2, 4) concatenated to 48 channels, a 1x1 conv to
//!   per-class logits, and bilinear upsampling back to input resolution.
//!   Optional refinement adds `log p(class)` from the image head to every
//!   pixel's logit for that class before the softmax.
//! * `Critic`: five stride-{2,2,2,1,1} 3x3 convs with channels
//!   {16, 32, 64, 64, 1}, leaky-ReLU(0.2) between and a sigmoid on the last,
//!   producing a per-location realness map. Inputs need extents >= 8.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{DualAttention, NormalizeAxis};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Graph, Padding, Tensor, TensorRef};

/// Negative slope of the backbone / head activations.
pub const BACKBONE_LEAK: f64 = 0.1;
/// Negative slope inside the critic.
pub const CRITIC_LEAK: f64 = 0.2;
/// Backbone output channels.
pub const FEATURE_CHANNELS: usize = 32;
/// Overall backbone downsampling factor.
pub const DOWNSAMPLE: usize = 4;

/// What the critic looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticInput {
    /// Fused attention features (default).
    Features,
    /// The pixel head's softmax output.
    Softmax,
}

/// One convolution with bias.
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    stride: usize,
    dilation: usize,
    padding: Padding,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<ConvLayer> {
        let std = (2.0 / (kh * kw * cin) as f64).sqrt();
        let kernel = Tensor::from_fn(&[kh, kw, cin, cout], |_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        });
        Ok(ConvLayer {
            kernel: store.register(format!("{name}.kernel"), kernel)?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            dilation,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: TensorRef) -> Result<TensorRef> {
        let y = g.conv2d(x, bind.get(self.kernel), self.stride, self.dilation, self.padding)?;
        let shape = g.value(y).shape().to_vec();
        let b = g.broadcast_to(bind.get(self.bias), &shape)?;
        g.add(y, b)
    }
}

/// Four-stage convolutional feature extractor.
pub struct Backbone {
    b1: ConvLayer,
    b2: ConvLayer,
    b3: ConvLayer,
    d1: ConvLayer,
    d2: ConvLayer,
    d4: ConvLayer,
}

impl Backbone {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str) -> Result<Backbone> {
        Ok(Backbone {
            b1: ConvLayer::init(store, rng, &format!("{prefix}.block1"), 3, 3, 3, 8, 2, 1, Padding::Same)?,
            b2: ConvLayer::init(store, rng, &format!("{prefix}.block2"), 3, 3, 8, 16, 2, 1, Padding::Same)?,
            b3: ConvLayer::init(store, rng, &format!("{prefix}.block3"), 3, 3, 16, 32, 1, 1, Padding::Same)?,
            d1: ConvLayer::init(store, rng, &format!("{prefix}.block4.d1"), 3, 3, 32, 32, 1, 1, Padding::Same)?,
            d2: ConvLayer::init(store, rng, &format!("{prefix}.block4.d2"), 3, 3, 32, 32, 1, 2, Padding::Same)?,
            d4: ConvLayer::init(store, rng, &format!("{prefix}.block4.d4"), 3, 3, 32, 32, 1, 4, Padding::Same)?,
        })
    }

    /// `[H, W, 3] -> [H/4, W/4, 32]`. Errors unless `H` and `W` are divisible
    /// by 4.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: TensorRef) -> Result<TensorRef> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape(format!("backbone expects [H, W, 3], got {s:?}")));
        }
        if s[0] % DOWNSAMPLE != 0 || s[1] % DOWNSAMPLE != 0 || s[0] < DOWNSAMPLE || s[1] < DOWNSAMPLE {
            return Err(Error::shape(format!(
                "backbone input extents must be positive multiples of {DOWNSAMPLE}, got {}x{}",
                s[0], s[1]
            )));
        }
        let h1 = self.b1.forward(g, bind, x)?;
        let h1 = g.leaky_relu(h1, BACKBONE_LEAK)?;
        let h2 = self.b2.forward(g, bind, h1)?;
        let h2 = g.leaky_relu(h2, BACKBONE_LEAK)?;
        let h3 = self.b3.forward(g, bind, h2)?;
        let h3 = g.leaky_relu(h3, BACKBONE_LEAK)?;
        let a = self.d1.forward(g, bind, h3)?;
        let b = self.d2.forward(g, bind, h3)?;
        let c = self.d4.forward(g, bind, h3)?;
        let ab = g.add(a, b)?;
        let sum = g.add(ab, c)?;
        g.leaky_relu(sum, BACKBONE_LEAK)
    }
}

/// Image-level head: global average pool, linear map, softmax.
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
    k_img: usize,
}

impl Classifier {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        k_img: usize,
    ) -> Result<Classifier> {
        let std = (2.0 / channels as f64).sqrt();
        let weight = Tensor::from_fn(&[channels, k_img], |_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        });
        Ok(Classifier {
            weight: store.register(format!("{prefix}.weight"), weight)?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[k_img]))?,
            k_img,
        })
    }

    /// `[H, W, C] -> [K]` class probabilities.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, features: TensorRef) -> Result<TensorRef> {
        let s = g.value(features).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("classifier expects [H, W, C], got {s:?}")));
        }
        let pooled_h = g.mean_axis(features, 0, false)?; // [W, C]
        let pooled = g.mean_axis(pooled_h, 0, false)?; // [C]
        let row = g.reshape(pooled, &[1, s[2]])?;
        let logits = g.matmul(row, bind.get(self.weight))?; // [1, K]
        let bias = g.reshape(bind.get(self.bias), &[1, self.k_img])?;
        let logits = g.add(logits, bias)?;
        let probs = g.softmax(logits, 1)?;
        g.reshape(probs, &[self.k_img])
    }
}

/// Pixel head: parallel dilated context branches, 1x1 projection to logits,
/// bilinear upsampling.
pub struct Segmenter {
    a1: ConvLayer,
    a2: ConvLayer,
    a4: ConvLayer,
    proj: ConvLayer,
    pub k_classes: usize,
}

impl Segmenter {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        k_classes: usize,
    ) -> Result<Segmenter> {
        Ok(Segmenter {
            a1: ConvLayer::init(store, rng, &format!("{prefix}.ctx1"), 3, 3, channels, 16, 1, 1, Padding::Same)?,
            a2: ConvLayer::init(store, rng, &format!("{prefix}.ctx2"), 3, 3, channels, 16, 1, 2, Padding::Same)?,
            a4: ConvLayer::init(store, rng, &format!("{prefix}.ctx4"), 3, 3, channels, 16, 1, 4, Padding::Same)?,
            proj: ConvLayer::init(store, rng, &format!("{prefix}.proj"), 1, 1, 48, k_classes, 1, 1, Padding::Same)?,
            k_classes,
        })
    }

    /// Per-pixel class logits at full resolution `[out_h, out_w, K]`.
    pub fn logits(
        &self,
        g: &mut Graph,
        bind: &Binding,
        features: TensorRef,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorRef> {
        let a = self.a1.forward(g, bind, features)?;
        let a = g.leaky_relu(a, BACKBONE_LEAK)?;
        let b = self.a2.forward(g, bind, features)?;
        let b = g.leaky_relu(b, BACKBONE_LEAK)?;
        let c = self.a4.forward(g, bind, features)?;
        let c = g.leaky_relu(c, BACKBONE_LEAK)?;
        let cat = g.concat(&[a, b, c], 2)?;
        let low = self.proj.forward(g, bind, cat)?;
        g.upsample(low, out_h, out_w, crate::tensor::UpsampleMode::Bilinear)
    }

    /// Softmax over the class axis of a logit map.
    pub fn probabilities(&self, g: &mut Graph, logits: TensorRef) -> Result<TensorRef> {
        g.softmax(logits, 2)
    }
}

/// Adds `log p(class k)` from the image head to every pixel logit of class
/// `k`. Requires the pixel and image heads to share the class set.
pub fn refine_logits(
    g: &mut Graph,
    pixel_logits: TensorRef,
    class_probs: TensorRef,
) -> Result<TensorRef> {
    let ls = g.value(pixel_logits).shape().to_vec();
    let cs = g.value(class_probs).shape().to_vec();
    if ls.len() != 3 || cs.len() != 1 || ls[2] != cs[0] {
        return Err(Error::shape(format!(
            "refinement needs [H, W, K] logits and [K] class probabilities, got {ls:?} and {cs:?}"
        )));
    }
    let logp = g.log(class_probs)?;
    let logp_b = g.broadcast_to(logp, &ls)?;
    g.add(pixel_logits, logp_b)
}

/// Domain critic: per-location realness scores in `(0, 1)`.
pub struct Critic {
    layers: Vec<ConvLayer>,
    pub in_channels: usize,
}

impl Critic {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
    ) -> Result<Critic> {
        let widths = [16usize, 32, 64, 64, 1];
        let strides = [2usize, 2, 2, 1, 1];
        let mut layers = Vec::with_capacity(5);
        let mut cin = in_channels;
        for (i, (&cout, &stride)) in widths.iter().zip(&strides).enumerate() {
            layers.push(ConvLayer::init(
                store,
                rng,
                &format!("{prefix}.conv{}", i + 1),
                3,
                3,
                cin,
                cout,
                stride,
                1,
                Padding::Same,
            )?);
            cin = cout;
        }
        Ok(Critic { layers, in_channels })
    }

    /// `[H, W, C_in] -> [ceil(H/8), ceil(W/8), 1]` score map. Errors if either
    /// extent is below 8.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: TensorRef) -> Result<TensorRef> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || s[2] != self.in_channels {
            return Err(Error::shape(format!(
                "critic expects [H, W, {}], got {s:?}",
                self.in_channels
            )));
        }
        if s[0] < 8 || s[1] < 8 {
            return Err(Error::shape(format!(
                "critic input extents must be >= 8, got {}x{}",
                s[0], s[1]
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, bind, h)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, CRITIC_LEAK)?;
            } else {
                h = g.sigmoid(h)?;
            }
        }
        Ok(h)
    }

    /// Mean of the score map: one scalar per input.
    pub fn score(&self, g: &mut Graph, bind: &Binding, x: TensorRef) -> Result<TensorRef> {
        let map = self.forward(g, bind, x)?;
        g.mean_all(map)
    }
}

/// The full prediction model: backbone, dual attention, and both heads.
pub struct Generator {
    pub backbone: Backbone,
    pub attention: DualAttention,
    pub classifier: Classifier,
    pub segmenter: Segmenter,
    pub k_img: usize,
}

impl Generator {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        k_classes: usize,
        k_img: usize,
        axis: NormalizeAxis,
    ) -> Result<Generator> {
        Ok(Generator {
            backbone: Backbone::init(store, rng, "backbone")?,
            attention: DualAttention::init(store, rng, "attention", FEATURE_CHANNELS, axis)?,
            classifier: Classifier::init(store, rng, "classifier", FEATURE_CHANNELS, k_img)?,
            segmenter: Segmenter::init(store, rng, "segmenter", FEATURE_CHANNELS, k_classes)?,
            k_img,
        })
    }

    /// Backbone plus fused attention: `[H, W, 3] -> [H/4, W/4, 32]`.
    pub fn features(&self, g: &mut Graph, bind: &Binding, image: TensorRef) -> Result<TensorRef> {
        let fm = self.backbone.forward(g, bind, image)?;
        self.attention.fused(g, bind, fm)
    }
}

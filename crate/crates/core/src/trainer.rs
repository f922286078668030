//! The training driver: alternating critic ascent and generator descent over
//! the combined objective, with per-epoch pseudo-label refresh, centroid bank
//! maintenance, ablation variants, step logging, and checkpointing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::NormalizeAxis;
use crate::centroid::{
    batch_centroids, class_sums, consistence_loss, downsample_labels, downsample_mask,
    CentroidBank, CentroidNormalize, ClassSums,
};
use crate::config::{config_digest, write_resolved_config, Config};
use crate::dataset::{self, Domain, Sample, Split};
use crate::error::{Error, Result};
use crate::evalreport::{EvalReport, IoUCounts};
use crate::gate::{apply_gate, quantify};
use crate::losses::{
    classification_loss, critic_score_gap, segmentation_loss, wasserstein_critic_objective,
    ClassSample, PenaltyPoint, SourceSegSample, TargetSegSample, PROB_FLOOR,
};
use crate::networks::{refine_logits, Critic, CriticInput, Generator, DOWNSAMPLE, FEATURE_CHANNELS};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Binding, ParamStore};
use crate::pseudo::{
    curriculum_portion, determine_thresholds, determine_thresholds_pooled, pixel_stats,
    select_weights, write_thresholds_csv, PseudoLabels, ScorePool, SelectionMode, Thresholds,
};
use crate::rngutil::derive_rng;
use crate::superpixel::{refine_selection, slic, SlicParams, SuperpixelMap};
use crate::tensor::{Graph, Tensor, TensorRef};

/// Image-level classes: lesion-free vs diseased.
pub const K_IMG: usize = 2;

/// The ablation table rows, in presentation order.
pub const ABLATION_VARIANTS: [&str; 10] = [
    "BL",
    "BL+AL",
    "BL+AL+PL",
    "BL+AL+SRT",
    "BL+PL+SRT",
    "BL+AL+PL+QT",
    "BL+AL+SRT+QT",
    "BL+PL+SRT+QT",
    "Ours-woSP",
    "Ours",
];

/// Which mechanisms a training run enables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: String,
    /// Adversarial alignment: critic training plus the weighted score gap in
    /// the generator objective.
    pub adversarial: bool,
    /// Self-paced pseudo-label supervision on the target segmentation.
    pub pseudo_labels: bool,
    /// Centroid consistence term between the domains.
    pub representation_transfer: bool,
    /// Residual transferability gating of the fused features.
    pub transferability_gate: bool,
    /// Neighborhood-vote refinement of the selection mask.
    pub superpixel_refine: bool,
}

impl VariantSpec {
    pub fn parse(name: &str) -> Result<VariantSpec> {
        let mut v = VariantSpec {
            name: name.to_string(),
            adversarial: false,
            pseudo_labels: false,
            representation_transfer: false,
            transferability_gate: false,
            superpixel_refine: true,
        };
        match name {
            "Ours" => {
                v.adversarial = true;
                v.pseudo_labels = true;
                v.representation_transfer = true;
                v.transferability_gate = true;
                return Ok(v);
            }
            "Ours-woSP" => {
                v.adversarial = true;
                v.pseudo_labels = true;
                v.representation_transfer = true;
                v.transferability_gate = true;
                v.superpixel_refine = false;
                return Ok(v);
            }
            _ => {}
        }
        let mut parts = name.split('+');
        if parts.next() != Some("BL") {
            return Err(Error::invalid(format!(
                "unknown variant '{name}' (expected BL[+AL][+PL][+SRT][+QT], Ours, or Ours-woSP)"
            )));
        }
        for part in parts {
            match part {
                "AL" => v.adversarial = true,
                "PL" => v.pseudo_labels = true,
                "SRT" => v.representation_transfer = true,
                "QT" => v.transferability_gate = true,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown variant component '{other}' in '{name}'"
                    )))
                }
            }
        }
        Ok(v)
    }

    /// The baseline trains on source data alone.
    pub fn is_baseline(&self) -> bool {
        !self.adversarial
            && !self.pseudo_labels
            && !self.representation_transfer
            && !self.transferability_gate
    }

    /// Pseudo labels are produced when either consumer needs them.
    pub fn labeling_active(&self) -> bool {
        self.pseudo_labels || self.representation_transfer
    }

    /// Whether any target data is consumed at all.
    pub fn uses_target(&self) -> bool {
        !self.is_baseline()
    }
}

/// Resolved training hyperparameters and switches.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Source-supervised epochs before any adaptation mechanism engages.
    pub warmup: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub eta: f64,
    pub mu: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub xi: f64,
    pub lr: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_step: usize,
    pub clip_norm: Option<f64>,
    pub gp_interpolated: bool,
    pub gate_detach: bool,
    pub critic_input: CriticInput,
    pub refine_enabled: bool,
    pub centroid_normalize: CentroidNormalize,
    pub centroid_absent_zero: bool,
    pub selection_mode: SelectionMode,
    pub slic: SlicParams,
    pub refine_in_place: bool,
    pub attention_axis: NormalizeAxis,
    pub k_classes: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_config(cfg: &Config, k_classes: usize, seed: u64) -> Result<TrainSettings> {
        let eta = cfg.f64_or("hyper.eta", 0.3)?;
        let mu = cfg.f64_or("hyper.mu", 10.0)?;
        let alpha = cfg.f64_or("hyper.alpha", 1.0)?;
        let gamma = cfg.f64_or("hyper.gamma", 0.7)?;
        let xi = cfg.f64_or("hyper.xi", 10.0)?;
        for (name, v) in [("hyper.eta", eta), ("hyper.mu", mu), ("hyper.alpha", alpha), ("hyper.xi", xi)] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(Error::Config(format!("hyper.gamma must be in (0,1), got {gamma}")));
        }
        let clip_enabled = cfg.bool_or("optim.clip_enabled", true)?;
        let s = TrainSettings {
            epochs: cfg.usize_or("train.epochs", 8)?,
            warmup: cfg.usize_or("train.warmup", 2)?,
            batch_size: cfg.usize_or("train.batch", 4)?,
            checkpoint_every: cfg.usize_or("train.checkpoint_every", 0)?,
            eta,
            mu,
            alpha,
            gamma,
            xi,
            lr: cfg.f64_or("optim.lr", 1e-3)?,
            lr_decay_rate: cfg.f64_or("optim.decay_rate", 0.7)?,
            lr_decay_step: cfg.usize_or("optim.decay_step", 950)?,
            clip_norm: clip_enabled.then_some(cfg.f64_or("optim.clip", 5.0)?),
            gp_interpolated: cfg.choice_or("gp.mode", "aswritten", &["aswritten", "interpolated"])?
                == "interpolated",
            gate_detach: cfg.bool_or("gate.detach", true)?,
            critic_input: match cfg.choice_or("critic.input", "features", &["features", "softmax"])?.as_str()
            {
                "softmax" => CriticInput::Softmax,
                _ => CriticInput::Features,
            },
            refine_enabled: cfg.bool_or("refine.enabled", true)?,
            centroid_normalize: match cfg
                .choice_or("centroid.normalize", "total", &["total", "per_class"])?
                .as_str()
            {
                "per_class" => CentroidNormalize::PerClass,
                _ => CentroidNormalize::Total,
            },
            centroid_absent_zero: match cfg.choice_or("centroid.absent", "skip", &["skip", "zero"])?.as_str() {
                "zero" => true,
                _ => false,
            },
            selection_mode: match cfg
                .choice_or("pseudo.selection", "balanced", &["balanced", "pooled", "ranked"])?
                .as_str()
            {
                "pooled" => SelectionMode::Pooled,
                "ranked" => SelectionMode::ProbabilityRanked,
                _ => SelectionMode::Balanced,
            },
            slic: SlicParams {
                k: cfg.usize_or("superpixel.k", 64)?,
                compactness: cfg.f64_or("superpixel.compactness", 10.0)?,
                iters: cfg.usize_or("superpixel.iters", 10)?,
            },
            refine_in_place: cfg.bool_or("refine.inplace", false)?,
            attention_axis: match cfg
                .choice_or("attention.normalize", "first", &["first", "second"])?
                .as_str()
            {
                "second" => NormalizeAxis::Second,
                _ => NormalizeAxis::First,
            },
            k_classes,
            seed,
        };
        if s.epochs == 0 || s.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch must be positive".into()));
        }
        if s.warmup >= s.epochs {
            return Err(Error::Config(format!(
                "train.warmup ({}) must leave at least one adaptation epoch before \
                 train.epochs ({})",
                s.warmup, s.epochs
            )));
        }
        if s.refine_enabled && s.k_classes != K_IMG {
            return Err(Error::Config(format!(
                "refine.enabled requires {} pixel classes to match the image classes; \
                 set refine.enabled = false for {}-class data",
                K_IMG, s.k_classes
            )));
        }
        Ok(s)
    }

    /// Everything that shaped the run, for the resolved-config file.
    pub fn resolved(&self) -> Vec<(String, String)> {
        vec![
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.warmup".into(), self.warmup.to_string()),
            ("train.batch".into(), self.batch_size.to_string()),
            ("train.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("hyper.eta".into(), format!("{}", self.eta)),
            ("hyper.mu".into(), format!("{}", self.mu)),
            ("hyper.alpha".into(), format!("{}", self.alpha)),
            ("hyper.gamma".into(), format!("{}", self.gamma)),
            ("hyper.xi".into(), format!("{}", self.xi)),
            ("optim.lr".into(), format!("{}", self.lr)),
            ("optim.decay_rate".into(), format!("{}", self.lr_decay_rate)),
            ("optim.decay_step".into(), self.lr_decay_step.to_string()),
            (
                "optim.clip".into(),
                self.clip_norm.map(|c| format!("{c}")).unwrap_or_else(|| "disabled".into()),
            ),
            (
                "gp.mode".into(),
                if self.gp_interpolated { "interpolated" } else { "aswritten" }.into(),
            ),
            ("gate.detach".into(), self.gate_detach.to_string()),
            (
                "critic.input".into(),
                match self.critic_input {
                    CriticInput::Softmax => "softmax",
                    CriticInput::Features => "features",
                }
                .into(),
            ),
            ("refine.enabled".into(), self.refine_enabled.to_string()),
            (
                "centroid.normalize".into(),
                match self.centroid_normalize {
                    CentroidNormalize::PerClass => "per_class",
                    CentroidNormalize::Total => "total",
                }
                .into(),
            ),
            (
                "centroid.absent".into(),
                if self.centroid_absent_zero { "zero" } else { "skip" }.into(),
            ),
            (
                "pseudo.selection".into(),
                match self.selection_mode {
                    SelectionMode::Pooled => "pooled",
                    SelectionMode::ProbabilityRanked => "ranked",
                    SelectionMode::Balanced => "balanced",
                }
                .into(),
            ),
            ("superpixel.k".into(), self.slic.k.to_string()),
            ("superpixel.compactness".into(), format!("{}", self.slic.compactness)),
            ("superpixel.iters".into(), self.slic.iters.to_string()),
            ("refine.inplace".into(), self.refine_in_place.to_string()),
            (
                "attention.normalize".into(),
                match self.attention_axis {
                    NormalizeAxis::Second => "second",
                    NormalizeAxis::First => "first",
                }
                .into(),
            ),
            ("data.classes".into(), self.k_classes.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// The networks plus the switches needed to run them at inference time.
pub struct Model {
    pub gen_store: ParamStore,
    pub critic_store: ParamStore,
    pub generator: Generator,
    pub critic: Critic,
    pub k_classes: usize,
    pub use_gate: bool,
    pub refine_enabled: bool,
    pub critic_input: CriticInput,
    pub attention_axis: NormalizeAxis,
}

impl Model {
    pub fn init(settings: &TrainSettings, variant: &VariantSpec) -> Result<Model> {
        let mut gen_store = ParamStore::new();
        let mut critic_store = ParamStore::new();
        let mut rng_gen = derive_rng(settings.seed, "init/generator");
        let mut rng_critic = derive_rng(settings.seed, "init/critic");
        let generator = Generator::init(
            &mut gen_store,
            &mut rng_gen,
            settings.k_classes,
            K_IMG,
            settings.attention_axis,
        )?;
        let critic_channels = match settings.critic_input {
            CriticInput::Features => FEATURE_CHANNELS,
            CriticInput::Softmax => settings.k_classes,
        };
        let critic = Critic::init(&mut critic_store, &mut rng_critic, "critic", critic_channels)?;
        Ok(Model {
            gen_store,
            critic_store,
            generator,
            critic,
            k_classes: settings.k_classes,
            use_gate: variant.transferability_gate,
            refine_enabled: settings.refine_enabled,
            critic_input: settings.critic_input,
            attention_axis: settings.attention_axis,
        })
    }

    fn flags(&self) -> Vec<(String, String)> {
        vec![
            ("k_classes".into(), self.k_classes.to_string()),
            ("k_img".into(), K_IMG.to_string()),
            ("use_gate".into(), self.use_gate.to_string()),
            ("refine_enabled".into(), self.refine_enabled.to_string()),
            (
                "critic_input".into(),
                match self.critic_input {
                    CriticInput::Softmax => "softmax",
                    CriticInput::Features => "features",
                }
                .into(),
            ),
            (
                "attention_normalize".into(),
                match self.attention_axis {
                    NormalizeAxis::Second => "second",
                    NormalizeAxis::First => "first",
                }
                .into(),
            ),
        ]
    }

    /// Saves both parameter stores and the inference switches.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.gen_store.save_checkpoint(&dir.join("generator"), &self.flags())?;
        self.critic_store.save_checkpoint(&dir.join("critic"), &[])?;
        let text: String = self
            .flags()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        fs::write(dir.join("model.txt"), text)?;
        Ok(())
    }

    /// Restores a model from a checkpoint directory written by `save`.
    pub fn load(dir: &Path) -> Result<Model> {
        let cfg = Config::from_file(&dir.join("model.txt"))?;
        let k_classes = cfg.usize_or("k_classes", 0)?;
        if k_classes < 2 {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} lacks a valid class count",
                dir.display()
            )));
        }
        let axis = match cfg.str_or("attention_normalize", "first").as_str() {
            "second" => NormalizeAxis::Second,
            _ => NormalizeAxis::First,
        };
        let critic_input = match cfg.str_or("critic_input", "features").as_str() {
            "softmax" => CriticInput::Softmax,
            _ => CriticInput::Features,
        };
        let mut gen_store = ParamStore::new();
        let mut critic_store = ParamStore::new();
        let mut rng_gen = derive_rng(0, "init/generator");
        let mut rng_critic = derive_rng(0, "init/critic");
        let generator = Generator::init(&mut gen_store, &mut rng_gen, k_classes, K_IMG, axis)?;
        let critic_channels = match critic_input {
            CriticInput::Features => FEATURE_CHANNELS,
            CriticInput::Softmax => k_classes,
        };
        let critic = Critic::init(&mut critic_store, &mut rng_critic, "critic", critic_channels)?;
        gen_store.load_checkpoint(&dir.join("generator"))?;
        critic_store.load_checkpoint(&dir.join("critic"))?;
        Ok(Model {
            gen_store,
            critic_store,
            generator,
            critic,
            k_classes,
            use_gate: cfg.bool_or("use_gate", false)?,
            refine_enabled: cfg.bool_or("refine_enabled", true)?,
            critic_input,
            attention_axis: axis,
        })
    }

    /// The forward configuration used during adaptation training.
    pub fn train_pipe(&self, want_adversarial_score: bool) -> ForwardPipeline {
        ForwardPipeline {
            use_gate: self.use_gate,
            detach_gate: true,
            refine: self.refine_enabled,
            want_adversarial_score,
        }
    }

    /// The test-time forward: straight through the backbone and heads, no
    /// critic involvement.
    pub fn test_pipe(&self) -> ForwardPipeline {
        ForwardPipeline {
            use_gate: false,
            detach_gate: true,
            refine: self.refine_enabled,
            want_adversarial_score: false,
        }
    }

    /// Runs one frozen forward pass and returns the probability map value.
    pub fn probmap(&self, image: &Tensor, pipe: &ForwardPipeline) -> Result<Tensor> {
        let mut g = Graph::new();
        let bg = self.gen_store.bind(&mut g, false);
        let bc = self.critic_store.bind(&mut g, false);
        let out = model_forward(&mut g, self, &bg, &bc, image, pipe)?;
        Ok(g.value(out.probmap).clone())
    }

    /// Inference: per-pixel class prediction plus the probability map.
    pub fn predict(&self, image: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let pm = self.probmap(image, &self.test_pipe())?;
        let (h, w, k) = (pm.shape()[0], pm.shape()[1], pm.shape()[2]);
        let mut mask = vec![0usize; h * w];
        for pix in 0..h * w {
            let row = &pm.data()[pix * k..(pix + 1) * k];
            let mut best = 0usize;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            mask[pix] = best;
        }
        Ok((mask, pm))
    }
}

/// Switches for one forward construction.
pub struct ForwardPipeline {
    pub use_gate: bool,
    pub detach_gate: bool,
    pub refine: bool,
    pub want_adversarial_score: bool,
}

/// Every node of one image's forward pass that later stages consume.
pub struct ForwardOut {
    /// Fused attention features (the critic's default input).
    pub fused: TensorRef,
    /// Features the heads consumed: gated when the gate is on.
    pub gated: TensorRef,
    /// Image-level class probabilities, `[K_IMG]`.
    pub class_probs: TensorRef,
    /// Per-pixel class probabilities, `[H, W, K]`.
    pub probmap: TensorRef,
    /// Mean critic score for the adversarial gap, when requested.
    pub adversarial_score: Option<TensorRef>,
}

/// Clamps a score map strictly inside (0, 1) so the entropy gate stays
/// defined even if the critic's sigmoid saturates in floating point.
fn clamp_unit_open(g: &mut Graph, x: TensorRef) -> Result<TensorRef> {
    let low = g.clamp_min(x, 1e-12)?;
    let flipped = g.neg(low)?;
    let flipped = g.add_scalar(flipped, 1.0)?;
    let flipped = g.clamp_min(flipped, 1e-12)?;
    let back = g.neg(flipped)?;
    g.add_scalar(back, 1.0)
}

/// Builds the full per-image forward pass.
pub fn model_forward(
    g: &mut Graph,
    model: &Model,
    bind_gen: &Binding,
    bind_critic: &Binding,
    image: &Tensor,
    pipe: &ForwardPipeline,
) -> Result<ForwardOut> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!("expected an [H, W, 3] image, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let img = g.constant(image.clone());
    let fused = model.generator.features(g, bind_gen, img)?;

    let gated = if pipe.use_gate {
        let score_map = match model.critic_input {
            CriticInput::Features => model.critic.forward(g, bind_critic, fused)?,
            CriticInput::Softmax => {
                // The gate reads the critic's view of the ungated prediction.
                let mut logits = model.generator.segmenter.logits(g, bind_gen, fused, h, w)?;
                if pipe.refine {
                    let cp = model.generator.classifier.forward(g, bind_gen, fused)?;
                    let safe = g.clamp_min(cp, PROB_FLOOR)?;
                    logits = refine_logits(g, logits, safe)?;
                }
                let pm = model.generator.segmenter.probabilities(g, logits)?;
                model.critic.forward(g, bind_critic, pm)?
            }
        };
        let score_map = if pipe.detach_gate { g.detach(score_map) } else { score_map };
        let safe = clamp_unit_open(g, score_map)?;
        let wmap = quantify(g, safe)?;
        apply_gate(g, wmap, fused)?
    } else {
        fused
    };

    let class_probs = model.generator.classifier.forward(g, bind_gen, gated)?;
    let mut logits = model.generator.segmenter.logits(g, bind_gen, gated, h, w)?;
    if pipe.refine {
        let safe_probs = g.clamp_min(class_probs, PROB_FLOOR)?;
        logits = refine_logits(g, logits, safe_probs)?;
    }
    let probmap = model.generator.segmenter.probabilities(g, logits)?;

    let adversarial_score = if pipe.want_adversarial_score {
        Some(match model.critic_input {
            CriticInput::Features => model.critic.score(g, bind_critic, fused)?,
            CriticInput::Softmax => model.critic.score(g, bind_critic, probmap)?,
        })
    } else {
        None
    };

    Ok(ForwardOut { fused, gated, class_probs, probmap, adversarial_score })
}

/// One CSV row of the training log.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub l_c: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub l_t: f64,
    pub total: f64,
    pub lr: f64,
    pub n_portion: f64,
}

/// Serializes the log with a fixed numeric format so reruns are
/// byte-comparable.
pub fn write_step_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut text = String::from("step,L_C,L_S,L_W,L_T,total,lr,n_portion\n");
    for row in log {
        text.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            row.step, row.l_c, row.l_s, row.l_w, row.l_t, row.total, row.lr, row.n_portion
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// What a finished training run hands back.
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
    /// Probabilities clamped away from zero inside the losses.
    pub clamp_events: usize,
}

pub struct Trainer {
    pub settings: TrainSettings,
    pub variant: VariantSpec,
    pub model: Model,
    gen_adam: AdamState,
    critic_adam: AdamState,
    adam_cfg: AdamConfig,
    bank_source: CentroidBank,
    bank_target: CentroidBank,
    source_train: Vec<Sample>,
    target_train: Vec<Sample>,
    pseudo: Vec<Option<PseudoLabels>>,
    thresholds: Option<Thresholds>,
    superpixels: Vec<SuperpixelMap>,
    rng_data: ChaCha8Rng,
    rng_gp: ChaCha8Rng,
    run_dir: PathBuf,
    log: Vec<StepLog>,
    clamp_events: usize,
    global_step: usize,
}

impl Trainer {
    pub fn new(
        settings: TrainSettings,
        variant: VariantSpec,
        data_root: &Path,
        run_dir: &Path,
    ) -> Result<Trainer> {
        let source_train = dataset::load_split(data_root, Domain::Source, Split::Train)?;
        if source_train.is_empty() {
            return Err(Error::invalid("no source training samples found"));
        }
        for s in &source_train {
            if s.pixel_labels.is_none() {
                return Err(Error::invalid(format!(
                    "source training sample {} lacks a pixel mask",
                    s.id
                )));
            }
        }
        let target_train = dataset::load_split(data_root, Domain::Target, Split::Train)?;
        if variant.uses_target() && target_train.is_empty() {
            return Err(Error::invalid(format!(
                "variant {} consumes target data but the target training split is empty",
                variant.name
            )));
        }
        let side = source_train[0].image.shape()[0];
        if side % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!(
                "image side {side} must be divisible by {DOWNSAMPLE}"
            )));
        }

        let model = Model::init(&settings, &variant)?;
        let gen_adam = AdamState::new(&model.gen_store);
        let critic_adam = AdamState::new(&model.critic_store);
        let mut adam_cfg = AdamConfig::new(settings.lr);
        adam_cfg.decay_rate = settings.lr_decay_rate;
        adam_cfg.decay_every = settings.lr_decay_step as u64;
        adam_cfg.clip_norm = settings.clip_norm;

        // Superpixels depend only on the images; compute them once.
        let superpixels = if variant.labeling_active() && variant.superpixel_refine {
            target_train
                .iter()
                .map(|s| slic(&s.image, &settings.slic))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let feature_dim = FEATURE_CHANNELS;
        let bank_source = CentroidBank::new(settings.k_classes, feature_dim, settings.gamma)?;
        let bank_target = CentroidBank::new(settings.k_classes, feature_dim, settings.gamma)?;

        fs::create_dir_all(run_dir)?;
        let mut resolved = settings.resolved();
        resolved.push(("variant".into(), variant.name.clone()));
        resolved.push(("data.root".into(), data_root.display().to_string()));
        if let Ok(manifest) = dataset::read_manifest(data_root) {
            let entries: Vec<(String, String)> = manifest
                .entries()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect();
            resolved.push(("data.digest".into(), config_digest(&entries)));
        }
        write_resolved_config(run_dir, &resolved)?;

        let pseudo = vec![None; target_train.len()];
        Ok(Trainer {
            rng_data: derive_rng(settings.seed, "data"),
            rng_gp: derive_rng(settings.seed, "gp"),
            settings,
            variant,
            model,
            gen_adam,
            critic_adam,
            adam_cfg,
            bank_source,
            bank_target,
            source_train,
            target_train,
            pseudo,
            thresholds: None,
            superpixels,
            run_dir: run_dir.to_path_buf(),
            log: Vec::new(),
            clamp_events: 0,
            global_step: 0,
        })
    }

    /// Full training. The first `warmup` epochs are source-supervised for
    /// every variant; adaptation mechanisms (and the curriculum clock) start
    /// after them, once the model is source-competent. Per adaptation epoch,
    /// pseudo labels are refreshed (when active) before the sweep over the
    /// shuffled source set. Writes the step log, checkpoints, and the final
    /// model.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        for epoch in 0..self.settings.epochs {
            let adapting = epoch >= self.settings.warmup && !self.variant.is_baseline();
            let label_epoch = epoch.saturating_sub(self.settings.warmup);
            if adapting && self.variant.labeling_active() {
                self.refresh_pseudo_labels(label_epoch)?;
            }
            let mut src_order: Vec<usize> = (0..self.source_train.len()).collect();
            src_order.shuffle(&mut self.rng_data);
            let mut tgt_order: Vec<usize> = (0..self.target_train.len()).collect();
            tgt_order.shuffle(&mut self.rng_data);

            let b = self.settings.batch_size;
            let steps = self.source_train.len().div_ceil(b);
            for step in 0..steps {
                let src_idx: Vec<usize> =
                    src_order[step * b..((step + 1) * b).min(src_order.len())].to_vec();
                let tgt_idx: Vec<usize> = if adapting {
                    (0..b).map(|i| tgt_order[(step * b + i) % tgt_order.len()]).collect()
                } else {
                    Vec::new()
                };
                self.train_step(adapting, label_epoch, &src_idx, &tgt_idx)?;
                if self.settings.checkpoint_every > 0
                    && self.global_step % self.settings.checkpoint_every == 0
                {
                    let dir = self.run_dir.join(format!("checkpoint-step{}", self.global_step));
                    self.model.save(&dir)?;
                }
            }
            // Flush after every epoch so an interrupted run leaves its log.
            write_step_log(&self.run_dir.join("train-log.csv"), &self.log)?;
        }
        let final_checkpoint = self.run_dir.join("checkpoint-final");
        self.model.save(&final_checkpoint)?;
        write_step_log(&self.run_dir.join("train-log.csv"), &self.log)?;
        Ok(TrainOutcome {
            log: self.log.clone(),
            final_checkpoint,
            clamp_events: self.clamp_events,
        })
    }

    /// One alternating step: critic ascent (when adversarial), generator
    /// descent, centroid bank commit. Warmup steps skip every adaptation
    /// mechanism.
    fn train_step(
        &mut self,
        adapting: bool,
        label_epoch: usize,
        src_idx: &[usize],
        tgt_idx: &[usize],
    ) -> Result<()> {
        if adapting && self.variant.adversarial {
            self.critic_phase(src_idx, tgt_idx)?;
        }
        self.generator_phase(adapting, label_epoch, src_idx, tgt_idx)
    }

    /// Critic ascent on the penalized score gap, generator frozen.
    fn critic_phase(&mut self, src_idx: &[usize], tgt_idx: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let bg = self.model.gen_store.bind(&mut g, false);
        let bc = self.model.critic_store.bind(&mut g, true);
        let pipe = ForwardPipeline {
            use_gate: self.model.use_gate,
            // The gate's score feeds back into the critic's own input in
            // softmax mode; always sever that loop during critic training.
            detach_gate: true,
            refine: self.model.refine_enabled,
            want_adversarial_score: false,
        };

        let critic_view = |g: &mut Graph, model: &Model, sample: &Sample| -> Result<TensorRef> {
            match model.critic_input {
                CriticInput::Features => {
                    let img = g.constant(sample.image.clone());
                    model.generator.features(g, &bg, img)
                }
                CriticInput::Softmax => {
                    Ok(model_forward(g, model, &bg, &bc, &sample.image, &pipe)?.probmap)
                }
            }
        };
        let mut inputs_s = Vec::with_capacity(src_idx.len());
        for &i in src_idx {
            inputs_s.push(critic_view(&mut g, &self.model, &self.source_train[i])?);
        }
        let mut inputs_t = Vec::with_capacity(tgt_idx.len());
        for &j in tgt_idx {
            inputs_t.push(critic_view(&mut g, &self.model, &self.target_train[j])?);
        }

        let mut scores_s = Vec::new();
        let mut points_s = Vec::new();
        for &input in &inputs_s {
            let score = self.model.critic.score(&mut g, &bc, input)?;
            scores_s.push(score);
            points_s.push(PenaltyPoint { input, score });
        }
        let mut scores_t = Vec::new();
        let mut points_t = Vec::new();
        for &input in &inputs_t {
            let score = self.model.critic.score(&mut g, &bc, input)?;
            scores_t.push(score);
            points_t.push(PenaltyPoint { input, score });
        }

        let groups = if self.settings.gp_interpolated {
            let pairs = inputs_s.len().min(inputs_t.len());
            let mut mixed = Vec::with_capacity(pairs);
            for i in 0..pairs {
                let u: f64 = self.rng_gp.gen_range(0.0..1.0);
                let a = g.scale(inputs_s[i], u)?;
                let bpart = g.scale(inputs_t[i], 1.0 - u)?;
                let x = g.add(a, bpart)?;
                let score = self.model.critic.score(&mut g, &bc, x)?;
                mixed.push(PenaltyPoint { input: x, score });
            }
            vec![mixed]
        } else {
            vec![points_s, points_t]
        };

        let objective = wasserstein_critic_objective(&mut g, &scores_s, &scores_t, &groups, self.settings.xi)?;
        let value = g.value(objective).data()[0];
        if !value.is_finite() {
            return self.divergence_dump("critic objective", &[("objective", value)]);
        }
        let loss = g.neg(objective)?;
        self.model.critic_store.clear_grads();
        g.backward(loss)?;
        self.model.critic_store.pull_grads(&g, &bc);
        self.critic_adam.step(&mut self.model.critic_store, &self.adam_cfg)?;
        Ok(value)
    }

    /// Generator/head descent on the combined objective, critic frozen.
    /// During warmup (`adapting == false`) the step reduces to the pure
    /// source-supervised objective with the plain forward pass.
    fn generator_phase(
        &mut self,
        adapting: bool,
        label_epoch: usize,
        src_idx: &[usize],
        tgt_idx: &[usize],
    ) -> Result<()> {
        let mut g = Graph::new();
        let bg = self.model.gen_store.bind(&mut g, true);
        let bc = self.model.critic_store.bind(&mut g, false);
        let pipe = ForwardPipeline {
            use_gate: adapting && self.model.use_gate,
            detach_gate: self.settings.gate_detach,
            refine: self.model.refine_enabled,
            want_adversarial_score: adapting && self.variant.adversarial,
        };
        let srt_active = adapting && self.variant.representation_transfer;
        let grid = |side: usize| side / DOWNSAMPLE;

        let mut cls = Vec::new();
        let mut src_seg = Vec::new();
        let mut scores_s = Vec::new();
        let mut scores_t = Vec::new();
        let mut parts_s: Vec<ClassSums> = Vec::new();
        let mut parts_t: Vec<ClassSums> = Vec::new();
        // Buffers that own downsampled labels so the loss structs can borrow.
        let mut tgt_seg_refs: Vec<(TensorRef, usize)> = Vec::new();

        for &i in src_idx {
            let sample = &self.source_train[i];
            let out = model_forward(&mut g, &self.model, &bg, &bc, &sample.image, &pipe)?;
            cls.push(ClassSample { probs: out.class_probs, class: sample.image_label });
            let labels = sample.pixel_labels.as_ref().expect("checked at load");
            src_seg.push(SourceSegSample { probmap: out.probmap, labels });
            if let Some(s) = out.adversarial_score {
                scores_s.push(s);
            }
            if srt_active {
                let (h, w) = (sample.height(), sample.width());
                let ds = downsample_labels(labels, h, w, grid(h), grid(w))?;
                parts_s.push(class_sums(&mut g, out.gated, &ds, None, self.settings.k_classes)?);
            }
        }

        for &j in tgt_idx {
            let sample = &self.target_train[j];
            let out = model_forward(&mut g, &self.model, &bg, &bc, &sample.image, &pipe)?;
            cls.push(ClassSample { probs: out.class_probs, class: sample.image_label });
            if let Some(s) = out.adversarial_score {
                scores_t.push(s);
            }
            if self.variant.pseudo_labels && self.pseudo[j].is_some() {
                tgt_seg_refs.push((out.probmap, j));
            }
            if srt_active {
                if let Some(pl) = &self.pseudo[j] {
                    let (h, w) = (sample.height(), sample.width());
                    let ds_labels = downsample_labels(&pl.yhat, h, w, grid(h), grid(w))?;
                    let ds_valid = downsample_mask(&pl.v, h, w, grid(h), grid(w))?;
                    if ds_valid.iter().any(|&b| b) {
                        parts_t.push(class_sums(
                            &mut g,
                            out.gated,
                            &ds_labels,
                            Some(&ds_valid),
                            self.settings.k_classes,
                        )?);
                    }
                }
            }
        }

        let (l_c_ref, clamp_c) = classification_loss(&mut g, &cls)?;
        let thresholds = self.thresholds.clone();
        let tgt_seg: Vec<TargetSegSample<'_>> = tgt_seg_refs
            .iter()
            .map(|(probmap, j)| TargetSegSample {
                probmap: *probmap,
                pseudo: self.pseudo[*j].as_ref().expect("filtered above"),
                lambda: &thresholds.as_ref().expect("labeling ran").lambda,
            })
            .collect();
        let (l_s_ref, clamp_s) = segmentation_loss(&mut g, &src_seg, &tgt_seg)?;
        drop(tgt_seg);
        self.clamp_events += clamp_c + clamp_s;

        let l_w_ref = if adapting && self.variant.adversarial {
            Some(critic_score_gap(&mut g, &scores_s, &scores_t)?)
        } else {
            None
        };

        let mut bank_commit: Option<(Vec<Option<Vec<f64>>>, Vec<Option<Vec<f64>>>)> = None;
        let l_t_ref = if srt_active {
            let batch_s = batch_centroids(&mut g, &parts_s, self.settings.centroid_normalize)?;
            let batch_t = if parts_t.is_empty() {
                vec![None; self.settings.k_classes]
            } else {
                batch_centroids(&mut g, &parts_t, self.settings.centroid_normalize)?
            };
            let upd_s = self.bank_source.updated_refs(&mut g, &batch_s)?;
            let upd_t = self.bank_target.updated_refs(&mut g, &batch_t)?;
            let l_t = consistence_loss(
                &mut g,
                &upd_s,
                &upd_t,
                self.settings.alpha,
                self.settings.centroid_absent_zero,
            )?;
            let take = |g: &Graph, refs: &[Option<TensorRef>]| -> Vec<Option<Vec<f64>>> {
                refs.iter()
                    .map(|r| r.map(|r| g.value(r).data().to_vec()))
                    .collect()
            };
            bank_commit = Some((take(&g, &batch_s), take(&g, &batch_t)));
            Some(l_t)
        } else {
            None
        };

        let mut total = g.add(l_c_ref, l_s_ref)?;
        if let Some(lw) = l_w_ref {
            let weighted = g.scale(lw, self.settings.eta)?;
            total = g.add(total, weighted)?;
        }
        if let Some(lt) = l_t_ref {
            let weighted = g.scale(lt, self.settings.mu)?;
            total = g.add(total, weighted)?;
        }

        let l_c = g.value(l_c_ref).data()[0];
        let l_s = g.value(l_s_ref).data()[0];
        let l_w = l_w_ref.map(|r| g.value(r).data()[0]).unwrap_or(0.0);
        let l_t = l_t_ref.map(|r| g.value(r).data()[0]).unwrap_or(0.0);
        let total_v = g.value(total).data()[0];
        if !total_v.is_finite() || !l_c.is_finite() || !l_s.is_finite() || !l_w.is_finite() || !l_t.is_finite()
        {
            return self.divergence_dump(
                "generator objective",
                &[("L_C", l_c), ("L_S", l_s), ("L_W", l_w), ("L_T", l_t), ("total", total_v)],
            );
        }

        self.model.gen_store.clear_grads();
        g.backward(total)?;
        self.model.gen_store.pull_grads(&g, &bg);
        let lr = self.gen_adam.step(&mut self.model.gen_store, &self.adam_cfg)?;

        if let Some((batch_s, batch_t)) = bank_commit {
            self.bank_source.update(&batch_s)?;
            self.bank_target.update(&batch_t)?;
        }

        self.global_step += 1;
        self.log.push(StepLog {
            step: self.global_step,
            l_c,
            l_s,
            l_w,
            l_t,
            total: total_v,
            lr,
            n_portion: if adapting && self.variant.labeling_active() {
                curriculum_portion(label_epoch)
            } else {
                0.0
            },
        });
        Ok(())
    }

    /// Recomputes pseudo labels for the whole target training set with the
    /// current model and the epoch's curriculum portion, then applies the
    /// neighborhood-vote refinement when enabled. `epoch` counts adaptation
    /// epochs, i.e. the curriculum clock starts after warmup.
    pub fn refresh_pseudo_labels(&mut self, epoch: usize) -> Result<()> {
        let refine = self
            .variant
            .superpixel_refine
            .then(|| (&self.superpixels[..], self.settings.refine_in_place));
        let run = pseudo_label_set(
            &self.model,
            &self.target_train,
            curriculum_portion(epoch),
            self.settings.selection_mode,
            refine,
        )?;

        let mut selected_per_class = vec![0usize; self.settings.k_classes];
        for (j, labels) in run.labels.into_iter().enumerate() {
            for pix in 0..labels.v.len() {
                if labels.v[pix] {
                    selected_per_class[labels.yhat[pix]] += 1;
                }
            }
            self.pseudo[j] = Some(labels);
        }

        let dir = self.run_dir.join("pseudo");
        fs::create_dir_all(&dir)?;
        write_thresholds_csv(
            &dir.join(format!("epoch-{epoch}.csv")),
            &run.thresholds,
            &selected_per_class,
        )?;
        self.thresholds = Some(run.thresholds);
        Ok(())
    }

    /// The current selection state, for inspection by drivers and tests.
    pub fn pseudo_snapshot(&self) -> &[Option<PseudoLabels>] {
        &self.pseudo
    }

    /// Writes a diagnostic file and aborts the run.
    fn divergence_dump<T>(&self, what: &str, values: &[(&str, f64)]) -> Result<T> {
        let mut text = format!("non-finite {what} at optimizer step {}\n", self.global_step + 1);
        for (k, v) in values {
            text.push_str(&format!("{k} = {v}\n"));
        }
        for (store, tag) in [(&self.model.gen_store, "generator"), (&self.model.critic_store, "critic")] {
            let mut sq = 0.0;
            for id in store.ids() {
                sq += store.value(id).data().iter().map(|v| v * v).sum::<f64>();
            }
            text.push_str(&format!("{tag}_param_norm = {}\n", sq.sqrt()));
        }
        let path = self.run_dir.join(format!("diverged-step{}.txt", self.global_step + 1));
        let _ = fs::write(&path, &text);
        Err(Error::Diverged(format!(
            "non-finite {what} at step {}; diagnostics in {}",
            self.global_step + 1,
            path.display()
        )))
    }
}

/// One labeling sweep over a sample set: selection thresholds, the raw
/// threshold masks, and (when requested) their neighborhood-vote refinement.
pub struct PseudoRun {
    /// Final labels, refined when refinement was requested.
    pub labels: Vec<PseudoLabels>,
    /// The threshold selection before any refinement.
    pub pre_refine: Vec<PseudoLabels>,
    pub thresholds: Thresholds,
    /// Pixels whose selection flipped on during refinement.
    pub flipped: usize,
}

/// Runs the whole labeling pipeline with a frozen model: per-pixel scores,
/// portion-quantile thresholds over the set, per-pixel selection, and the
/// optional superpixel vote.
pub fn pseudo_label_set(
    model: &Model,
    samples: &[Sample],
    portion: f64,
    mode: SelectionMode,
    refine: Option<(&[SuperpixelMap], bool)>,
) -> Result<PseudoRun> {
    if let Some((maps, _)) = refine {
        if maps.len() != samples.len() {
            return Err(Error::invalid(format!(
                "{} superpixel maps for {} samples",
                maps.len(),
                samples.len()
            )));
        }
    }
    // Scores come from the training-time forward (gate included when the
    // variant trains with it): the selection rule is the exact minimizer of
    // the target loss only when both read the same probabilities.
    let pipe = model.train_pipe(false);
    let mut stats = Vec::with_capacity(samples.len());
    let mut pool = ScorePool::new(model.k_classes);
    for sample in samples {
        let probmap = model.probmap(&sample.image, &pipe)?;
        let st = pixel_stats(&probmap, mode)?;
        pool.add(&st)?;
        stats.push(st);
    }
    let thresholds = match mode {
        SelectionMode::Pooled => determine_thresholds_pooled(&pool, portion)?,
        _ => determine_thresholds(&pool, portion)?,
    };

    let mut labels = Vec::with_capacity(samples.len());
    let mut pre_refine = Vec::with_capacity(samples.len());
    let mut flipped = 0usize;
    for (j, st) in stats.iter().enumerate() {
        let v = select_weights(st, &thresholds)?;
        let raw = PseudoLabels { height: st.height, width: st.width, yhat: st.yhat.clone(), v };
        let refined = match refine {
            Some((maps, in_place)) => {
                let outcome = refine_selection(&raw, &maps[j], model.k_classes, in_place)?;
                flipped += outcome.flipped;
                outcome.labels
            }
            None => raw.clone(),
        };
        pre_refine.push(raw);
        labels.push(refined);
    }
    Ok(PseudoRun { labels, pre_refine, thresholds, flipped })
}

/// Source-only supervised training with every adaptation mechanism absent
/// from the build path — the reference the baseline variant must reproduce
/// bit for bit. It consumes the data streams exactly like the full driver
/// (both shuffles are drawn) but touches no target image, no critic, no
/// gate, and no pseudo machinery.
pub fn run_reference_supervised(
    settings: &TrainSettings,
    data_root: &Path,
    run_dir: &Path,
) -> Result<Vec<StepLog>> {
    let variant = VariantSpec::parse("BL")?;
    let source_train = dataset::load_split(data_root, Domain::Source, Split::Train)?;
    if source_train.is_empty() {
        return Err(Error::invalid("no source training samples found"));
    }
    let target_train = dataset::load_split(data_root, Domain::Target, Split::Train)?;
    let mut model = Model::init(settings, &variant)?;
    let mut adam = AdamState::new(&model.gen_store);
    let mut adam_cfg = AdamConfig::new(settings.lr);
    adam_cfg.decay_rate = settings.lr_decay_rate;
    adam_cfg.decay_every = settings.lr_decay_step as u64;
    adam_cfg.clip_norm = settings.clip_norm;
    let mut rng_data = derive_rng(settings.seed, "data");
    let _rng_gp = derive_rng(settings.seed, "gp");

    fs::create_dir_all(run_dir)?;
    let mut log = Vec::new();
    let mut global_step = 0usize;
    for _epoch in 0..settings.epochs {
        let mut src_order: Vec<usize> = (0..source_train.len()).collect();
        src_order.shuffle(&mut rng_data);
        let mut tgt_order: Vec<usize> = (0..target_train.len()).collect();
        tgt_order.shuffle(&mut rng_data);
        let _ = tgt_order;

        let b = settings.batch_size;
        let steps = source_train.len().div_ceil(b);
        for step in 0..steps {
            let idx: Vec<usize> = src_order[step * b..((step + 1) * b).min(src_order.len())].to_vec();
            let mut g = Graph::new();
            let bg = model.gen_store.bind(&mut g, true);
            let bc = model.critic_store.bind(&mut g, false);
            let pipe = ForwardPipeline {
                use_gate: false,
                detach_gate: true,
                refine: settings.refine_enabled,
                want_adversarial_score: false,
            };
            let mut cls = Vec::new();
            let mut seg = Vec::new();
            for &i in &idx {
                let sample = &source_train[i];
                let out = model_forward(&mut g, &model, &bg, &bc, &sample.image, &pipe)?;
                cls.push(ClassSample { probs: out.class_probs, class: sample.image_label });
                seg.push(SourceSegSample {
                    probmap: out.probmap,
                    labels: sample.pixel_labels.as_ref().ok_or_else(|| {
                        Error::invalid(format!("source sample {} lacks a pixel mask", sample.id))
                    })?,
                });
            }
            let (l_c_ref, _) = classification_loss(&mut g, &cls)?;
            let (l_s_ref, _) = segmentation_loss(&mut g, &seg, &[])?;
            let total = g.add(l_c_ref, l_s_ref)?;
            let l_c = g.value(l_c_ref).data()[0];
            let l_s = g.value(l_s_ref).data()[0];
            let total_v = g.value(total).data()[0];
            model.gen_store.clear_grads();
            g.backward(total)?;
            model.gen_store.pull_grads(&g, &bg);
            let lr = adam.step(&mut model.gen_store, &adam_cfg)?;
            global_step += 1;
            log.push(StepLog {
                step: global_step,
                l_c,
                l_s,
                l_w: 0.0,
                l_t: 0.0,
                total: total_v,
                lr,
                n_portion: 0.0,
            });
        }
    }
    write_step_log(&run_dir.join("train-log.csv"), &log)?;
    Ok(log)
}

/// Evaluates a model on every sample of a split that has ground truth.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let mut counts = IoUCounts::new(model.k_classes);
    for s in samples {
        let gt = s.pixel_labels.as_ref().ok_or_else(|| {
            Error::invalid(format!("sample {} has no ground-truth mask to evaluate against", s.id))
        })?;
        let (pred, _) = model.predict(&s.image)?;
        counts.add(&pred, gt)?;
    }
    Ok(EvalReport::from_counts(&counts, samples.len()))
}

/// Per-variant, per-seed result of the ablation run.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub iou_n: f64,
    pub iou_d: f64,
    pub miou: f64,
}

/// Trains and evaluates one variant for one seed; returns the cell.
pub fn run_variant(
    base: &TrainSettings,
    variant_name: &str,
    data_root: &Path,
    run_dir: &Path,
    seed: u64,
) -> Result<AblationCell> {
    let variant = VariantSpec::parse(variant_name)?;
    let settings = TrainSettings { seed, ..base.clone() };
    let mut trainer = Trainer::new(settings, variant, data_root, run_dir)?;
    let outcome = trainer.run()?;
    let model = Model::load(&outcome.final_checkpoint)?;
    let test = dataset::load_split(data_root, Domain::Target, Split::Test)?;
    let report = evaluate(&model, &test)?;
    Ok(AblationCell {
        variant: variant_name.to_string(),
        seed,
        iou_n: report.iou_normal().unwrap_or(0.0),
        iou_d: report.iou_disease().unwrap_or(0.0),
        miou: report.miou(),
    })
}

/// Seed-averaged table rows in presentation order, from per-run cells.
pub fn ablation_rows(cells: &[AblationCell]) -> Vec<crate::evalreport::AblationRow> {
    let mut rows = Vec::new();
    for name in ABLATION_VARIANTS {
        let group: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == name).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        rows.push(crate::evalreport::AblationRow {
            variant: name.to_string(),
            iou_n: group.iter().map(|c| c.iou_n).sum::<f64>() / n,
            iou_d: group.iter().map(|c| c.iou_d).sum::<f64>() / n,
            miou: group.iter().map(|c| c.miou).sum::<f64>() / n,
        });
    }
    rows
}

/// Writes the per-seed cells collected so far plus the seed-averaged table.
fn write_ablation_outputs(out_dir: &Path, cells: &[AblationCell]) -> Result<()> {
    let mut detail = String::from("variant,seed,iou_n,iou_d,miou\n");
    for c in cells {
        detail.push_str(&format!(
            "{},{},{},{},{}\n",
            c.variant,
            c.seed,
            crate::evalreport::percent(c.iou_n),
            crate::evalreport::percent(c.iou_d),
            crate::evalreport::percent(c.miou)
        ));
    }
    fs::write(out_dir.join("ablation-seeds.csv"), detail)?;
    crate::evalreport::write_ablation_csv(&out_dir.join("ablation.csv"), &ablation_rows(cells))?;
    Ok(())
}

/// Runs the whole ablation table: every variant, every seed. Partial tables
/// are flushed after every run so a failure leaves results behind.
pub fn run_ablation(
    base: &TrainSettings,
    data_root: &Path,
    out_dir: &Path,
    seeds: &[u64],
) -> Result<Vec<AblationCell>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    for name in ABLATION_VARIANTS {
        for &seed in seeds {
            let run_dir = out_dir.join(format!("{}-seed{}", name.replace('+', "_"), seed));
            match run_variant(base, name, data_root, &run_dir, seed) {
                Ok(cell) => {
                    cells.push(cell);
                    write_ablation_outputs(out_dir, &cells)?;
                }
                Err(e) => {
                    write_ablation_outputs(out_dir, &cells)?;
                    return Err(Error::invalid(format!(
                        "variant {name} seed {seed} failed after {} completed runs: {e}",
                        cells.len()
                    )));
                }
            }
        }
    }
    Ok(cells)
}

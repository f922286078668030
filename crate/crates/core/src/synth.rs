//! Procedural two-domain segmentation data.
//!
//! Both domains render smooth tissue-like backgrounds with deformed dark
//! lesion blobs. The lesion cue is shared across domains (locally darker,
//! slightly reddish), while the domains differ in global luminance, hue,
//! background texture, stripe overlay, and lesion boundary deformation — a
//! distribution shift a feature-alignment method can bridge.
//!
//! Generation is deterministic: every sample derives its own RNG stream from
//! the dataset seed, the domain, the split, and its index.

use std::path::Path;

use rand::Rng;

use crate::config::Config;
use crate::dataset::{self, Domain, Sample, Split};
use crate::error::{Error, Result};
use crate::rngutil::{derive_rng, fnv1a64};
use crate::tensor::Tensor;

/// Number of bins used by the grayscale histogram diagnostics.
pub const HISTOGRAM_BINS: usize = 32;

/// Resolved generator settings.
#[derive(Clone, Debug)]
pub struct SynthSettings {
    /// Pixel classes: 2 (background/lesion) or 4 (background + three shapes).
    pub k_classes: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Probability that an image contains no lesion at all.
    pub lesion_free: f64,
    pub source_train: usize,
    pub source_val: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl SynthSettings {
    pub fn from_config(cfg: &Config) -> Result<SynthSettings> {
        let s = SynthSettings {
            k_classes: cfg.usize_or("data.classes", 2)?,
            size: cfg.usize_or("data.size", 64)?,
            lesion_free: cfg.f64_or("data.lesion_free", 0.5)?,
            source_train: cfg.usize_or("data.source_train", 300)?,
            source_val: cfg.usize_or("data.source_val", 0)?,
            source_test: cfg.usize_or("data.source_test", 100)?,
            target_train: cfg.usize_or("data.target_train", 150)?,
            target_val: cfg.usize_or("data.target_val", 0)?,
            target_test: cfg.usize_or("data.target_test", 100)?,
        };
        if s.k_classes != 2 && s.k_classes != 4 {
            return Err(Error::Config(format!(
                "data.classes must be 2 or 4, got {}",
                s.k_classes
            )));
        }
        if s.size < 16 || s.size % 4 != 0 {
            return Err(Error::Config(format!(
                "data.size must be a multiple of 4 and at least 16, got {}",
                s.size
            )));
        }
        if !(0.0..=1.0).contains(&s.lesion_free) {
            return Err(Error::Config("data.lesion_free must be within [0, 1]".into()));
        }
        Ok(s)
    }

    /// Key/value list of everything that shaped the data, for digests and
    /// resolved-config files.
    pub fn resolved(&self) -> Vec<(String, String)> {
        vec![
            ("data.classes".into(), self.k_classes.to_string()),
            ("data.size".into(), self.size.to_string()),
            ("data.lesion_free".into(), format!("{}", self.lesion_free)),
            ("data.source_train".into(), self.source_train.to_string()),
            ("data.source_val".into(), self.source_val.to_string()),
            ("data.source_test".into(), self.source_test.to_string()),
            ("data.target_train".into(), self.target_train.to_string()),
            ("data.target_val".into(), self.target_val.to_string()),
            ("data.target_test".into(), self.target_test.to_string()),
        ]
    }
}

/// A sum of a few random sinusoidal plane waves over the unit square.
struct Waves {
    parts: Vec<(f64, f64, f64, f64)>, // amplitude, fx, fy, phase
}

impl Waves {
    fn draw(rng: &mut impl Rng, n: usize, freq: std::ops::Range<f64>, amp: f64) -> Waves {
        let parts = (0..n)
            .map(|_| {
                let f = rng.gen_range(freq.clone());
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                (
                    amp * rng.gen_range(0.5..1.0) / n as f64,
                    f * angle.cos(),
                    f * angle.sin(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Waves { parts }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.parts
            .iter()
            .map(|(a, fx, fy, p)| a * (std::f64::consts::TAU * (fx * u + fy * v) + p).sin())
            .sum()
    }
}

/// Shape kinds; a two-class dataset only uses blobs.
#[derive(Clone, Copy)]
enum ShapeKind {
    Blob,
    Bar,
    Ring,
}

struct Shape {
    kind: ShapeKind,
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    wobble: [(f64, f64, f64); 3], // amplitude, angular frequency, phase
}

impl Shape {
    fn draw(rng: &mut impl Rng, size: f64, k_classes: usize, deformation: f64) -> Shape {
        let class = if k_classes == 2 { 1 } else { rng.gen_range(1..k_classes) };
        let kind = match (k_classes, class) {
            (2, _) | (_, 1) => ShapeKind::Blob,
            (_, 2) => ShapeKind::Bar,
            _ => ShapeKind::Ring,
        };
        Shape {
            kind,
            class,
            cx: rng.gen_range(0.22..0.78) * size,
            cy: rng.gen_range(0.22..0.78) * size,
            radius: rng.gen_range(0.10..0.20) * size,
            aspect: rng.gen_range(0.30..0.45),
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
            wobble: [
                (deformation * rng.gen_range(0.3..0.6), 2.0, rng.gen_range(0.0..std::f64::consts::TAU)),
                (deformation * rng.gen_range(0.2..0.4), 3.0, rng.gen_range(0.0..std::f64::consts::TAU)),
                (deformation * rng.gen_range(0.1..0.3), 5.0, rng.gen_range(0.0..std::f64::consts::TAU)),
            ],
        }
    }

    fn boundary_radius(&self, theta: f64) -> f64 {
        let mut r = 1.0;
        for (a, k, p) in self.wobble {
            r += a * (k * theta + p).sin();
        }
        self.radius * r.max(0.35)
    }

    /// Returns a coverage value in [0, 1]: 0 outside, 1 well inside, with a
    /// short feathered ramp just inside the boundary. Pixel labels use
    /// coverage > 0, so shading and labels agree exactly.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let feather = 1.4;
        match self.kind {
            ShapeKind::Blob => {
                let dist = (dx * dx + dy * dy).sqrt();
                let r = self.boundary_radius(dy.atan2(dx));
                ((r - dist) / feather).clamp(0.0, 1.0)
            }
            ShapeKind::Ring => {
                let dist = (dx * dx + dy * dy).sqrt();
                let outer = self.boundary_radius(dy.atan2(dx));
                let inner = 0.55 * outer;
                let depth = ((outer - dist) / feather).clamp(0.0, 1.0);
                let hole = ((dist - inner) / feather).clamp(0.0, 1.0);
                depth.min(hole)
            }
            ShapeKind::Bar => {
                let (s, c) = self.angle.sin_cos();
                let along = (dx * c + dy * s).abs();
                let across = (-dx * s + dy * c).abs();
                let da = ((self.radius - along) / feather).clamp(0.0, 1.0);
                let db = ((self.radius * self.aspect.max(0.2) - across) / feather).clamp(0.0, 1.0);
                da.min(db)
            }
        }
    }
}

struct DomainStyle {
    base: [f64; 3],
    /// Per-channel weight of the low-frequency background field.
    field_gain: [f64; 3],
    stripe_amp: f64,
    stripe_period: f64,
    deformation: f64,
}

fn style_for(domain: Domain, rng: &mut impl Rng) -> DomainStyle {
    match domain {
        // Bright pink tissue, gentle texture, mild lesion deformation.
        Domain::Source => DomainStyle {
            base: [
                0.82 + rng.gen_range(-0.02..0.02),
                0.55 + rng.gen_range(-0.02..0.02),
                0.50 + rng.gen_range(-0.02..0.02),
            ],
            field_gain: [0.035, 0.030, 0.025],
            stripe_amp: 0.0,
            stripe_period: 8.0,
            deformation: 0.15,
        },
        // Darker olive tones, stripe overlay, stronger deformation.
        Domain::Target => DomainStyle {
            base: [
                0.40 + rng.gen_range(-0.02..0.02),
                0.345 + rng.gen_range(-0.02..0.02),
                0.27 + rng.gen_range(-0.02..0.02),
            ],
            field_gain: [0.025, 0.030, 0.035],
            stripe_amp: 0.022,
            stripe_period: rng.gen_range(5.0..9.0),
            deformation: 0.30,
        },
    }
}

/// Per-class tint applied inside shapes, relative to the local background.
/// Class 1 keeps the shared lesion look; extra classes get their own tints.
fn class_tint(class: usize) -> [f64; 3] {
    match class {
        1 => [0.05, -0.02, -0.02],
        2 => [-0.03, 0.03, -0.01],
        _ => [-0.02, -0.02, 0.05],
    }
}

const LESION_DARKEN: f64 = 0.80;

/// Renders one sample. `index` distinguishes samples within a split; the
/// whole pipeline is a pure function of its arguments.
pub fn generate_sample(
    set: &SynthSettings,
    domain: Domain,
    split: Split,
    index: usize,
    dataset_seed: u64,
) -> Sample {
    let stream = format!(
        "synth/{}/{}/{index}/{}",
        domain.dir_name(),
        split.dir_name(),
        fnv1a64(&dataset_seed.to_le_bytes())
    );
    let mut rng = derive_rng(dataset_seed, &stream);
    let n = set.size;
    let style = style_for(domain, &mut rng);

    let field = Waves::draw(&mut rng, 3, 0.6..2.2, 1.0);
    let speckle = Waves::draw(&mut rng, 3, 5.0..11.0, 0.4);
    let stripe_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let stripe_angle: f64 = rng.gen_range(0.5..1.1);

    let lesion_free = rng.gen_bool(set.lesion_free);
    let shapes: Vec<Shape> = if lesion_free {
        Vec::new()
    } else {
        let count = rng.gen_range(1..=3);
        (0..count)
            .map(|_| Shape::draw(&mut rng, n as f64, set.k_classes, style.deformation))
            .collect()
    };
    let lesion_speckle = Waves::draw(&mut rng, 2, 7.0..13.0, 0.3);

    let mut image = vec![0.0f64; n * n * 3];
    let mut labels = vec![0usize; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
            let f = field.at(u, v) + 0.4 * speckle.at(u, v);
            let stripes = style.stripe_amp
                * (std::f64::consts::TAU * (x as f64 * stripe_angle.cos() + y as f64 * stripe_angle.sin())
                    / style.stripe_period
                    + stripe_phase)
                    .sin();
            let mut color = [0.0f64; 3];
            for c in 0..3 {
                color[c] = style.base[c] + style.field_gain[c] * f + stripes;
            }
            let mut best_cov = 0.0;
            let mut best_class = 0usize;
            for shape in &shapes {
                let cov = shape.coverage(x as f64 + 0.5, y as f64 + 0.5);
                if cov > best_cov {
                    best_cov = cov;
                    best_class = shape.class;
                }
            }
            if best_cov > 0.0 {
                let tint = class_tint(best_class);
                let darken = 1.0 - best_cov * (1.0 - LESION_DARKEN);
                let grain = 0.012 * lesion_speckle.at(u, v);
                for c in 0..3 {
                    color[c] = color[c] * darken + best_cov * tint[c] + grain;
                }
                labels[y * n + x] = best_class;
            }
            for c in 0..3 {
                image[(y * n + x) * 3 + c] = color[c].clamp(0.0, 1.0);
            }
        }
    }

    let image_label = usize::from(labels.iter().any(|&c| c != 0));
    Sample {
        id: format!("{index:05}"),
        image: Tensor::new(vec![n, n, 3], image).expect("image buffer matches shape"),
        pixel_labels: Some(labels),
        image_label,
    }
}

/// Generates and writes the full two-domain dataset, returning the per-split
/// counts that went into the manifest. Pixel masks are stored for every
/// source split but only for target evaluation splits; target training data
/// keeps image-level labels only.
pub fn generate_dataset(set: &SynthSettings, seed: u64, root: &Path) -> Result<Vec<(Domain, Split, usize)>> {
    let plan = [
        (Domain::Source, Split::Train, set.source_train, true),
        (Domain::Source, Split::Val, set.source_val, true),
        (Domain::Source, Split::Test, set.source_test, true),
        (Domain::Target, Split::Train, set.target_train, false),
        (Domain::Target, Split::Val, set.target_val, true),
        (Domain::Target, Split::Test, set.target_test, true),
    ];
    let mut counts = Vec::new();
    for (domain, split, n, with_mask) in plan {
        for index in 0..n {
            let sample = generate_sample(set, domain, split, index, seed);
            dataset::save_sample(root, domain, split, &sample, with_mask)?;
        }
        if n > 0 {
            counts.push((domain, split, n));
        }
    }
    let mut meta = vec![
        ("seed".to_string(), seed.to_string()),
        (
            "config_digest".to_string(),
            crate::config::config_digest(&set.resolved()),
        ),
    ];
    meta.extend(set.resolved());
    dataset::write_manifest(root, &counts, &meta)?;
    Ok(counts)
}

/// Normalized 32-bin histogram of mean-channel gray values pooled over a
/// set of images.
pub fn grayscale_histogram(images: &[&Tensor]) -> Vec<f64> {
    let mut bins = vec![0.0f64; HISTOGRAM_BINS];
    let mut total = 0usize;
    for img in images {
        for px in img.data().chunks_exact(3) {
            let gray = (px[0] + px[1] + px[2]) / 3.0;
            let b = ((gray * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            bins[b] += 1.0;
            total += 1;
        }
    }
    if total > 0 {
        for b in &mut bins {
            *b /= total as f64;
        }
    }
    bins
}

/// Mean absolute difference between two normalized histograms.
pub fn histogram_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "histograms must have equal bin counts");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

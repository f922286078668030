//! On-disk dataset layout and sample I/O.
//!
//! A dataset root holds `<domain>/<split>/<id>.img.ten` images with optional
//! `<id>.seg.pgm` pixel-label masks and mandatory `<id>.label.txt`
//! image-level labels, plus a `manifest.txt` recording counts and the
//! generator's configuration digest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::Tensor;

/// Which marginal distribution a sample was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Domain> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::invalid(format!("unknown domain '{other}'"))),
        }
    }
}

/// Dataset partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// One image with its labels. Pixel labels are present for source samples
/// and for held-out target evaluation splits only.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Stable identifier; files are named `<id>.img.ten` etc.
    pub id: String,
    /// `[H, W, 3]` image with values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major per-pixel class ids, when available.
    pub pixel_labels: Option<Vec<usize>>,
    /// Image-level class: 0 = lesion-free, 1 = diseased.
    pub image_label: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Directory holding one domain/split combination.
pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(domain.dir_name()).join(split.dir_name())
}

fn image_label_text(label: usize) -> Result<&'static str> {
    match label {
        0 => Ok("normal"),
        1 => Ok("disease"),
        other => Err(Error::invalid(format!("image label {other} is not 0 or 1"))),
    }
}

fn parse_image_label(text: &str) -> Result<usize> {
    match text.trim() {
        "normal" | "0" => Ok(0),
        "disease" | "1" => Ok(1),
        other => Err(Error::Parse(format!("unknown image label '{other}'"))),
    }
}

/// Writes a sample into `root/<domain>/<split>/`. The pixel mask is written
/// only when `with_mask` is set and the sample carries one — target training
/// data stays weakly labelled on disk.
pub fn save_sample(
    root: &Path,
    domain: Domain,
    split: Split,
    sample: &Sample,
    with_mask: bool,
) -> Result<()> {
    let shape = sample.image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!(
            "dataset images must be [H, W, 3], got {shape:?}"
        )));
    }
    let dir = split_dir(root, domain, split);
    fs::create_dir_all(&dir)?;
    sample.image.save_ten(&dir.join(format!("{}.img.ten", sample.id)))?;
    if with_mask {
        let labels = sample.pixel_labels.as_ref().ok_or_else(|| {
            Error::invalid(format!("sample {} has no pixel labels to save", sample.id))
        })?;
        if labels.len() != shape[0] * shape[1] {
            return Err(Error::shape(format!(
                "mask of {} entries for a {}x{} image",
                labels.len(),
                shape[0],
                shape[1]
            )));
        }
        pgm::save_class_mask(
            &dir.join(format!("{}.seg.pgm", sample.id)),
            shape[1],
            shape[0],
            labels,
        )?;
    }
    fs::write(
        dir.join(format!("{}.label.txt", sample.id)),
        format!("{}\n", image_label_text(sample.image_label)?),
    )?;
    Ok(())
}

/// Loads one sample by id. The mask is optional on disk.
pub fn load_sample(root: &Path, domain: Domain, split: Split, id: &str) -> Result<Sample> {
    let dir = split_dir(root, domain, split);
    let image = Tensor::load_ten(&dir.join(format!("{id}.img.ten")))?;
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!(
            "stored image {id} must be [H, W, 3], got {shape:?}"
        )));
    }
    let seg_path = dir.join(format!("{id}.seg.pgm"));
    let pixel_labels = if seg_path.exists() {
        let (w, h, labels) = pgm::load_class_mask(&seg_path)?;
        if h != shape[0] || w != shape[1] {
            return Err(Error::shape(format!(
                "mask {w}x{h} does not match image {}x{}",
                shape[1], shape[0]
            )));
        }
        Some(labels)
    } else {
        None
    };
    let label_text = fs::read_to_string(dir.join(format!("{id}.label.txt")))?;
    Ok(Sample {
        id: id.to_string(),
        image,
        pixel_labels,
        image_label: parse_image_label(&label_text)?,
    })
}

/// Lists the sample ids of a split in ascending order.
pub fn list_ids(root: &Path, domain: Domain, split: Split) -> Result<Vec<String>> {
    let dir = split_dir(root, domain, split);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".img.ten") {
            ids.push(stem.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every sample of a split, sorted by id.
pub fn load_split(root: &Path, domain: Domain, split: Split) -> Result<Vec<Sample>> {
    list_ids(root, domain, split)?
        .iter()
        .map(|id| load_sample(root, domain, split, id))
        .collect()
}

/// Writes `manifest.txt`: per-split counts plus free-form metadata such as
/// the generator's config digest.
pub fn write_manifest(root: &Path, counts: &[(Domain, Split, usize)], meta: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (domain, split, n) in counts {
        text.push_str(&format!("{}/{} = {n}\n", domain.dir_name(), split.dir_name()));
    }
    for (k, v) in meta {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::create_dir_all(root)?;
    fs::write(root.join("manifest.txt"), text)?;
    Ok(())
}

/// Reads `manifest.txt` back as a flat key/value config.
pub fn read_manifest(root: &Path) -> Result<crate::config::Config> {
    let text = fs::read_to_string(root.join("manifest.txt"))?;
    crate::config::Config::parse(&text)
}

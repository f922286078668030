//! Named trainable parameters and their on-disk checkpoint format.
//!
//! A [`ParamStore`] owns parameter values between steps. Each training step
//! binds the store into a fresh [`Graph`] (one leaf per parameter), runs
//! forward/backward, then pulls the leaf gradients back so the optimizer can
//! apply them. Checkpoints are a directory holding `params.bin` (concatenated
//! `.ten` records) plus `manifest.txt` (`name byte-offset shape...` per line)
//! and `meta.txt` (free-form `key = value` run metadata).

use std::collections::HashMap;
use std::io::{BufRead, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Ordered collection of named parameters; registration order is stable and
/// defines binding and serialization order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter under a unique name (no whitespace).
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("parameter name {name:?} must be non-empty, no whitespace")));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Entry { name, value, grad: None });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.entries[id.0].grad.as_mut()
    }

    /// Writes a gradient directly (shape-checked against the value).
    pub fn set_grad(&mut self, id: ParamId, grad: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if grad.shape() != e.value.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} does not match parameter {} ({:?})",
                grad.shape(),
                e.name,
                e.value.shape()
            )));
        }
        e.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Inserts every parameter into `graph` as a leaf. `trainable: false`
    /// binds frozen copies (constants), used e.g. for the critic during the
    /// generator update.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Binding {
        let refs = self
            .entries
            .iter()
            .map(|e| graph.leaf(e.value.clone(), trainable))
            .collect();
        Binding { refs }
    }

    /// Copies gradients accumulated in `graph` back into the store, replacing
    /// previous ones. Parameters the loss never touched get a zero gradient.
    pub fn pull_grads(&mut self, graph: &Graph, binding: &Binding) {
        for (e, &r) in self.entries.iter_mut().zip(&binding.refs) {
            e.grad = Some(match graph.grad(r) {
                Some(t) => t.clone(),
                None => Tensor::zeros(e.value.shape()),
            });
        }
    }

    // ------------------------------------------------------- checkpointing --

    /// Writes `params.bin` + `manifest.txt` into `dir` (created if missing).
    pub fn save_checkpoint(&self, dir: &Path, meta: &[(String, String)]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
        let mut manifest = String::new();
        let mut offset: u64 = 0;
        for e in &self.entries {
            let mut record = Vec::new();
            e.value.write_ten(&mut record)?;
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {} {}\n", e.name, offset, dims.join(" ")));
            bin.write_all(&record)?;
            offset += record.len() as u64;
        }
        bin.flush()?;
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        let mut meta_text = String::new();
        for (k, v) in meta {
            meta_text.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(dir.join("meta.txt"), meta_text)?;
        Ok(())
    }

    /// Loads values from a checkpoint into this store. The manifest must name
    /// exactly the parameters registered here, each with a matching shape.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut bin = std::io::BufReader::new(std::fs::File::open(dir.join("params.bin"))?);
        let mut seen = vec![false; self.entries.len()];
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let name = toks
                .next()
                .ok_or_else(|| Error::Parse(format!("manifest line {} empty", lineno + 1)))?;
            let offset: u64 = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse(format!("manifest line {}: bad offset", lineno + 1)))?;
            let idx = *self.by_name.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint has unknown parameter {name:?}"))
            })?;
            bin.seek(SeekFrom::Start(offset))?;
            let t = Tensor::read_ten(&mut bin)?;
            if t.shape() != self.entries[idx].value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} shape {:?} does not match registered {:?}",
                    t.shape(),
                    self.entries[idx].value.shape()
                )));
            }
            self.entries[idx].value = t;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameter {:?}",
                self.entries[missing].name
            )));
        }
        Ok(())
    }
}

/// Graph leaves for one binding of a [`ParamStore`].
pub struct Binding {
    refs: Vec<TensorRef>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> TensorRef {
        self.refs[id.0]
    }

    pub fn refs(&self) -> &[TensorRef] {
        &self.refs
    }
}

/// Reads `meta.txt` of a checkpoint directory as ordered key/value pairs.
pub fn read_checkpoint_meta(dir: &Path) -> Result<Vec<(String, String)>> {
    let f = std::fs::File::open(dir.join("meta.txt"))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if let Some((k, v)) = line.split_once('=') {
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    Ok(out)
}

/// Reads a single raw `.ten` record at a manifest offset without a store —
/// used by tools that inspect checkpoints.
pub fn read_checkpoint_tensor(dir: &Path, name: &str) -> Result<Tensor> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    for line in manifest.lines() {
        let mut toks = line.split_whitespace();
        if toks.next() == Some(name) {
            let offset: u64 = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse("bad manifest offset".to_string()))?;
            let mut f = std::fs::File::open(dir.join("params.bin"))?;
            f.seek(SeekFrom::Start(offset))?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            return Tensor::read_ten(&mut std::io::BufReader::new(&buf[..]));
        }
    }
    Err(Error::Checkpoint(format!("parameter {name:?} not present in checkpoint")))
}

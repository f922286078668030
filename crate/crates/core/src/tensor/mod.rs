//! Dense row-major `f64` tensors and the reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain value: a shape plus contiguous data. Differentiation
//! state (gradients, `requires_grad`) lives on [`Graph`] nodes so that values
//! stay cheap to clone and move around. The graph's backward pass builds its
//! vector-Jacobian products out of ordinary graph operations, which makes
//! second-order derivatives (gradients of gradient norms) available through
//! the same API.

mod check;
mod graph;
pub(crate) mod kernels;

pub use check::finite_diff_check;
pub use graph::{Graph, TensorRef, UpsampleMode};
pub use kernels::Padding;

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Dense tensor: row-major `f64` data with an explicit shape.
///
/// Rank 0 (empty shape) is a scalar with exactly one element. Conventions used
/// by the model code: images and feature maps are `[H, W, C]`, convolution
/// kernels are `[KH, KW, Cin, Cout]`, matrices are `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor, got shape {:?}", self.shape);
        self.data[0]
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range {ext} at axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Returns an error naming `context` if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Serializes as a text header line `shape: d0 d1 ...` followed by the
    /// elements as little-endian 32-bit floats. Values are narrowed to `f32`.
    pub fn write_ten(&self, w: &mut impl Write) -> Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "shape: {}", dims.join(" "))?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads the format produced by [`Tensor::write_ten`].
    pub fn read_ten(r: &mut impl BufRead) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let rest = header
            .trim_end()
            .strip_prefix("shape:")
            .ok_or_else(|| Error::Parse(format!("tensor header must start with 'shape:', got {header:?}")))?;
        let mut shape = Vec::new();
        for tok in rest.split_whitespace() {
            let d: usize = tok
                .parse()
                .map_err(|_| Error::Parse(format!("bad extent {tok:?} in tensor header")))?;
            shape.push(d);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Parse(format!("tensor body truncated: {e}")))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save_ten(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ten(&mut f)
    }

    pub fn load_ten(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_ten(&mut f)
    }
}

/// Shape arithmetic shared by the graph operations.
pub(crate) mod shape {
    use super::*;

    /// Target shape for explicit broadcasting: shapes are aligned on trailing
    /// axes; a source axis must either match the target or have extent 1, and
    /// missing leading axes are treated as extent 1.
    pub fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
        if from.len() > to.len() {
            return false;
        }
        let offset = to.len() - from.len();
        from.iter()
            .zip(&to[offset..])
            .all(|(&f, &t)| f == t || f == 1)
    }

    pub fn require_equal(a: &[usize], b: &[usize], op: &str) -> Result<()> {
        if a == b {
            Ok(())
        } else {
            Err(Error::shape(format!("{op} requires equal shapes, got {a:?} vs {b:?}")))
        }
    }
}

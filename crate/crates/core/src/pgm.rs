//! Binary PGM (P5) reading and writing.
//!
//! Three mask kinds share the format, distinguished by `maxval`:
//!
//! * class-id masks — 8-bit, `maxval = 255`, one byte per pixel;
//! * selection masks — 8-bit, `maxval = 1`, pixel values 0/1;
//! * superpixel label maps — 16-bit big-endian, `maxval = 65535`.
//!
//! The parser accepts `#` comments anywhere in the header and any whitespace
//! between header tokens, per the format's grammar: `P5 <width> <height>
//! <maxval>` followed by exactly one whitespace byte and the raster.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded PGM raster. Samples are widened to `u16` regardless of the
/// on-disk sample size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, `height * width` of them.
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Result<Pgm> {
        if maxval == 0 {
            return Err(Error::invalid("PGM maxval must be positive".to_string()));
        }
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "PGM raster has {} samples, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(bad) = data.iter().find(|v| **v > maxval) {
            return Err(Error::invalid(format!("PGM sample {bad} exceeds maxval {maxval}")));
        }
        Ok(Pgm { width, height, maxval, data })
    }

    /// Serializes to P5: one byte per sample for `maxval < 256`, two
    /// big-endian bytes otherwise.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        if self.maxval < 256 {
            let bytes: Vec<u8> = self.data.iter().map(|v| *v as u8).collect();
            w.write_all(&bytes)?;
        } else {
            let mut bytes = Vec::with_capacity(self.data.len() * 2);
            for v in &self.data {
                bytes.extend_from_slice(&v.to_be_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Pgm> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Pgm::parse(&bytes)
    }

    pub fn load(path: &Path) -> Result<Pgm> {
        let mut f = BufReader::new(File::open(path)?);
        Pgm::read_from(&mut f)
    }

    fn parse(bytes: &[u8]) -> Result<Pgm> {
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String> {
            // Skip whitespace and comments.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("truncated PGM header".to_string()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token(bytes)?;
        if magic != "P5" {
            return Err(Error::Parse(format!("not a binary PGM (magic {magic:?})")));
        }
        let width: usize = token(bytes)?.parse().map_err(|e| Error::Parse(format!("PGM width: {e}")))?;
        let height: usize = token(bytes)?.parse().map_err(|e| Error::Parse(format!("PGM height: {e}")))?;
        let maxval: u32 = token(bytes)?.parse().map_err(|e| Error::Parse(format!("PGM maxval: {e}")))?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Parse(format!("PGM maxval {maxval} out of range")));
        }
        // Exactly one whitespace byte separates header and raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Parse("missing separator before PGM raster".to_string()));
        }
        pos += 1;
        let n = width * height;
        let raster = &bytes[pos..];
        let data: Vec<u16> = if maxval < 256 {
            if raster.len() != n {
                return Err(Error::Parse(format!(
                    "PGM raster has {} bytes, expected {n}",
                    raster.len()
                )));
            }
            raster.iter().map(|b| *b as u16).collect()
        } else {
            if raster.len() != 2 * n {
                return Err(Error::Parse(format!(
                    "PGM raster has {} bytes, expected {}",
                    raster.len(),
                    2 * n
                )));
            }
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        Pgm::new(width, height, maxval as u16, data)
    }
}

/// Writes a class-id mask (8-bit, `maxval = 255`). Class ids must fit a byte.
pub fn save_class_mask(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|l| **l > 255) {
        return Err(Error::invalid(format!("class id {bad} does not fit an 8-bit mask")));
    }
    let data: Vec<u16> = labels.iter().map(|l| *l as u16).collect();
    Pgm::new(width, height, 255, data)?.save(path)
}

/// Reads a class-id mask back to `usize` labels.
pub fn load_class_mask(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let p = Pgm::load(path)?;
    let labels = p.data.iter().map(|v| *v as usize).collect();
    Ok((p.width, p.height, labels))
}

/// Writes a selection mask (8-bit, `maxval = 1`).
pub fn save_binary_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let data: Vec<u16> = mask.iter().map(|b| u16::from(*b)).collect();
    Pgm::new(width, height, 1, data)?.save(path)
}

pub fn load_binary_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let p = Pgm::load(path)?;
    if p.maxval != 1 {
        return Err(Error::Parse(format!("selection mask must have maxval 1, got {}", p.maxval)));
    }
    Ok((p.width, p.height, p.data.iter().map(|v| *v != 0).collect()))
}

/// Writes a superpixel label map (16-bit big-endian, `maxval = 65535`).
pub fn save_label_map(path: &Path, width: usize, height: usize, labels: &[u32]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|l| **l > 65535) {
        return Err(Error::invalid(format!("label {bad} does not fit 16 bits")));
    }
    let data: Vec<u16> = labels.iter().map(|l| *l as u16).collect();
    Pgm::new(width, height, 65535, data)?.save(path)
}

pub fn load_label_map(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let p = Pgm::load(path)?;
    Ok((p.width, p.height, p.data.iter().map(|v| *v as u32).collect()))
}

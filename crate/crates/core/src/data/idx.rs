//! IDX (MNIST-style) image and label files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_nn::Matrix;

use super::LabeledDataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            what: self.what,
            offset: self.pos,
            message: "truncated header".into(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let offset = self.pos;
        let got = self.u32()?;
        if got != expected {
            return Err(Error::Format {
                what: self.what,
                offset,
                message: format!("bad magic {got:#010x}, expected {expected:#010x}"),
            });
        }
        Ok(())
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Format {
                what: self.what,
                offset: self.bytes.len(),
                message: format!("truncated body: need {len} bytes after offset {}, have {available}", self.pos),
            });
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

/// Parses an image file into an `n × (rows·cols)` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "idx images",
    };
    r.magic(IDX_IMAGES_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let d = rows * cols;
    let body = r.body(n * d)?;
    if n == 0 || d == 0 {
        return Err(Error::Format {
            what: "idx images",
            offset: 4,
            message: format!("empty image set ({n} images of {rows}x{cols})"),
        });
    }
    Matrix::from_vec(n, d, body.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "idx labels",
    };
    r.magic(IDX_LABELS_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.body(n)?.iter().map(|&b| usize::from(b)).collect())
}

/// Loads a labeled dataset; the class count is `max(label) + 1` (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let inputs = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    let k = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(inputs, labels, k)
}

//! IDX image/label file loading and saving.
//!
//! The format is the classic big-endian layout: a `u32` magic (2051 for
//! 3-dimensional image files, 2049 for label files), big-endian `u32`
//! dimensions, then the payload as unsigned bytes. Pixels are normalized to
//! `[0, 1]` by dividing by 255 on load and mapped back with
//! `round(v * 255)` on save.

use std::fs;
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Byte reader that reports the offset of any failure.
struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader {
            bytes,
            offset: 0,
            path,
        }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::IdxFormat {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            message: message.into(),
        }
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        if end > self.bytes.len() {
            return Err(self.fail("file truncated inside a u32 field"));
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..end].try_into().expect("4 bytes"));
        self.offset = end;
        Ok(v)
    }

    fn read_payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.offset + len;
        if end > self.bytes.len() {
            return Err(self.fail(format!(
                "payload needs {len} bytes but only {} remain",
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        if self.offset != self.bytes.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after the payload",
                self.bytes.len() - self.offset
            )));
        }
        Ok(slice)
    }
}

/// Load an image/label IDX pair into a dataset.
///
/// The class count is derived as `max(label) + 1` so consumers see a dense
/// label space.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut r = Reader::new(&image_bytes, images_path);
    let magic = r.read_u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(r.fail(format!("magic {magic}, expected {IMAGE_MAGIC} for images")));
    }
    let n_images = r.read_u32_be()? as usize;
    let rows = r.read_u32_be()? as usize;
    let cols = r.read_u32_be()? as usize;
    if n_images == 0 || rows == 0 || cols == 0 {
        return Err(r.fail(format!("empty image dimensions {n_images}x{rows}x{cols}")));
    }
    let pixels = r.read_payload(n_images * rows * cols)?;

    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut r = Reader::new(&label_bytes, labels_path);
    let magic = r.read_u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(r.fail(format!("magic {magic}, expected {LABEL_MAGIC} for labels")));
    }
    let n_labels = r.read_u32_be()? as usize;
    if n_labels != n_images {
        return Err(r.fail(format!("{n_labels} labels for {n_images} images")));
    }
    let raw_labels = r.read_payload(n_labels)?;

    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = raw_labels.iter().map(|&b| b as u32).collect();
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    LabeledDataset::new(
        Matrix::from_vec(n_images, rows * cols, data)?,
        labels,
        num_classes,
        rows,
        cols,
    )
}

/// Write a dataset back out as an IDX image/label pair.
pub fn save_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let n = ds.len();
    let mut images = Vec::with_capacity(16 + n * ds.feature_count());
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(ds.image_rows() as u32).to_be_bytes());
    images.extend_from_slice(&(ds.image_cols() as u32).to_be_bytes());
    images.extend(ds.samples().data().iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;

    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&l| l as u8));
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
}

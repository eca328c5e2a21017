//! IDX image/label files (the MNIST distribution format).
//!
//! Files are big-endian: a magic word `0x00000803` (images) or `0x00000801`
//! (labels), one 32-bit word per dimension, then raw unsigned bytes.
//! Gzip-compressed files are detected by their header and inflated.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]` with one row per example, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Array2<f64>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "image/label count",
                expected: images.nrows(),
                found: labels.len(),
            });
        }
        if images.ncols() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "pixels per image",
                expected: rows * cols,
                found: images.ncols(),
            });
        }
        Ok(Self {
            images,
            labels,
            rows,
            cols,
        })
    }

    pub fn images(&self) -> ArrayView2<'_, f64> {
        self.images.view()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels per example.
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// The first `n` examples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Train and test splits.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX", format!("truncated {what} header")))
}

/// Parse an in-memory IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            "IDX",
            format!("image file magic is {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            "IDX",
            format!("image file truncated: {} of {need} pixel bytes", body.len()),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Parse an in-memory IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            "IDX",
            format!("label file magic is {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            "IDX",
            format!("label file truncated: {} of {n} labels", body.len()),
        ));
    }
    Ok(&body[..n])
}

/// Load an image file and its label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = read_all(images.as_ref())?;
    let lab_bytes = read_all(labels.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lab_bytes)?;
    if labels.len() != n {
        return Err(Error::format("IDX", format!("{n} images but {} labels", labels.len())));
    }
    let scaled: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Array2::from_shape_vec((n, rows * cols), scaled).expect("sized from header");
    Dataset::new(images, labels.to_vec(), rows, cols)
}

/// Serialize raw images in IDX form; used for fixtures.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

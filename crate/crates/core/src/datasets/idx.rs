//! IDX containers: big-endian magic 2051 for u8 images (count, rows, cols)
//! and 2049 for u8 labels (count).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::binio::Reader;
use crate::error::{format_err, Error, Result};
use crate::tensor::Tensor;

use super::labels::parse_label_matrix;
use super::{ImageDataset, LabelSet, Split};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages> {
    let mut rd = Reader::new(buf);
    let magic = rd.u32_be()?;
    if magic != IMAGES_MAGIC {
        return format_err(0, format!("bad IDX image magic {magic}, expected {IMAGES_MAGIC}"));
    }
    let count = rd.u32_be()? as usize;
    let rows = rd.u32_be()? as usize;
    let cols = rd.u32_be()? as usize;
    let pixels = rd.bytes(count * rows * cols)?.to_vec();
    rd.expect_end()?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let mut rd = Reader::new(buf);
    let magic = rd.u32_be()?;
    if magic != LABELS_MAGIC {
        return format_err(0, format!("bad IDX label magic {magic}, expected {LABELS_MAGIC}"));
    }
    let count = rd.u32_be()? as usize;
    let labels = rd.bytes(count)?.to_vec();
    rd.expect_end()?;
    Ok(labels)
}

pub fn write_idx_images<W: Write>(mut w: W, images: &IdxImages) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    w.write_all(&out)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    w.write_all(&out)?;
    Ok(())
}

impl IdxImages {
    /// Quantizes `[0, 1]` images back to bytes (`round(255 v)`).
    pub fn from_tensor(images: &Tensor<f32>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Dimension(format!(
                "IDX images must be single-channel N x 1 x H x W, got {s:?}"
            )));
        }
        Ok(Self {
            count: s[0],
            rows: s[2],
            cols: s[3],
            pixels: images
                .data()
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            [self.count, 1, self.rows, self.cols],
            self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
        .expect("pixel count matches header")
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Reads an IDX image file scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor<f32>> {
    Ok(parse_idx_images(&read(path)?)?.to_tensor())
}

/// Reads either IDX class labels or a `DBEL` label matrix, by magic bytes.
pub fn load_labels(path: &Path, classes: usize) -> Result<LabelSet> {
    let buf = read(path)?;
    if buf.starts_with(b"DBEL") {
        parse_label_matrix(&buf)
    } else {
        let raw = parse_idx_labels(&buf)?;
        LabelSet::multiclass(raw.into_iter().map(usize::from).collect(), classes)
    }
}

/// Loads an IDX image file with either IDX class labels or a `DBEL` label
/// matrix (detected from the magic bytes).
pub fn load_idx_dataset(
    images: &Path,
    labels: &Path,
    classes: usize,
    split: Split,
) -> Result<ImageDataset> {
    let img = parse_idx_images(&read(images)?)?;
    let lbuf = read(labels)?;
    let labels = if lbuf.starts_with(b"DBEL") {
        parse_label_matrix(&lbuf)?
    } else {
        let raw = parse_idx_labels(&lbuf)?;
        if raw.len() != img.count {
            return format_err(
                4,
                format!("label file holds {} labels, image file {} images", raw.len(), img.count),
            );
        }
        LabelSet::multiclass(raw.into_iter().map(usize::from).collect(), classes)?
    };
    if labels.len() != img.count {
        return format_err(
            8,
            format!("label file holds {} rows, image file {} images", labels.len(), img.count),
        );
    }
    ImageDataset::new(img.to_tensor(), labels, split)
}

/// Loads an MNIST image/label pair (ten classes).
pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<ImageDataset> {
    load_idx_dataset(images, labels, 10, split)
}

/// Standard MNIST file names under one directory.
#[derive(Debug, Clone)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            train_images: d.join("train-images-idx3-ubyte"),
            train_labels: d.join("train-labels-idx1-ubyte"),
            test_images: d.join("t10k-images-idx3-ubyte"),
            test_labels: d.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.is_file())
    }

    pub fn train(&self) -> Result<ImageDataset> {
        load_mnist(&self.train_images, &self.train_labels, Split::Train)
    }

    pub fn test(&self) -> Result<ImageDataset> {
        load_mnist(&self.test_images, &self.test_labels, Split::Test)
    }
}

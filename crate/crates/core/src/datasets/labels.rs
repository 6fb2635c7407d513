use std::io::{Read, Write};

use crate::binio::Reader;
use crate::error::{format_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Multiclass,
    Multilabel,
}

/// Per-sample supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelSet {
    /// One class index in `[0, classes)` per sample.
    Multiclass { classes: usize, labels: Vec<usize> },
    /// Row-major `N x classes` membership flags.
    Multilabel { classes: usize, membership: Vec<bool> },
}

impl LabelSet {
    pub fn multiclass(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Data(format!(
                "label {y} of sample {i} is outside [0, {classes})"
            )));
        }
        Ok(Self::Multiclass { classes, labels })
    }

    pub fn multilabel(membership: Vec<bool>, classes: usize) -> Result<Self> {
        if classes == 0 || !membership.len().is_multiple_of(classes) {
            return Err(Error::Data(format!(
                "membership of length {} is not a multiple of {classes} classes",
                membership.len()
            )));
        }
        Ok(Self::Multilabel {
            classes,
            membership,
        })
    }

    pub fn kind(&self) -> LabelKind {
        match self {
            Self::Multiclass { .. } => LabelKind::Multiclass,
            Self::Multilabel { .. } => LabelKind::Multilabel,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Multiclass { classes, .. } | Self::Multilabel { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Multiclass { labels, .. } => labels.len(),
            Self::Multilabel {
                classes,
                membership,
            } => membership.len() / classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class indices, if multiclass.
    pub fn as_classes(&self) -> Option<&[usize]> {
        match self {
            Self::Multiclass { labels, .. } => Some(labels),
            Self::Multilabel { .. } => None,
        }
    }

    /// Membership flags; multiclass labels are expanded to one-hot rows.
    pub fn membership(&self) -> Vec<bool> {
        match self {
            Self::Multiclass { classes, labels } => {
                let mut m = vec![false; labels.len() * classes];
                labels.iter().enumerate().for_each(|(i, &y)| m[i * classes + y] = true);
                m
            }
            Self::Multilabel { membership, .. } => membership.clone(),
        }
    }

    /// Positive label indices of sample `i`, ascending.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        match self {
            Self::Multiclass { labels, .. } => vec![labels[i]],
            Self::Multilabel {
                classes,
                membership,
            } => membership[i * classes..(i + 1) * classes]
                .iter()
                .enumerate()
                .filter_map(|(j, &b)| b.then_some(j))
                .collect(),
        }
    }

    /// Number of positive labels of sample `i`.
    pub fn positive_count(&self, i: usize) -> usize {
        match self {
            Self::Multiclass { .. } => 1,
            Self::Multilabel {
                classes,
                membership,
            } => membership[i * classes..(i + 1) * classes]
                .iter()
                .filter(|&&b| b)
                .count(),
        }
    }

    /// Labels packed into bitmasks, one `u128` per sample (at most 128 classes).
    pub fn masks(&self) -> Result<Vec<u128>> {
        let c = self.classes();
        if c > 128 {
            return Err(Error::Usage(format!("{c} classes exceed the 128-class mask width")));
        }
        Ok((0..self.len())
            .map(|i| self.positives(i).iter().fold(0u128, |m, &j| m | (1u128 << j)))
            .collect())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            Self::Multiclass { classes, labels } => Self::Multiclass {
                classes: *classes,
                labels: indices.iter().map(|&i| labels[i]).collect(),
            },
            Self::Multilabel {
                classes,
                membership,
            } => Self::Multilabel {
                classes: *classes,
                membership: indices
                    .iter()
                    .flat_map(|&i| membership[i * classes..(i + 1) * classes].iter().copied())
                    .collect(),
            },
        }
    }
}

const DBEL_MAGIC: &[u8; 4] = b"DBEL";

/// Writes a label matrix: magic `DBEL`, u32 classes, u64 count, then one
/// `ceil(classes / 8)`-byte row per sample, bit `j` at byte `j / 8`, bit `j % 8`.
pub fn write_label_matrix<W: Write>(labels: &LabelSet, mut w: W) -> Result<()> {
    let c = labels.classes();
    let n = labels.len();
    let row_bytes = c.div_ceil(8);
    let membership = labels.membership();
    let mut out = Vec::with_capacity(16 + n * row_bytes);
    out.extend_from_slice(DBEL_MAGIC);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for row in membership.chunks(c.max(1)).take(n) {
        let mut bytes = vec![0u8; row_bytes];
        for (j, _) in row.iter().enumerate().filter(|(_, &b)| b) {
            bytes[j / 8] |= 1 << (j % 8);
        }
        out.extend_from_slice(&bytes);
    }
    w.write_all(&out)?;
    Ok(())
}

/// Reads a file written by [`write_label_matrix`] as a multilabel set.
pub fn read_label_matrix<R: Read>(mut r: R) -> Result<LabelSet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_label_matrix(&buf)
}

pub(crate) fn parse_label_matrix(buf: &[u8]) -> Result<LabelSet> {
    let mut rd = Reader::new(buf);
    rd.expect_magic(DBEL_MAGIC)?;
    let at = rd.offset();
    let c = rd.u32_le()? as usize;
    if c == 0 {
        return format_err(at, "zero classes");
    }
    let n = rd.u64_le()? as usize;
    let row_bytes = c.div_ceil(8);
    let mut membership = Vec::with_capacity(n * c);
    for _ in 0..n {
        let at = rd.offset();
        let row = rd.bytes(row_bytes)?;
        for j in 0..row_bytes * 8 {
            let bit = row[j / 8] >> (j % 8) & 1 == 1;
            if j < c {
                membership.push(bit);
            } else if bit {
                return format_err(at, format!("padding bit {j} set beyond {c} classes"));
            }
        }
    }
    rd.expect_end()?;
    LabelSet::multilabel(membership, c)
}

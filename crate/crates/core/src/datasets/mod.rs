//! Image datasets: MNIST IDX files, deterministic splits, and a synthetic
//! multilabel set built by compositing MNIST digits.

mod idx;
mod labels;
mod synth;

pub use idx::{
    load_idx_dataset, load_idx_images, load_labels, load_mnist, parse_idx_images, parse_idx_labels, write_idx_images,
    write_idx_labels, IdxImages, MnistPaths,
};
pub use labels::{read_label_matrix, write_label_matrix, LabelKind, LabelSet};
pub use synth::{composite, synth_multilabel, SYNTH_MAX_DIGITS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images scaled to `[0, 1]` with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// `N x C x H x W`.
    pub images: Tensor<f32>,
    pub labels: LabelSet,
    pub split: Split,
}

impl ImageDataset {
    pub fn new(images: Tensor<f32>, labels: LabelSet, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "images must be N x C x H x W, got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Channels, height, width.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: self.labels.select(indices),
            split,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }
}

/// Seed-deterministic disjoint split of `data` into (train, validation).
///
/// Multiclass sets are stratified: every class keeps at least one sample on
/// each side when it has two or more, and the validation quota is shared
/// across classes in proportion to their sizes.
pub fn split_train_val(
    data: &ImageDataset,
    val_size: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    let (train, val) = split_indices(&data.labels, val_size, seed)?;
    Ok((data.subset(&train, Split::Train), data.subset(&val, Split::Val)))
}

/// Index form of [`split_train_val`]; both lists are ascending.
pub fn split_indices(labels: &LabelSet, val_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if val_size == 0 || val_size >= n {
        return Err(Error::Usage(format!(
            "validation size {val_size} must be in 1..{n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = match labels {
        LabelSet::Multiclass { classes, labels } => {
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); *classes];
            for (i, &y) in labels.iter().enumerate() {
                groups[y].push(i);
            }
            let quotas = stratified_quotas(&groups.iter().map(Vec::len).collect::<Vec<_>>(), val_size);
            let mut val = Vec::with_capacity(val_size);
            for (g, q) in groups.iter_mut().zip(quotas) {
                g.shuffle(&mut rng);
                val.extend_from_slice(&g[..q]);
            }
            val
        }
        LabelSet::Multilabel { .. } => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(val_size);
            all
        }
    };
    val.sort_unstable();
    let mut in_val = vec![false; n];
    val.iter().for_each(|&i| in_val[i] = true);
    let train = (0..n).filter(|&i| !in_val[i]).collect();
    Ok((train, val))
}

/// Largest-remainder allocation of `total` across groups, keeping each group
/// with two or more members represented on both sides.
fn stratified_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / n as f64)
        .collect();
    let lo = |s: usize| usize::from(s >= 2);
    let hi = |s: usize| if s >= 2 { s - 1 } else { s };
    let mut q: Vec<usize> = exact
        .iter()
        .zip(sizes)
        .map(|(&e, &s)| (e.floor() as usize).clamp(lo(s), hi(s)))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - q[a] as f64;
        let fb = exact[b] - q[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut assigned: usize = q.iter().sum();
    let mut i = 0;
    while assigned < total && order.iter().any(|&g| q[g] < hi(sizes[g])) {
        let g = order[i % order.len()];
        if q[g] < hi(sizes[g]) {
            q[g] += 1;
            assigned += 1;
        }
        i += 1;
    }
    let mut i = 0;
    while assigned > total && order.iter().any(|&g| q[g] > lo(sizes[g])) {
        let g = order[order.len() - 1 - i % order.len()];
        if q[g] > lo(sizes[g]) {
            q[g] -= 1;
            assigned -= 1;
        }
        i += 1;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(labels: Vec<usize>) -> ImageDataset {
        let n = labels.len();
        ImageDataset::new(
            Tensor::from_fn([n, 1, 2, 2], |i| (i % 5) as f32 / 5.0),
            LabelSet::multiclass(labels, 10).unwrap(),
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn split_is_stratified_partition() {
        let labels: Vec<usize> = (0..1000).map(|i| (i * 7 + i / 13) % 10).collect();
        let d = dataset(labels.clone());
        let (tr, va) = split_indices(&d.labels, 100, 5).unwrap();
        assert_eq!(tr.len() + va.len(), 1000);
        assert_eq!(va.len(), 100);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        for c in 0..10 {
            assert!(va.iter().any(|&i| labels[i] == c));
            assert!(tr.iter().any(|&i| labels[i] == c));
        }
        assert_eq!(split_indices(&d.labels, 100, 5).unwrap(), (tr, va));
        let (a, b) = split_train_val(&d, 100, 5).unwrap();
        assert_eq!((a.split, b.split), (Split::Train, Split::Val));
    }

    #[test]
    fn split_rejects_oversized_validation() {
        let d = dataset(vec![0, 1, 2]);
        assert!(matches!(split_train_val(&d, 3, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn quotas_sum_to_total() {
        for total in [1, 7, 50, 99] {
            let q = stratified_quotas(&[10, 30, 5, 55], total);
            assert_eq!(q.iter().sum::<usize>(), total.clamp(4, 96), "{q:?}");
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let r = ImageDataset::new(
            Tensor::full([1, 1, 2, 2], 1.5),
            LabelSet::multiclass(vec![0], 10).unwrap(),
            Split::Test,
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }
}

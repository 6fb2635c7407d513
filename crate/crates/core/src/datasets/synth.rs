//! Multilabel images made by placing up to four distinct MNIST digits into
//! the quadrants of a 56 x 56 canvas.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ImageDataset, LabelSet};

pub const SYNTH_MAX_DIGITS: usize = 4;
const TILE: usize = 28;
const SIDE: usize = 2 * TILE;

/// Draws `28 x 28` tiles into quadrants (0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right) of a blank `56 x 56` canvas.
pub fn composite(tiles: &[(&[f32], usize)]) -> Result<Vec<f32>> {
    let mut canvas = vec![0.0f32; SIDE * SIDE];
    for &(tile, q) in tiles {
        if tile.len() != TILE * TILE {
            return Err(Error::Dimension(format!(
                "tile has {} pixels, expected {}",
                tile.len(),
                TILE * TILE
            )));
        }
        if q >= 4 {
            return Err(Error::Usage(format!("quadrant {q} out of range")));
        }
        let (oy, ox) = ((q / 2) * TILE, (q % 2) * TILE);
        for (y, src) in tile.chunks_exact(TILE).enumerate() {
            let dst = &mut canvas[(oy + y) * SIDE + ox..][..TILE];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = d.max(s));
        }
    }
    Ok(canvas)
}

/// Builds `n` composite samples from a single-channel 28 x 28 multiclass
/// source. Each sample holds between one and four digits, uniformly, with
/// distinct classes in distinct quadrants.
pub fn synth_multilabel(n: usize, source: &ImageDataset, seed: u64) -> Result<ImageDataset> {
    if source.image_shape() != [1, TILE, TILE] {
        return Err(Error::Dimension(format!(
            "source images must be 1 x 28 x 28, got {:?}",
            source.image_shape()
        )));
    }
    let Some(labels) = source.labels.as_classes() else {
        return Err(Error::Usage("source must be a multiclass dataset".into()));
    };
    let classes = source.labels.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let present: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < SYNTH_MAX_DIGITS {
        return Err(Error::Data(format!(
            "source covers {} classes, need at least {SYNTH_MAX_DIGITS}",
            present.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut membership = vec![false; n * classes];
    let mut quadrants = [0usize, 1, 2, 3];
    for row in membership.chunks_exact_mut(classes) {
        let k = rng.random_range(1..=SYNTH_MAX_DIGITS);
        let picked: Vec<usize> = present.choose_multiple(&mut rng, k).copied().collect();
        quadrants.shuffle(&mut rng);
        let tiles: Vec<(&[f32], usize)> = picked
            .iter()
            .zip(quadrants)
            .map(|(&c, q)| {
                let idx = *by_class[c].choose(&mut rng).expect("class is non-empty");
                (source.images.row(idx), q)
            })
            .collect();
        pixels.extend(composite(&tiles)?);
        picked.iter().for_each(|&c| row[c] = true);
    }
    ImageDataset::new(
        Tensor::new([n, 1, SIDE, SIDE], pixels)?,
        LabelSet::multilabel(membership, classes)?,
        source.split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Split;

    fn source() -> ImageDataset {
        let n = 50;
        ImageDataset::new(
            Tensor::from_fn([n, 1, 28, 28], |i| ((i / 784) % 10) as f32 / 10.0),
            LabelSet::multiclass((0..n).map(|i| i % 10).collect(), 10).unwrap(),
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn composite_places_quadrants() {
        let a = vec![0.5f32; 784];
        let c = composite(&[(&a, 3)]).unwrap();
        assert_eq!(c[0], 0.0);
        assert_eq!(c[28 * 56 + 28], 0.5);
        assert_eq!(c[56 * 56 - 1], 0.5);
        assert_eq!(c[27 * 56 + 55], 0.0);
    }

    #[test]
    fn digit_count_is_uniform() {
        let d = synth_multilabel(10_000, &source(), 3).unwrap();
        assert_eq!(d.image_shape(), [1, 56, 56]);
        let mut hist = [0usize; 5];
        for i in 0..d.len() {
            hist[d.labels.positive_count(i)] += 1;
        }
        assert_eq!(hist[0], 0);
        let mean = (1..=4).map(|k| k * hist[k]).sum::<usize>() as f64 / 1e4;
        assert!((2.4..=2.6).contains(&mean), "{mean}");
        for h in &hist[1..] {
            assert!((2200..2800).contains(h), "{hist:?}");
        }
    }

    #[test]
    fn labels_match_pixels() {
        let src = source();
        let d = synth_multilabel(20, &src, 9).unwrap();
        for i in 0..d.len() {
            let ink: f32 = d.images.row(i).iter().sum();
            let expect: f32 = d.labels.positives(i).iter().map(|&c| c as f32 / 10.0 * 784.0).sum();
            assert!((ink - expect).abs() < 0.1, "{ink} vs {expect}");
        }
        assert_eq!(synth_multilabel(20, &src, 9).unwrap(), d);
    }
}

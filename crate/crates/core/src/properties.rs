use proptest::prelude::*;

use crate::autodiff::Tape;
use crate::binarizer::{
    activation_stats, parse_codes, quantization_error, threshold_codes, write_codes, BinaryCodeSet,
};
use crate::datasets::{read_label_matrix, write_label_matrix, LabelSet};
use crate::losses::quantization_penalty;
use crate::retrieval::{
    hamming_distance, mean_average_precision, overall_metrics, precision_at_k, rank_all, HammingIndex,
    QuerySource,
};
use crate::Tensor;

fn bit_matrix(max_n: usize, max_l: usize) -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1..=max_n, 1..=max_l).prop_flat_map(|(n, l)| (Just(n), Just(l), prop::collection::vec(any::<bool>(), n * l)))
}

fn naive_distance(a: &[bool], b: &[bool]) -> u32 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_identity((n, l, bits) in bit_matrix(20, 150)) {
        let c = BinaryCodeSet::from_bits(&bits, n, l).unwrap();
        prop_assert_eq!(c.unpack(), bits);
        let pad = l % 64;
        if pad != 0 {
            for i in 0..n {
                prop_assert_eq!(c.row(i).last().unwrap() >> pad, 0);
            }
        }
    }

    #[test]
    fn code_file_round_trip((n, l, bits) in bit_matrix(20, 150)) {
        let c = BinaryCodeSet::from_bits(&bits, n, l).unwrap();
        let mut buf = Vec::new();
        write_codes(&c, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 18 + n * l.div_ceil(64) * 8);
        prop_assert_eq!(parse_codes(&buf).unwrap(), c);
    }

    #[test]
    fn label_file_round_trip((n, c, bits) in bit_matrix(20, 40)) {
        let l = LabelSet::multilabel(bits, c).unwrap();
        let mut buf = Vec::new();
        write_label_matrix(&l, &mut buf).unwrap();
        prop_assert_eq!(read_label_matrix(&buf[..]).unwrap(), l);
        prop_assert_eq!(buf.len(), 16 + n * c.div_ceil(8));
    }

    #[test]
    fn threshold_is_monotone(z in prop::collection::vec(0.0f32..1.0, 1..64), bump in prop::collection::vec(0.0f32..0.5, 64)) {
        let l = z.len();
        let lo = threshold_codes(&Tensor::new([1, l], z.clone()).unwrap()).unwrap();
        let raised: Vec<f32> = z.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let hi = threshold_codes(&Tensor::new([1, l], raised).unwrap()).unwrap();
        for j in 0..l {
            prop_assert!(!lo.bit(0, j) || hi.bit(0, j));
        }
    }

    #[test]
    fn stats_fractions_and_permutation(mut z in prop::collection::vec(0.0f32..=1.0, 1..300), seed in any::<u64>()) {
        let s = activation_stats(&z).unwrap();
        prop_assert!((s.frac_low() + s.frac_mid() + s.frac_high() - 1.0).abs() < 1e-9);
        prop_assert_eq!(s.histogram.iter().sum::<u64>(), z.len() as u64);
        let k = (seed as usize) % z.len();
        z.rotate_left(k);
        z.reverse();
        prop_assert_eq!(activation_stats(&z).unwrap(), s);
    }

    #[test]
    fn quantization_bridge(z in prop::collection::vec(0.0f32..=1.0, 1..40)) {
        let l = z.len();
        let t = Tensor::new([1, l], z).unwrap();
        let err = quantization_error(&t);
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(t);
        let p = quantization_penalty(&mut tape, v);
        let pen = f64::from(tape.value(p).data()[0]);
        prop_assert!((err - pen / 4.0).abs() <= 1e-5 * (1.0 + err));
    }

    #[test]
    fn hamming_is_a_metric((_, l, bits) in (3usize..=3, 1usize..130).prop_flat_map(|(n, l)| (Just(n), Just(l), prop::collection::vec(any::<bool>(), n * l)))) {
        let c = BinaryCodeSet::from_bits(&bits, 3, l).unwrap();
        let d = |i, j| hamming_distance(c.code(i), c.code(j)).unwrap();
        for i in 0..3 {
            prop_assert_eq!(d(i, i), 0);
            for j in 0..3 {
                prop_assert_eq!(d(i, j), d(j, i));
                prop_assert_eq!(d(i, j), naive_distance(&bits[i * l..(i + 1) * l], &bits[j * l..(j + 1) * l]));
                prop_assert_eq!(d(i, j) == 0, c.row(i) == c.row(j));
                for k in 0..3 {
                    prop_assert!(d(i, k) <= d(i, j) + d(j, k));
                }
            }
        }
    }

    #[test]
    fn ranking_is_ordered_and_permutation_consistent(
        (n, l, bits) in bit_matrix(40, 12),
        labels in prop::collection::vec(0usize..3, 40),
        perm_seed in any::<u64>(),
    ) {
        let db = BinaryCodeSet::from_bits(&bits, n, l).unwrap();
        let lab = LabelSet::multiclass(labels[..n].to_vec(), 3).unwrap();
        let q = db.select(&[0]);
        let ql = lab.select(&[0]);
        let index = HammingIndex::new(db.clone(), lab.clone()).unwrap();
        let r = &rank_all(&index, &q, &ql, QuerySource::Separate).unwrap()[0];
        prop_assert_eq!(r.len(), n);
        for w in r.entries.windows(2) {
            prop_assert!(w[0].1 < w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        // Reverse-rotate the database; the ranking maps back through the permutation.
        let shift = (perm_seed as usize) % n;
        let perm: Vec<usize> = (0..n).map(|i| (n - 1 - i + shift) % n).collect();
        let pindex = HammingIndex::new(db.select(&perm), lab.select(&perm)).unwrap();
        let pr = &rank_all(&pindex, &q, &ql, QuerySource::Separate).unwrap()[0];
        let mut a: Vec<(u32, usize)> = r.entries.iter().map(|&(j, d)| (d, j)).collect();
        let mut b: Vec<(u32, usize)> = pr.entries.iter().map(|&(j, d)| (d, perm[j])).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        let dists: Vec<u32> = pr.entries.iter().map(|e| e.1).collect();
        let mut sorted = dists.clone();
        sorted.sort_unstable();
        prop_assert_eq!(dists, sorted);
    }

    #[test]
    fn ranking_metrics_are_bounded((n, l, bits) in bit_matrix(40, 10), labels in prop::collection::vec(0usize..4, 40), k in 1usize..50) {
        let db = BinaryCodeSet::from_bits(&bits, n, l).unwrap();
        let lab = LabelSet::multiclass(labels[..n].to_vec(), 4).unwrap();
        let index = HammingIndex::new(db.clone(), lab.clone()).unwrap();
        let r = rank_all(&index, &db, &lab, QuerySource::Separate).unwrap();
        let m = mean_average_precision(&r).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.map));
        let p = precision_at_k(&r, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let perfect = r.iter().all(|x| {
            let first_irrelevant = x.relevant.iter().position(|&b| !b).unwrap_or(x.len());
            x.relevant[first_irrelevant..].iter().all(|&b| !b)
        });
        prop_assert_eq!(perfect, (m.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overall_metrics_ignore_sample_order(
        pred in prop::collection::vec(prop::collection::btree_set(0usize..6, 0..4), 1..20),
        truth_seed in prop::collection::vec(prop::collection::btree_set(0usize..6, 1..4), 20),
        rot in 0usize..20,
    ) {
        let p: Vec<Vec<usize>> = pred.iter().map(|s| s.iter().copied().collect()).collect();
        let g: Vec<Vec<usize>> = truth_seed[..p.len()].iter().map(|s| s.iter().copied().collect()).collect();
        let m = overall_metrics(&p, &g).unwrap();
        let (mut p2, mut g2) = (p.clone(), g.clone());
        let r = rot % p.len();
        p2.rotate_left(r);
        g2.rotate_left(r);
        p2.reverse();
        g2.reverse();
        prop_assert_eq!(overall_metrics(&p2, &g2).unwrap(), m);
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Indices of the `k` largest logits per row, best first; ties go to the
/// lower class index.
pub fn annotate_top_k(logits: &Tensor<f32>, k: usize) -> Result<Vec<Vec<usize>>> {
    if logits.shape().len() != 2 {
        return Err(Error::Dimension(format!("logits must be N x C, got {:?}", logits.shape())));
    }
    let c = logits.shape()[1];
    if k > c {
        return Err(Error::Usage(format!("cannot predict {k} labels out of {c} classes")));
    }
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Micro-averaged precision, recall and F1 over all predicted labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationMetrics {
    pub correct: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn overall_metrics(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<AnnotationMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} samples",
            predicted.len(),
            truth.len()
        )));
    }
    let correct = predicted
        .iter()
        .zip(truth)
        .map(|(p, g)| p.iter().filter(|c| g.contains(c)).count())
        .sum();
    let n_p = predicted.iter().map(Vec::len).sum();
    let n_g = truth.iter().map(Vec::len).sum();
    let precision = ratio(correct, n_p);
    let recall = ratio(correct, n_g);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(AnnotationMetrics {
        correct,
        predicted: n_p,
        ground_truth: n_g,
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_examples() {
        let l = Tensor::new([2, 3], vec![3.0, 1.0, 2.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(annotate_top_k(&l, 1).unwrap(), vec![vec![0], vec![0]]);
        let all = annotate_top_k(&l, 3).unwrap();
        assert_eq!(all[0], vec![0, 2, 1]);
        assert!(matches!(annotate_top_k(&l, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn metric_examples() {
        let g = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let m = overall_metrics(&g, &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = overall_metrics(&[vec![9], vec![8]], &g).unwrap();
        assert_eq!((m.correct, m.precision, m.recall, m.f1), (0, 0.0, 0.0, 0.0));
    }
}

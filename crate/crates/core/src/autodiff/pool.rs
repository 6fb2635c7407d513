use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2x2 max pooling; returns the output and, per output element, the flat
/// input index that won. Ties go to the first element in row-major order.
pub(crate) fn forward<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!(
            "maxpool2x2 needs at least two dimensions, got {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "maxpool2x2 needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let mut oshape = shape.to_vec();
    let n = oshape.len();
    oshape[n - 2] = oh;
    oshape[n - 1] = ow;
    Ok((Tensor::new(oshape, out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_window() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full([1, 1, 4, 4], 2.0));
        let y = tape.maxpool2x2(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        let mut want = [0.0; 16];
        for i in [0, 2, 8, 10] {
            want[i] = 1.0;
        }
        assert_eq!(g, &want[..]);
    }

    #[test]
    fn odd_dims_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        assert!(matches!(forward(&x), Err(Error::Config(_))));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..36).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = Tensor::new([1, 1, 6, 6], x.clone()).unwrap();
        let (y, _) = forward(&t).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(2 * oy + dy) * 6 + 2 * ox + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 3 + ox], m);
            }
        }
    }
}

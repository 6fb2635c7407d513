use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

use super::Var;

/// Geometry and im2col buffer kept for the backward pass.
pub(crate) type Saved<S> = (ConvGeom, Vec<S>);

/// Resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, in_channels, height, width] = input else {
            return dim_err(format!("conv2d input must be B x C x H x W, got {input:?}"));
        };
        let &[out_channels, kc, kh, kw] = kernels else {
            return dim_err(format!("conv2d kernels must be K x C x k x k, got {kernels:?}"));
        };
        if kc != in_channels {
            return dim_err(format!(
                "conv2d kernels {kernels:?} expect {kc} channels, input {input:?} has {in_channels}"
            ));
        }
        if kh != kw || kh == 0 {
            return Err(Error::Config(format!(
                "conv2d kernels must be square and non-empty, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if kh > ph || kw > pw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            out_height: (ph - kh) / stride + 1,
            out_width: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

pub(crate) struct ConvSaved<S> {
    pub input: Var,
    pub kernels: Var,
    pub bias: Var,
    pub geom: ConvGeom,
    /// im2col matrices, one `patch_len x out_plane` block per image.
    pub cols: Vec<S>,
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let drow = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<S: Scalar>(
    input: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<S>, Saved<S>)> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    if bias.len() != g.out_channels {
        return dim_err(format!(
            "conv2d bias {:?} does not match {} kernels",
            bias.shape(),
            g.out_channels
        ));
    }
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![S::zero(); g.batch * g.out_channels * plane];
    let mut cols = vec![S::zero(); g.batch * patch * plane];
    let x = input.data();
    let w = MatRef::new(kernels.data(), g.out_channels, patch);
    let b = bias.data();
    par::for_each_chunk2(
        &mut out,
        g.out_channels * plane,
        &mut cols,
        patch * plane,
        |i, out_i, cols_i| {
            im2col(&g, &x[i * g.in_image()..(i + 1) * g.in_image()], cols_i);
            for (ch, o) in out_i.chunks_mut(plane).enumerate() {
                o.fill(b[ch]);
            }
            gemm(S::one(), w, MatRef::new(cols_i, patch, plane), S::one(), out_i);
        },
    );
    let out = Tensor::new(
        [g.batch, g.out_channels, g.out_height, g.out_width],
        out,
    )?;
    Ok((out, (g, cols)))
}

/// Returns `(d_input, d_kernels, d_bias)`; `d_input` only when requested.
pub(crate) fn backward<S: Scalar>(
    saved: &ConvSaved<S>,
    kernels: &Tensor<S>,
    grad_out: &[S],
    need_input: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let g = saved.geom;
    let plane = g.out_plane();
    let patch = g.patch_len();
    let per_out = g.out_channels * plane;
    let w = MatRef::new(kernels.data(), g.out_channels, patch);

    // Per-image kernel gradients, reduced in image order.
    let partial: Vec<Vec<S>> = par::map_range(g.batch, |i| {
        let go = MatRef::new(&grad_out[i * per_out..(i + 1) * per_out], g.out_channels, plane);
        let cols = MatRef::new(&saved.cols[i * patch * plane..(i + 1) * patch * plane], patch, plane);
        let mut dk = vec![S::zero(); g.out_channels * patch];
        gemm(S::one(), go, cols.t(), S::zero(), &mut dk);
        dk
    });
    let mut dk = vec![S::zero(); g.out_channels * patch];
    for p in &partial {
        dk.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
    }

    let mut db = vec![S::zero(); g.out_channels];
    for img in grad_out.chunks(per_out) {
        for (ch, o) in img.chunks(plane).enumerate() {
            db[ch] += o.iter().copied().sum::<S>();
        }
    }

    let dx = need_input.then(|| {
        let mut dx = vec![S::zero(); g.batch * g.in_image()];
        par::for_each_chunk(&mut dx, g.in_image(), |i, dx_i| {
            let go = MatRef::new(&grad_out[i * per_out..(i + 1) * per_out], g.out_channels, plane);
            let mut dcols = vec![S::zero(); patch * plane];
            gemm(S::one(), w.t(), go, S::zero(), &mut dcols);
            col2im(&g, &dcols, dx_i);
        });
        dx
    });
    (dx, dk, db)
}

//! 2-D convolution over NHWC tensors, lowered to a patch matrix product.

use crate::error::{dim_err, Result};
use crate::linalg::{gemm, MatRef};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero padding so the output size is `ceil(input / stride)`.
    /// Odd padding totals put the extra zero after the input.
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Output length along one axis and the leading pad.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return dim_err("conv2d", "kernel and stride must be positive");
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return dim_err(
                    "conv2d",
                    format!("kernel {kernel} larger than input {input} without padding"),
                );
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

fn geometry(
    x: &[usize],
    f: &[usize],
    stride: (usize, usize),
    padding: Padding,
) -> Result<ConvGeom> {
    if x.len() != 4 || f.len() != 4 {
        return dim_err(
            "conv2d",
            format!("expected NHWC input and kh×kw×cin×cout filters, got {x:?} and {f:?}"),
        );
    }
    if x[3] != f[2] {
        return dim_err(
            "conv2d",
            format!("input channels {} vs filter channels {} ({x:?} vs {f:?})", x[3], f[2]),
        );
    }
    let (oh, pad_top) = conv_output_len(x[1], f[0], stride.0, padding)?;
    let (ow, pad_left) = conv_output_len(x[2], f[1], stride.1, padding)?;
    Ok(ConvGeom {
        n: x[0],
        h: x[1],
        w: x[2],
        cin: x[3],
        kh: f[0],
        kw: f[1],
        cout: f[3],
        sh: stride.0,
        sw: stride.1,
        pad_top,
        pad_left,
        oh,
        ow,
    })
}

/// Input coordinate for an output position and kernel tap, if not padding.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let p = (o * stride + k).checked_sub(pad)?;
    (p < len).then_some(p)
}

fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.positions() * plen];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let Some(iy) = source(oy, ky, g.sh, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = source(ox, kx, g.sw, g.pad_left, g.w) else { continue };
                        let src = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let d = (ky * g.kw + kx) * g.cin;
                        dst[d..d + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut x = vec![0.0; g.n * g.h * g.w * g.cin];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let Some(iy) = source(oy, ky, g.sh, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = source(ox, kx, g.sw, g.pad_left, g.w) else { continue };
                        let dst = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let s = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            x[dst + c] += src[s + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    patches: &[f64],
    filters: &Tensor,
    grad: &Tensor,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (p, plen) = (g.positions(), g.patch_len());
    let gd = grad.data();
    let gx = need_x.then(|| {
        let mut dcols = vec![0.0; p * plen];
        gemm(
            MatRef::new(gd, p, g.cout),
            MatRef::transposed(filters.data(), plen, g.cout),
            &mut dcols,
            false,
        );
        Tensor::new(vec![g.n, g.h, g.w, g.cin], col2im(g, &dcols)).unwrap()
    });
    let gw = need_w.then(|| {
        let mut dw = vec![0.0; plen * g.cout];
        gemm(
            MatRef::transposed(patches, p, plen),
            MatRef::new(gd, p, g.cout),
            &mut dw,
            false,
        );
        Tensor::new(filters.shape().to_vec(), dw).unwrap()
    });
    (gx, gw)
}

impl Tape {
    /// Cross-correlation of `x: N×H×W×Cin` with `filters: kh×kw×Cin×Cout`.
    pub fn conv2d(
        &mut self,
        x: Var,
        filters: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let geom = geometry(self.shape(x), self.shape(filters), stride, padding)?;
        let patches = im2col(&geom, self.value(x).data());
        let mut out = vec![0.0; geom.positions() * geom.cout];
        gemm(
            MatRef::new(&patches, geom.positions(), geom.patch_len()),
            MatRef::new(self.value(filters).data(), geom.patch_len(), geom.cout),
            &mut out,
            false,
        );
        let v = Tensor::new(vec![geom.n, geom.oh, geom.ow, geom.cout], out)?;
        // The patch matrix is only needed for the filter gradient.
        let patches = if self.needs_grad(filters) {
            patches
        } else {
            Vec::new()
        };
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w: filters,
                geom,
                patches,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_output_width() {
        assert_eq!(conv_output_len(60, 18, 6, Padding::Valid).unwrap().0, 8);
        assert_eq!(conv_output_len(8, 3, 1, Padding::Valid).unwrap().0, 6);
        assert!(conv_output_len(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn same_padding_preserves_size_at_unit_stride() {
        for (len, k) in [(4, 8), (4, 6), (4, 4), (2, 2), (1, 1), (7, 3)] {
            let (out, pad) = conv_output_len(len, k, 1, Padding::Same).unwrap();
            assert_eq!(out, len);
            assert_eq!(pad, (k - 1) / 2);
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut t = Tape::new();
        let data = Tensor::from_fn(&[1, 2, 5, 1], |i| i as f64 * 0.3 - 1.0);
        let x = t.leaf(data.clone());
        let w = t.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let y = t.conv2d(x, w, (1, 1), Padding::Valid).unwrap();
        assert_eq!(t.value(y), &data);
    }
}

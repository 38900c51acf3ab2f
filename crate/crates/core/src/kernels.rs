//! Dense loops shared by the forward and backward passes.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work size (multiply-adds) above which a product is split across threads.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// `a` is m×k, `b` is k×n.
    NN,
    /// `a` is m×k, `b` is stored n×k.
    NT,
    /// `a` is stored k×m, `b` is k×n.
    TN,
}

/// `out += op(a) · op(b)` where `out` is m×n.
///
/// Every output row is reduced in a fixed order, so threaded and serial runs
/// give bitwise-identical results.
pub(crate) fn gemm<T: Scalar>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    (m, k, n): (usize, usize, usize),
    layout: Layout,
) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let row = |i: usize, dst: &mut [T]| match layout {
        Layout::NN => {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += aip * bv;
                }
            }
        }
        Layout::NT => {
            let arow = &a[i * k..(i + 1) * k];
            for (j, d) in dst.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                *d += acc;
            }
        }
        Layout::TN => {
            for p in 0..k {
                let api = a[p * m + i];
                if api == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += api * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, dst)| row(i, dst));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, dst)| row(i, dst));
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub top: usize,
    pub left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output position (oh, ow) and kernel tap (ki, kj), if not padding.
    #[inline]
    fn source(&self, oh: usize, ow: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oh * self.stride + ki).checked_sub(self.top)?;
        let x = (ow * self.stride + kj).checked_sub(self.left)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one C×H×W image into a (C·k·k)×(Ho·Wo) column matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, hw, ol) = (g.kernel, g.height * g.width, g.out_len());
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * ol..][..ol];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        row[oh * g.out_w + ow] = match g.source(oh, ow, ki, kj) {
                            Some((y, x)) => image[c * hw + y * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let (k, hw, ol) = (g.kernel, g.height * g.width, g.out_len());
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * ol..][..ol];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        if let Some((y, x)) = g.source(oh, ow, ki, kj) {
                            image[c * hw + y * g.width + x] += row[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

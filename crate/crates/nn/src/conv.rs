//! im2col / col2im lowering shared by convolution and transposed convolution.

use crate::scalar::Scalar;

/// Geometry of a zero-padded square-kernel convolution over one plane stack.
///
/// `h`/`w` are the dense ("image") side, `oh`/`ow` the strided ("column") side.
/// A transposed convolution uses the same geometry with the roles of its input
/// and output exchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            oh: (h + 2 * pad - kernel) / stride + 1,
            ow: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// True when the column matrix is the image itself (1×1, stride 1, no pad).
    pub fn is_identity(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output positions `o` with `o·stride + offset - pad` inside `[0, len)`.
    #[inline]
    fn valid_range(&self, offset: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + offset >= pad
        let lo = if offset >= self.pad {
            0
        } else {
            (self.pad - offset).div_ceil(s)
        };
        // largest o with o*s + offset - pad < len  <=>  o*s < len + pad - offset
        let hi = if len + self.pad <= offset {
            0
        } else {
            ((len + self.pad - offset - 1) / s + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds `image` (`channels·h·w`) into `cols` (`col_rows × col_cols`).
pub fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.oh * g.ow;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let src = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.ow);
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ki - g.pad;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if s == 1 {
                        let x0 = xlo + kj - g.pad;
                        drow[xlo..xhi].copy_from_slice(&srow[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *d = srow[ox * s + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Folds `cols` back onto `image`, accumulating overlapping contributions.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.oh * g.ow;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let dst = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            let (ylo, yhi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (xlo, xhi) = g.valid_range(kj, g.w, g.ow);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * s + ki - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    if s == 1 {
                        let x0 = xlo + kj - g.pad;
                        for (d, &v) in drow[x0..x0 + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                            *d += v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            drow[ox * s + kj - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

use super::Element;

/// Geometry of a square-kernel 2-D cross-correlation on a `C×H×W` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 {
            return None;
        }
        let span_h = (h + 2 * pad).checked_sub(k)?;
        let span_w = (w + 2 * pad).checked_sub(k)?;
        if span_h % stride != 0 || span_w % stride != 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Visits `(col_row, out_pixel, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.h_out {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.w_out {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.w_out + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into a `(C·k·k) × (H'·W')` column matrix.
    pub fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let n = self.out_len();
        let mut cols = vec![T::zero(); self.patch_len() * n];
        self.for_each_tap(|row, px, off| cols[row * n + px] = x[off]);
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back onto the map.
    pub fn col2im_add<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.out_len();
        self.for_each_tap(|row, px, off| dx[off] = dx[off] + cols[row * n + px]);
    }
}

/// Source taps for one output position of a 2× upsample along one axis,
/// using the half-pixel (align-corners-false) convention.
pub(crate) fn bilinear_taps(out_idx: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

//! im2col convolution kernels over `Cin×B×H×W` inputs, where `B` is a batch
//! of independent planes (frames). 1D convolution is the `H = 1` case.

use super::Element;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn out_extent(
    op: &'static str,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(format!("{op}: stride must be positive")));
    }
    if len + 2 * pad < k {
        return Err(Error::ShapeMismatch {
            op,
            dim: "padded input extent",
            expected: k,
            found: len + 2 * pad,
        });
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        cin: usize,
        batch: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Result<Self> {
        let oh = out_extent(op, h, kh, sh, ph)?;
        let ow = out_extent(op, w, kw, sw, pw)?;
        Ok(Self {
            cin,
            batch,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

pub(crate) fn im2col<E: Element>(x: &[E], g: &ConvGeom) -> Vec<E> {
    let ncols = g.col_cols();
    let mut cols = vec![E::zero(); g.col_rows() * ncols];
    let plane = g.h * g.w;
    let mut row = 0;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(ci * g.batch + b) * plane..(ci * g.batch + b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = (b * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

pub(crate) fn col2im<E: Element>(cols: &[E], g: &ConvGeom, dx: &mut [E]) {
    let ncols = g.col_cols();
    let plane = g.h * g.w;
    let mut row = 0;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut dx[(ci * g.batch + b) * plane..(ci * g.batch + b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = (b * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + src[base + ox];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Returns the `Cout×(B·OH·OW)` output and the column matrix (`None` for
/// pointwise convolutions, whose columns are the input).
pub(crate) fn conv_forward<E: Element>(
    x: &[E],
    weight: &[E],
    cout: usize,
    g: &ConvGeom,
) -> (Vec<E>, Option<Vec<E>>) {
    let k = g.col_rows();
    let n = g.col_cols();
    let mut out = vec![E::zero(); cout * n];
    let cols = (!g.is_pointwise()).then(|| im2col(x, g));
    let b = cols.as_deref().unwrap_or(x);
    E::gemm(
        cout,
        k,
        n,
        E::one(),
        weight,
        (k as isize, 1),
        b,
        (n as isize, 1),
        E::zero(),
        &mut out,
        (n as isize, 1),
    );
    (out, cols)
}

/// Gradients `(dx, dw)` given the output gradient and forward columns.
pub(crate) fn conv_backward<E: Element>(
    dy: &[E],
    weight: &[E],
    cols: &[E],
    cout: usize,
    g: &ConvGeom,
) -> (Vec<E>, Vec<E>) {
    let k = g.col_rows();
    let n = g.col_cols();
    let mut dw = vec![E::zero(); cout * k];
    // dW = dY · colsᵀ
    E::gemm(
        cout,
        n,
        k,
        E::one(),
        dy,
        (n as isize, 1),
        cols,
        (1, n as isize),
        E::zero(),
        &mut dw,
        (k as isize, 1),
    );
    // dcols = Wᵀ · dY
    let mut dcols = vec![E::zero(); k * n];
    E::gemm(
        k,
        cout,
        n,
        E::one(),
        weight,
        (1, k as isize),
        dy,
        (n as isize, 1),
        E::zero(),
        &mut dcols,
        (n as isize, 1),
    );
    let dx = if g.is_pointwise() {
        dcols
    } else {
        let mut dx = vec![E::zero(); g.cin * g.batch * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    };
    (dx, dw)
}

//! Numeric kernels shared by the tape ops and by non-differentiated callers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial padding rule for `conv2d`.
///
/// `Valid` keeps only fully covered windows: `out = (in - k) / stride + 1`.
/// `Same` follows the usual `ceil(in / stride)` rule, padding with zeros; when
/// the total padding is odd the extra row/column goes to the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], filters: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", "input rank", 4, input.len()));
        }
        if filters.len() != 4 {
            return Err(Error::shape("conv2d", "filter rank", 4, filters.len()));
        }
        let [batch, in_h, in_w, cin] = [input[0], input[1], input[2], input[3]];
        let [k, k2, fcin, cout] = [filters[0], filters[1], filters[2], filters[3]];
        if k2 != k {
            return Err(Error::shape("conv2d", "filter width", k, k2));
        }
        if fcin != cin {
            return Err(Error::shape("conv2d", "input channels", fcin, cin));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        if k == 0 || cout == 0 || batch == 0 {
            return Err(Error::invalid("conv2d: empty filter or batch"));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if k > in_h {
                    return Err(Error::shape("conv2d", "input height (>= filter size)", k, in_h));
                }
                if k > in_w {
                    return Err(Error::shape("conv2d", "input width (>= filter size)", k, in_w));
                }
                ((in_h - k) / stride + 1, (in_w - k) / stride + 1, 0, 0)
            }
            Padding::Same => {
                if in_h == 0 || in_w == 0 {
                    return Err(Error::invalid("conv2d: empty spatial dims"));
                }
                let oh = in_h.div_ceil(stride);
                let ow = in_w.div_ceil(stride);
                let th = ((oh - 1) * stride + k).saturating_sub(in_h);
                let tw = ((ow - 1) * stride + k).saturating_sub(in_w);
                (oh, ow, th / 2, tw / 2)
            }
        };
        Ok(Self {
            batch,
            in_h,
            in_w,
            cin,
            k,
            cout,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.cout]
    }
}

/// `C = A·B + beta·C` with optional transposition of the stored operands.
///
/// `A` is logically `m×k` (stored `k×m` when `a_t`), `B` is logically `k×n`
/// (stored `n×k` when `b_t`), `C` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe in-bounds views.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

impl ConvGeom {
    /// `1x1`, stride 1, no padding: the convolution is a plain matrix product
    /// over pixels.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input origin of output position `o` and the in-bounds filter taps.
    fn taps(&self, o: usize, pad: usize, limit: usize) -> (isize, usize, usize) {
        let start = (o * self.stride) as isize - pad as isize;
        let lo = (-start).max(0) as usize;
        let hi = ((limit as isize - start).max(0) as usize).min(self.k);
        (start, lo, hi.max(lo))
    }

    /// Calls `f(out_offset, in_offset, w_offset)` for every valid
    /// (output pixel, filter tap) pair; offsets are in units of pixels times
    /// channels.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (cin, cout) = (self.cin, self.cout);
        for b in 0..self.batch {
            let img = b * self.in_h * self.in_w;
            for oy in 0..self.out_h {
                let (y0, ky_lo, ky_hi) = self.taps(oy, self.pad_top, self.in_h);
                for ox in 0..self.out_w {
                    let (x0, kx_lo, kx_hi) = self.taps(ox, self.pad_left, self.in_w);
                    let o = ((b * self.out_h + oy) * self.out_w + ox) * cout;
                    for ky in ky_lo..ky_hi {
                        let iy = (y0 + ky as isize) as usize;
                        for kx in kx_lo..kx_hi {
                            let ix = (x0 + kx as isize) as usize;
                            f(o, (img + iy * self.in_w + ix) * cin, (ky * self.k + kx) * cin * cout);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let cin = g.cin;
    let mut cols = vec![0.0; g.rows() * plen];
    let mut row_of = |o: usize| o / g.cout * plen;
    g.for_each_tap(|o, i, wb| {
        let off = row_of(o) + wb / g.cout;
        cols[off..off + cin].copy_from_slice(&x[i..i + cin]);
    });
    let _ = &mut row_of;
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plen = g.patch_len();
    let cin = g.cin;
    g.for_each_tap(|o, i, wb| {
        let off = o / g.cout * plen + wb / g.cout;
        for (d, c) in dx[i..i + cin].iter_mut().zip(&cols[off..off + cin]) {
            *d += c;
        }
    });
}

/// Forward cross-correlation without recording anything. Returns the output
/// and, unless the convolution is pointwise, the im2col buffer.
pub(crate) fn conv2d_raw(x: &[f64], w: &[f64], g: &ConvGeom) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut out = vec![0.0; g.rows() * g.cout];
    if g.is_pointwise() {
        gemm(g.rows(), g.cin, g.cout, x, false, w, false, &mut out, 0.0);
        return (out, None);
    }
    let cols = im2col(x, g);
    gemm(g.rows(), g.patch_len(), g.cout, &cols, false, w, false, &mut out, 0.0);
    (out, Some(cols))
}

/// Accumulates `dL/dW` into `dw`; `cols` is the im2col buffer of `x`.
pub(crate) fn conv2d_grad_filters(x: &[f64], cols: Option<&[f64]>, gy: &[f64], g: &ConvGeom, dw: &mut [f64]) {
    match cols {
        None => gemm(g.cin, g.rows(), g.cout, x, true, gy, false, dw, 1.0),
        Some(cols) => gemm(g.patch_len(), g.rows(), g.cout, cols, true, gy, false, dw, 1.0),
    }
}

/// Accumulates `dL/dX` into `dx`.
pub(crate) fn conv2d_grad_input(w: &[f64], gy: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    if g.is_pointwise() {
        gemm(g.rows(), g.cout, g.cin, gy, false, w, true, dx, 1.0);
        return;
    }
    let mut dcols = vec![0.0; g.rows() * g.patch_len()];
    gemm(g.rows(), g.cout, g.patch_len(), gy, false, w, true, &mut dcols, 0.0);
    col2im(&dcols, g, dx);
}

/// Plain `conv2d` on tensors, for callers outside the tape.
pub fn conv2d_forward(input: &Tensor, filters: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), filters.shape(), stride, padding)?;
    if let Some(index) = filters.first_non_finite() {
        return Err(Error::NonFinite { op: "conv2d", index });
    }
    let (out, _) = conv2d_raw(input.data(), filters.data(), &g);
    Tensor::new(g.output_shape(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub window: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    /// Non-overlapping windows; trailing partial windows are dropped.
    pub fn new(input: &[usize], window: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("maxpool2d", "input rank", 4, input.len()));
        }
        if window == 0 {
            return Err(Error::invalid("maxpool2d: window must be >= 1"));
        }
        let [batch, in_h, in_w, channels] = [input[0], input[1], input[2], input[3]];
        if window > in_h {
            return Err(Error::shape("maxpool2d", "input height (>= window)", window, in_h));
        }
        if window > in_w {
            return Err(Error::shape("maxpool2d", "input width (>= window)", window, in_w));
        }
        Ok(Self {
            batch,
            in_h,
            in_w,
            channels,
            window,
            out_h: in_h / window,
            out_w: in_w / window,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.channels]
    }
}

/// Returns pooled values and, per output element, the flat input index of the
/// maximum (lowest index on ties).
pub(crate) fn maxpool_raw(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let n = g.batch * g.out_h * g.out_w * g.channels;
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![0usize; n];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let obase = ((b * g.out_h + oy) * g.out_w + ox) * g.channels;
                // Scan window positions in row-major order so strict `>` keeps the first maximum.
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let iy = oy * g.window + dy;
                        let ix = ox * g.window + dx;
                        let ibase = ((b * g.in_h + iy) * g.in_w + ix) * g.channels;
                        for c in 0..g.channels {
                            let v = x[ibase + c];
                            if v > out[obase + c] || (dy == 0 && dx == 0) {
                                out[obase + c] = v;
                                arg[obase + c] = ibase + c;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal definition of padded cross-correlation.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.rows() * g.cout];
        for b in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for co in 0..g.cout {
                        let mut acc = 0.0;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xi = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.cin + ci;
                                    acc += x[xi] * w[((ky * g.k + kx) * g.cin + ci) * g.cout + co];
                                }
                            }
                        }
                        out[((b * g.out_h + oy) * g.out_w + ox) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn direct_conv_matches_definition() {
        let cases = [
            ([2, 7, 6, 3], [3, 3, 3, 4], 1, Padding::Same),
            ([2, 7, 6, 3], [3, 3, 3, 4], 2, Padding::Same),
            ([1, 8, 8, 2], [5, 5, 2, 3], 1, Padding::Valid),
            ([1, 9, 8, 2], [2, 2, 2, 5], 3, Padding::Valid),
            ([3, 4, 4, 6], [1, 1, 6, 2], 1, Padding::Same),
        ];
        for (xs, ws, stride, padding) in cases {
            let g = ConvGeom::new(&xs, &ws, stride, padding).unwrap();
            let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|i| (i as f64 * 0.37).sin()).collect();
            let w: Vec<f64> = (0..ws.iter().product::<usize>()).map(|i| (i as f64 * 0.11).cos()).collect();
            let (got, _) = conv2d_raw(&x, &w, &g);
            let want = naive_conv(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{xs:?} {ws:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeom::new(&[1, 32, 32, 3], &[5, 5, 3, 8], 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (32, 32, 2, 2));
        let g = ConvGeom::new(&[1, 7, 7, 1], &[2, 2, 1, 1], 2, Padding::Same).unwrap();
        // ceil(7/2) = 4; total pad = 3*2 + 2 - 7 = 1 -> top 0, bottom 1
        assert_eq!((g.out_h, g.pad_top), (4, 0));
    }

    #[test]
    fn valid_geometry_and_errors() {
        let g = ConvGeom::new(&[2, 9, 9, 1], &[3, 3, 1, 1], 2, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let err = ConvGeom::new(&[1, 2, 2, 1], &[3, 3, 1, 1], 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let err = ConvGeom::new(&[1, 4, 4, 2], &[3, 3, 1, 1], 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        assert!(ConvGeom::new(&[1, 4, 4, 1], &[3, 3, 1, 1], 0, Padding::Valid).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        for y in [1e-6, 0.1, 1.0, 5.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}

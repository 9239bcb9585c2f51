//! Dense `f64` tensors and the numeric kernels the autodiff tape is built on.
//!
//! Image tensors use NCHW layout. Convolution weights are `[out, in, k, k]`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "bad reshape to {shape:?}");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "kernel {k} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - k) / stride + 1
}

/// `c = op(a) * op(b)` for row-major matrices, with optional transposes.
/// `a` is `[m, k]` (or `[k, m]` if `ta`), `b` is `[k, n]` (or `[n, k]` if `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of rank-2 tensors with optional transposes.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert_eq!(a.shape.len(), 2, "matmul lhs must be rank 2, got {:?}", a.shape);
    assert_eq!(b.shape.len(), 2, "matmul rhs must be rank 2, got {:?}", b.shape);
    let (m, k) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (k2, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, ta, &b.data, tb, &mut out, false);
    Tensor::new([m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: conv_out_size(h, k, stride, pad),
            wo: conv_out_size(w, k, stride, pad),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation with zero padding. `x: [n, c, h, w]`, `w: [o, c, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, ci, k, k2) = w.dims4();
    assert_eq!(c, ci, "conv2d channel mismatch: input {:?}, weight {:?}", x.shape, w.shape);
    assert_eq!(k, k2, "conv2d kernels must be square");
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let in_sz = c * h * wd;
    let out_sz = o * g.ho * g.wo;
    let mut out = vec![0.0; n * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * g.col_cols()] };
    for b in 0..n {
        let xb = &x.data[b * in_sz..(b + 1) * in_sz];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm(o, g.col_rows(), g.col_cols(), &w.data, false, src, false, &mut out[b * out_sz..(b + 1) * out_sz], false);
    }
    Tensor::new([n, o, g.ho, g.wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, in_h: usize, in_w: usize, stride: usize, pad: usize) -> Tensor {
    let (n, o, ho, wo) = gy.dims4();
    let (o2, c, k, _) = w.dims4();
    assert_eq!(o, o2, "conv2d_input_grad channel mismatch");
    let g = ConvGeom::new(c, in_h, in_w, k, stride, pad);
    assert_eq!((g.ho, g.wo), (ho, wo), "conv2d_input_grad geometry mismatch");
    let in_sz = c * in_h * in_w;
    let out_sz = o * ho * wo;
    let mut dx = vec![0.0; n * in_sz];
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..n {
        let gb = &gy.data[b * out_sz..(b + 1) * out_sz];
        if g.is_pointwise() {
            gemm(c, o, ho * wo, &w.data, true, gb, false, &mut dx[b * in_sz..(b + 1) * in_sz], false);
        } else {
            gemm(g.col_rows(), o, g.col_cols(), &w.data, true, gb, false, &mut cols, false);
            col2im(&cols, &g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    Tensor::new([n, c, in_h, in_w], dx)
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (n2, o, ho, wo) = gy.dims4();
    assert_eq!(n, n2, "conv2d_weight_grad batch mismatch");
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    assert_eq!((g.ho, g.wo), (ho, wo), "conv2d_weight_grad geometry mismatch");
    let in_sz = c * h * wd;
    let out_sz = o * ho * wo;
    let mut dw = vec![0.0; o * g.col_rows()];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * g.col_cols()] };
    for b in 0..n {
        let xb = &x.data[b * in_sz..(b + 1) * in_sz];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm(o, g.col_cols(), g.col_rows(), &gy.data[b * out_sz..(b + 1) * out_sz], false, src, true, &mut dw, true);
    }
    Tensor::new([o, c, k, k], dw)
}

/// 2x2 average pooling (equivalently, 2x bilinear downsampling with
/// half-pixel centers). Odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn avg_pool2_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ho, wo) = g.dims4();
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g.data[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let v = 0.25 * src[y * wo + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Taps of 2x bilinear upsampling along one axis (half-pixel centers,
/// clamped edges): output `j` reads `(i0, w0), (i1, w1)`.
fn up2_taps(len: usize, j: usize) -> (usize, f64, usize, f64) {
    let i = j / 2;
    let nb = if j % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(len - 1) };
    (i, 0.75, nb, 0.25)
}

/// 2x bilinear upsampling with half-pixel centers and edge clamping.
pub fn up2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    let xt: Vec<_> = (0..wo).map(|j| up2_taps(w, j)).collect();
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, wy0, y1, wy1) = up2_taps(h, oy);
            for (ox, &(x0, wx0, x1, wx1)) in xt.iter().enumerate() {
                dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn up2_adjoint(g: &Tensor) -> Tensor {
    let (n, c, ho, wo) = g.dims4();
    let (h, w) = (ho / 2, wo / 2);
    let mut out = vec![0.0; n * c * h * w];
    let xt: Vec<_> = (0..wo).map(|j| up2_taps(w, j)).collect();
    for p in 0..n * c {
        let src = &g.data[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (y0, wy0, y1, wy1) = up2_taps(h, oy);
            for (ox, &(x0, wx0, x1, wx1)) in xt.iter().enumerate() {
                let v = src[oy * wo + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Flat source indices of 2x2 max pooling.
pub fn max_pool2_indices(x: &Tensor) -> Vec<usize> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let cands = [
                    base + 2 * y * w + 2 * xx,
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ];
                let best = cands.iter().copied().fold(cands[0], |b, i| if x.data[i] > x.data[b] { i } else { b });
                idx.push(best);
            }
        }
    }
    idx
}

//! 3-D convolution (cross-correlation, zero padding) and its transpose.
//!
//! Both ops share three kernels: forward, data-gradient and weight-gradient.
//! Stride-1 geometries use the direct kernels in `direct`; everything else
//! goes through im2col/GEMM, split into fixed blocks of output planes that
//! depend only on the geometry. Either way every reduction runs in the same
//! order regardless of how the caller schedules batches.

use super::direct;
use super::{mismatch, Tensor, TensorError};
use crate::scalar::{gemm_strided, Scalar};

/// Upper bound on im2col buffer elements per block.
const COL_BLOCK_ELEMS: usize = 1 << 20;

/// Geometry of a direct convolution `input → output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    /// Output extent `⌊(n + 2p − k)/s⌋ + 1` per axis.
    pub fn new(
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self, TensorError> {
        let mut output = [0; 3];
        for i in 0..3 {
            if kernel[i] == 0 || stride[i] == 0 {
                return Err(mismatch("conv3d", format!("kernel {kernel:?} stride {stride:?}")));
            }
            let span = input[i] + 2 * pad[i];
            if span < kernel[i] {
                return Err(mismatch(
                    "conv3d",
                    format!("input {input:?} with pad {pad:?} smaller than kernel {kernel:?}"),
                ));
            }
            output[i] = (span - kernel[i]) / stride[i] + 1;
        }
        Ok(Self {
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix.
    fn k_rows(&self) -> usize {
        self.cin * self.taps()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output-plane blocks `[start, end)` along the first spatial axis.
    fn blocks(&self) -> Vec<(usize, usize)> {
        let per = (COL_BLOCK_ELEMS / (self.k_rows() * self.plane()).max(1)).max(1);
        (0..self.output[0])
            .step_by(per)
            .map(|s| (s, (s + per).min(self.output[0])))
            .collect()
    }
}

/// Output indices `o` with `0 ≤ o·stride + offset < len`.
#[inline]
fn valid(out: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (len as isize - offset + s - 1).div_euclid(s);
    let lo = lo.clamp(0, out as isize) as usize;
    let hi = hi.clamp(0, out as isize) as usize;
    (lo, hi.max(lo))
}

/// Visit every (row, column) of the im2col matrix for output planes
/// `[d0, d1)` that maps inside the input, as `(row, col, input index)`.
/// Columns that map outside are skipped.
#[inline]
fn for_each_tap(g: &ConvGeometry, d0: usize, d1: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [o1, o2] = [g.output[1], g.output[2]];
    let plane = g.plane();
    let mut row = 0;
    for ci in 0..g.cin {
        let cbase = ci * i0 * i1 * i2;
        for a in 0..k0 {
            let off0 = a as isize - g.pad[0] as isize;
            let (lo0, hi0) = valid(g.output[0], i0, g.stride[0], off0);
            for b in 0..k1 {
                let off1 = b as isize - g.pad[1] as isize;
                let (lo1, hi1) = valid(o1, i1, g.stride[1], off1);
                for c in 0..k2 {
                    let off2 = c as isize - g.pad[2] as isize;
                    let (lo2, hi2) = valid(o2, i2, g.stride[2], off2);
                    for od in d0.max(lo0)..d1.min(hi0) {
                        let id = (od as isize * g.stride[0] as isize + off0) as usize;
                        for oh in lo1..hi1 {
                            let ih = (oh as isize * g.stride[1] as isize + off1) as usize;
                            let src = cbase + (id * i1 + ih) * i2;
                            let col = (od - d0) * plane + oh * o2;
                            for ow in lo2..hi2 {
                                let iw = (ow as isize * g.stride[2] as isize + off2) as usize;
                                f(row, col + ow, src + iw);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], d0: usize, d1: usize, cols: &mut [T]) {
    let len = (d1 - d0) * g.plane();
    cols[..g.k_rows() * len].fill(T::zero());
    for_each_tap(g, d0, d1, |r, c, i| cols[r * len + c] = x[i]);
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], d0: usize, d1: usize, dx: &mut [T]) {
    let len = (d1 - d0) * g.plane();
    for_each_tap(g, d0, d1, |r, c, i| dx[i] += cols[r * len + c]);
}

fn unit_stride(g: &ConvGeometry) -> bool {
    g.stride == [1, 1, 1]
}

/// `y = W ⋆ x` for one sample (no bias).
pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], y: &mut [T]) {
    if unit_stride(g) {
        direct::forward(g, x, w, y)
    } else {
        gemm_forward(g, x, w, y)
    }
}

/// `dx += Wᵀ ⋆ dy` for one sample.
pub(crate) fn conv_backward_data<T: Scalar>(g: &ConvGeometry, dy: &[T], w: &[T], dx: &mut [T]) {
    if unit_stride(g) {
        direct::backward_data(g, dy, w, dx)
    } else {
        gemm_backward_data(g, dy, w, dx)
    }
}

/// `dw += dy ⋆ x` for one sample.
pub(crate) fn conv_backward_weight<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T], dw: &mut [T]) {
    if unit_stride(g) {
        direct::backward_weight(g, x, dy, dw)
    } else {
        gemm_backward_weight(g, x, dy, dw)
    }
}

/// `y[cout, out] = W[cout, K] · cols[K, out]`.
fn gemm_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], y: &mut [T]) {
    let (k, p) = (g.k_rows(), g.out_len());
    let mut cols = vec![T::zero(); k * g.plane() * g.blocks()[0].1];
    for (d0, d1) in g.blocks() {
        let len = (d1 - d0) * g.plane();
        im2col(g, x, d0, d1, &mut cols);
        let start = d0 * g.plane();
        gemm_strided(
            g.cout, k, len, T::one(), w, k, false, &cols, len, false, T::zero(),
            &mut y[start..], p,
        );
    }
}

/// `dx += col2im(Wᵀ · dy)`.
fn gemm_backward_data<T: Scalar>(g: &ConvGeometry, dy: &[T], w: &[T], dx: &mut [T]) {
    let (k, p) = (g.k_rows(), g.out_len());
    let mut cols = vec![T::zero(); k * g.plane() * g.blocks()[0].1];
    for (d0, d1) in g.blocks() {
        let len = (d1 - d0) * g.plane();
        let start = d0 * g.plane();
        gemm_strided(
            k, g.cout, len, T::one(), w, k, true, &dy[start..], p, false, T::zero(),
            &mut cols, len,
        );
        col2im_add(g, &cols, d0, d1, dx);
    }
}

/// `dw += dy · colsᵀ`.
fn gemm_backward_weight<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T], dw: &mut [T]) {
    let (k, p) = (g.k_rows(), g.out_len());
    let mut cols = vec![T::zero(); k * g.plane() * g.blocks()[0].1];
    for (d0, d1) in g.blocks() {
        let len = (d1 - d0) * g.plane();
        im2col(g, x, d0, d1, &mut cols);
        let start = d0 * g.plane();
        gemm_strided(
            g.cout, len, k, T::one(), &dy[start..], p, false, &cols, len, true, T::one(),
            dw, k,
        );
    }
}

fn dims5(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 5], TensorError> {
    t.shape()
        .try_into()
        .map_err(|_| mismatch(op, format!("expected rank 5, got {:?}", t.shape())))
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], n: usize, c: usize, inner: usize) {
    for s in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            let base = (s * c + ch) * inner;
            y[base..base + inner].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], n: usize, c: usize, inner: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for s in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let base = (s * c + ch) * inner;
            *d += g[base..base + inner].iter().copied().sum::<T>();
        }
    }
    db
}

/// Cross-correlation of `x: [N, Cin, D, H, W]` with `w: [Cout, Cin, kd, kh, kw]`
/// plus bias `b: [Cout]`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>, TensorError> {
    let [n, cin, d, h, wd] = dims5("conv3d", x)?;
    let [cout, wcin, kd, kh, kw] = dims5("conv3d", w)?;
    if wcin != cin || b.numel() != cout {
        return Err(mismatch(
            "conv3d",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let g = ConvGeometry::new(cin, cout, [d, h, wd], [kd, kh, kw], stride, pad)?;
    let (il, ol) = (cin * g.in_len(), cout * g.out_len());
    let mut y = vec![T::zero(); n * ol];
    for s in 0..n {
        conv_forward(&g, &x.data()[s * il..(s + 1) * il], w.data(), &mut y[s * ol..(s + 1) * ol]);
    }
    add_bias(&mut y, b.data(), n, cout, g.out_len());
    let (xv, wv) = (x.data_arc(), w.data_arc());
    Tensor::from_op(
        "conv3d",
        vec![n, cout, g.output[0], g.output[1], g.output[2]],
        y,
        vec![x.clone(), w.clone(), b.clone()],
        move |dy, need| {
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * il];
                for s in 0..n {
                    conv_backward_data(&g, &dy[s * ol..(s + 1) * ol], &wv, &mut dx[s * il..(s + 1) * il]);
                }
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); wv.len()];
                for s in 0..n {
                    conv_backward_weight(&g, &xv[s * il..(s + 1) * il], &dy[s * ol..(s + 1) * ol], &mut dw);
                }
                dw
            });
            let db = need[2].then(|| bias_grad(dy, n, cout, g.out_len()));
            vec![dx, dw, db]
        },
    )
}

/// Transposed convolution, the linear adjoint of [`conv3d`] for the same
/// weights. `x: [N, Cin, D, H, W]`, `w: [Cin, Cout, kd, kh, kw]`, output
/// extent `(n − 1)·s − 2p + k` per axis.
pub fn conv3d_transpose<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>, TensorError> {
    let [n, cin, d, h, wd] = dims5("conv3d_transpose", x)?;
    let [wcin, cout, kd, kh, kw] = dims5("conv3d_transpose", w)?;
    if wcin != cin || b.numel() != cout {
        return Err(mismatch(
            "conv3d_transpose",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let kernel = [kd, kh, kw];
    let mut out = [0usize; 3];
    for (i, &len) in [d, h, wd].iter().enumerate() {
        let full = (len - 1) * stride[i] + kernel[i];
        if stride[i] == 0 || full <= 2 * pad[i] {
            return Err(mismatch(
                "conv3d_transpose",
                format!("empty output for input {:?}, stride {stride:?}, pad {pad:?}", [d, h, wd]),
            ));
        }
        out[i] = full - 2 * pad[i];
    }
    // The direct convolution this op is the adjoint of: out → [d, h, wd].
    let g = ConvGeometry::new(cout, cin, out, kernel, stride, pad)?;
    debug_assert_eq!(g.output, [d, h, wd]);
    let (xl, yl) = (cin * g.out_len(), cout * g.in_len());
    let mut y = vec![T::zero(); n * yl];
    for s in 0..n {
        conv_backward_data(&g, &x.data()[s * xl..(s + 1) * xl], w.data(), &mut y[s * yl..(s + 1) * yl]);
    }
    add_bias(&mut y, b.data(), n, cout, g.in_len());
    let (xv, wv) = (x.data_arc(), w.data_arc());
    Tensor::from_op(
        "conv3d_transpose",
        vec![n, cout, out[0], out[1], out[2]],
        y,
        vec![x.clone(), w.clone(), b.clone()],
        move |dy, need| {
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * xl];
                for s in 0..n {
                    conv_forward(&g, &dy[s * yl..(s + 1) * yl], &wv, &mut dx[s * xl..(s + 1) * xl]);
                }
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); wv.len()];
                for s in 0..n {
                    conv_backward_weight(&g, &dy[s * yl..(s + 1) * yl], &xv[s * xl..(s + 1) * xl], &mut dw);
                }
                dw
            });
            let db = need[2].then(|| bias_grad(dy, n, cout, g.in_len()));
            vec![dx, dw, db]
        },
    )
}

/// Strided non-overlapping downsampling: a convolution whose kernel equals
/// its stride, without padding.
pub fn downsample_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: [usize; 3],
) -> Result<Tensor<T>, TensorError> {
    if w.shape().len() != 5 || w.shape()[2..] != stride[..] {
        return Err(mismatch(
            "downsample_conv",
            format!("kernel {:?} must equal stride {stride:?}", w.shape()),
        ));
    }
    conv3d(x, w, b, stride, [0; 3])
}

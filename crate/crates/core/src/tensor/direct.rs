//! Direct kernels for stride-1 convolutions.
//!
//! The input is copied into a zero-padded grid so every kernel tap becomes
//! a constant offset into the flattened volume. Outputs are computed on
//! the padded grid (row stride of the padded input) and the valid region is
//! gathered afterwards; positions outside it are discarded in the forward
//! pass and held at zero in the backward passes.

use super::conv::ConvGeometry;
use crate::scalar::Scalar;

/// Lanes per inner block.
const L: usize = 16;
/// Output channels accumulated together per input-vector load.
const CB: usize = 4;
/// Lanes and cache block for the weight-gradient reduction.
const LW: usize = 16;
const QB: usize = 1024;

pub(crate) struct Grid {
    /// Padded input extents.
    dp: [usize; 3],
    /// Padded grid volume.
    vp: usize,
    /// Grid positions covering every valid output, rounded up to `L`.
    q: usize,
    /// Offset of each tap, row-major over `(a, b, c)`.
    offsets: Vec<usize>,
    max_off: usize,
}

impl Grid {
    pub(crate) fn new(g: &ConvGeometry) -> Self {
        debug_assert_eq!(g.stride, [1, 1, 1]);
        let dp = [
            g.input[0] + 2 * g.pad[0],
            g.input[1] + 2 * g.pad[1],
            g.input[2] + 2 * g.pad[2],
        ];
        let plane = dp[1] * dp[2];
        let mut offsets = Vec::with_capacity(g.kernel.iter().product());
        for a in 0..g.kernel[0] {
            for b in 0..g.kernel[1] {
                for c in 0..g.kernel[2] {
                    offsets.push(a * plane + b * dp[2] + c);
                }
            }
        }
        let [o0, o1, o2] = g.output;
        let last = (o0 - 1) * plane + (o1 - 1) * dp[2] + o2;
        Grid {
            dp,
            vp: dp[0] * plane,
            q: last.div_ceil(L) * L,
            max_off: *offsets.last().unwrap(),
            offsets,
        }
    }

    /// Buffer length per channel that keeps every `L`-wide read in bounds.
    fn padded_len(&self) -> usize {
        (self.vp.max(self.q + self.max_off) + L).next_multiple_of(L)
    }

    #[inline]
    fn out_pos(&self, od: usize, oh: usize, ow: usize) -> usize {
        (od * self.dp[1] + oh) * self.dp[2] + ow
    }
}

/// Copy `[C, D, H, W]` into zero-padded `[C, stride]` grids, placing voxel
/// `(d, h, w)` at grid position `lead + (d + p0, h + p1, w + p2)`.
fn pad_into<T: Scalar>(
    src: &[T],
    c: usize,
    dims: [usize; 3],
    pad: [usize; 3],
    grid: &Grid,
    lead: usize,
    stride: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * stride];
    let [d, h, w] = dims;
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ch * d + z) * h + y) * w;
                let t = ch * stride + lead + grid.out_pos(z + pad[0], y + pad[1], pad[2]);
                out[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    out
}

/// `out[co][q] = Σ_{ci,t} wt[ci][t][co] · x[ci][q + off[t]]` for `q < qn`.
#[allow(clippy::too_many_arguments)]
fn accumulate<T: Scalar>(
    x: &[T],
    x_stride: usize,
    cin: usize,
    wt: &[T],
    cout: usize,
    offsets: &[usize],
    qn: usize,
    out: &mut [T],
    out_stride: usize,
) {
    let taps = offsets.len();
    for q0 in (0..qn).step_by(L) {
        for co0 in (0..cout).step_by(CB) {
            let cb = CB.min(cout - co0);
            let mut acc = [[T::zero(); L]; CB];
            for ci in 0..cin {
                let xc = &x[ci * x_stride + q0..];
                let wc = &wt[ci * taps * cout..(ci + 1) * taps * cout];
                for (t, &off) in offsets.iter().enumerate() {
                    let xv: &[T; L] = xc[off..off + L].try_into().unwrap();
                    let wv = &wc[t * cout + co0..t * cout + co0 + cb];
                    if cb == CB {
                        for j in 0..CB {
                            let wj = wv[j];
                            for l in 0..L {
                                acc[j][l] += wj * xv[l];
                            }
                        }
                    } else {
                        for (j, &wj) in wv.iter().enumerate() {
                            for l in 0..L {
                                acc[j][l] += wj * xv[l];
                            }
                        }
                    }
                }
            }
            for (j, a) in acc.iter().enumerate().take(cb) {
                let dst = &mut out[(co0 + j) * out_stride + q0..];
                dst[..L].copy_from_slice(a);
            }
        }
    }
}

/// Stride-1 forward for one sample: `y = W ⋆ x` (no bias).
pub(crate) fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], y: &mut [T]) {
    let grid = Grid::new(g);
    let xs = grid.padded_len();
    let xp = pad_into(x, g.cin, g.input, g.pad, &grid, 0, xs);
    let taps = grid.offsets.len();
    // wt[ci][t][co]
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..taps {
                wt[(ci * taps + t) * g.cout + co] = w[(co * g.cin + ci) * taps + t];
            }
        }
    }
    let mut yg = vec![T::zero(); g.cout * grid.q];
    accumulate(&xp, xs, g.cin, &wt, g.cout, &grid.offsets, grid.q, &mut yg, grid.q);
    let [o0, o1, o2] = g.output;
    for co in 0..g.cout {
        for od in 0..o0 {
            for oh in 0..o1 {
                let s = co * grid.q + grid.out_pos(od, oh, 0);
                let t = ((co * o0 + od) * o1 + oh) * o2;
                y[t..t + o2].copy_from_slice(&yg[s..s + o2]);
            }
        }
    }
}

/// `dy` scattered onto the output grid with `lead` leading zeros per channel.
fn dy_grid<T: Scalar>(g: &ConvGeometry, grid: &Grid, dy: &[T], lead: usize, stride: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g.cout * stride];
    let [o0, o1, o2] = g.output;
    for co in 0..g.cout {
        for od in 0..o0 {
            for oh in 0..o1 {
                let s = ((co * o0 + od) * o1 + oh) * o2;
                let t = co * stride + lead + grid.out_pos(od, oh, 0);
                out[t..t + o2].copy_from_slice(&dy[s..s + o2]);
            }
        }
    }
    out
}

/// Stride-1 data gradient for one sample: `dx += Wᵀ ⋆ dy` (a full
/// correlation with flipped taps).
pub(crate) fn backward_data<T: Scalar>(g: &ConvGeometry, dy: &[T], w: &[T], dx: &mut [T]) {
    let grid = Grid::new(g);
    let lead = grid.max_off;
    let rn = grid.vp.div_ceil(L) * L;
    let stride = (lead + rn + L).next_multiple_of(L);
    let dyb = dy_grid(g, &grid, dy, lead, stride);
    let taps = grid.offsets.len();
    // flipped offsets: dxp[r] = Σ w[t]·dyb[r + lead − off[t]]
    let flipped: Vec<usize> = grid.offsets.iter().map(|&o| lead - o).collect();
    // wt[co][t][ci]
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..taps {
                wt[(co * taps + t) * g.cin + ci] = w[(co * g.cin + ci) * taps + t];
            }
        }
    }
    let mut dxp = vec![T::zero(); g.cin * rn];
    accumulate(&dyb, stride, g.cout, &wt, g.cin, &flipped, rn, &mut dxp, rn);
    let [d, h, wd] = g.input;
    for ci in 0..g.cin {
        for z in 0..d {
            for y in 0..h {
                let s = ci * rn + grid.out_pos(z + g.pad[0], y + g.pad[1], g.pad[2]);
                let t = ((ci * d + z) * h + y) * wd;
                for (a, b) in dx[t..t + wd].iter_mut().zip(&dxp[s..s + wd]) {
                    *a += *b;
                }
            }
        }
    }
}

/// Stride-1 weight gradient for one sample: `dw[co][ci][t] += Σ_q dy[co][q]·x[ci][q + off[t]]`.
pub(crate) fn backward_weight<T: Scalar>(g: &ConvGeometry, x: &[T], dy: &[T], dw: &mut [T]) {
    let grid = Grid::new(g);
    let xs = grid.padded_len();
    let xp = pad_into(x, g.cin, g.input, g.pad, &grid, 0, xs);
    let ds = grid.q + L;
    let dyg = dy_grid(g, &grid, dy, 0, ds);
    let taps = grid.offsets.len();
    let mut acc = vec![[T::zero(); LW]; taps];
    for co in 0..g.cout {
        let dc = &dyg[co * ds..co * ds + grid.q];
        for ci in 0..g.cin {
            let xc = &xp[ci * xs..(ci + 1) * xs];
            acc.iter_mut().for_each(|a| *a = [T::zero(); LW]);
            for q0 in (0..grid.q).step_by(QB) {
                let d = &dc[q0..(q0 + QB).min(grid.q)];
                for (a, &off) in acc.iter_mut().zip(&grid.offsets) {
                    let xs = &xc[q0 + off..q0 + off + d.len()];
                    // local copy so the lanes stay in registers
                    let mut s = *a;
                    for (dv, xv) in d.chunks_exact(LW).zip(xs.chunks_exact(LW)) {
                        let dv: &[T; LW] = dv.try_into().unwrap();
                        let xv: &[T; LW] = xv.try_into().unwrap();
                        for l in 0..LW {
                            s[l] += dv[l] * xv[l];
                        }
                    }
                    *a = s;
                }
            }
            let base = (co * g.cin + ci) * taps;
            for (d, a) in dw[base..base + taps].iter_mut().zip(&acc) {
                *d += a.iter().copied().sum::<T>();
            }
        }
    }
}


//! Elementwise, normalization and structural ops.

use std::sync::Arc;

use super::{mismatch, Tensor, TensorError};
use crate::scalar::{gemm, Scalar};

/// Variance epsilon inside the instance-norm square root.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        |g, need| {
            vec![
                need[0].then(|| g.to_vec()),
                need[1].then(|| g.to_vec()),
            ]
        },
    )
}

/// Residual connection `x + skip`; an alias of [`add`] kept for readability
/// at call sites.
pub fn add_residual<T: Scalar>(x: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    add(x, skip)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    let (av, bv) = (a.data_arc(), b.data_arc());
    Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        move |g, need| {
            vec![
                need[0].then(|| g.iter().zip(bv.iter()).map(|(g, b)| *g * *b).collect()),
                need[1].then(|| g.iter().zip(av.iter()).map(|(g, a)| *g * *a).collect()),
            ]
        },
    )
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: f64) -> Result<Tensor<T>, TensorError> {
    let s = T::from_f64_lossy(s);
    let data = a.data().iter().map(|x| *x * s).collect();
    Tensor::from_op("scale", a.shape().to_vec(), data, vec![a.clone()], move |g, _| {
        vec![Some(g.iter().map(|g| *g * s).collect())]
    })
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let total = a.data().iter().copied().sum::<T>();
    let n = a.numel();
    Tensor::from_op("sum", vec![1], vec![total], vec![a.clone()], move |g, _| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let n = a.numel();
    let inv = T::one() / T::from_usize(n).unwrap();
    let total = a.data().iter().copied().sum::<T>() * inv;
    Tensor::from_op("mean", vec![1], vec![total], vec![a.clone()], move |g, _| {
        vec![Some(vec![g[0] * inv; n])]
    })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let out: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let saved = Arc::new(out.clone());
    Tensor::from_op("sigmoid", x.shape().to_vec(), out, vec![x.clone()], move |g, _| {
        vec![Some(
            g.iter()
                .zip(saved.iter())
                .map(|(g, s)| *g * *s * (T::one() - *s))
                .collect(),
        )]
    })
}

/// Row-wise softmax of an `[N, K]` tensor.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let [n, k] = x.shape()[..] else {
        return Err(mismatch("softmax", format!("expected [N, K], got {:?}", x.shape())));
    };
    let mut out = vec![T::zero(); n * k];
    for (row, dst) in x.data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    let saved = Arc::new(out.clone());
    Tensor::from_op("softmax", vec![n, k], out, vec![x.clone()], move |g, _| {
        let mut dx = vec![T::zero(); n * k];
        for ((gr, sr), dr) in g
            .chunks_exact(k)
            .zip(saved.chunks_exact(k))
            .zip(dx.chunks_exact_mut(k))
        {
            let dot: T = gr.iter().zip(sr).map(|(g, s)| *g * *s).sum();
            for ((d, g), s) in dr.iter_mut().zip(gr).zip(sr) {
                *d = *s * (*g - dot);
            }
        }
        vec![Some(dx)]
    })
}

/// `(N, C, inner)` view of a tensor whose axis 1 is the channel axis.
fn channel_view(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() < 2 {
        return Err(mismatch(op, format!("need a channel axis, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel PReLU: `x` where `x ≥ 0`, `a[c]·x` otherwise. The gradient at
/// `x = 0` follows the positive branch.
pub fn prelu<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c, inner) = channel_view("prelu", x.shape())?;
    if a.numel() != c {
        return Err(mismatch(
            "prelu",
            format!("{} slopes for {c} channels", a.numel()),
        ));
    }
    let xv = x.data_arc();
    let av = a.data_arc();
    let mut out = Vec::with_capacity(xv.len());
    for (i, &v) in xv.iter().enumerate() {
        let ch = (i / inner) % c;
        out.push(if v >= T::zero() { v } else { av[ch] * v });
    }
    Tensor::from_op(
        "prelu",
        x.shape().to_vec(),
        out,
        vec![x.clone(), a.clone()],
        move |g, need| {
            let dx = need[0].then(|| {
                g.iter()
                    .zip(xv.iter())
                    .enumerate()
                    .map(|(i, (g, v))| {
                        if *v >= T::zero() {
                            *g
                        } else {
                            *g * av[(i / inner) % c]
                        }
                    })
                    .collect()
            });
            let da = need[1].then(|| {
                let mut da = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        let mut acc = T::zero();
                        for j in base..base + inner {
                            if xv[j] < T::zero() {
                                acc += g[j] * xv[j];
                            }
                        }
                        da[ch] += acc;
                    }
                }
                da
            });
            vec![dx, da]
        },
    )
}

/// Per-sample, per-channel standardization over the spatial axes followed
/// by a per-channel affine map.
pub fn instance_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, inner) = channel_view("instance_norm", x.shape())?;
    if x.shape().len() < 3 || inner < 2 {
        return Err(mismatch(
            "instance_norm",
            format!("spatial size must be >= 2, got {:?}", x.shape()),
        ));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(mismatch(
            "instance_norm",
            format!("gamma/beta length {}/{} for {c} channels", gamma.numel(), beta.numel()),
        ));
    }
    let eps = T::from_f64_lossy(INSTANCE_NORM_EPS);
    let inv_n = T::one() / T::from_usize(inner).unwrap();
    let xv = x.data();
    let (gv, bv) = (gamma.data_arc(), beta.data_arc());
    let mut xhat = vec![T::zero(); xv.len()];
    let mut inv_std = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); xv.len()];
    for slice in 0..n * c {
        let ch = slice % c;
        let r = slice * inner..(slice + 1) * inner;
        let src = &xv[r.clone()];
        let mu = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[slice] = is;
        for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r]).zip(src) {
            *h = (v - mu) * is;
            *o = gv[ch] * *h + bv[ch];
        }
    }
    let xhat = Arc::new(xhat);
    Tensor::from_op(
        "instance_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, need| {
            let mut dx = need[0].then(|| vec![T::zero(); g.len()]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for slice in 0..n * c {
                let ch = slice % c;
                let r = slice * inner..(slice + 1) * inner;
                let gs = &g[r.clone()];
                let hs = &xhat[r.clone()];
                let sum_g: T = gs.iter().copied().sum();
                let sum_gh: T = gs.iter().zip(hs).map(|(g, h)| *g * *h).sum();
                dgamma[ch] += sum_gh;
                dbeta[ch] += sum_g;
                if let Some(dx) = dx.as_mut() {
                    // dxhat = g·γ; dx = σ⁻¹(dxhat − mean(dxhat) − x̂·mean(dxhat·x̂))
                    let k = gv[ch] * inv_std[slice];
                    let mg = sum_g * inv_n;
                    let mgh = sum_gh * inv_n;
                    for ((d, g), h) in dx[r].iter_mut().zip(gs).zip(hs) {
                        *d = k * (*g - mg - *h * mgh);
                    }
                }
            }
            vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
        },
    )
}

/// Affine map `x·Wᵀ + b` for `x: [N, F]`, `W: [O, F]`, `b: [O]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let ([n, f], [o, f2]) = (x.shape(), w.shape()) else {
        return Err(mismatch(
            "linear",
            format!("x {:?}, w {:?}", x.shape(), w.shape()),
        ));
    };
    let (n, f, o) = (*n, *f, *o);
    if f != *f2 || b.numel() != o {
        return Err(mismatch(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); n * o];
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(b.data());
    }
    gemm(n, f, o, T::one(), x.data(), false, w.data(), true, T::one(), &mut out);
    let (xv, wv) = (x.data_arc(), w.data_arc());
    Tensor::from_op(
        "linear",
        vec![n, o],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); n * f];
                gemm(n, o, f, T::one(), g, false, &wv, false, T::zero(), &mut dx);
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = vec![T::zero(); o * f];
                gemm(o, n, f, T::one(), g, true, &xv, false, T::zero(), &mut dw);
                dw
            });
            let db = need[2].then(|| {
                let mut db = vec![T::zero(); o];
                for row in g.chunks_exact(o) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += *g);
                }
                db
            });
            vec![dx, dw, db]
        },
    )
}

/// Concatenate along axis 1 in argument order.
pub fn concat_channels<T: Scalar>(xs: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = xs
        .first()
        .ok_or_else(|| mismatch("concat_channels", "no inputs"))?;
    let (n, _, inner) = channel_view("concat_channels", first.shape())?;
    let mut channels = Vec::with_capacity(xs.len());
    for t in xs {
        let s = t.shape();
        if s.len() != first.shape().len() || s[0] != n || s[2..] != first.shape()[2..] {
            return Err(mismatch(
                "concat_channels",
                format!("{:?} vs {:?}", s, first.shape()),
            ));
        }
        channels.push(s[1]);
    }
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(n * total * inner);
    for s in 0..n {
        for (t, &c) in xs.iter().zip(&channels) {
            out.extend_from_slice(&t.data()[s * c * inner..(s + 1) * c * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    let parents = xs.to_vec();
    Tensor::from_op("concat_channels", shape, out, parents, move |g, need| {
        let mut grads: Vec<Option<Vec<T>>> = need
            .iter()
            .zip(&channels)
            .map(|(&nd, &c)| nd.then(|| Vec::with_capacity(n * c * inner)))
            .collect();
        for s in 0..n {
            let mut off = s * total * inner;
            for (gr, &c) in grads.iter_mut().zip(&channels) {
                if let Some(gr) = gr {
                    gr.extend_from_slice(&g[off..off + c * inner]);
                }
                off += c * inner;
            }
        }
        grads
    })
}

/// Mean over all axes after the channel axis: `[N, C, ...] → [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, c, inner) = channel_view("global_avg_pool", x.shape())?;
    let inv = T::one() / T::from_usize(inner).unwrap();
    let out = x
        .data()
        .chunks_exact(inner)
        .map(|s| s.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_op("global_avg_pool", vec![n, c], out, vec![x.clone()], move |g, _| {
        let mut dx = Vec::with_capacity(n * c * inner);
        for &gv in g {
            dx.extend(std::iter::repeat(gv * inv).take(inner));
        }
        vec![Some(dx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn prelu_values() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![-2.0, 3.0]).unwrap();
        let a = Tensor::from_vec(&[2], vec![0.25, 0.25]).unwrap();
        assert_eq!(prelu(&x, &a).unwrap().data(), &[-0.5, 3.0]);
        let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(prelu(&x, &ones).unwrap().data(), x.data());
        assert!(prelu(&x, &Tensor::from_vec(&[1], vec![0.1]).unwrap()).is_err());
    }

    #[test]
    fn prelu_gradient_at_kink_takes_positive_branch() {
        let x = Tensor::<f64>::leaf(&[1, 1], vec![0.0]).unwrap();
        let a = Tensor::leaf(&[1], vec![0.25]).unwrap();
        sum(&prelu(&x, &a).unwrap()).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
        assert_eq!(a.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn sigmoid_and_softmax_values() {
        let z = Tensor::<f32>::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(sigmoid(&z).unwrap().item(), 0.5);
        let big = Tensor::<f32>::from_vec(&[2], vec![-100.0, 100.0]).unwrap();
        let s = sigmoid(&big).unwrap();
        assert!(s.data()[0] >= 0.0 && s.data()[0] < 1e-40 && s.data()[1] == 1.0);
        let l = Tensor::<f32>::from_vec(&[1, 4], vec![3.0; 4]).unwrap();
        assert!(softmax(&l).unwrap().data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn residual_with_zero_is_identity() {
        let x = Tensor::<f32>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let z = Tensor::zeros(&[3]);
        assert_eq!(add_residual(&x, &z).unwrap().data(), x.data());
        assert!(add(&x, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn linear_values() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[16.0]);

        let x = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let zb = Tensor::zeros(&[3]);
        assert_eq!(linear(&x, &eye, &zb).unwrap().data(), x.data());
        assert!(linear(&x, &Tensor::zeros(&[3, 2]), &zb).is_err());
    }

    #[test]
    fn concat_shapes_and_backward() {
        let a = Tensor::<f32>::leaf(&[1, 2, 2, 2, 2], vec![1.0; 16]).unwrap();
        let b = Tensor::<f32>::leaf(&[1, 3, 2, 2, 2], vec![2.0; 24]).unwrap();
        let c = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2, 2]);
        sum(&c).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 16]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 24]);

        let single = concat_channels(&[a.clone()]).unwrap();
        assert_eq!(single.data(), a.data());
        assert_eq!(single.shape(), a.shape());

        let bad = Tensor::<f32>::zeros(&[1, 1, 2, 2, 3]);
        assert!(concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn concat_interleaves_batches() {
        let a = Tensor::<f32>::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn global_avg_pool_values() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[3.5]);
        let c = Tensor::<f32>::from_vec(&[2, 3, 2, 2, 1], vec![1.25; 24]).unwrap();
        let p = global_avg_pool(&c).unwrap();
        assert_eq!(p.shape(), &[2, 3]);
        assert!(p.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f32> = (0..2 * 3 * 27).map(|_| rng.gen_range(-4.0..9.0)).collect();
        let x = Tensor::from_vec(&[2, 3, 3, 3, 3], xs).unwrap();
        let y = instance_norm(&x, &Tensor::from_vec(&[3], vec![1.0; 3]).unwrap(), &Tensor::zeros(&[3])).unwrap();
        for s in y.data().chunks_exact(27) {
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / 27.0;
            let sd = (s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 27.0).sqrt();
            assert!(m.abs() < 1e-5);
            assert!((sd - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_norm_constant_slice_gives_beta() {
        let x = Tensor::<f32>::from_vec(&[1, 2, 2, 2, 1], vec![5.0; 8]).unwrap();
        let g = Tensor::from_vec(&[2], vec![3.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        let y = instance_norm(&x, &g, &b).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
        let tiny = Tensor::<f32>::from_vec(&[1, 2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        assert!(instance_norm(&tiny, &g, &b).is_err());
    }

    // f64 gradient checks with random-sign data; tolerance reflects
    // central-difference truncation only.
    #[test]
    fn f64_gradients_of_pointwise_and_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 2 * 3 * 8, -2.0, 2.0);
        let g = rand_vec(&mut rng, 3, 0.5, 1.5);
        let b = rand_vec(&mut rng, 3, -0.5, 0.5);
        let shape = [2usize, 3, 2, 2, 2];
        let inputs = vec![
            Tensor::<f64>::leaf(&shape, x.clone()).unwrap(),
            Tensor::leaf(&[3], g).unwrap(),
            Tensor::leaf(&[3], b).unwrap(),
        ];
        let err = grad_check(|t| instance_norm(&t[0], &t[1], &t[2]), &inputs, 1e-5).unwrap();
        assert!(err < 1e-5, "instance_norm {err}");

        let xs: Vec<f64> = x.iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect();
        let inputs = vec![
            Tensor::<f64>::leaf(&shape, xs).unwrap(),
            Tensor::leaf(&[3], vec![0.25, 0.1, -0.3]).unwrap(),
        ];
        let err = grad_check(|t| prelu(&t[0], &t[1]), &inputs, 1e-6).unwrap();
        assert!(err < 1e-6, "prelu {err}");

        let inputs = vec![Tensor::<f64>::leaf(&[4, 5], rand_vec(&mut rng, 20, -3.0, 3.0)).unwrap()];
        let err = grad_check(|t| softmax(&t[0]), &inputs, 1e-5).unwrap();
        assert!(err < 1e-5, "softmax {err}");
        let err = grad_check(|t| sigmoid(&t[0]), &inputs, 1e-5).unwrap();
        assert!(err < 1e-5, "sigmoid {err}");
        let err = grad_check(|t| global_avg_pool(&t[0].reshape(&[2, 2, 5])?), &inputs, 1e-5).unwrap();
        assert!(err < 1e-6, "gap {err}");
    }
}

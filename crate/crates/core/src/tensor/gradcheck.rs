use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mul, sum, Tensor, TensorError};
use crate::scalar::Scalar;

/// Central-difference check of every coordinate of every input.
///
/// The op output is reduced to `L = Σ rᵢ·outᵢ` with fixed weights
/// `rᵢ ∈ [0.5, 1.5)`; the numeric side accumulates `L` in f64. Returns the
/// largest `|a − n| / max(|a|, |n|, 1e-8)` over all coordinates, where `a`
/// is the backward gradient and `n` the finite difference.
pub fn grad_check<T, F>(op: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>, TensorError>,
{
    let leaves: Vec<Tensor<T>> = inputs
        .iter()
        .map(|t| Tensor::leaf(t.shape(), t.to_vec()))
        .collect::<Result<_, _>>()?;
    let out = op(&leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667);
    let weights: Vec<T> = (0..out.numel())
        .map(|_| T::from_f64_lossy(rng.gen_range(0.5..1.5)))
        .collect();
    let r = Tensor::from_vec(out.shape(), weights.clone())?;
    sum(&mul(&out, &r)?)?.backward()?;

    let reduce = |consts: &[Tensor<T>]| -> Result<f64, TensorError> {
        let o = op(consts)?;
        Ok(o
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v.to_f64_lossy() * w.to_f64_lossy())
            .sum())
    };

    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![T::zero(); leaf.numel()]);
        for j in 0..leaf.numel() {
            let base = leaf.data()[j];
            let plus = base + T::from_f64_lossy(eps);
            let minus = base - T::from_f64_lossy(eps);
            let eval = |v: T| -> Result<f64, TensorError> {
                let consts: Vec<Tensor<T>> = leaves
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut d = t.to_vec();
                        if k == i {
                            d[j] = v;
                        }
                        Tensor::from_vec(t.shape(), d)
                    })
                    .collect::<Result<_, _>>()?;
                reduce(&consts)
            };
            let numeric = (eval(plus)? - eval(minus)?) / (plus - minus).to_f64_lossy();
            let a = analytic[j].to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{linear, scale};

    #[test]
    fn linear_op_passes_in_f32() {
        let x = Tensor::<f32>::from_vec(&[2, 3], vec![0.5, 1.0, 0.8, 0.3, 0.9, 1.2]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![0.7, 0.2, 1.1, 0.4, 0.6, 0.9]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let err = grad_check(|t| linear(&t[0], &t[1], &t[2]), &[x, w, b], 1e-2).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // An op whose backward is deliberately off by a factor of two.
        let broken = |t: &[Tensor<f64>]| {
            let x = &t[0];
            Tensor::from_op("broken", x.shape().to_vec(), x.to_vec(), vec![x.clone()], |g, _| {
                vec![Some(g.iter().map(|v| 2.0 * v).collect())]
            })
        };
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(grad_check(broken, std::slice::from_ref(&x), 1e-6).unwrap() > 0.3);
        assert!(grad_check(|t| scale(&t[0], 3.0), &[x], 1e-6).unwrap() < 1e-8);
    }
}

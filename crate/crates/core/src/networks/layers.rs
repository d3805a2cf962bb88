//! Parameterized building blocks shared by the segmentation and
//! classification networks.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{
    add_residual, conv3d, conv3d_transpose, instance_norm, linear, prelu, Param, Tensor, TensorError,
};

/// Creates parameters in a fixed order from one seeded stream.
pub(crate) struct Init<'a, T: Scalar> {
    rng: &'a mut ChaCha8Rng,
    pub(crate) params: Vec<Param<T>>,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub(crate) fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Init { rng, params: Vec::new() }
    }

    fn push(&mut self, name: String, shape: &[usize], value: Vec<T>) -> Param<T> {
        let p = Param::new(name, shape, value).expect("init shape");
        self.params.push(p.clone());
        p
    }

    /// He-normal: N(0, 2/fan_in).
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> Param<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let n = shape.iter().product();
        let v = (0..n).map(|_| T::from_f64_lossy(dist.sample(self.rng))).collect();
        self.push(name, shape, v)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Param<T> {
        let n = shape.iter().product();
        self.push(name, shape, vec![T::from_f64_lossy(v); n])
    }
}

pub(crate) struct Conv<T: Scalar> {
    w: Param<T>,
    b: Param<T>,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl<T: Scalar> Conv<T> {
    pub(crate) fn new(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let taps: usize = kernel.iter().product();
        let w = init.he(format!("{name}.weight"), &[cout, cin, kernel[0], kernel[1], kernel[2]], cin * taps);
        let b = init.fill(format!("{name}.bias"), &[cout], 0.0);
        Conv { w, b, stride, pad }
    }

    /// 3×3×3-style kernel with "same" padding.
    pub(crate) fn same(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        let pad = kernel.map(|k| k / 2);
        Self::new(init, name, cin, cout, kernel, [1; 3], pad)
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        conv3d(x, &self.w.view(track), &self.b.view(track), self.stride, self.pad)
    }
}

/// Transposed convolution with kernel equal to stride (exact inverse of a
/// non-overlapping downsampling grid).
pub(crate) struct ConvT<T: Scalar> {
    w: Param<T>,
    b: Param<T>,
    stride: [usize; 3],
}

impl<T: Scalar> ConvT<T> {
    pub(crate) fn new(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, stride: [usize; 3]) -> Self {
        let w = init.he(format!("{name}.weight"), &[cin, cout, stride[0], stride[1], stride[2]], cin);
        let b = init.fill(format!("{name}.bias"), &[cout], 0.0);
        ConvT { w, b, stride }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        conv3d_transpose(x, &self.w.view(track), &self.b.view(track), self.stride, [0; 3])
    }
}

pub(crate) struct Norm<T: Scalar> {
    gamma: Param<T>,
    beta: Param<T>,
}

impl<T: Scalar> Norm<T> {
    pub(crate) fn new(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        Norm {
            gamma: init.fill(format!("{name}.gamma"), &[c], 1.0),
            beta: init.fill(format!("{name}.beta"), &[c], 0.0),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        instance_norm(x, &self.gamma.view(track), &self.beta.view(track))
    }
}

pub(crate) struct Act<T: Scalar> {
    slope: Param<T>,
}

impl<T: Scalar> Act<T> {
    pub(crate) fn new(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        Act {
            slope: init.fill(format!("{name}.slope"), &[c], 0.25),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        prelu(x, &self.slope.view(track))
    }
}

/// conv → instance norm → PReLU.
pub(crate) struct ConvBlock<T: Scalar> {
    conv: Conv<T>,
    norm: Norm<T>,
    act: Act<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub(crate) fn new(init: &mut Init<'_, T>, name: &str, conv: Conv<T>, cout: usize) -> Self {
        let norm = Norm::new(init, &format!("{name}.norm"), cout);
        let act = Act::new(init, &format!("{name}.act"), cout);
        ConvBlock { conv, norm, act }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        let h = self.conv.forward(x, track)?;
        let h = self.norm.forward(&h, track)?;
        self.act.forward(&h, track)
    }
}

/// `n` same-padded conv/norm stages with PReLU between them, then
/// `PReLU(h + skip)`, where `skip` is projected by a 1×1×1 conv when its
/// channel count differs from the output.
pub(crate) struct ResBlock<T: Scalar> {
    convs: Vec<(Conv<T>, Norm<T>)>,
    acts: Vec<Act<T>>,
    proj: Option<Conv<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub(crate) fn new(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        skip_c: usize,
        cout: usize,
        n: usize,
        kernel: [usize; 3],
    ) -> Self {
        let mut convs = Vec::with_capacity(n);
        let mut acts = Vec::with_capacity(n);
        for i in 0..n {
            let c = Conv::same(init, &format!("{name}.conv{i}"), if i == 0 { cin } else { cout }, cout, kernel);
            let nm = Norm::new(init, &format!("{name}.norm{i}"), cout);
            convs.push((c, nm));
            acts.push(Act::new(init, &format!("{name}.act{i}"), cout));
        }
        let proj = (skip_c != cout).then(|| Conv::same(init, &format!("{name}.proj"), skip_c, cout, [1; 3]));
        ResBlock { convs, acts, proj }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, skip: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for (i, (c, nm)) in self.convs.iter().enumerate() {
            h = nm.forward(&c.forward(&h, track)?, track)?;
            if i < last {
                h = self.acts[i].forward(&h, track)?;
            }
        }
        let s = match &self.proj {
            Some(p) => p.forward(skip, track)?,
            None => skip.clone(),
        };
        self.acts[last].forward(&add_residual(&h, &s)?, track)
    }
}

pub(crate) struct Linear<T: Scalar> {
    w: Param<T>,
    b: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn new(init: &mut Init<'_, T>, name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            w: init.he(format!("{name}.weight"), &[fout, fin], fin),
            b: init.fill(format!("{name}.bias"), &[fout], 0.0),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        linear(x, &self.w.view(track), &self.b.view(track))
    }
}


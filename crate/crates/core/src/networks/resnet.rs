use super::layers::{Act, Conv, ConvBlock, Init, Linear, Norm};
use super::{ClsNetConfig, NetworkError};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{add_residual, global_avg_pool, mismatch, Param, Tensor, TensorError};

struct BasicBlock<T: Scalar> {
    c1: Conv<T>,
    n1: Option<Norm<T>>,
    a1: Act<T>,
    c2: Conv<T>,
    n2: Option<Norm<T>>,
    shortcut: Option<(Conv<T>, Option<Norm<T>>)>,
    a2: Act<T>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, stride: [usize; 3], norm: bool) -> Self {
        let c1 = Conv::new(init, &format!("{name}.conv1"), cin, cout, [3; 3], stride, [1; 3]);
        let n1 = norm.then(|| Norm::new(init, &format!("{name}.norm1"), cout));
        let a1 = Act::new(init, &format!("{name}.act1"), cout);
        let c2 = Conv::same(init, &format!("{name}.conv2"), cout, cout, [3; 3]);
        let n2 = norm.then(|| Norm::new(init, &format!("{name}.norm2"), cout));
        let shortcut = (cin != cout || stride != [1; 3]).then(|| {
            let c = Conv::new(init, &format!("{name}.shortcut"), cin, cout, [1; 3], stride, [0; 3]);
            (c, norm.then(|| Norm::new(init, &format!("{name}.shortcut.norm"), cout)))
        });
        let a2 = Act::new(init, &format!("{name}.act2"), cout);
        BasicBlock { c1, n1, a1, c2, n2, shortcut, a2 }
    }

    fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
        let h = norm(&self.n1, self.c1.forward(x, track)?, track)?;
        let h = norm(&self.n2, self.c2.forward(&self.a1.forward(&h, track)?, track)?, track)?;
        let s = match &self.shortcut {
            Some((c, n)) => norm(n, c.forward(x, track)?, track)?,
            None => x.clone(),
        };
        self.a2.forward(&add_residual(&h, &s)?, track)
    }
}

fn norm<T: Scalar>(n: &Option<Norm<T>>, x: Tensor<T>, track: bool) -> Result<Tensor<T>, TensorError> {
    match n {
        Some(n) => n.forward(&x, track),
        None => Ok(x),
    }
}

/// 3-D ResNet-18 producing one progression logit per sample.
pub struct ResNet3d<T: Scalar = f32> {
    cfg: ClsNetConfig,
    params: Vec<Param<T>>,
    stem: ConvBlock<T>,
    stages: Vec<Vec<BasicBlock<T>>>,
    fc: Linear<T>,
}

/// `ceil(n / s)`: output extent of a 3-tap, pad-1 (or 1-tap) conv with stride `s`.
fn strided(n: usize, s: usize) -> usize {
    (n - 1) / s + 1
}

impl<T: Scalar> ResNet3d<T> {
    pub fn new(cfg: ClsNetConfig, seed: u64) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 1);
        let mut init = Init::new(&mut rng);

        let stem_stride = [2, 2, 1];
        let conv = Conv::new(&mut init, "stem", cfg.in_channels, cfg.stem_channels, [3; 3], stem_stride, [1; 3]);
        let stem = ConvBlock::new(&mut init, "stem", conv, cfg.stem_channels);
        let mut dims = [0; 3];
        for i in 0..3 {
            dims[i] = strided(cfg.input_shape[i], stem_stride[i]);
        }

        let mut stages = Vec::with_capacity(cfg.stage_blocks.len());
        let mut cin = cfg.stem_channels;
        for (s, &n) in cfg.stage_blocks.iter().enumerate() {
            let cout = cfg.stem_channels << s;
            let stride = [2, 2, if dims[2] >= 4 { 2 } else { 1 }];
            for i in 0..3 {
                dims[i] = strided(dims[i], stride[i]);
            }
            if dims.iter().product::<usize>() < 2 {
                return Err(NetworkError::ConfigInvalid(format!(
                    "input {:?} collapses to {dims:?} at stage {s}",
                    cfg.input_shape
                )));
            }
            let blocks = (0..n)
                .map(|b| {
                    let st = if b == 0 { stride } else { [1; 3] };
                    let block = BasicBlock::new(&mut init, &format!("stage{s}.block{b}"), cin, cout, st, cfg.block_norm);
                    cin = cout;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        let fc = Linear::new(&mut init, "fc", cin, 1);
        Ok(ResNet3d {
            params: init.params,
            cfg,
            stem,
            stages,
            fc,
        })
    }

    pub fn config(&self) -> &ClsNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// `x: [N, C, D, H, W]` → logits `[N, 1]`.
    pub fn forward(&self, x: &Tensor<T>, track: bool) -> Result<Tensor<T>, NetworkError> {
        let s = x.shape();
        let [d0, d1, d2] = self.cfg.input_shape;
        if s.len() != 5 || s[1] != self.cfg.in_channels || s[2..] != [d0, d1, d2] {
            return Err(mismatch(
                "resnet18_3d",
                format!("input {s:?}, expected [N, {}, {d0}, {d1}, {d2}]", self.cfg.in_channels),
            )
            .into());
        }
        let mut h = self.stem.forward(x, track)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, track)?;
            }
        }
        Ok(self.fc.forward(&global_avg_pool(&h)?, track)?)
    }
}

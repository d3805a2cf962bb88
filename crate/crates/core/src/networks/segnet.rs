use super::layers::{Act, Conv, ConvBlock, ConvT, Init, Linear, Norm, ResBlock};
use super::{Arch, NetworkError, SegNetConfig};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, global_avg_pool, mismatch, sigmoid, Param, Tensor};

/// Width of the hidden layer in the staging route.
pub const CLS_HIDDEN: usize = 64;

/// Forward-pass result of a segmentation network.
#[derive(Debug, Clone)]
pub struct SegOutput<T: Scalar = f32> {
    /// `[N, 1, D, H, W]` foreground probabilities.
    pub prob_map: Tensor<T>,
    pub overall_logits: Option<Tensor<T>>,
    pub t_logits: Option<Tensor<T>>,
}

struct Up<T: Scalar> {
    conv: ConvT<T>,
    norm: Norm<T>,
    act: Act<T>,
}

struct Level<T: Scalar> {
    block: ResBlock<T>,
    down: ConvBlock<T>,
}

struct DecLevel<T: Scalar> {
    up: Up<T>,
    block: ResBlock<T>,
}

struct ClsRoute<T: Scalar> {
    down: ConvBlock<T>,
    fc: Linear<T>,
    act: Act<T>,
    overall: Linear<T>,
    t: Linear<T>,
}

/// V-Net style encoder/decoder with one encoder per input modality and an
/// optional staging route off the fused bottleneck.
pub struct SegNet<T: Scalar = f32> {
    cfg: SegNetConfig,
    params: Vec<Param<T>>,
    encoders: Vec<Vec<Level<T>>>,
    fuse: Option<ConvBlock<T>>,
    bottleneck: ResBlock<T>,
    /// Deepest level first.
    decoder: Vec<DecLevel<T>>,
    head: Conv<T>,
    cls: Option<ClsRoute<T>>,
}

/// Downsampling stride per level: 2 in-plane, 2 along the slice axis only
/// while it still has at least 4 voxels.
pub(crate) fn level_strides(cfg: &SegNetConfig) -> Result<(Vec<[usize; 3]>, [usize; 3]), NetworkError> {
    let mut dims = cfg.input_shape;
    let mut strides = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let s = [2, 2, if dims[2] >= 4 { 2 } else { 1 }];
        for i in 0..3 {
            if dims[i] % s[i] != 0 || dims[i] < s[i] {
                return Err(NetworkError::ConfigInvalid(format!(
                    "input {:?} not divisible for depth {} (axis {i} is {} at level {l})",
                    cfg.input_shape, cfg.depth, dims[i]
                )));
            }
            dims[i] /= s[i];
        }
        strides.push(s);
    }
    if dims.iter().product::<usize>() < 2 {
        return Err(NetworkError::ConfigInvalid(format!(
            "bottleneck {dims:?} too small for normalization"
        )));
    }
    Ok((strides, dims))
}

impl<T: Scalar> SegNet<T> {
    pub fn new(cfg: SegNetConfig, seed: u64) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let (strides, bottom) = level_strides(&cfg)?;
        let cls_stride = [2, 2, if bottom[2] >= 4 { 2 } else { 1 }];
        if cfg.cls_route {
            let out: usize = (0..3).map(|i| (bottom[i] - 1) / cls_stride[i] + 1).product();
            if out < 2 {
                return Err(NetworkError::ConfigInvalid(format!(
                    "bottleneck {bottom:?} too small for the staging route"
                )));
            }
        }
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut init = Init::new(&mut rng);
        let ch = |l: usize| cfg.base_channels << l;
        let k = cfg.kernel;
        let n_enc = if cfg.dual_encoder { 2 } else { 1 };

        let mut encoders = Vec::with_capacity(n_enc);
        for e in 0..n_enc {
            let mut levels = Vec::with_capacity(cfg.depth);
            for (l, &s) in strides.iter().enumerate() {
                let name = format!("enc{e}.level{l}");
                let cin = if l == 0 { 1 } else { ch(l) };
                let block = ResBlock::new(&mut init, &name, cin, cin, ch(l), cfg.convs_per_level, k);
                let conv = Conv::new(&mut init, &format!("{name}.down"), ch(l), ch(l + 1), s, s, [0; 3]);
                let down = ConvBlock::new(&mut init, &format!("{name}.down"), conv, ch(l + 1));
                levels.push(Level { block, down });
            }
            encoders.push(levels);
        }

        let cb = ch(cfg.depth);
        let fuse = cfg.dual_encoder.then(|| {
            let conv = Conv::same(&mut init, "fuse", n_enc * cb, cb, [1; 3]);
            ConvBlock::new(&mut init, "fuse", conv, cb)
        });
        let bottleneck = ResBlock::new(&mut init, "bottleneck", cb, cb, cb, cfg.convs_per_level, k);

        let cls = cfg.cls_route.then(|| {
            let conv = Conv::new(&mut init, "cls.down", cb, cb, [3; 3], cls_stride, [1; 3]);
            ClsRoute {
                down: ConvBlock::new(&mut init, "cls.down", conv, cb),
                fc: Linear::new(&mut init, "cls.fc", cb, CLS_HIDDEN),
                act: Act::new(&mut init, "cls.act", CLS_HIDDEN),
                overall: Linear::new(&mut init, "cls.overall", CLS_HIDDEN, cfg.num_overall_classes),
                t: Linear::new(&mut init, "cls.t", CLS_HIDDEN, cfg.num_t_classes),
            }
        });

        let mut decoder = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            let name = format!("dec.level{l}");
            let up = Up {
                conv: ConvT::new(&mut init, &format!("{name}.up"), ch(l + 1), ch(l), strides[l]),
                norm: Norm::new(&mut init, &format!("{name}.up.norm"), ch(l)),
                act: Act::new(&mut init, &format!("{name}.up.act"), ch(l)),
            };
            let cin = ch(l) * (1 + n_enc);
            let block = ResBlock::new(&mut init, &name, cin, ch(l), ch(l), cfg.convs_per_level, k);
            decoder.push(DecLevel { up, block });
        }
        let head = Conv::same(&mut init, "head", ch(0), 1, [1; 3]);

        Ok(SegNet {
            params: init.params,
            cfg,
            encoders,
            fuse,
            bottleneck,
            decoder,
            head,
            cls,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn arch(&self) -> Arch {
        self.cfg.arch().expect("validated at build")
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Number of modality inputs the network expects.
    pub fn num_inputs(&self) -> usize {
        self.encoders.len()
    }

    /// `inputs` holds one `[N, 1, D, H, W]` tensor per modality (T1C first).
    /// With `track` set, the graph records gradients for every parameter.
    pub fn forward(&self, inputs: &[Tensor<T>], track: bool) -> Result<SegOutput<T>, NetworkError> {
        if inputs.len() != self.encoders.len() {
            return Err(mismatch(
                "segnet",
                format!("{} expects {} modality inputs, got {}", self.arch(), self.encoders.len(), inputs.len()),
            )
            .into());
        }
        let [d0, d1, d2] = self.cfg.input_shape;
        for x in inputs {
            let s = x.shape();
            if s.len() != 5 || s[1] != 1 || s[2..] != [d0, d1, d2] || s[0] != inputs[0].shape()[0] {
                return Err(mismatch(
                    "segnet",
                    format!("input {s:?}, expected [N, 1, {d0}, {d1}, {d2}]"),
                )
                .into());
            }
        }

        let mut skips: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.encoders.len());
        let mut bottoms = Vec::with_capacity(self.encoders.len());
        for (enc, x) in self.encoders.iter().zip(inputs) {
            let mut h = x.clone();
            let mut s = Vec::with_capacity(enc.len());
            for level in enc {
                h = level.block.forward(&h, &h, track)?;
                s.push(h.clone());
                h = level.down.forward(&h, track)?;
            }
            skips.push(s);
            bottoms.push(h);
        }
        let fused = match &self.fuse {
            Some(f) => f.forward(&concat_channels(&bottoms)?, track)?,
            None => bottoms.pop().unwrap(),
        };
        let mut h = self.bottleneck.forward(&fused, &fused, track)?;

        let (overall_logits, t_logits) = match &self.cls {
            Some(c) => {
                let z = global_avg_pool(&c.down.forward(&h, track)?)?;
                let z = c.act.forward(&c.fc.forward(&z, track)?, track)?;
                (Some(c.overall.forward(&z, track)?), Some(c.t.forward(&z, track)?))
            }
            None => (None, None),
        };

        for (i, dec) in self.decoder.iter().enumerate() {
            let l = self.cfg.depth - 1 - i;
            let up = dec.up.conv.forward(&h, track)?;
            let up = dec.up.act.forward(&dec.up.norm.forward(&up, track)?, track)?;
            let mut parts = vec![up.clone()];
            parts.extend(skips.iter().map(|s| s[l].clone()));
            h = dec.block.forward(&concat_channels(&parts)?, &up, track)?;
        }
        let prob_map = sigmoid(&self.head.forward(&h, track)?)?;
        Ok(SegOutput {
            prob_map,
            overall_logits,
            t_logits,
        })
    }
}

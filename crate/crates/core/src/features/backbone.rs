use ndarray::Array3;

use super::layers::{max_pool, max_pool_backward, relu, relu_backward, Affine, Conv, ConvCache, Init};
use super::params::ParamLayout;
use crate::rng::Rng;

/// Channels of the four stride-2 stages of the small backbone.
pub const TINY_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const RESNET_CHANNELS: [usize; 4] = [64, 128, 256, 512];

/// A multi-scale convolutional encoder. `forward` yields one map per pyramid
/// level together with its stride relative to the input.
#[derive(Debug, Clone)]
pub enum Backbone {
    Tiny(Vec<Conv>),
    Resnet(Resnet),
}

pub enum BackboneCache {
    Tiny(Vec<(ConvCache, Array3<f64>)>),
    Resnet(ResnetCache),
}

impl Backbone {
    pub fn tiny(layout: &mut ParamLayout) -> Self {
        let mut in_c = 3;
        let stages = TINY_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(layout, &format!("stage{}", i + 1), in_c, c, 3, 2, 1, true);
                in_c = c;
                conv
            })
            .collect();
        Backbone::Tiny(stages)
    }

    pub fn resnet18(layout: &mut ParamLayout) -> Self {
        Backbone::Resnet(Resnet::new(layout))
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng) {
        match self {
            Backbone::Tiny(stages) => stages.iter().for_each(|s| s.init(params, Init::KaimingNormal, rng)),
            Backbone::Resnet(r) => r.init(params, rng),
        }
    }

    /// (channels, stride) of every stage output, shallow to deep.
    pub fn stages(&self) -> Vec<(usize, usize)> {
        match self {
            Backbone::Tiny(stages) => stages.iter().enumerate().map(|(i, s)| (s.out_c, 2 << i)).collect(),
            Backbone::Resnet(_) => RESNET_CHANNELS.iter().enumerate().map(|(i, &c)| (c, 4 << i)).collect(),
        }
    }

    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> (Vec<Array3<f64>>, BackboneCache) {
        match self {
            Backbone::Tiny(stages) => {
                let mut caches = Vec::with_capacity(stages.len());
                let mut outs = Vec::with_capacity(stages.len());
                let mut cur = x.clone();
                for s in stages {
                    let (y, cache) = s.forward(params, &cur);
                    let y = relu(&y);
                    caches.push((cache, y.clone()));
                    outs.push(y.clone());
                    cur = y;
                }
                (outs, BackboneCache::Tiny(caches))
            }
            Backbone::Resnet(r) => {
                let (outs, cache) = r.forward(params, x);
                (outs, BackboneCache::Resnet(cache))
            }
        }
    }

    /// `d_stages[i]` is dL/d(stage i output), or `None` when that stage feeds
    /// no pyramid level.
    pub fn backward(&self, params: &[f64], cache: &BackboneCache, d_stages: Vec<Option<Array3<f64>>>, grad: &mut [f64]) {
        match (self, cache) {
            (Backbone::Tiny(stages), BackboneCache::Tiny(caches)) => {
                let mut carry: Option<Array3<f64>> = None;
                for (i, d_level) in d_stages.into_iter().enumerate().rev() {
                    let d = match (carry.take(), d_level) {
                        (Some(a), Some(b)) => a + b,
                        (Some(a), None) => a,
                        (None, Some(b)) => b,
                        (None, None) => continue,
                    };
                    let (conv_cache, out) = &caches[i];
                    let d = relu_backward(out, &d);
                    carry = stages[i].backward(params, conv_cache, &d, grad, i > 0);
                }
            }
            (Backbone::Resnet(r), BackboneCache::Resnet(c)) => r.backward(params, c, d_stages, grad),
            _ => unreachable!("cache produced by a different backbone"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv,
    bn1: Affine,
    conv2: Conv,
    bn2: Affine,
    downsample: Option<(Conv, Affine)>,
}

pub struct BlockCache {
    c1: ConvCache,
    pre1: Array3<f64>,
    act1: Array3<f64>,
    c2: ConvCache,
    pre2: Array3<f64>,
    down: Option<(ConvCache, Array3<f64>)>,
    out: Array3<f64>,
}

impl BasicBlock {
    fn new(layout: &mut ParamLayout, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        let conv1 = Conv::new(layout, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1, false);
        let bn1 = Affine::new(layout, &format!("{name}.bn1"), out_c);
        let conv2 = Conv::new(layout, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, false);
        let bn2 = Affine::new(layout, &format!("{name}.bn2"), out_c);
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv::new(layout, &format!("{name}.downsample.0"), in_c, out_c, 1, stride, 0, false),
                Affine::new(layout, &format!("{name}.downsample.1"), out_c),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        }
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng) {
        self.conv1.init(params, Init::KaimingNormal, rng);
        self.conv2.init(params, Init::KaimingNormal, rng);
        self.bn1.init(params);
        self.bn2.init(params);
        if let Some((c, a)) = &self.downsample {
            c.init(params, Init::KaimingNormal, rng);
            a.init(params);
        }
    }

    fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, BlockCache) {
        let (pre1, c1) = self.conv1.forward(p, x);
        let act1 = relu(&self.bn1.forward(p, &pre1));
        let (pre2, c2) = self.conv2.forward(p, &act1);
        let mut sum = self.bn2.forward(p, &pre2);
        let down = match &self.downsample {
            Some((conv, bn)) => {
                let (d, dc) = conv.forward(p, x);
                sum += &bn.forward(p, &d);
                Some((dc, d))
            }
            None => {
                sum += x;
                None
            }
        };
        let out = relu(&sum);
        let cache = BlockCache {
            c1,
            pre1,
            act1,
            c2,
            pre2,
            down,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(&self, p: &[f64], c: &BlockCache, dy: &Array3<f64>, grad: &mut [f64]) -> Array3<f64> {
        let dsum = relu_backward(&c.out, dy);
        let d2 = self.bn2.backward(p, &c.pre2, &dsum, grad);
        let dact1 = self.conv2.backward(p, &c.c2, &d2, grad, true).expect("input grad");
        let d1 = relu_backward(&c.act1, &dact1);
        let d1 = self.bn1.backward(p, &c.pre1, &d1, grad);
        let mut dx = self.conv1.backward(p, &c.c1, &d1, grad, true).expect("input grad");
        match (&self.downsample, &c.down) {
            (Some((conv, bn)), Some((dc, d))) => {
                let dd = bn.backward(p, d, &dsum, grad);
                dx += &conv.backward(p, dc, &dd, grad, true).expect("input grad");
            }
            _ => dx += &dsum,
        }
        dx
    }
}

/// ResNet-18 layout (stem, four stages of two basic blocks) with batch-norm
/// layers represented as per-channel affine maps. Tensor names follow the
/// usual `conv1`, `bn1`, `layerN.M.*` convention so converted weights load by
/// name.
#[derive(Debug, Clone)]
pub struct Resnet {
    conv1: Conv,
    bn1: Affine,
    layers: Vec<[BasicBlock; 2]>,
}

pub struct ResnetCache {
    stem_conv: ConvCache,
    stem_pre: Array3<f64>,
    stem_act: Array3<f64>,
    pool_arg: Vec<u32>,
    blocks: Vec<[BlockCache; 2]>,
}

impl Resnet {
    fn new(layout: &mut ParamLayout) -> Self {
        let conv1 = Conv::new(layout, "conv1", 3, 64, 7, 2, 3, false);
        let bn1 = Affine::new(layout, "bn1", 64);
        let mut in_c = 64;
        let layers = RESNET_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let b0 = BasicBlock::new(layout, &format!("layer{}.0", i + 1), in_c, c, stride);
                let b1 = BasicBlock::new(layout, &format!("layer{}.1", i + 1), c, c, 1);
                in_c = c;
                [b0, b1]
            })
            .collect();
        Self { conv1, bn1, layers }
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng) {
        self.conv1.init(params, Init::KaimingNormal, rng);
        self.bn1.init(params);
        for layer in &self.layers {
            layer.iter().for_each(|b| b.init(params, rng));
        }
    }

    fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Vec<Array3<f64>>, ResnetCache) {
        let (stem_pre, stem_conv) = self.conv1.forward(p, x);
        let stem_act = relu(&self.bn1.forward(p, &stem_pre));
        let (mut cur, pool_arg) = max_pool(&stem_act);
        let mut outs = Vec::with_capacity(4);
        let mut blocks = Vec::with_capacity(4);
        for layer in &self.layers {
            let (y0, c0) = layer[0].forward(p, &cur);
            let (y1, c1) = layer[1].forward(p, &y0);
            outs.push(y1.clone());
            blocks.push([c0, c1]);
            cur = y1;
        }
        let cache = ResnetCache {
            stem_conv,
            stem_pre,
            stem_act,
            pool_arg,
            blocks,
        };
        (outs, cache)
    }

    fn backward(&self, p: &[f64], c: &ResnetCache, d_stages: Vec<Option<Array3<f64>>>, grad: &mut [f64]) {
        let mut carry: Option<Array3<f64>> = None;
        for (i, d_level) in d_stages.into_iter().enumerate().rev() {
            let d = match (carry.take(), d_level) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            let d = self.layers[i][1].backward(p, &c.blocks[i][1], &d, grad);
            carry = Some(self.layers[i][0].backward(p, &c.blocks[i][0], &d, grad));
        }
        if let Some(d) = carry {
            let d = max_pool_backward(&c.pool_arg, c.stem_act.dim(), &d);
            let d = relu_backward(&c.stem_act, &d);
            let d = self.bn1.backward(p, &c.stem_pre, &d, grad);
            self.conv1.backward(p, &c.stem_conv, &d, grad, false);
        }
    }
}

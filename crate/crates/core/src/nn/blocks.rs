//! Composite blocks: dense blocks, residual atrous units, scSE, the extra
//! dense block and the decoder module.

use super::layers::{BatchNormLayer, Conv2dLayer, ConvTranspose2dLayer, Ctx, Initializer, ParamStore};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Var;

/// BN → ReLU → 3×3 conv producing `growth` channels.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub bn: BatchNormLayer,
    pub conv: Conv2dLayer,
}

impl DenseLayer {
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.g.relu(y)?;
        self.conv.forward(cx, y)
    }
}

/// Densely connected block: layer `i` sees the input concatenated with the
/// outputs of layers `0..i`, and the block returns all of them concatenated.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub in_ch: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, in_ch: usize, n_layers: usize, growth: usize) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                let c = in_ch + i * growth;
                DenseLayer {
                    bn: BatchNormLayer::new(store, &format!("{name}.layer{i}.bn"), c),
                    conv: Conv2dLayer::same3x3(store, init, &format!("{name}.layer{i}.conv"), c, growth, 1),
                }
            })
            .collect();
        DenseBlock { layers, in_ch, growth }
    }

    pub fn out_ch(&self) -> usize {
        self.in_ch + self.layers.len() * self.growth
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut feats = x;
        for layer in &self.layers {
            let y = layer.forward(cx, feats)?;
            feats = cx.g.concat(&[feats, y], 1)?;
        }
        Ok(feats)
    }
}

/// Residual atrous unit: `x + proj(concat(d_r1(x), d_r2(x), ...))`.
///
/// Each branch is a 3×3 convolution with dilation `r` and padding `r`
/// producing `C/2` channels; `proj` is a 1×1 convolution back to `C`.
#[derive(Clone, Debug)]
pub struct Rau {
    pub branches: Vec<Conv2dLayer>,
    pub proj: Conv2dLayer,
    pub channels: usize,
}

impl Rau {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, channels: usize, dilations: &[usize]) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(invalid!("RAU needs an even channel count >= 2, got {channels}"));
        }
        if dilations.is_empty() {
            return Err(invalid!("RAU needs at least one dilation"));
        }
        let half = channels / 2;
        let branches = dilations
            .iter()
            .map(|&r| Conv2dLayer::same3x3(store, init, &format!("{name}.d{r}"), channels, half, r))
            .collect();
        let proj = Conv2dLayer::pointwise(store, init, &format!("{name}.proj"), half * dilations.len(), channels);
        Ok(Rau { branches, proj, channels })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(cx, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = cx.g.concat(&outs, 1)?;
        let y = self.proj.forward(cx, cat)?;
        cx.g.add(x, y)
    }
}

/// How the channel and spatial excitation paths are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScseFusion {
    #[default]
    Max,
    Add,
}

/// Concurrent spatial and channel squeeze-and-excitation.
#[derive(Clone, Debug)]
pub struct Scse {
    pub fc1: Conv2dLayer,
    pub fc2: Conv2dLayer,
    pub spatial: Conv2dLayer,
    pub channels: usize,
    pub fusion: ScseFusion,
}

impl Scse {
    pub const DEFAULT_REDUCTION: usize = 2;

    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(invalid!("scSE needs channels ({channels}) >= reduction ({reduction}) > 0"));
        }
        let hidden = channels / reduction;
        Ok(Scse {
            fc1: Conv2dLayer::pointwise(store, init, &format!("{name}.fc1"), channels, hidden),
            fc2: Conv2dLayer::pointwise(store, init, &format!("{name}.fc2"), hidden, channels),
            spatial: Conv2dLayer::pointwise(store, init, &format!("{name}.spatial"), channels, 1),
            channels,
            fusion: ScseFusion::default(),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        // channel gate from global average pooling, shape [N,C,1,1]
        let z = cx.g.mean(x, &[2, 3], true)?;
        let h = self.fc1.forward(cx, z)?;
        let h = cx.g.relu(h)?;
        let s = self.fc2.forward(cx, h)?;
        let s = cx.g.sigmoid(s)?;
        let cse = cx.g.mul(x, s)?;

        // spatial gate, shape [N,1,H,W]
        let q = self.spatial.forward(cx, x)?;
        let q = cx.g.sigmoid(q)?;
        let sse = cx.g.mul(x, q)?;

        self.fuse(cx, cse, sse)
    }

    fn fuse(&self, cx: &mut Ctx, cse: Var, sse: Var) -> Result<Var> {
        match self.fusion {
            ScseFusion::Max => cx.g.maximum(cse, sse),
            ScseFusion::Add => cx.g.add(cse, sse),
        }
    }
}

/// Two-layer dense block followed by a 1×1 projection back to the input width.
#[derive(Clone, Debug)]
pub struct Edb {
    pub dense: DenseBlock,
    pub proj: Conv2dLayer,
}

impl Edb {
    pub const LAYERS: usize = 2;

    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, channels: usize, growth: usize) -> Self {
        let dense = DenseBlock::new(store, init, &format!("{name}.dense"), channels, Self::LAYERS, growth);
        let proj = Conv2dLayer::pointwise(store, init, &format!("{name}.proj"), dense.out_ch(), channels);
        Edb { dense, proj }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.dense.forward(cx, x)?;
        self.proj.forward(cx, y)
    }
}

/// BN → ReLU → 1×1 conv, then 2×2 average pooling.
#[derive(Clone, Debug)]
pub struct Transition {
    pub bn: BatchNormLayer,
    pub conv: Conv2dLayer,
}

impl Transition {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Transition {
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), in_ch),
            conv: Conv2dLayer::pointwise(store, init, &format!("{name}.conv"), in_ch, out_ch),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.g.relu(y)?;
        let y = self.conv.forward(cx, y)?;
        cx.g.avg_pool2(y)
    }
}

/// Upsampling block followed by scSE.
///
/// `deconv(x)` doubles the resolution, is concatenated with the skip
/// feature, passes two (3×3 conv → BN → ReLU) stages and finally scSE.
#[derive(Clone, Debug)]
pub struct DecoderModule {
    pub up: ConvTranspose2dLayer,
    pub conv1: Conv2dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNormLayer,
    pub scse: Scse,
    pub width: usize,
}

impl DecoderModule {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        skip_ch: usize,
        width: usize,
        reduction: usize,
    ) -> Result<Self> {
        Ok(DecoderModule {
            up: ConvTranspose2dLayer::upsample2(store, init, &format!("{name}.up"), in_ch, width),
            conv1: Conv2dLayer::same3x3(store, init, &format!("{name}.conv1"), width + skip_ch, width, 1),
            bn1: BatchNormLayer::new(store, &format!("{name}.bn1"), width),
            conv2: Conv2dLayer::same3x3(store, init, &format!("{name}.conv2"), width, width, 1),
            bn2: BatchNormLayer::new(store, &format!("{name}.bn2"), width),
            scse: Scse::new(store, init, &format!("{name}.scse"), width, reduction)?,
            width,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, skip: Var) -> Result<Var> {
        let (xs, ss) = (cx.g.shape(x), cx.g.shape(skip));
        if xs.len() != 4 || ss.len() != 4 || ss[2] != 2 * xs[2] || ss[3] != 2 * xs[3] {
            return Err(shape_err!("decoder skip {ss:?} must have twice the resolution of {xs:?}"));
        }
        let up = self.up.forward(cx, x)?;
        let y = cx.g.concat(&[up, skip], 1)?;
        let y = self.conv1.forward(cx, y)?;
        let y = self.bn1.forward(cx, y)?;
        let y = cx.g.relu(y)?;
        let y = self.conv2.forward(cx, y)?;
        let y = self.bn2.forward(cx, y)?;
        let y = cx.g.relu(y)?;
        self.scse.forward(cx, y)
    }
}

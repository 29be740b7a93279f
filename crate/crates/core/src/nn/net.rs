use super::blocks::{DecoderModule, DenseBlock, Edb, Rau, Scse, Transition};
use super::layers::{Conv2dLayer, Ctx, Initializer, Mode, ParamStore};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Input channels of a 2.5D stack.
pub const STACK_CHANNELS: usize = 9;

/// Topology of a [`DenseRaUnet`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub growth_rate: usize,
    /// Dense layers in each of the three encoder stages.
    pub stage_layer_counts: [usize; 3],
    /// Output width of the stem convolution.
    pub base_channels: usize,
    pub input_channels: usize,
    pub rau_dilations: Vec<usize>,
    /// Width of the decoder modules, deepest first.
    pub decoder_channels: [usize; 3],
    pub scse_reduction: usize,
    /// Std of the Gaussian weight initializer.
    pub init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            growth_rate: 32,
            stage_layer_counts: [6, 12, 24],
            base_channels: 64,
            input_channels: STACK_CHANNELS,
            rau_dilations: vec![2, 4, 8],
            decoder_channels: [256, 128, 64],
            scse_reduction: Scse::DEFAULT_REDUCTION,
            init_std: 0.01,
        }
    }
}

impl NetConfig {
    /// Desk-scale configuration used by the toy training run and tests.
    pub fn toy() -> Self {
        NetConfig {
            growth_rate: 4,
            stage_layer_counts: [2, 2, 2],
            base_channels: 8,
            decoder_channels: [8, 8, 8],
            ..Self::default()
        }
    }

    /// Channel count of each encoder stage's dense-block output.
    pub fn lateral_channels(&self) -> [usize; 3] {
        let mut c = self.base_channels;
        let mut out = [0; 3];
        for (s, slot) in out.iter_mut().enumerate() {
            *slot = c + self.stage_layer_counts[s] * self.growth_rate;
            c = transition_width(*slot);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != STACK_CHANNELS {
            return Err(invalid!("input_channels must be {STACK_CHANNELS}, got {}", self.input_channels));
        }
        if self.growth_rate == 0 || self.base_channels == 0 {
            return Err(invalid!("growth_rate and base_channels must be positive"));
        }
        for c in self.lateral_channels() {
            if c % 2 != 0 {
                return Err(invalid!("lateral width {c} must be even for the RAU branches"));
            }
        }
        for &w in &self.decoder_channels {
            if w < self.scse_reduction.max(1) {
                return Err(invalid!("decoder width {w} below scSE reduction {}", self.scse_reduction));
            }
        }
        if self.rau_dilations.is_empty() || self.rau_dilations.contains(&0) {
            return Err(invalid!("RAU dilations must be positive"));
        }
        Ok(())
    }
}

fn transition_width(c: usize) -> usize {
    (c / 2).max(1)
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub dense: DenseBlock,
    pub transition: Transition,
}

/// Dense U-Net encoder/decoder with RAU lateral connections, an extra dense
/// block on the highest-resolution skip and scSE-gated decoder modules.
///
/// ```text
/// stem 3×3 ─► [dense → lateral RAU (+EDB at stage 0) ; transition ↓2] ×3
///           ─► decoder ×3 (deepest skip first) ─► 1×1 conv ─► sigmoid
/// ```
#[derive(Clone, Debug)]
pub struct DenseRaUnet {
    pub cfg: NetConfig,
    pub store: ParamStore,
    pub stem: Conv2dLayer,
    pub stages: Vec<EncoderStage>,
    pub laterals: Vec<Rau>,
    pub edb: Edb,
    pub decoders: Vec<DecoderModule>,
    pub head: Conv2dLayer,
}

impl DenseRaUnet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, cfg.init_std);
        let st = &mut store;
        let stem = Conv2dLayer::same3x3(st, &mut init, "stem", cfg.input_channels, cfg.base_channels, 1);

        let mut stages = Vec::with_capacity(3);
        let mut laterals = Vec::with_capacity(3);
        let mut c = cfg.base_channels;
        for s in 0..3 {
            let dense = DenseBlock::new(st, &mut init, &format!("enc{s}.dense"), c, cfg.stage_layer_counts[s], cfg.growth_rate);
            let lat = dense.out_ch();
            laterals.push(Rau::new(st, &mut init, &format!("lat{s}.rau"), lat, &cfg.rau_dilations)?);
            c = transition_width(lat);
            let transition = Transition::new(st, &mut init, &format!("enc{s}.trans"), lat, c);
            stages.push(EncoderStage { dense, transition });
        }
        let lat = cfg.lateral_channels();
        let edb = Edb::new(st, &mut init, "lat0.edb", lat[0], cfg.growth_rate);

        let mut decoders = Vec::with_capacity(3);
        let mut in_ch = c;
        for j in 0..3 {
            let width = cfg.decoder_channels[j];
            decoders.push(DecoderModule::new(st, &mut init, &format!("dec{j}"), in_ch, lat[2 - j], width, cfg.scse_reduction)?);
            in_ch = width;
        }
        let head = Conv2dLayer::pointwise(st, &mut init, "head", in_ch, 1);

        Ok(DenseRaUnet { cfg, store, stem, stages, laterals, edb, decoders, head })
    }

    /// Per-pixel foreground probability `[N,1,H,W]` for a stack batch `[N,9,H,W]`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.input_channels {
            return Err(shape_err!("network input must be [N,{},H,W], got {s:?}", self.cfg.input_channels));
        }
        if !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) {
            return Err(shape_err!("spatial dims {}x{} must be divisible by 8", s[2], s[3]));
        }
        let mut cx = Ctx::new(g, &mut self.store, mode);

        let mut h = self.stem.forward(&mut cx, x)?;
        let mut skips = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            let f = stage.dense.forward(&mut cx, h)?;
            let mut lat = self.laterals[i].forward(&mut cx, f)?;
            if i == 0 {
                lat = self.edb.forward(&mut cx, lat)?;
            }
            skips.push(lat);
            h = stage.transition.forward(&mut cx, f)?;
        }
        for (j, dec) in self.decoders.iter().enumerate() {
            h = dec.forward(&mut cx, h, skips[2 - j])?;
        }
        let logits = self.head.forward(&mut cx, h)?;
        cx.g.sigmoid(logits)
    }

    /// Eval-mode probabilities for one input tensor.
    pub fn predict(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let p = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(p).clone())
    }
}

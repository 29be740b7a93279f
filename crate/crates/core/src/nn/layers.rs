use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{ConvGeom, Graph, Tensor, Var, BN_DEFAULT_EPS};

/// Key of one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameters and buffers of a model, in registration order.
///
/// Trainable entries receive gradients; buffers (batch-norm running
/// statistics) are only carried along so checkpoints are complete.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let tensor = tensor.with_requires_grad(trainable);
        self.entries.push(Entry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Adds the gradients accumulated on `g`'s parameter leaves.
    pub fn collect_grads(&mut self, g: &Graph) {
        for (key, var) in g.bound_params() {
            if let (Some(entry), Some(grad)) = (self.entries.get_mut(key), g.grad(var)) {
                entry.tensor.accumulate_grad(grad);
            }
        }
    }

    /// True when every entry has bitwise-identical values to `other`.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.trainable == b.trainable
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Training or inference behaviour of batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a mut ParamStore, mode: Mode) -> Self {
        Ctx { g, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(id.0, self.store.get(id))
    }
}

/// Gaussian weight initializer with its own seeded stream.
#[derive(Clone, Debug)]
pub struct Initializer {
    rng: ChaCha8Rng,
    pub weight_std: f64,
}

impl Initializer {
    pub fn new(seed: u64, weight_std: f64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed), weight_std }
    }

    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, self.weight_std, &mut self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeom,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.normal(&[out_ch, in_ch, kernel, kernel]), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true);
        Conv2dLayer { weight, bias, in_ch, out_ch, kernel, geom }
    }

    /// 3×3 convolution with padding equal to the dilation, preserving H×W.
    pub fn same3x3(store: &mut ParamStore, init: &mut Initializer, name: &str, in_ch: usize, out_ch: usize, dilation: usize) -> Self {
        Self::new(store, init, name, in_ch, out_ch, 3, ConvGeom::same_dilated(dilation))
    }

    pub fn pointwise(store: &mut ParamStore, init: &mut Initializer, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self::new(store, init, name, in_ch, out_ch, 1, ConvGeom::default())
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let c = cx.g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_ch {
            return Err(shape_err!("conv expects {} input channels, got {c}", self.in_ch));
        }
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.g.conv2d(x, w, Some(b), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2dLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.normal(&[in_ch, out_ch, kernel, kernel]), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true);
        ConvTranspose2dLayer { weight, bias, in_ch, out_ch, kernel, stride }
    }

    /// Kernel 2, stride 2: doubles H and W.
    pub fn upsample2(store: &mut ParamStore, init: &mut Initializer, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self::new(store, init, name, in_ch, out_ch, 2, 2)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let c = cx.g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_ch {
            return Err(shape_err!("deconv expects {} input channels, got {c}", self.in_ch));
        }
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    /// Weight of the old running statistic in each update.
    pub momentum: f64,
}

impl BatchNormLayer {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            channels,
            eps: BN_DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match cx.mode {
            Mode::Train => {
                let (y, mean, var) = cx.g.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let rm = cx.store.get_mut(self.running_mean).data_mut();
                rm.iter_mut().zip(&mean).for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
                let rv = cx.store.get_mut(self.running_var).data_mut();
                rv.iter_mut().zip(&var).for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
                Ok(y)
            }
            Mode::Eval => {
                let mean = cx.store.get(self.running_mean).data().to_vec();
                let var = cx.store.get(self.running_var).data().to_vec();
                cx.g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

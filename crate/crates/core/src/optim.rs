//! Momentum SGD, the step-decay learning-rate schedule and the toy training
//! loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::loss::{combined_loss, BootstrapParams, LossReport};
use crate::nn::{DenseRaUnet, Mode, ParamStore};
use crate::par::Execution;
use crate::phantom::{busiest_slice, make_training_set, PhantomRanges};
use crate::preprocess::{make_stack, Stack2_5D, StackOptions};
use crate::tensor::Graph;

pub const DEFAULT_LR0: f64 = 0.001;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPOCHS: usize = 25;
pub const LR_DECAY: f64 = 0.99;
pub const LR_DECAY_EVERY: u64 = 2000;

/// `lr0 · 0.99^⌊iter/2000⌋`.
pub fn lr_at(iter: u64, lr0: f64) -> f64 {
    // repeated multiplication keeps lr_at(4000) == 0.001 * 0.99 * 0.99
    let mut lr = lr0;
    for _ in 0..iter / LR_DECAY_EVERY {
        lr *= LR_DECAY;
    }
    lr
}

/// `v ← μ·v + g; θ ← θ − lr·v`, elementwise.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub lr0: f64,
    pub momentum: f64,
    /// One buffer per store entry; empty for buffers that are not trained.
    pub velocity: Vec<Vec<f64>>,
    pub iteration: u64,
}

impl SgdState {
    pub fn new(lr0: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid!("momentum must lie in [0,1), got {momentum}"));
        }
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {lr0}"));
        }
        Ok(SgdState { lr0, momentum, velocity: Vec::new(), iteration: 0 })
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.iteration, self.lr0)
    }
}

/// One momentum step over every trainable entry of `store`, using the
/// gradients stored on its tensors.
pub fn sgd_step(store: &mut ParamStore, state: &mut SgdState) -> Result<()> {
    let lr = state.lr();
    let ids: Vec<_> = store.trainable_ids().collect();
    for &id in &ids {
        if store.get(id).grad().is_none() {
            return Err(invalid!("parameter {} has no gradient", store.name(id)));
        }
    }
    if state.velocity.len() < store.len() {
        state.velocity.resize(store.len(), Vec::new());
    }
    for (k, id) in store.ids().enumerate() {
        if !store.is_trainable(id) {
            continue;
        }
        let t = store.get_mut(id);
        let grad = t.grad().expect("checked above").to_vec();
        let v = &mut state.velocity[k];
        if v.len() != grad.len() {
            *v = vec![0.0; grad.len()];
        }
        sgd_update(t.data_mut(), &grad, v, lr, state.momentum);
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub bootstrap: BootstrapParams,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            lr0: DEFAULT_LR0,
            momentum: DEFAULT_MOMENTUM,
            bootstrap: BootstrapParams::default(),
            seed: 0,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub report: LossReport,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
    pub iters_per_epoch: usize,
}

impl LossCurve {
    pub const CSV_HEADER: &'static str = "iteration,bootstrap,iou,total,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.iteration, r.report.bootstrap, r.report.iou, r.report.total, r.lr
            );
        }
        out
    }

    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.records
            .chunks(self.iters_per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.report.total).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Last-epoch mean over first-epoch mean.
    pub fn reduction_ratio(&self) -> Option<f64> {
        let m = self.epoch_means();
        Some(m.last()? / m.first()?)
    }
}

/// `n` training phantoms, each reduced to the stack around its busiest slice
/// on a `canvas`-sized grid.
pub fn toy_dataset(n: usize, canvas: usize, seed: u64) -> Result<Vec<Stack2_5D>> {
    let opts = StackOptions { canvas, ..Default::default() };
    make_training_set(n, &PhantomRanges::training(), seed)?
        .iter()
        .map(|p| make_stack(&p.volume, &p.mask, busiest_slice(&p.mask), &opts))
        .collect()
}

/// Mini-batches of one stack, reshuffled every epoch.
pub fn train_toy(model: &mut DenseRaUnet, data: &[Stack2_5D], cfg: &TrainConfig) -> Result<LossCurve> {
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    cfg.bootstrap.validate()?;
    let mut state = SgdState::new(cfg.lr0, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LossCurve { records: Vec::with_capacity(cfg.epochs * data.len()), iters_per_epoch: data.len() };

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let stack = &data[i];
            let mut g = Graph::new().with_execution(cfg.exec);
            let x = g.constant(stack.input_tensor());
            let p = model.forward(&mut g, x, Mode::Train)?;
            let loss = combined_loss(&mut g, p, stack.label.data(), &cfg.bootstrap)?;
            if !loss.report.total.is_finite() {
                return Err(Error::Domain(format!("non-finite loss at iteration {}", state.iteration)));
            }
            g.backward(loss.total)?;
            model.store.zero_grad();
            model.store.collect_grads(&g);
            let lr = state.lr();
            curve.records.push(LossRecord { iteration: state.iteration, report: loss.report, lr });
            sgd_step(&mut model.store, &mut state)?;
        }
    }
    Ok(curve)
}

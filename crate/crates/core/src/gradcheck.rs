//! Finite-difference verification of analytic gradients.
//!
//! Each case wraps a block (or loss) as `out = f(inputs; params)` and checks
//! `d/dθ Σ(out ⊙ R)` for every input element and every trainable parameter,
//! where `R` is a fixed random projection. The numeric side only ever calls
//! the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{bootstrap_loss, combined_loss, iou_loss, BootstrapParams};
use crate::nn::{
    BatchNormLayer, Conv2dLayer, ConvTranspose2dLayer, Ctx, DecoderModule, DenseBlock, Edb, Initializer, Mode,
    ParamStore, Rau, Scse,
};
use crate::par::{self, Execution};
use crate::tensor::{finite_diff_grad, ConvGeom, Graph, Tensor, Var};

/// `|analytic − numeric| <= atol + rtol·|numeric|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rtol: 1e-4, atol: 1e-6 }
    }
}

impl Tolerance {
    /// Relative tolerance `rtol` with `atol = rtol / 100`.
    pub fn scaled(rtol: f64) -> Self {
        Tolerance { rtol, atol: rtol * 1e-2 }
    }

    /// How far past the tolerance band a pair is; `<= 1` passes.
    pub fn ratio(&self, analytic: f64, numeric: f64) -> f64 {
        let err = (analytic - numeric).abs();
        let band = self.atol + self.rtol * numeric.abs();
        if band == 0.0 {
            if err == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            err / band
        }
    }
}

/// Central-difference step.
pub const FD_EPS: f64 = 1e-6;

type ForwardFn = Box<dyn Fn(&mut Ctx, &[Var]) -> Result<Var> + Send + Sync>;

pub struct GradCase {
    pub name: String,
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub mode: Mode,
    pub forward: ForwardFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub n_checked: usize,
    pub max_abs_err: f64,
    /// Largest `err / (atol + rtol·|numeric|)`.
    pub worst_ratio: f64,
    pub passed: bool,
}

impl GradCase {
    fn projected(&self, store: &ParamStore, inputs: &[Tensor], proj: Option<&Tensor>) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let mut st = store.clone();
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = {
            let mut cx = Ctx::new(&mut g, &mut st, self.mode);
            (self.forward)(&mut cx, &xs)?
        };
        let value = g.value(out).clone();
        let s = match proj {
            Some(r) => value.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            None => value.data().iter().sum(),
        };
        Ok((s, value))
    }

    /// Compares backward() against central differences.
    pub fn check(&self, tol: Tolerance, eps: f64, seed: u64) -> Result<GradReport> {
        let (_, out) = self.projected(&self.store, &self.inputs, None)?;
        let proj = if out.len() == 1 {
            Tensor::full(out.shape(), 1.0)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            Tensor::rand_uniform(out.shape(), -1.0, 1.0, &mut rng)
        };

        // analytic
        let mut g = Graph::new();
        let mut st = self.store.clone();
        let xs: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = {
            let mut cx = Ctx::new(&mut g, &mut st, self.mode);
            (self.forward)(&mut cx, &xs)?
        };
        let r = g.constant(proj.clone());
        let prod = g.mul(out, r)?;
        let loss = g.sum_all(prod)?;
        g.backward(loss)?;
        let mut analytic_store = self.store.clone();
        analytic_store.zero_grad();
        analytic_store.collect_grads(&g);

        let mut pairs: Vec<(f64, f64)> = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            let zeros = vec![0.0; self.inputs[i].len()];
            let a = g.grad(*x).map(|v| v.to_vec()).unwrap_or(zeros);
            let n = finite_diff_grad(
                |probe| {
                    let mut ins = self.inputs.clone();
                    ins[i] = probe.clone();
                    Ok(self.projected(&self.store, &ins, Some(&proj))?.0)
                },
                &self.inputs[i],
                eps,
            )?;
            pairs.extend(a.into_iter().zip(n.data().iter().copied()));
        }
        for id in self.store.trainable_ids().collect::<Vec<_>>() {
            let len = self.store.get(id).len();
            let a = analytic_store.get(id).grad().map(|v| v.to_vec()).unwrap_or(vec![0.0; len]);
            let n = finite_diff_grad(
                |probe| {
                    let mut st = self.store.clone();
                    st.get_mut(id).data_mut().copy_from_slice(probe.data());
                    Ok(self.projected(&st, &self.inputs, Some(&proj))?.0)
                },
                self.store.get(id),
                eps,
            )?;
            pairs.extend(a.into_iter().zip(n.data().iter().copied()));
        }

        let mut max_abs_err: f64 = 0.0;
        let mut worst_ratio: f64 = 0.0;
        for &(a, n) in &pairs {
            max_abs_err = max_abs_err.max((a - n).abs());
            worst_ratio = worst_ratio.max(tol.ratio(a, n));
        }
        let passed = pairs.iter().all(|&(a, n)| a.is_finite() && n.is_finite()) && worst_ratio <= 1.0;
        Ok(GradReport { name: self.name.clone(), n_checked: pairs.len(), max_abs_err, worst_ratio, passed })
    }
}

/// Blocks covered by [`run_suite`], in report order.
pub const SUITE: &[&str] = &[
    "conv2d.dilation1",
    "conv2d.dilation2",
    "conv2d.dilation4",
    "conv2d.dilation8",
    "conv2d.stride2",
    "conv_transpose2d",
    "batchnorm.train",
    "dense_block",
    "rau",
    "scse",
    "edb",
    "decoder_module",
    "bootstrap_loss",
    "iou_loss",
    "combined_loss",
];

/// Re-draws every trainable parameter so gradients are exercised away from
/// the tiny-weight regime.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.trainable_ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let is_gamma = store.name(id).ends_with(".gamma");
        let t = Tensor::randn(&shape, 0.5, rng);
        let dst = store.get_mut(id).data_mut();
        for (d, v) in dst.iter_mut().zip(t.data()) {
            *d = if is_gamma { 1.0 + v } else { *v };
        }
    }
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Probabilities in (0.02, 0.98) kept at least `margin` away from the
/// hard-negative threshold so the selection is locally constant.
fn probs_away_from(rng: &mut ChaCha8Rng, n: usize, t: f64, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let p: f64 = rng.random_range(0.02..0.98);
            if ((1.0 - p) - t).abs() > margin {
                break p;
            }
        })
        .collect()
}

/// Builds the named case with shapes and values drawn from `seed`.
pub fn build_case(name: &str, seed: u64) -> Option<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(seed.wrapping_add(1), 0.5);
    let mut store = ParamStore::new();
    let st = &mut store;
    let case = |name: &str, store: ParamStore, inputs: Vec<Tensor>, mode: Mode, forward: ForwardFn| GradCase {
        name: name.to_string(),
        store,
        inputs,
        mode,
        forward,
    };

    let conv_case = |rng: &mut ChaCha8Rng, init: &mut Initializer, st: &mut ParamStore, geom: ConvGeom| {
        let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
        let (h, w) = (dim(rng, 4, 6), dim(rng, 4, 6));
        let layer = Conv2dLayer::new(st, init, "conv", c, o, 3, geom);
        let x = Tensor::randn(&[n, c, h, w], 1.0, rng);
        (layer, x)
    };

    let built = match name {
        "conv2d.dilation1" | "conv2d.dilation2" | "conv2d.dilation4" | "conv2d.dilation8" => {
            let r: usize = name.trim_start_matches("conv2d.dilation").parse().ok()?;
            let (layer, x) = conv_case(&mut rng, &mut init, st, ConvGeom::same_dilated(r));
            randomize(st, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| layer.forward(cx, xs[0])))
        }
        "conv2d.stride2" => {
            let (layer, x) = conv_case(&mut rng, &mut init, st, ConvGeom { stride: 2, padding: 1, dilation: 1 });
            randomize(st, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| layer.forward(cx, xs[0])))
        }
        "conv_transpose2d" => {
            let (n, c, o) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
            let (h, w) = (dim(&mut rng, 2, 3), dim(&mut rng, 2, 3));
            let layer = ConvTranspose2dLayer::upsample2(st, &mut init, "up", c, o);
            randomize(st, &mut rng);
            let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| layer.forward(cx, xs[0])))
        }
        "batchnorm.train" => {
            let (n, c) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4));
            let (h, w) = (dim(&mut rng, 2, 4), dim(&mut rng, 2, 4));
            let layer = BatchNormLayer::new(st, "bn", c);
            randomize(st, &mut rng);
            let x = Tensor::randn(&[n, c, h, w], 2.0, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| layer.forward(cx, xs[0])))
        }
        "dense_block" => {
            let c = dim(&mut rng, 2, 4);
            let block = DenseBlock::new(st, &mut init, "dense", c, 2, 2);
            randomize(st, &mut rng);
            let x = Tensor::randn(&[1, c, 4, 4], 1.0, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| block.forward(cx, xs[0])))
        }
        "rau" => {
            let rau = Rau::new(st, &mut init, "rau", 4, &[2, 4, 8]).ok()?;
            randomize(st, &mut rng);
            let x = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| rau.forward(cx, xs[0])))
        }
        "scse" => {
            let scse = Scse::new(st, &mut init, "scse", 4, 2).ok()?;
            randomize(st, &mut rng);
            let x = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| scse.forward(cx, xs[0])))
        }
        "edb" => {
            let edb = Edb::new(st, &mut init, "edb", 4, 2);
            randomize(st, &mut rng);
            let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
            case(name, store, vec![x], Mode::Train, Box::new(move |cx, xs| edb.forward(cx, xs[0])))
        }
        "decoder_module" => {
            let dec = DecoderModule::new(st, &mut init, "dec", 3, 2, 4, 2).ok()?;
            randomize(st, &mut rng);
            let x = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng);
            let skip = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            case(name, store, vec![x, skip], Mode::Train, Box::new(move |cx, xs| dec.forward(cx, xs[0], xs[1])))
        }
        "bootstrap_loss" | "iou_loss" | "combined_loss" => {
            let n = dim(&mut rng, 4, 64);
            let params = BootstrapParams::default();
            let p = probs_away_from(&mut rng, n, params.t, 1e-3);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let x = Tensor::from_vec(p);
            let f: ForwardFn = match name {
                "bootstrap_loss" => Box::new(move |cx, xs| Ok(bootstrap_loss(cx.g, xs[0], &labels, &params)?.node)),
                "iou_loss" => Box::new(move |cx, xs| iou_loss(cx.g, xs[0], &labels)),
                _ => Box::new(move |cx, xs| Ok(combined_loss(cx.g, xs[0], &labels, &params)?.total)),
            };
            case(name, store, vec![x], Mode::Train, f)
        }
        _ => return None,
    };
    Some(built)
}

/// Runs every block in [`SUITE`] for one seed.
pub fn run_suite(seed: u64, tol: Tolerance, exec: Execution) -> Result<Vec<GradReport>> {
    let reports = par::map(exec, SUITE, |name| {
        let case = build_case(name, seed).expect("suite names are all buildable");
        case.check(tol, FD_EPS, seed)
    });
    reports.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_block_builds() {
        for name in SUITE {
            assert!(build_case(name, 3).is_some(), "{name}");
        }
        assert!(build_case("nope", 3).is_none());
    }

    #[test]
    fn rau_passes_on_one_seed() {
        let r = build_case("rau", 11).unwrap().check(Tolerance::default(), FD_EPS, 11).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.n_checked > 144);
    }

    #[test]
    fn zero_tolerance_fails() {
        let r = build_case("conv2d.dilation1", 5).unwrap().check(Tolerance::scaled(0.0), FD_EPS, 5).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn broken_gradient_is_caught() {
        // a forward whose output depends on the input through a non-tracked
        // constant has zero analytic gradient but non-zero numeric gradient
        let case = GradCase {
            name: "detached".into(),
            store: ParamStore::new(),
            inputs: vec![Tensor::from_vec(vec![0.3, -1.2])],
            mode: Mode::Train,
            forward: Box::new(|cx, xs| {
                let detached = cx.g.value(xs[0]).clone();
                let c = cx.g.constant(detached);
                cx.g.mul(c, c)
            }),
        };
        let r = case.check(Tolerance::default(), FD_EPS, 1).unwrap();
        assert!(!r.passed);
    }
}

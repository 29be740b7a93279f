//! Weighted bootstrap loss, exponential soft-IoU loss and their sum.
//!
//! Both losses are built from tensor ops, so their gradients come from the
//! same backward pass as the network's.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLIP, 1 − PROB_CLIP]` before any log.
pub const PROB_CLIP: f64 = 1e-7;
/// Smoothing added to both sides of the IoU ratio.
pub const IOU_EPS: f64 = 1e-7;

/// Hard-negative threshold `t` and class weights `alpha` (negatives) and
/// `beta` (positives).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapParams {
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        BootstrapParams { t: 0.9, alpha: 8.0, beta: 1.0 }
    }
}

impl BootstrapParams {
    pub fn new(t: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = BootstrapParams { t, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(invalid!("bootstrap threshold t must lie in (0,1), got {}", self.t));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(invalid!("bootstrap weights must be non-negative"));
        }
        Ok(())
    }
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub bootstrap: f64,
    pub iou: f64,
    pub total: f64,
    pub n_hard_neg: usize,
    pub n_pos: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BootstrapLoss {
    pub node: Var,
    pub n_hard_neg: usize,
    pub n_pos: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CombinedLoss {
    /// Graph node holding bootstrap + IoU.
    pub total: Var,
    pub report: LossReport,
}

fn check_labels(g: &Graph, p: Var, labels: &[u8]) -> Result<()> {
    if g.value(p).len() != labels.len() {
        return Err(shape_err!(
            "{} probabilities vs {} labels",
            g.value(p).len(),
            labels.len()
        ));
    }
    if let Some(v) = labels.iter().find(|&&v| v > 1) {
        return Err(invalid!("label value {v} is not 0 or 1"));
    }
    Ok(())
}

fn mask_const(g: &mut Graph, shape: &[usize], mask: Vec<f64>) -> Result<Var> {
    let t = if shape.is_empty() { Tensor::scalar(mask[0]) } else { Tensor::new(shape, mask)? };
    Ok(g.constant(t))
}

/// `−[α·mean_{hard neg} ln(1−p) + β·mean_{pos} ln p]`.
///
/// A negative pixel is hard when its background probability `1 − p` is
/// below `t`. The selection is evaluated on the forward values and held
/// fixed during differentiation; an empty selection contributes 0.
pub fn bootstrap_loss(g: &mut Graph, p: Var, labels: &[u8], params: &BootstrapParams) -> Result<BootstrapLoss> {
    params.validate()?;
    check_labels(g, p, labels)?;
    let shape = g.shape(p).to_vec();
    let pc = g.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)?;

    let probs = g.data(pc);
    let neg: Vec<f64> = probs
        .iter()
        .zip(labels)
        .map(|(&pi, &y)| (y == 0 && 1.0 - pi < params.t) as u8 as f64)
        .collect();
    let pos: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let n_hard_neg = neg.iter().filter(|&&v| v > 0.0).count();
    let n_pos = labels.iter().filter(|&&y| y == 1).count();

    let neg_mask = mask_const(g, &shape, neg)?;
    let pos_mask = mask_const(g, &shape, pos)?;

    let bg = g.neg(pc)?;
    let bg = g.add_scalar(bg, 1.0)?;
    let log_bg = g.log(bg)?;
    let log_fg = g.log(pc)?;

    let neg_sel = g.mul(log_bg, neg_mask)?;
    let neg_sum = g.sum_all(neg_sel)?;
    let neg_term = g.mul_scalar(neg_sum, params.alpha / n_hard_neg.max(1) as f64)?;

    let pos_sel = g.mul(log_fg, pos_mask)?;
    let pos_sum = g.sum_all(pos_sel)?;
    let pos_term = g.mul_scalar(pos_sum, params.beta / n_pos.max(1) as f64)?;

    let both = g.add(neg_term, pos_term)?;
    let zero = g.scalar(0.0);
    let node = g.sub(zero, both)?;
    Ok(BootstrapLoss { node, n_hard_neg, n_pos })
}

/// `−ln((Σpg + ε) / (Σp + Σg − Σpg + ε))`.
pub fn iou_loss(g: &mut Graph, p: Var, labels: &[u8]) -> Result<Var> {
    check_labels(g, p, labels)?;
    let shape = g.shape(p).to_vec();
    let gt_sum: f64 = labels.iter().map(|&v| v as f64).sum();
    let gt = mask_const(g, &shape, labels.iter().map(|&v| v as f64).collect())?;

    let pg = g.mul(p, gt)?;
    let inter = g.sum_all(pg)?;
    let p_sum = g.sum_all(p)?;
    let p_plus_g = g.add_scalar(p_sum, gt_sum)?;
    let union = g.sub(p_plus_g, inter)?;

    let num = g.add_scalar(inter, IOU_EPS)?;
    let den = g.add_scalar(union, IOU_EPS)?;
    let log_den = g.log(den)?;
    let log_num = g.log(num)?;
    g.sub(log_den, log_num)
}

/// Bootstrap loss plus IoU loss, as one graph node plus a value report.
pub fn combined_loss(g: &mut Graph, p: Var, labels: &[u8], params: &BootstrapParams) -> Result<CombinedLoss> {
    let boot = bootstrap_loss(g, p, labels, params)?;
    let iou = iou_loss(g, p, labels)?;
    let total = g.add(boot.node, iou)?;
    let report = LossReport {
        bootstrap: g.value(boot.node).item(),
        iou: g.value(iou).item(),
        total: g.value(total).item(),
        n_hard_neg: boot.n_hard_neg,
        n_pos: boot.n_pos,
    };
    Ok(CombinedLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_boot(p: &[f64], y: &[u8], params: BootstrapParams) -> (f64, usize, usize) {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_vec(p.to_vec()));
        let b = bootstrap_loss(&mut g, pv, y, &params).unwrap();
        (g.value(b.node).item(), b.n_hard_neg, b.n_pos)
    }

    fn eval_iou(p: &[f64], y: &[u8]) -> f64 {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_vec(p.to_vec()));
        let l = iou_loss(&mut g, pv, y).unwrap();
        g.value(l).item()
    }

    #[test]
    fn bootstrap_worked_example() {
        // negatives have background probabilities 0.95, 0.8, 0.6
        let p = [0.5, 0.5, 0.05, 0.2, 0.4];
        let y = [1, 1, 0, 0, 0];
        let (l, n_neg, n_pos) = eval_boot(&p, &y, BootstrapParams::default());
        let expect = -(8.0 * (0.8f64.ln() + 0.6f64.ln()) / 2.0 + (0.5f64.ln() * 2.0) / 2.0);
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 3.6289).abs() < 1e-3, "{l}");
        assert_eq!((n_neg, n_pos), (2, 2));
    }

    #[test]
    fn bootstrap_all_easy_negatives_is_zero() {
        let (l, n_neg, n_pos) = eval_boot(&[0.01; 6], &[0; 6], BootstrapParams::default());
        assert_eq!(l, 0.0);
        assert!(l.is_sign_positive());
        assert_eq!((n_neg, n_pos), (0, 0));
    }

    #[test]
    fn default_params() {
        let d = BootstrapParams::default();
        assert_eq!((d.t, d.alpha, d.beta), (0.9, 8.0, 1.0));
        assert!(BootstrapParams::new(1.0, 8.0, 1.0).is_err());
        assert!(BootstrapParams::new(0.5, -1.0, 1.0).is_err());
    }

    #[test]
    fn saturated_probabilities_stay_finite() {
        let (l, _, _) = eval_boot(&[0.0, 1.0], &[1, 0], BootstrapParams::default());
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn iou_perfect_overlap() {
        let y = [1, 0, 1, 1, 0];
        let p: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        assert!(eval_iou(&p, &y).abs() <= 1e-6);
    }

    #[test]
    fn iou_half_positive_uniform_half() {
        let y: Vec<u8> = (0..64).map(|i| (i % 2) as u8).collect();
        let l = eval_iou(&[0.5; 64], &y);
        assert!((l - 3f64.ln()).abs() < 1e-6, "{l}");
    }

    #[test]
    fn iou_empty_is_zero() {
        assert!(eval_iou(&[0.0; 8], &[0; 8]).abs() < 1e-12);
    }

    #[test]
    fn combined_adds_components() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![0.5, 0.5, 0.05, 0.2, 0.4]));
        let c = combined_loss(&mut g, p, &[1, 1, 0, 0, 0], &BootstrapParams::default()).unwrap();
        let r = c.report;
        assert_eq!(r.total, r.bootstrap + r.iou);
        assert_eq!(g.value(c.total).item(), r.total);
    }

    #[test]
    fn label_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![0.5, 0.5]));
        assert!(iou_loss(&mut g, p, &[1]).is_err());
        assert!(bootstrap_loss(&mut g, p, &[1, 0, 0], &BootstrapParams::default()).is_err());
        assert!(iou_loss(&mut g, p, &[1, 2]).is_err());
    }

    #[test]
    fn equal_weights_all_hard_matches_balanced_nll() {
        let p = [0.3, 0.7, 0.2, 0.6, 0.45, 0.15];
        let y = [1, 1, 0, 0, 0, 1];
        let params = BootstrapParams::new(0.99, 2.0, 2.0).unwrap();
        let (l, n_neg, _) = eval_boot(&p, &y, params);
        assert_eq!(n_neg, 3);
        // plain class-balanced negative log-likelihood
        let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0.0, 0.0);
        for (&pi, &yi) in p.iter().zip(&y) {
            if yi == 1 {
                pos -= f64::ln(pi);
                np += 1.0;
            } else {
                neg -= f64::ln(1.0 - pi);
                nn += 1.0;
            }
        }
        let nll = 2.0 * (pos / np + neg / nn);
        assert!((l - nll).abs() < 1e-12);
    }
}

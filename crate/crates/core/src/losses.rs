//! Supervised Dice loss, prediction ensembling, KL variance maps and the
//! confidence-weighted cross pseudo supervision objective.
//!
//! All maps are `[N, C, H, W]` probability tensors recorded on a [`Graph`].
//! Variance maps are per pixel (`[N, 1, H, W]`); every expectation in the
//! objective is a mean over pixels and batch items.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Smoothing constant in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) == g.shape(b) {
        Ok(())
    } else {
        Err(Error::shape(op, g.shape(a), g.shape(b)))
    }
}

/// `1 − mean_{n,c} (2·Σ p·g + ε) / (Σ p + Σ g + ε)`, sums over pixels.
pub fn dice_loss(g: &mut Graph, probs: Var, target: Var) -> Result<Var> {
    same_shape(g, "dice_loss", probs, target)?;
    g.value(probs).dims4("dice_loss")?;
    let inter = g.mul(probs, target)?;
    let inter = g.sum(inter, Some(&[2, 3]))?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_const(num, DICE_SMOOTH)?;
    let sp = g.sum(probs, Some(&[2, 3]))?;
    let sg = g.sum(target, Some(&[2, 3]))?;
    let den = g.add(sp, sg)?;
    let den = g.add_const(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean(ratio, None)?;
    let neg = g.neg(mean)?;
    g.add_const(neg, 1.0)
}

/// `(p_o + p_f) / 2`.
pub fn ensemble(g: &mut Graph, p_o: Var, p_f: Var) -> Result<Var> {
    same_shape(g, "ensemble", p_o, p_f)?;
    let s = g.add(p_o, p_f)?;
    g.scale(s, 0.5)
}

/// Per-pixel `Σ_c p_f·log(p_f / p_o)`, as `[N, 1, H, W]`. Both logs clamp.
pub fn kl_variance(g: &mut Graph, p_f: Var, p_o: Var) -> Result<Var> {
    same_shape(g, "kl_variance", p_f, p_o)?;
    g.value(p_f).dims4("kl_variance")?;
    let lf = g.log(p_f)?;
    let lo = g.log(p_o)?;
    let d = g.sub(lf, lo)?;
    let t = g.mul(p_f, d)?;
    g.sum(t, Some(&[1]))
}

/// Per-pixel cross-entropy `−Σ_c y·log p`, as `[N, 1, H, W]`.
pub fn cross_entropy_map(g: &mut Graph, probs: Var, target: Var) -> Result<Var> {
    same_shape(g, "cross_entropy", probs, target)?;
    let lp = g.log(probs)?;
    let t = g.mul(target, lp)?;
    let s = g.sum(t, Some(&[1]))?;
    g.neg(s)
}

/// How the pseudo-label cross-entropy is weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacpsOptions {
    /// Weight by `e^{−V}` and add `V`; when false the loss is plain cross pseudo supervision.
    pub confidence: bool,
    /// Stop the gradient through the `e^{−V}` weight.
    pub detach_weight: bool,
}

impl Default for CacpsOptions {
    fn default() -> Self {
        Self {
            confidence: true,
            detach_weight: false,
        }
    }
}

/// Everything the cross-supervision term needs from the four forward passes.
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet {
    pub p_o1: Var,
    pub p_f1: Var,
    pub p_o2: Var,
    pub p_f2: Var,
    pub p_e1: Var,
    pub p_e2: Var,
    pub v1: Var,
    pub v2: Var,
    /// Detached one-hot argmax of `p_e1`.
    pub y1: Var,
    /// Detached one-hot argmax of `p_e2`.
    pub y2: Var,
}

impl PredictionSet {
    pub fn build(g: &mut Graph, p_o1: Var, p_f1: Var, p_o2: Var, p_f2: Var) -> Result<Self> {
        for (a, b) in [(p_o1, p_f1), (p_o1, p_o2), (p_o1, p_f2)] {
            same_shape(g, "prediction set", a, b)?;
        }
        let p_e1 = ensemble(g, p_o1, p_f1)?;
        let p_e2 = ensemble(g, p_o2, p_f2)?;
        let v1 = kl_variance(g, p_f1, p_o1)?;
        let v2 = kl_variance(g, p_f2, p_o2)?;
        let y1 = g.one_hot_argmax_channels(p_e1)?;
        let y2 = g.one_hot_argmax_channels(p_e2)?;
        Ok(Self {
            p_o1,
            p_f1,
            p_o2,
            p_f2,
            p_e1,
            p_e2,
            v1,
            v2,
            y1,
            y2,
        })
    }

    /// Restricts every map to the given batch items.
    pub fn select(&self, g: &mut Graph, items: &[usize]) -> Result<Self> {
        let mut pick = |v: Var| g.select_items(v, items);
        Ok(Self {
            p_o1: pick(self.p_o1)?,
            p_f1: pick(self.p_f1)?,
            p_o2: pick(self.p_o2)?,
            p_f2: pick(self.p_f2)?,
            p_e1: pick(self.p_e1)?,
            p_e2: pick(self.p_e2)?,
            v1: pick(self.v1)?,
            v2: pick(self.v2)?,
            y1: pick(self.y1)?,
            y2: pick(self.y2)?,
        })
    }
}

fn directed_term(
    g: &mut Graph,
    variance: Var,
    target_probs: Var,
    pseudo: Var,
    opts: CacpsOptions,
) -> Result<Var> {
    let ce = cross_entropy_map(g, target_probs, pseudo)?;
    if !opts.confidence {
        return g.mean(ce, None);
    }
    let v = if opts.detach_weight {
        g.detach(variance)
    } else {
        variance
    };
    let nv = g.neg(v)?;
    let w = g.exp(nv)?;
    let weighted = g.mul(w, ce)?;
    let t = g.add(weighted, variance)?;
    g.mean(t, None)
}

/// `(l_a, l_b)`: network 1's pseudo label and variance weight network 2's
/// ensemble prediction, and vice versa.
pub fn cacps_loss(g: &mut Graph, preds: &PredictionSet, opts: CacpsOptions) -> Result<(Var, Var)> {
    let l_a = directed_term(g, preds.v1, preds.p_e2, preds.y1, opts)?;
    let l_b = directed_term(g, preds.v2, preds.p_e1, preds.y2, opts)?;
    Ok((l_a, l_b))
}

/// `dice(p_o1, g) + dice(p_o2, g)` over the labeled items.
pub fn supervised_loss(g: &mut Graph, p_o1: Var, p_o2: Var, target: Var) -> Result<Var> {
    let d1 = dice_loss(g, p_o1, target)?;
    let d2 = dice_loss(g, p_o2, target)?;
    g.add(d1, d2)
}

/// `l_s + β·l_cacps`.
pub fn total_loss(g: &mut Graph, l_s: Var, l_cacps: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let w = g.scale(l_cacps, beta)?;
    g.add(l_s, w)
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_a: f64,
    pub l_b: f64,
    pub l_cacps: f64,
    pub total: f64,
    pub beta: f64,
    /// Mean of `V1` and `V2` over all pixels.
    pub mean_variance: f64,
    /// False when the batch held no labeled item.
    pub supervised_present: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_dice_is_zero() {
        let mut g = Graph::new();
        let y = t(&[1, 2, 2, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let p = g.param(y.clone());
        let y = g.constant(y);
        let l = dice_loss(&mut g, p, y).unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-4);
    }

    #[test]
    fn uniform_dice_balanced_two_class() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 2, 2, 2], 0.5));
        let y = g.constant(t(&[1, 2, 2, 2], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]));
        let l = dice_loss(&mut g, p, y).unwrap();
        // per class (2·0.5·2 + ε)/(0.5·4 + 2 + ε)
        let per = (2.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
        assert!((g.value(l).item().unwrap() - (1.0 - per)).abs() < 1e-15);
        assert!((g.value(l).item().unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn ensemble_cases() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2, 1, 1], &[1.0, 0.0]));
        let b = g.constant(t(&[1, 2, 1, 1], &[0.0, 1.0]));
        let e = ensemble(&mut g, a, b).unwrap();
        assert_eq!(g.value(e).data(), &[0.5, 0.5]);
        let same = ensemble(&mut g, a, a).unwrap();
        assert_eq!(g.value(same), g.value(a));
    }

    #[test]
    fn kl_identical_and_scalar_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2, 1, 2], &[0.3, 0.9, 0.7, 0.1]));
        let v = kl_variance(&mut g, a, a).unwrap();
        assert_eq!(g.shape(v), &[1, 1, 1, 2]);
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));

        let pf = g.constant(t(&[1, 2, 1, 1], &[0.8, 0.2]));
        let po = g.constant(t(&[1, 2, 1, 1], &[0.5, 0.5]));
        let v = kl_variance(&mut g, pf, po).unwrap();
        let expect = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((g.value(v).item().unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.192_745).abs() < 1e-6);
    }

    #[test]
    fn zero_variance_collapses_to_cross_entropy() {
        let mut g = Graph::new();
        let p1 = g.constant(t(&[1, 2, 1, 2], &[0.9, 0.4, 0.1, 0.6]));
        let p2 = g.constant(t(&[1, 2, 1, 2], &[0.3, 0.2, 0.7, 0.8]));
        let preds = PredictionSet::build(&mut g, p1, p1, p2, p2).unwrap();
        let (la, _) = cacps_loss(&mut g, &preds, CacpsOptions::default()).unwrap();
        // y1 = argmax p1 = (0, 1); CE of p2 against it
        let expect = -(0.3f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((g.value(la).item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn perfect_cross_agreement() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]));
        let preds = PredictionSet::build(&mut g, p, p, p, p).unwrap();
        let (la, lb) = cacps_loss(&mut g, &preds, CacpsOptions::default()).unwrap();
        assert!(g.value(la).item().unwrap().abs() < 1e-9);
        assert!(g.value(lb).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let ls = g.constant(Tensor::scalar(0.5));
        let lc = g.constant(Tensor::scalar(0.2));
        let tl = total_loss(&mut g, ls, lc, 3.0).unwrap();
        assert!((g.value(tl).item().unwrap() - 1.1).abs() < 1e-15);
        let zero = total_loss(&mut g, ls, lc, 0.0).unwrap();
        assert_eq!(g.value(zero).item().unwrap(), 0.5);
        assert!(total_loss(&mut g, ls, lc, -1.0).is_err());
    }

    #[test]
    fn supervised_loss_symmetric_and_mixed() {
        let mut g = Graph::new();
        let y = t(&[1, 2, 2, 2], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let perfect = g.constant(y.clone());
        let uniform = g.constant(Tensor::full(&[1, 2, 2, 2], 0.5));
        let target = g.constant(y);
        let a = supervised_loss(&mut g, perfect, uniform, target).unwrap();
        let b = supervised_loss(&mut g, uniform, perfect, target).unwrap();
        assert_eq!(g.value(a).item().unwrap(), g.value(b).item().unwrap());
        assert!((g.value(a).item().unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 2, 2, 2], 0.5));
        let b = g.constant(Tensor::full(&[1, 3, 2, 2], 1.0 / 3.0));
        assert!(dice_loss(&mut g, a, b).is_err());
        assert!(ensemble(&mut g, a, b).is_err());
        assert!(kl_variance(&mut g, a, b).is_err());
        assert!(PredictionSet::build(&mut g, a, a, b, b).is_err());
    }
}

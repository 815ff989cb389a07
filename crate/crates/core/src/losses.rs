//! Deep-supervision and border-point losses.

use serde::{Deserialize, Serialize};

use crate::backbone::SCALES;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Per-scale weights of the coarse heads, finest first.
    pub ordinary: Vec<f64>,
    /// Per-layer weights of the refined border points.
    pub border: Vec<f64>,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ordinary: vec![0.5, 0.3, 0.1, 0.1],
            border: vec![0.5, 0.3, 0.1, 0.1],
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ordinary", &self.ordinary), ("border", &self.border)] {
            if w.len() != SCALES || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("loss: {name} weights {w:?} must be {SCALES} non-negative values")));
            }
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!("loss: dice_eps {} must be positive", self.dice_eps)));
        }
        Ok(())
    }
}

/// Dice plus BCE of one prediction/target pair.
pub fn dice_bce<R: Real>(g: &mut Graph<R>, p: Var, y: &Tensor<R>, eps: f64) -> Result<Var> {
    let d = g.dice_loss(p, y, eps)?;
    let b = g.bce_loss(p, y)?;
    g.add(d, b)
}

fn weighted<R: Real>(
    g: &mut Graph<R>,
    preds: &[Option<Var>],
    targets: &[Tensor<R>],
    weights: &[f64],
    eps: f64,
    op: &'static str,
) -> Result<Var> {
    if preds.len() != weights.len() || targets.len() != weights.len() {
        return Err(Error::shape(
            op,
            format!("{} predictions, {} targets, {} weights", preds.len(), targets.len(), weights.len()),
        ));
    }
    let mut total = g.constant(Tensor::scalar(R::zero()))?;
    for ((p, y), &w) in preds.iter().zip(targets).zip(weights) {
        let Some(p) = p else { continue };
        let term = dice_bce(g, *p, y, eps)?;
        let term = g.scale(term, R::lit(w))?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// `sum_l w_l (dice + bce)` over the coarse heads.
pub fn ordinary_loss<R: Real>(g: &mut Graph<R>, probs: &[Var], targets: &[Tensor<R>], w: &LossWeights) -> Result<Var> {
    let preds: Vec<Option<Var>> = probs.iter().map(|&p| Some(p)).collect();
    weighted(g, &preds, targets, &w.ordinary, w.dice_eps, "ordinary_loss")
}

/// Same weighting over refined point probabilities; layers without points contribute zero.
pub fn border_loss<R: Real>(
    g: &mut Graph<R>,
    point_probs: &[Option<Var>],
    targets: &[Tensor<R>],
    w: &LossWeights,
) -> Result<Var> {
    weighted(g, point_probs, targets, &w.border, w.dice_eps, "border_loss")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[10], 0.5)).unwrap();
        let y = Tensor::from_fn(&[10], |i| (i % 2) as f64);
        let b = g.bce_loss(p, &y).unwrap();
        assert!((value(&g, b) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dice_extremes() {
        let mut g = Graph::new();
        let y = Tensor::from_fn(&[20], |i| f64::from(i < 5));
        let p = g.constant(y.clone()).unwrap();
        let d = g.dice_loss(p, &y, 1.0).unwrap();
        assert!(value(&g, d).abs() < 1e-12);
        let zero = g.constant(Tensor::zeros(&[20])).unwrap();
        let d = g.dice_loss(zero, &y, 1.0).unwrap();
        assert!((value(&g, d) - (1.0 - 1.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn single_scale_term_is_weighted() {
        let mut g = Graph::new();
        let targets: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::from_fn(&[8], |i| f64::from(i < 3))).collect();
        let mut probs = Vec::new();
        for (l, t) in targets.iter().enumerate() {
            let p = if l == 1 { t.map(|v| 0.8 * v + 0.1) } else { t.clone() };
            probs.push(g.constant(p).unwrap());
        }
        let w = LossWeights::default();
        let total = ordinary_loss(&mut g, &probs, &targets, &w).unwrap();
        let alone = dice_bce(&mut g, probs[1], &targets[1], 1.0).unwrap();
        let perfect = dice_bce(&mut g, probs[0], &targets[0], 1.0).unwrap();
        let expected = 0.3 * value(&g, alone) + (0.5 + 0.1 + 0.1) * value(&g, perfect);
        assert!((value(&g, total) - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_border_layers_are_zero() {
        let mut g = Graph::<f64>::new();
        let targets = vec![Tensor::zeros(&[0, 1]); 4];
        let b = border_loss(&mut g, &[None; 4], &targets, &LossWeights::default()).unwrap();
        assert_eq!(value(&g, b), 0.0);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let mut w = LossWeights::default();
        w.border = vec![0.5, -0.1, 0.1, 0.1];
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.ordinary.pop();
        assert!(w.validate().is_err());
    }
}

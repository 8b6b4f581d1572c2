//! The four training objectives and their weighted sum.

use crate::error::{Error, Result};
use crate::groundtruth::{ConfidenceMask, DensityMap};
use crate::tensor::{Graph, Var};

/// Weight used everywhere when the mask has no foreground at all.
pub const EMPTY_MASK_WEIGHT: f64 = 1e-6;

/// Per-pixel BCE weights: with `f = mean(mask)`, foreground pixels weigh
/// `1 - f` and background pixels `f`; an empty mask gives `1e-6` everywhere.
pub fn bce_weights(mask: &ConfidenceMask) -> Vec<f64> {
    let f = mask.foreground_fraction();
    if f == 0.0 {
        return vec![EMPTY_MASK_WEIGHT; mask.values.len()];
    }
    mask.values.data().iter().map(|&y| if y == 1.0 { 1.0 - f } else { f }).collect()
}

pub fn loss_cross_entropy(g: &mut Graph, logits: Var, target_class: usize) -> Result<Var> {
    g.cross_entropy(logits, target_class)
}

/// Mean weighted binary cross-entropy of `confidence` against `mask`.
pub fn loss_weighted_bce(g: &mut Graph, confidence: Var, mask: &ConfidenceMask) -> Result<Var> {
    if g.value(confidence).shape() != mask.values.shape() {
        return Err(Error::Shape(format!(
            "confidence {:?} vs mask {:?}",
            g.value(confidence).shape(),
            mask.values.shape()
        )));
    }
    let weights = bce_weights(mask);
    g.weighted_bce(confidence, mask.values.data(), &weights)
}

/// `0.5 * ||pred - target||^2` for a single sample.
pub fn loss_euclidean(g: &mut Graph, pred: Var, target: &DensityMap) -> Result<Var> {
    g.half_squared_error(pred, &target.values)
}

/// Values of each objective for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_fus: f64,
    pub l_den: f64,
    pub l_con: f64,
    pub l_mul: f64,
    pub l_whole: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_fus,l_den,l_con,l_mul,l_whole";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.l_fus, self.l_den, self.l_con, self.l_mul, self.l_whole
        )
    }
}

/// Loss weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1e-2,
        }
    }
}

/// Scalar graph nodes of the four objectives. `l_con` is absent for models
/// without a confidence module.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_fus: Var,
    pub l_den: Var,
    pub l_con: Option<Var>,
    pub l_mul: Var,
}

/// Records `l_fus + l_den + lambda1 * l_con + lambda2 * l_mul` and returns
/// its node with the per-term values.
pub fn loss_whole(g: &mut Graph, terms: &LossTerms, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let mut parts = vec![(terms.l_fus, 1.0), (terms.l_den, 1.0)];
    if let Some(c) = terms.l_con {
        parts.push((c, w.lambda1));
    }
    parts.push((terms.l_mul, w.lambda2));
    let total = g.weighted_sum(&parts)?;
    let scalar = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        l_fus: scalar(terms.l_fus),
        l_den: scalar(terms.l_den),
        l_con: terms.l_con.map(scalar).unwrap_or(0.0),
        l_mul: scalar(terms.l_mul),
        l_whole: scalar(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mask(values: Vec<f64>, h: usize, w: usize) -> ConfidenceMask {
        ConfidenceMask {
            values: Tensor::new(&[1, h, w], values).unwrap(),
            resolution_divisor: 1,
        }
    }

    #[test]
    fn weights_for_empty_quarter_and_half_masks() {
        assert_eq!(bce_weights(&mask(vec![0.0; 6], 2, 3)), vec![1e-6; 6]);
        let w = bce_weights(&mask(vec![1.0, 0.0, 0.0, 0.0], 2, 2));
        assert_eq!(w, vec![0.75, 0.25, 0.25, 0.25]);
        let w = bce_weights(&mask(vec![1.0, 0.0, 1.0, 0.0], 2, 2));
        assert_eq!(w, vec![0.5; 4]);
    }

    #[test]
    fn perfect_confidence_has_near_zero_loss() {
        let m = mask(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2, 3);
        let mut g = Graph::new();
        let c = g.constant(m.values.clone());
        let l = loss_weighted_bce(&mut g, c, &m).unwrap();
        let v = g.value(l).data()[0];
        assert!((0.0..1e-5).contains(&v), "{v}");
    }

    #[test]
    fn uniform_half_confidence_on_balanced_mask() {
        let m = mask(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 2, 2], 0.5));
        let l = loss_weighted_bce(&mut g, c, &m).unwrap();
        assert!((g.value(l).data()[0] - 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_collapses_loss() {
        let m = mask(vec![0.0; 9], 3, 3);
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(&[1, 3, 3], (0..9).map(|i| i as f64 / 8.0).collect()).unwrap());
        let l = loss_weighted_bce(&mut g, c, &m).unwrap();
        assert!(g.value(l).data()[0] <= 1e-6 * (1e-7f64).ln().abs() + 1e-15);
    }

    #[test]
    fn bce_shape_mismatch() {
        let m = mask(vec![0.0; 4], 2, 2);
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 1, 4], 0.5));
        assert!(matches!(loss_weighted_bce(&mut g, c, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn euclidean_examples() {
        let target = DensityMap {
            values: Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap(),
            resolution_divisor: 1,
        };
        let mut g = Graph::new();
        let same = g.param(target.values.clone());
        let l = loss_euclidean(&mut g, same, &target).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        let off = g.param(Tensor::new(&[1, 1, 3], vec![1.0, 1.0, 0.0]).unwrap());
        let l = loss_euclidean(&mut g, off, &target).unwrap();
        assert_eq!(g.value(l).data()[0], 2.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(off).unwrap(), &[1.0, 0.0, -2.0]);

        let bad = g.param(Tensor::zeros(&[1, 3, 1]));
        assert!(loss_euclidean(&mut g, bad, &target).is_err());
    }

    #[test]
    fn whole_loss_arithmetic() {
        let mut g = Graph::new();
        let one = || Tensor::scalar(1.0);
        let terms = LossTerms {
            l_fus: g.param(one()),
            l_den: g.param(one()),
            l_con: Some(g.param(one())),
            l_mul: g.param(one()),
        };
        let (total, b) = loss_whole(&mut g, &terms, LossWeights::default()).unwrap();
        assert_eq!(b.l_whole, 4.01);
        g.backward(total).unwrap();
        assert_eq!(g.grad(terms.l_con.unwrap()).unwrap(), &[2.0]);
        assert_eq!(g.grad(terms.l_mul).unwrap(), &[0.01]);

        let mut g = Graph::new();
        let terms = LossTerms {
            l_fus: g.param(one()),
            l_den: g.param(one()),
            l_con: None,
            l_mul: g.param(one()),
        };
        let w = LossWeights {
            lambda1: 2.0,
            lambda2: 0.0,
        };
        let (total, b) = loss_whole(&mut g, &terms, w).unwrap();
        assert_eq!(b.l_whole, 2.0);
        g.backward(total).unwrap();
        assert_eq!(g.grad(terms.l_mul).unwrap(), &[0.0]);
    }
}

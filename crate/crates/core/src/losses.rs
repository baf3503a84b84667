//! Class-balanced binary log-likelihood, masked L2 and the combined
//! objective, each returning its gradient with respect to the predictions.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::boundary_net::{BoundaryOutputs, OutputGrads};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::supervision::SupervisionTargets;

/// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `alpha+ = N / N+`, `alpha- = N / N-`.
    Balanced,
    /// `alpha+ = alpha- = 1`: plain binary cross-entropy.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub loss: f64,
    /// `dloss / dpred`, zero on masked elements.
    pub grad: Vec<f64>,
    pub counts: ClassCounts,
}

fn check_lengths(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("loss target", pred.len(), target.len()));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(Error::shape("loss mask", pred.len(), m.len()));
        }
    }
    Ok(())
}

/// Weighted binary log-likelihood, negated so that lower is better:
/// `-(1/N) sum [a+ y log p + a- (1 - y) log(1 - p)]` over unmasked elements.
///
/// A class with no members is counted as one element so the weights stay finite.
pub fn weighted_bll(pred: &[f64], target: &[f64], mask: Option<&[bool]>, weighting: Weighting) -> Result<LossTerm> {
    check_lengths(pred, target, mask)?;
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let mut counts = ClassCounts::default();
    for (i, &y) in target.iter().enumerate() {
        if valid(i) {
            if y > 0.5 {
                counts.n_pos += 1;
            } else {
                counts.n_neg += 1;
            }
        }
    }
    let n = counts.n_pos + counts.n_neg;
    if n == 0 {
        return Err(Error::Invalid("loss over zero valid elements".into()));
    }
    if counts.n_pos == 0 || counts.n_neg == 0 {
        log::warn!(
            "degenerate labels ({} positive, {} negative); clamping the empty class count to 1",
            counts.n_pos,
            counts.n_neg
        );
    }
    let nf = n as f64;
    let (a_pos, a_neg) = match weighting {
        Weighting::Balanced => (nf / counts.n_pos.max(1) as f64, nf / counts.n_neg.max(1) as f64),
        Weighting::Unit => (1.0, 1.0),
    };
    let mut sum = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if !valid(i) {
            continue;
        }
        let y = target[i];
        let raw = pred[i];
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        sum += a_pos * y * p.ln() + a_neg * (1.0 - y) * (1.0 - p).ln();
        if raw > PROB_EPS && raw < 1.0 - PROB_EPS {
            grad[i] = -(a_pos * y / p - a_neg * (1.0 - y) / (1.0 - p)) / nf;
        }
    }
    Ok(LossTerm {
        loss: -sum / nf,
        grad,
        counts,
    })
}

/// Mean squared error over unmasked elements.
pub fn l2_loss(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<LossTerm> {
    check_lengths(pred, target, mask)?;
    let valid = |i: usize| mask.map_or(true, |m| m[i]);
    let n = (0..pred.len()).filter(|&i| valid(i)).count();
    if n == 0 {
        return Err(Error::Invalid("L2 loss over an empty mask".into()));
    }
    let nf = n as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if valid(i) {
            let diff = pred[i] - target[i];
            sum += diff * diff;
            grad[i] = 2.0 * diff / nf;
        }
    }
    Ok(LossTerm {
        loss: sum / nf,
        grad,
        counts: ClassCounts::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_start: f64,
    pub l_end: f64,
    pub l_cc: f64,
    pub l_cr: f64,
    pub l_tam: f64,
    pub l_pam: f64,
    pub l_total: f64,
    pub start_counts: ClassCounts,
    pub end_counts: ClassCounts,
    pub duration_counts: ClassCounts,
}

fn contiguous<'a, D: ndarray::Dimension>(a: &'a ndarray::Array<f64, D>) -> &'a [f64] {
    a.as_slice().expect("standard layout")
}

/// Combined objective `lambda_tam * L_TAM + lambda_pam * L_PAM` and its
/// gradient with respect to every network output.
pub fn total_loss(out: &BoundaryOutputs, targets: &SupervisionTargets, cfg: &ModelConfig) -> Result<(LossReport, OutputGrads)> {
    let (d, t) = out.p_cc.dim();
    if targets.l_start.len() != t || targets.g_iou.dim() != (d, t) {
        return Err(Error::shape(
            "targets",
            format!("T={t}, D={d}"),
            format!("T={}, D={}", targets.l_start.len(), targets.g_iou.nrows()),
        ));
    }
    let mask = targets.valid_mask.as_slice().expect("standard layout");
    let start = weighted_bll(contiguous(&out.p_start), contiguous(&targets.l_start), None, Weighting::Balanced)?;
    let end = weighted_bll(contiguous(&out.p_end), contiguous(&targets.l_end), None, Weighting::Balanced)?;
    let cc = weighted_bll(contiguous(&out.p_cc), contiguous(&targets.l_duration), Some(mask), Weighting::Balanced)?;
    let reg_target = if cfg.regress_binary {
        &targets.l_duration
    } else {
        &targets.g_iou
    };
    let cr = l2_loss(contiguous(&out.p_cr), contiguous(reg_target), Some(mask))?;

    let l_tam = start.loss + end.loss;
    let l_pam = cc.loss + cfg.lambda_reg * cr.loss;
    let report = LossReport {
        l_start: start.loss,
        l_end: end.loss,
        l_cc: cc.loss,
        l_cr: cr.loss,
        l_tam,
        l_pam,
        l_total: cfg.lambda_tam * l_tam + cfg.lambda_pam * l_pam,
        start_counts: start.counts,
        end_counts: end.counts,
        duration_counts: cc.counts,
    };
    let scale_vec = |g: Vec<f64>, s: f64| Array1::from(g) * s;
    let scale_map = |g: Vec<f64>, s: f64| Array2::from_shape_vec((d, t), g).expect("cells") * s;
    let grads = OutputGrads {
        p_start: scale_vec(start.grad, cfg.lambda_tam),
        p_end: scale_vec(end.grad, cfg.lambda_tam),
        p_cc: scale_map(cc.grad, cfg.lambda_pam),
        p_cr: scale_map(cr.grad, cfg.lambda_pam * cfg.lambda_reg),
    };
    Ok((report, grads))
}

/// Loss value only, for validation curves.
pub fn loss_value(out: &BoundaryOutputs, targets: &SupervisionTargets, cfg: &ModelConfig) -> Result<f64> {
    total_loss(out, targets, cfg).map(|(r, _)| r.l_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_example_with_consistent_predictions() {
        // alpha+ = alpha- = 2; each element contributes -2 ln(p_correct) / 4.
        let t = weighted_bll(&[0.9, 0.1, 0.2, 0.8], &[1.0, 0.0, 0.0, 1.0], None, Weighting::Balanced).unwrap();
        assert!((t.loss - (-(0.72f64).ln())).abs() < 1e-12);
        assert!((t.loss - 0.3285).abs() < 1e-4);
    }

    #[test]
    fn balanced_example_reading_all_predictions_as_positive_probability() {
        let t = weighted_bll(&[0.9, 0.9, 0.8, 0.8], &[1.0, 0.0, 0.0, 1.0], None, Weighting::Balanced).unwrap();
        let expect = -0.5 * (0.9f64.ln() + 0.1f64.ln() + 0.2f64.ln() + 0.8f64.ln());
        assert!((t.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn half_predictions() {
        let t = weighted_bll(&[0.5, 0.5], &[1.0, 0.0], None, Weighting::Balanced).unwrap();
        assert!((t.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_predictions_approach_zero() {
        let t = weighted_bll(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], None, Weighting::Balanced).unwrap();
        assert!(t.loss < 1e-6);
    }

    #[test]
    fn degenerate_targets_stay_finite() {
        let t = weighted_bll(&[0.3, 0.6], &[1.0, 1.0], None, Weighting::Balanced).unwrap();
        assert!(t.loss.is_finite());
        assert_eq!(t.counts, ClassCounts { n_pos: 2, n_neg: 0 });
    }

    #[test]
    fn mask_excludes_elements() {
        let mask = [true, false, true];
        let a = weighted_bll(&[0.7, 0.2, 0.4], &[1.0, 1.0, 0.0], Some(&mask), Weighting::Balanced).unwrap();
        let b = weighted_bll(&[0.7, 0.9, 0.4], &[1.0, 0.0, 0.0], Some(&mask), Weighting::Balanced).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad[1], 0.0);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_loss(&[0.3, 0.4], &[0.3, 0.4], None).unwrap().loss, 0.0);
        let t = l2_loss(&[0.5; 4], &[0.0; 4], None).unwrap();
        assert_eq!(t.loss, 0.25);
        let mask = [true, true, false];
        let a = l2_loss(&[0.1, 0.2, 0.3], &[0.0, 0.0, 0.0], Some(&mask)).unwrap();
        let b = l2_loss(&[0.1, 0.2, 0.9], &[0.0, 0.0, 0.0], Some(&mask)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert!(l2_loss(&[0.1], &[0.0], Some(&[false])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pred = [0.31, 0.77, 0.52, 0.12, 0.9];
        let target = [1.0, 0.0, 1.0, 0.0, 0.0];
        let mask = [true, true, false, true, true];
        let h = 1e-6;
        for which in 0..2 {
            let f = |p: &[f64]| match which {
                0 => weighted_bll(p, &target, Some(&mask), Weighting::Balanced).unwrap(),
                _ => l2_loss(p, &target, Some(&mask)).unwrap(),
            };
            let g = f(&pred).grad;
            for i in 0..pred.len() {
                let mut up = pred;
                up[i] += h;
                let mut dn = pred;
                dn[i] -= h;
                let num = (f(&up).loss - f(&dn).loss) / (2.0 * h);
                assert!((num - g[i]).abs() <= 1e-4 * num.abs().max(1e-3), "term {which} elem {i}: {num} vs {}", g[i]);
            }
        }
    }

    fn toy(t: usize, d: usize) -> (BoundaryOutputs, SupervisionTargets, ModelConfig) {
        let cfg = ModelConfig {
            temporal_scale: t,
            max_duration: d,
            ..ModelConfig::default()
        };
        let (l_duration, g_iou, valid_mask) = crate::supervision::duration_labels(&[(1.0, 3.0)], t, d).unwrap();
        let (l_start, l_end) =
            crate::supervision::boundary_labels(&[(1.0, 3.0)], t, Default::default()).unwrap();
        let targets = SupervisionTargets {
            l_start,
            l_end,
            l_duration,
            g_iou,
            valid_mask: valid_mask.clone(),
        };
        let out = BoundaryOutputs {
            p_start: Array1::from_elem(t, 0.5),
            p_end: Array1::from_elem(t, 0.5),
            p_cc: Array2::from_elem((d, t), 0.5),
            p_cr: Array2::from_elem((d, t), 0.5),
            valid_mask,
        };
        (out, targets, cfg)
    }

    #[test]
    fn total_loss_composes_terms() {
        let (out, targets, cfg) = toy(4, 2);
        let (r, _) = total_loss(&out, &targets, &cfg).unwrap();
        // Balanced BLL at p = 0.5 is 2 ln 2 whatever the label mix.
        let bll_half = 2.0 * 2.0f64.ln();
        // Valid cells: d=1 -> t=0..3, d=2 -> t=0..2. G_iou for [1,3]:
        // d=1: [0,1]=0, [1,2]=.5, [2,3]=.5, [3,4]=0; d=2: [0,2]=1/3, [1,3]=1, [2,4]=1/3.
        let g = [0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0, 1.0 / 3.0];
        let l2 = g.iter().map(|v: &f64| (0.5 - v).powi(2)).sum::<f64>() / 7.0;
        assert!((r.l_start - bll_half).abs() < 1e-12);
        assert!((r.l_cc - bll_half).abs() < 1e-12);
        assert!((r.l_cr - l2).abs() < 1e-12);
        assert!((r.l_total - (2.0 * bll_half + bll_half + 10.0 * l2)).abs() < 1e-12);
        assert!((r.l_total - (r.l_tam + r.l_pam)).abs() < 1e-9);
    }

    #[test]
    fn zero_tam_weight_leaves_pam_only() {
        let (out, targets, mut cfg) = toy(4, 2);
        cfg.lambda_tam = 0.0;
        let (r, g) = total_loss(&out, &targets, &cfg).unwrap();
        assert_eq!(r.l_total, cfg.lambda_pam * r.l_pam);
        assert!(g.p_start.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_outputs_give_near_zero_loss() {
        let (mut out, targets, cfg) = toy(4, 2);
        out.p_start = targets.l_start.clone();
        out.p_end = targets.l_end.clone();
        out.p_cc = targets.l_duration.clone();
        out.p_cr = targets.g_iou.clone();
        let (r, _) = total_loss(&out, &targets, &cfg).unwrap();
        assert!(r.l_total < 1e-5, "{}", r.l_total);
    }

    #[test]
    fn binary_regression_flag_switches_target() {
        let (out, targets, mut cfg) = toy(4, 2);
        cfg.regress_binary = true;
        let (r, _) = total_loss(&out, &targets, &cfg).unwrap();
        assert!((r.l_cr - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_nonnegative(
            pairs in prop::collection::vec((0.0..1.0f64, prop::bool::ANY), 2..20),
            rot in 0usize..20,
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let target: Vec<f64> = pairs.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
            let a = weighted_bll(&pred, &target, None, Weighting::Balanced).unwrap();
            let k = rot % pred.len();
            let mut pr = pred.clone();
            pr.rotate_left(k);
            let mut tr = target.clone();
            tr.rotate_left(k);
            let b = weighted_bll(&pr, &tr, None, Weighting::Balanced).unwrap();
            prop_assert!(a.loss >= 0.0 && a.loss.is_finite());
            prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.max(1.0));
        }

        #[test]
        fn unit_weighting_is_plain_cross_entropy(
            pairs in prop::collection::vec((1e-3..0.999f64, prop::bool::ANY), 1..20),
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let target: Vec<f64> = pairs.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
            let t = weighted_bll(&pred, &target, None, Weighting::Unit).unwrap();
            let bce = -pred.iter().zip(&target)
                .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                .sum::<f64>() / pred.len() as f64;
            prop_assert_eq!(t.loss, bce);
        }
    }
}

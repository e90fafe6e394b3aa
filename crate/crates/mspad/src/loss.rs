//! Combined map-level training loss: binary cross-entropy of the pooled
//! score plus a weighted mean of per-cell binary cross-entropies.
//!
//! `total = bce(mean(M), t) + lambda * mean_ij bce(M_ij, t)`, lambda > 0
//! (default 10). Probabilities are clamped to [1e-7, 1 - 1e-7] before the
//! logs.

use ndarray::Array2;
use thiserror::Error;

use crate::fcn::ScoreMap;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("lambda must be > 0, got {0}")]
    NonPositiveLambda(f64),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
}

/// The two loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_gap: f64,
    pub l_patch: f64,
    pub lambda: f64,
    pub total: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_label(t: u8) -> Result<f64, LossError> {
    match t {
        0 => Ok(0.0),
        1 => Ok(1.0),
        other => Err(LossError::BadLabel(other)),
    }
}

/// Binary cross-entropy of a probability against a {0, 1} label.
pub fn bce(p: f64, t: u8) -> Result<f64, LossError> {
    let t = check_label(t)?;
    let p = clamp_prob(p);
    Ok(-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
}

/// Cross-entropy of the pooled map score.
pub fn loss_gap(map: &ScoreMap, t: u8) -> Result<f64, LossError> {
    bce(map.gap_score(), t)
}

/// Mean per-cell cross-entropy.
pub fn loss_patch(map: &ScoreMap, t: u8) -> Result<f64, LossError> {
    let t = check_label(t)?;
    let n = map.values().len() as f64;
    let sum: f64 = map
        .values()
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / n)
}

/// The combined loss; `lambda` must be strictly positive.
pub fn total_loss(map: &ScoreMap, t: u8, lambda: f64) -> Result<LossBreakdown, LossError> {
    if !(lambda > 0.0) {
        return Err(LossError::NonPositiveLambda(lambda));
    }
    let l_gap = loss_gap(map, t)?;
    let l_patch = loss_patch(map, t)?;
    Ok(LossBreakdown {
        l_gap,
        l_patch,
        lambda,
        total: l_gap + lambda * l_patch,
    })
}

fn bce_grad(p: f64, t: f64) -> f64 {
    let p = clamp_prob(p);
    (p - t) / (p * (1.0 - p))
}

/// d(total)/d(M_ij) for every map cell.
pub fn total_loss_map_grad(
    map: &ScoreMap,
    t: u8,
    lambda: f64,
) -> Result<Array2<f64>, LossError> {
    if !(lambda > 0.0) {
        return Err(LossError::NonPositiveLambda(lambda));
    }
    let t = check_label(t)?;
    let n = map.values().len() as f64;
    let gap_term = bce_grad(map.gap_score(), t) / n;
    Ok(map.values().mapv(|p| gap_term + lambda / n * bce_grad(p, t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_map(p: f64, h: usize, w: usize) -> ScoreMap {
        ScoreMap::new(Array2::from_elem((h, w), p))
    }

    #[test]
    fn bce_at_half_is_ln2() {
        assert!((bce(0.5, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce(0.5, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_confident_correct_is_clamp_level() {
        let at_one = bce(1.0, 1).unwrap();
        assert!(at_one > 0.0 && at_one < 2e-7);
        // Monotone in the distance from certainty.
        assert!(bce(1.0 - 1e-6, 1).unwrap() > at_one);
        assert!(bce(1.0 - 1e-3, 1).unwrap() > bce(1.0 - 1e-6, 1).unwrap());
    }

    #[test]
    fn bce_confident_wrong() {
        assert!((bce(0.9, 0).unwrap() - 2.302585092994046).abs() < 1e-12);
        assert!((bce(0.9, 0).unwrap() + 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bad_label_is_rejected() {
        assert!(matches!(bce(0.5, 2), Err(LossError::BadLabel(2))));
    }

    #[test]
    fn gap_loss_of_uniform_map() {
        let map = uniform_map(0.5, 10, 20);
        assert!((loss_gap(&map, 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gap_loss_uses_map_mean() {
        let map = uniform_map(0.25, 4, 4);
        assert!((loss_gap(&map, 1).unwrap() - 1.3862943611198906).abs() < 1e-12);
        // Definitionally equal to bce of the pooled score.
        let bce_of_mean = bce(map.gap_score(), 1).unwrap();
        assert_eq!(loss_gap(&map, 1).unwrap(), bce_of_mean);
    }

    #[test]
    fn patch_loss_hand_sum() {
        let map = ScoreMap::new(arr2(&[[0.25, 0.75]]));
        let expected = (-(0.25f64.ln()) - 0.75f64.ln()) / 2.0;
        assert!((loss_patch(&map, 1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.8369882167858556).abs() < 1e-12);
    }

    #[test]
    fn patch_loss_of_uniform_map_is_bce() {
        let map = uniform_map(0.3, 5, 7);
        assert!((loss_patch(&map, 0).unwrap() - bce(0.3, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_of_uniform_half_map() {
        let map = uniform_map(0.5, 10, 20);
        let breakdown = total_loss(&map, 1, 10.0).unwrap();
        let expected = 11.0 * std::f64::consts::LN_2;
        assert!((breakdown.total - expected).abs() < 1e-12);
        assert!((breakdown.total - 7.624618986159398).abs() < 1e-9);
        assert_eq!(breakdown.total, breakdown.l_gap + breakdown.lambda * breakdown.l_patch);
    }

    #[test]
    fn zero_lambda_is_rejected() {
        let map = uniform_map(0.5, 2, 2);
        assert!(matches!(
            total_loss(&map, 1, 0.0),
            Err(LossError::NonPositiveLambda(_))
        ));
        assert!(total_loss(&map, 1, -1.0).is_err());
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let map = uniform_map(1.0, 10, 20);
        let breakdown = total_loss(&map, 1, 10.0).unwrap();
        assert!(breakdown.total >= 0.0);
        assert!(breakdown.total < 1e-5);
    }

    #[test]
    fn jensen_gap_le_patch_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let h = rng.gen_range(1..8);
            let w = rng.gen_range(1..8);
            let map = ScoreMap::new(Array2::from_shape_fn((h, w), |_| rng.gen::<f64>()));
            let t = rng.gen_range(0..2u8);
            let gap = loss_gap(&map, t).unwrap();
            let patch = loss_patch(&map, t).unwrap();
            assert!(gap <= patch + 1e-12, "gap {gap} > patch {patch}");
        }
    }

    #[test]
    fn map_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = Array2::from_shape_fn((3, 4), |_| rng.gen_range(0.05..0.95));
        for t in [0u8, 1u8] {
            let map = ScoreMap::new(values.clone());
            let grad = total_loss_map_grad(&map, t, 10.0).unwrap();
            let eps = 1e-7;
            for iy in 0..3 {
                for ix in 0..4 {
                    let mut plus = values.clone();
                    plus[(iy, ix)] += eps;
                    let mut minus = values.clone();
                    minus[(iy, ix)] -= eps;
                    let lp = total_loss(&ScoreMap::new(plus), t, 10.0).unwrap().total;
                    let lm = total_loss(&ScoreMap::new(minus), t, 10.0).unwrap().total;
                    let fd = (lp - lm) / (2.0 * eps);
                    let rel = (grad[(iy, ix)] - fd).abs() / fd.abs().max(1e-8);
                    assert!(rel < 1e-5, "cell ({iy},{ix}) t={t}: analytic {} vs fd {fd}", grad[(iy, ix)]);
                }
            }
        }
    }
}

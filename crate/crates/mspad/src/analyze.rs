//! Feature analysis: per-channel mean intensities, flattened score maps,
//! and a 2-D stochastic-neighbor embedding for qualitative export.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::fcn::{FcnModel, ModelError, Scalar};
use crate::metrics::ScoredSample;
use crate::preprocess::DataCube;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("need at least {needed} samples for perplexity {perplexity} (3x), found {found}")]
    TooFewSamples {
        needed: usize,
        found: usize,
        perplexity: usize,
    },
    #[error("feature vectors have inconsistent lengths ({0} vs {1})")]
    InconsistentLengths(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FeatureKind {
    #[serde(rename = "MEAN_INTENSITY")]
    MeanIntensity,
    #[serde(rename = "SCORE_MAP")]
    ScoreMap,
}

/// One sample's feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub sample_id: String,
    pub values: Vec<f64>,
    pub kind: FeatureKind,
}

/// Per-channel spatial means of a cube (f64 accumulation).
pub fn mean_intensity(sample_id: &str, cube: &DataCube) -> FeatureVector {
    let data = cube.data();
    let (c, h, w) = data.dim();
    let per_channel = (h * w) as f64;
    let values = (0..c)
        .map(|ch| {
            data.index_axis(ndarray::Axis(0), ch)
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / per_channel
        })
        .collect();
    FeatureVector {
        sample_id: sample_id.to_string(),
        values,
        kind: FeatureKind::MeanIntensity,
    }
}

/// The model's score map for a cube, flattened row-major.
pub fn score_map_features<T: Scalar>(
    sample_id: &str,
    model: &FcnModel<T>,
    cube: &DataCube,
) -> Result<FeatureVector, AnalyzeError> {
    let map = model.forward(cube)?;
    Ok(FeatureVector {
        sample_id: sample_id.to_string(),
        values: map.values().iter().copied().collect(),
        kind: FeatureKind::ScoreMap,
    })
}

fn pairwise_sq_dists(features: &[FeatureVector]) -> Result<Array2<f64>, AnalyzeError> {
    let n = features.len();
    let dim = features[0].values.len();
    for f in features {
        if f.values.len() != dim {
            return Err(AnalyzeError::InconsistentLengths(dim, f.values.len()));
        }
    }
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = features[i]
                .values
                .iter()
                .zip(&features[j].values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    Ok(d)
}

/// Conditional Gaussian affinities with per-point bandwidth found by
/// bisection on the target perplexity.
fn conditional_affinities(dists: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = dists.nrows();
    let target_entropy = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (mut beta_lo, mut beta_hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0f64;
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * dists[(i, j)]).exp();
                sum += w;
                weighted += w * dists[(i, j)];
            }
            // Shannon entropy of the conditional distribution.
            let entropy = if sum > 0.0 {
                beta * weighted / sum + sum.ln()
            } else {
                0.0
            };
            if (entropy - target_entropy).abs() < 1e-7 {
                break;
            }
            if entropy > target_entropy {
                beta_lo = beta;
                beta = if beta_hi.is_finite() {
                    (beta + beta_hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_hi = beta;
                beta = (beta + beta_lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let w = (-beta * dists[(i, j)]).exp();
                p[(i, j)] = w;
                sum += w;
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[(i, j)] /= sum;
            }
        }
    }
    p
}

/// 2-D stochastic-neighbor embedding (exact, quadratic) with Student-t
/// low-dimensional kernel, early exaggeration and momentum. Deterministic
/// in `seed`. Qualitative export only.
pub fn embed_2d(
    features: &[FeatureVector],
    perplexity: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>, AnalyzeError> {
    let n = features.len();
    let needed = (3.0 * perplexity).ceil() as usize;
    if n < needed {
        return Err(AnalyzeError::TooFewSamples {
            needed,
            found: n,
            perplexity: perplexity as usize,
        });
    }

    let dists = pairwise_sq_dists(features)?;
    let cond = conditional_affinities(&dists, perplexity);
    // Symmetrize.
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] = ((cond[(i, j)] + cond[(j, i)]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2)))
        .collect();

    let iterations = 1000;
    let exaggeration_until = 250;
    let learning_rate = (n as f64 / 12.0).max(50.0);
    let mut velocity = vec![(0.0f64, 0.0f64); n];
    let mut grad = vec![(0.0f64, 0.0f64); n];
    let mut gains = vec![(1.0f64, 1.0f64); n];

    for iter in 0..iterations {
        let exaggeration = if iter < exaggeration_until { 12.0 } else { 1.0 };
        let momentum = if iter < exaggeration_until { 0.5 } else { 0.8 };

        // Student-t affinities in the embedding.
        let mut q_unnorm = Array2::<f64>::zeros((n, n));
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i].0 - y[j].0;
                let dy = y[i].1 - y[j].1;
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q_unnorm[(i, j)] = w;
                q_unnorm[(j, i)] = w;
                q_sum += 2.0 * w;
            }
        }

        for g in grad.iter_mut() {
            *g = (0.0, 0.0);
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q_unnorm[(i, j)];
                let q = (w / q_sum).max(1e-12);
                let coeff = 4.0 * (exaggeration * p[(i, j)] - q) * w;
                grad[i].0 += coeff * (y[i].0 - y[j].0);
                grad[i].1 += coeff * (y[i].1 - y[j].1);
            }
        }
        for i in 0..n {
            // Adaptive per-coordinate gains damp oscillation.
            let update_gain = |gain: f64, g: f64, v: f64| -> f64 {
                if g.signum() != v.signum() {
                    (gain + 0.2).max(0.01)
                } else {
                    (gain * 0.8).max(0.01)
                }
            };
            gains[i].0 = update_gain(gains[i].0, grad[i].0, velocity[i].0);
            gains[i].1 = update_gain(gains[i].1, grad[i].1, velocity[i].1);
            velocity[i].0 = momentum * velocity[i].0 - learning_rate * gains[i].0 * grad[i].0;
            velocity[i].1 = momentum * velocity[i].1 - learning_rate * gains[i].1 * grad[i].1;
            y[i].0 += velocity[i].0;
            y[i].1 += velocity[i].1;
        }
        // Re-center.
        let (mx, my) = y
            .iter()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        let (mx, my) = (mx / n as f64, my / n as f64);
        for p in y.iter_mut() {
            p.0 -= mx;
            p.1 -= my;
        }
    }
    Ok(y)
}

/// One row of the misclassification overlay export.
#[derive(Debug, Clone, Serialize)]
pub struct OverlayRow {
    pub sample_id: String,
    pub x: f64,
    pub y: f64,
    pub label: u8,
    pub predicted: u8,
    pub misclassified: bool,
    pub pai_code: String,
}

/// Joins scored samples with embedding coordinates and marks the samples
/// misclassified at `threshold` (predicted attack when score >= threshold).
pub fn misclassification_overlay(
    scored: &[ScoredSample],
    coords: &[(f64, f64)],
    pai_codes: &[String],
    threshold: f64,
) -> Vec<OverlayRow> {
    scored
        .iter()
        .zip(coords)
        .zip(pai_codes)
        .map(|((s, &(x, y)), pai_code)| {
            let predicted = (s.score >= threshold) as u8;
            OverlayRow {
                sample_id: s.sample_id.clone(),
                x,
                y,
                label: s.label,
                predicted,
                misclassified: predicted != s.label,
                pai_code: pai_code.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn fv(id: &str, values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            sample_id: id.into(),
            values,
            kind: FeatureKind::MeanIntensity,
        }
    }

    #[test]
    fn constant_cube_features() {
        let cube = DataCube::new(Array3::from_elem((3, 8, 16), 0.37f32)).unwrap();
        let features = mean_intensity("s", &cube);
        assert_eq!(features.values.len(), 3);
        for v in &features.values {
            assert!((v - 0.37f32 as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn checkerboard_mean_is_half() {
        let cube = DataCube::new(Array3::from_shape_fn((1, 8, 16), |(_, y, x)| {
            ((x + y) % 2) as f32
        }))
        .unwrap();
        let features = mean_intensity("s", &cube);
        assert!((features.values[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_matches_double_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Array3::from_shape_fn((4, 8, 16), |_| rng.gen::<f32>());
        let cube = DataCube::new(data.clone()).unwrap();
        let features = mean_intensity("s", &cube);
        for c in 0..4 {
            let mut sum = 0.0f64;
            for y in 0..8 {
                for x in 0..16 {
                    sum += data[(c, y, x)] as f64;
                }
            }
            let oracle = sum / 128.0;
            assert!((features.values[c] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn score_map_features_match_forward() {
        use crate::fcn::{FcnModel, ModelConfig};
        use rand::{Rng, SeedableRng};
        let model = FcnModel::<f64>::new(ModelConfig::with_channels(2), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cube = DataCube::new(Array3::from_shape_fn((2, 80, 160), |_| rng.gen::<f32>()))
            .unwrap();
        let features = score_map_features("s", &model, &cube).unwrap();
        assert_eq!(features.values.len(), 200);
        let map = model.forward(&cube).unwrap();
        for (a, b) in features.values.iter().zip(map.values().iter()) {
            assert_eq!(a, b);
        }
    }

    fn blob_features(seed: u64, n: usize, center: f64) -> Vec<FeatureVector> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                fv(
                    &format!("b{center}_{i}"),
                    (0..4).map(|_| center + rng.gen_range(-0.1..0.1)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn too_few_samples_rejected() {
        let features = blob_features(1, 10, 0.0);
        assert!(matches!(
            embed_2d(&features, 30.0, 0),
            Err(AnalyzeError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn embedding_is_seed_deterministic() {
        let features = blob_features(1, 40, 0.0);
        let a = embed_2d(&features, 10.0, 3).unwrap();
        let b = embed_2d(&features, 10.0, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_points_stay_coincident() {
        use rand::{Rng, SeedableRng};
        // Clustered data: within a tight blob the bandwidth search sharpens
        // until an exact duplicate dominates its neighborhood.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = [
            [0.0, 0.0, 0.0, 0.0],
            [3.0, 3.0, 3.0, 3.0],
            [3.0, 0.0, 0.0, 0.0],
            [0.0, 3.0, 0.0, 0.0],
        ];
        let mut features: Vec<FeatureVector> = Vec::new();
        for (b, center) in centers.iter().enumerate() {
            for i in 0..10 {
                features.push(fv(
                    &format!("b{b}_{i}"),
                    center.iter().map(|c| c + 0.02 * rng.gen_range(-1.0..1.0)).collect(),
                ));
            }
        }
        features.push(features[0].clone());
        let coords = embed_2d(&features, 8.0, 1).unwrap();
        let dup = coords[coords.len() - 1];
        let orig = coords[0];
        let dist = ((dup.0 - orig.0).powi(2) + (dup.1 - orig.1).powi(2)).sqrt();
        let span = coords
            .iter()
            .flat_map(|&(x, y)| [x.abs(), y.abs()])
            .fold(0.0f64, f64::max)
            * 2.0;
        assert!(dist < 0.01 * span, "duplicate distance {dist}, span {span}");
    }

    fn silhouette(coords: &[(f64, f64)], labels: &[usize]) -> f64 {
        let n = coords.len();
        let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let (mut same_sum, mut same_n) = (0.0, 0usize);
            let (mut other_sum, mut other_n) = (0.0, 0usize);
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    same_sum += dist(coords[i], coords[j]);
                    same_n += 1;
                } else {
                    other_sum += dist(coords[i], coords[j]);
                    other_n += 1;
                }
            }
            let a = same_sum / same_n as f64;
            let b = other_sum / other_n as f64;
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn two_separated_blobs_stay_two_clusters() {
        let mut features = blob_features(7, 30, 0.0);
        features.extend(blob_features(8, 30, 5.0));
        let labels: Vec<usize> = (0..60).map(|i| i / 30).collect();
        let coords = embed_2d(&features, 10.0, 2).unwrap();
        let s = silhouette(&coords, &labels);
        assert!(s > 0.5, "silhouette {s}");
    }

    #[test]
    fn overlay_marks_misclassified() {
        let scored = vec![
            ScoredSample::new("a", 0.9, 1),
            ScoredSample::new("b", 0.1, 0),
            ScoredSample::new("c", 0.4, 1),
        ];
        let coords = vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        let codes = vec!["P01".to_string(), "bona-fide".to_string(), "P02".to_string()];
        let rows = misclassification_overlay(&scored, &coords, &codes, 0.5);
        assert_eq!(rows.iter().filter(|r| r.misclassified).count(), 1);
        assert!(rows[2].misclassified);

        // A perfect classifier at this threshold has zero flagged rows.
        let rows = misclassification_overlay(&scored[..2], &coords[..2], &codes[..2], 0.5);
        assert_eq!(rows.iter().filter(|r| r.misclassified).count(), 0);

        // Threshold 1.0+ flags every attack as missed.
        let rows = misclassification_overlay(&scored, &coords, &codes, 1.01);
        assert!(rows.iter().filter(|r| r.label == 1).all(|r| r.misclassified));
    }
}

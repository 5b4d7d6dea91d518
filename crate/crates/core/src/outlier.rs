//! Outlier targeting: points with few neighbors in a shadow model's
//! penultimate-layer feature space.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attacks::MembershipPrediction;
use crate::data::{ExampleRecord, PointId};
use crate::error::{Error, Result};
use crate::model::{to_matrix, Classifier};
use crate::numerics::{dot, l2_norm};

pub const DEFAULT_GAMMA: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEmbedding {
    pub point: PointId,
    pub z: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierParams {
    pub delta: f64,
    pub gamma: usize,
    pub beta: f64,
}

impl OutlierParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 2]", self.delta)));
        }
        if self.gamma < 1 {
            return Err(Error::Config("gamma must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1)", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: OutlierParams,
    pub achieved_fraction: f64,
    /// False when no δ brought the fraction within ±β/4 of β; `params`
    /// then holds the closest δ found.
    pub within_tolerance: bool,
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput("embedding lengths differ".into()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0))
}

/// Penultimate-layer embeddings of `points` under `model`.
pub fn embed(model: &Classifier, points: &[ExampleRecord]) -> Result<Vec<FeatureEmbedding>> {
    let (x, _) = to_matrix(points)?;
    let z = model.penultimate_batch(&x)?;
    Ok(points
        .iter()
        .zip(z.iter_rows())
        .map(|(p, r)| FeatureEmbedding {
            point: p.id,
            z: r.to_vec(),
        })
        .collect())
}

fn pairwise(embeddings: &[FeatureEmbedding]) -> Result<Vec<Vec<f64>>> {
    let n = embeddings.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(&embeddings[i].z, &embeddings[j].z)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Number of other points within cosine distance `delta` of each point.
pub fn neighbor_counts(embeddings: &[FeatureEmbedding], delta: f64) -> Result<Vec<usize>> {
    Ok(pairwise(embeddings)?
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v <= delta)
                .count()
        })
        .collect())
}

/// Points with fewer than `gamma` neighbors within `delta`.
pub fn find_outliers(embeddings: &[FeatureEmbedding], params: &OutlierParams) -> Result<BTreeSet<PointId>> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidInput(
            "outlier search needs at least two points".into(),
        ));
    }
    Ok(neighbor_counts(embeddings, params.delta)?
        .iter()
        .zip(embeddings)
        .filter(|(&c, _)| c < params.gamma)
        .map(|(_, e)| e.point)
        .collect())
}

const CALIBRATION_STEPS: usize = 60;

/// Bisects δ so that a β-fraction of the points are outliers for fixed γ.
pub fn calibrate_delta(embeddings: &[FeatureEmbedding], beta: f64, gamma: usize) -> Result<Calibration> {
    OutlierParams {
        delta: 0.0,
        gamma,
        beta,
    }
    .validate()?;
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "outlier search needs at least two points".into(),
        ));
    }
    // A point is an outlier iff its γ-th nearest distance exceeds δ.
    let kth: Vec<f64> = pairwise(embeddings)?
        .into_iter()
        .enumerate()
        .map(|(i, mut row)| {
            row.swap_remove(i);
            if row.len() < gamma {
                return f64::INFINITY;
            }
            row.sort_by(f64::total_cmp);
            row[gamma - 1]
        })
        .collect();
    let fraction = |delta: f64| kth.iter().filter(|&&k| k > delta).count() as f64 / n as f64;
    let tol = 0.25 * beta;

    let (mut lo, mut hi) = (0.0f64, 2.0f64);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for delta in [lo, hi] {
        let f = fraction(delta);
        if (f - beta).abs() < best.0 {
            best = ((f - beta).abs(), delta, f);
        }
    }
    for _ in 0..CALIBRATION_STEPS {
        if best.0 <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let f = fraction(mid);
        if (f - beta).abs() < best.0 {
            best = ((f - beta).abs(), mid, f);
        }
        if f > beta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        params: OutlierParams {
            delta: best.1,
            gamma,
            beta,
        },
        achieved_fraction: best.2,
        within_tolerance: best.0 <= tol,
    })
}

/// Precision of member predictions restricted to outliers; `None` when no
/// outlier is predicted a member.
pub fn outlier_precision(
    predictions: &[MembershipPrediction],
    truth: &BTreeMap<PointId, bool>,
    outliers: &BTreeSet<PointId>,
) -> Result<Option<f64>> {
    if outliers.is_empty() {
        return Err(Error::InvalidInput("empty outlier set".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for p in predictions
        .iter()
        .filter(|p| p.member && outliers.contains(&p.point))
    {
        match truth.get(&p.point) {
            Some(true) => tp += 1,
            Some(false) => fp += 1,
            None => {
                return Err(Error::InvalidInput(format!(
                    "no ground truth for point {}",
                    p.point
                )))
            }
        }
    }
    Ok((tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64))
}

//! Pose metrics: MPJPE, mAP at a distance threshold, Procrustes alignment
//! and a nearest-centroid purity score for latent entities.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DecaError, Result};

pub const UPPER_BODY: [&str; 9] = [
    "head",
    "neck",
    "r_shoulder",
    "l_shoulder",
    "r_elbow",
    "l_elbow",
    "r_hand",
    "l_hand",
    "torso",
];
pub const LOWER_BODY: [&str; 6] = ["r_hip", "l_hip", "r_knee", "l_knee", "r_foot", "l_foot"];

fn check_pair(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(DecaError::Dimension(format!(
            "prediction has {} joints, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean joint error in millimeters; inputs in meters, any number
/// of `(sample, joint)` rows.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum();
    Ok(1000.0 * s / pred.len() as f64)
}

/// Fraction of joints strictly closer than `threshold_m` to ground truth.
pub fn map_at_threshold(pred: &[[f64; 3]], gt: &[[f64; 3]], threshold_m: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(&p, &g)| dist(p, g) < threshold_m).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn centered(points: &[[f64; 3]]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let n = points.len() as f64;
    let mu = points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    (mu, points.iter().map(|p| Vector3::from(*p) - mu).collect())
}

fn rank_at_least_two(c: &[Vector3<f64>]) -> bool {
    let m = c.iter().fold(Matrix3::zeros(), |acc, v| acc + v * v.transpose());
    let mut sv = m.symmetric_eigenvalues().iter().map(|v| v.abs()).collect::<Vec<_>>();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[0] > 1e-18 && sv[1] > 1e-12 * sv[0]
}

/// Similarity transform `s·R·x + t` (proper rotation, `s > 0`) that best maps
/// `pred` onto `gt` in the least-squares sense, applied to `pred`.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(DecaError::Degenerate(format!(
            "Procrustes alignment needs at least 3 joints, got {}",
            pred.len()
        )));
    }
    let (mx, xc) = centered(pred);
    let (my, yc) = centered(gt);
    if !rank_at_least_two(&xc) || !rank_at_least_two(&yc) {
        return Err(DecaError::Degenerate("point set has rank < 2".into()));
    }
    let h = xc.iter().zip(&yc).fold(Matrix3::zeros(), |acc, (x, y)| acc + x * y.transpose());
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * dm * u.transpose();
    let sx: f64 = xc.iter().map(|x| x.norm_squared()).sum();
    let trace = svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2];
    let s = trace / sx;
    let t = my - s * r * mx;
    Ok(pred
        .iter()
        .map(|p| {
            let q = s * r * Vector3::from(*p) + t;
            [q.x, q.y, q.z]
        })
        .collect())
}

/// Per-joint centroids over samples, nearest-centroid assignment (ties to
/// the lowest joint index), fraction assigned to their own joint.
/// `entities` is `N × J` rows of length `dim`, sample-major.
pub fn cluster_purity(entities: &[f64], joints: usize, dim: usize) -> Result<f64> {
    let labels: Vec<usize> = (0..entities.len() / dim.max(1)).map(|i| i % joints.max(1)).collect();
    purity_with_labels(entities, &labels, joints, dim)
}

fn purity_with_labels(entities: &[f64], labels: &[usize], joints: usize, dim: usize) -> Result<f64> {
    if joints == 0 || dim == 0 || entities.len() % (joints * dim) != 0 || entities.len() < 2 * joints * dim {
        return Err(DecaError::Dimension(format!(
            "cluster purity needs at least 2 samples of {joints}x{dim} entities, got {} values",
            entities.len()
        )));
    }
    let mut cent = vec![0.0; joints * dim];
    let mut count = vec![0usize; joints];
    for (row, &l) in entities.chunks(dim).zip(labels) {
        count[l] += 1;
        for (c, &v) in cent[l * dim..(l + 1) * dim].iter_mut().zip(row) {
            *c += v;
        }
    }
    for (l, &c) in count.iter().enumerate() {
        cent[l * dim..(l + 1) * dim].iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let mut correct = 0usize;
    for (row, &l) in entities.chunks(dim).zip(labels) {
        let mut best = (f64::INFINITY, 0);
        for j in 0..joints {
            if count[j] == 0 {
                continue;
            }
            let d: f64 = row.iter().zip(&cent[j * dim..(j + 1) * dim]).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        correct += (best.1 == l) as usize;
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean and standard deviation of the purity obtained after randomly
/// permuting joint labels across all entities.
pub fn shuffled_purity_baseline(entities: &[f64], joints: usize, dim: usize, trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut labels: Vec<usize> = (0..entities.len() / dim.max(1)).map(|i| i % joints.max(1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(trials);
    for _ in 0..trials {
        labels.shuffle(&mut rng);
        vals.push(purity_with_labels(entities, &labels, joints, dim)?);
    }
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointStats {
    pub error_mm: f64,
    pub hit_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPartGroups {
    pub upper: Option<JointStats>,
    pub lower: Option<JointStats>,
    pub mean: JointStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub mpjpe_mm: f64,
    pub mpjpe_pa_mm: f64,
    pub map_010: f64,
    pub per_joint: BTreeMap<String, JointStats>,
    pub body_part_groups: BodyPartGroups,
    pub cluster_purity: Option<f64>,
    pub cluster_purity_shuffle_mean: Option<f64>,
    pub cluster_purity_shuffle_std: Option<f64>,
}

pub const MAP_THRESHOLD_M: f64 = 0.10;

fn group_stats(per_joint: &[(String, JointStats)], members: &[&str]) -> Option<JointStats> {
    let sel: Vec<&JointStats> = per_joint
        .iter()
        .filter(|(n, _)| members.contains(&n.as_str()))
        .map(|(_, s)| s)
        .collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    Some(JointStats {
        error_mm: sel.iter().map(|s| s.error_mm).sum::<f64>() / n,
        hit_rate: sel.iter().map(|s| s.hit_rate).sum::<f64>() / n,
    })
}

/// Builds a report from per-sample joint sets (meters, one `Vec` of `J`
/// joints per sample). `entities`, when given, holds `N·J·16` values.
pub fn compute_report(
    pred: &[Vec<[f64; 3]>],
    gt: &[Vec<[f64; 3]>],
    joint_names: &[String],
    entities: Option<&[f64]>,
) -> Result<MetricsReport> {
    let j = joint_names.len();
    if pred.len() != gt.len() || pred.is_empty() || pred.iter().chain(gt).any(|p| p.len() != j) {
        return Err(DecaError::Dimension(format!(
            "report needs matching non-empty sample lists of {j} joints"
        )));
    }
    let flat_p: Vec<[f64; 3]> = pred.iter().flatten().copied().collect();
    let flat_g: Vec<[f64; 3]> = gt.iter().flatten().copied().collect();
    let mut aligned = Vec::with_capacity(flat_p.len());
    for (p, g) in pred.iter().zip(gt) {
        aligned.extend(procrustes_align(p, g)?);
    }
    let per: Vec<(String, JointStats)> = joint_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let ps: Vec<[f64; 3]> = pred.iter().map(|p| p[k]).collect();
            let gs: Vec<[f64; 3]> = gt.iter().map(|g| g[k]).collect();
            let stats = JointStats {
                error_mm: mpjpe(&ps, &gs).expect("non-empty"),
                hit_rate: map_at_threshold(&ps, &gs, MAP_THRESHOLD_M).expect("non-empty"),
            };
            (name.clone(), stats)
        })
        .collect();
    let groups = BodyPartGroups {
        upper: group_stats(&per, &UPPER_BODY),
        lower: group_stats(&per, &LOWER_BODY),
        mean: JointStats {
            error_mm: per.iter().map(|(_, s)| s.error_mm).sum::<f64>() / j as f64,
            hit_rate: per.iter().map(|(_, s)| s.hit_rate).sum::<f64>() / j as f64,
        },
    };
    let (purity, shuffle) = match entities {
        Some(e) if pred.len() >= 2 => (
            Some(cluster_purity(e, j, 16)?),
            Some(shuffled_purity_baseline(e, j, 16, 20, 0)?),
        ),
        _ => (None, None),
    };
    Ok(MetricsReport {
        samples: pred.len(),
        mpjpe_mm: mpjpe(&flat_p, &flat_g)?,
        mpjpe_pa_mm: mpjpe(&aligned, &flat_g)?,
        map_010: map_at_threshold(&flat_p, &flat_g, MAP_THRESHOLD_M)?,
        per_joint: per.into_iter().collect(),
        body_part_groups: groups,
        cluster_purity: purity,
        cluster_purity_shuffle_mean: shuffle.map(|s| s.0),
        cluster_purity_shuffle_std: shuffle.map(|s| s.1),
    })
}

#[cfg(test)]
mod tests;

//! Complexity-based sample grouping and progressive stage planning.
//!
//! Train pairs are scored in (MSE, 1 - SSIM) space, standardized, clustered
//! with k-means (k-means++ seeding, Lloyd iterations, empty-cluster repair),
//! and ordered by ascending mean complexity so training proceeds easy to
//! hard. Test pairs are never grouped.

use crate::error::{Error, Result};
use crate::imagery::load_image;
use crate::metrics::{complexity_score, mse, ssim};
use crate::synthcloud::CorpusManifest;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_MAX_ITER: usize = 100;

/// Outcome of clustering one corpus.
#[derive(Debug, Clone)]
pub struct GroupingResult {
    pub k: usize,
    /// Centroids in standardized (MSE, 1 - SSIM) space.
    pub centroids: Vec<[f64; 2]>,
    /// Cluster index per input point, parallel to the input order.
    pub assignment: Vec<usize>,
    /// Cluster indices sorted by ascending mean complexity score.
    pub order: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective: Vec<f64>,
}

/// Ordered training stages: (group ids included, epoch count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: Vec<(Vec<usize>, usize)>,
}

impl StagePlan {
    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|(_, e)| e).sum()
    }
}

fn squared_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Within-cluster sum of squares.
fn wcss(points: &[[f64; 2]], centroids: &[[f64; 2]], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| squared_dist(p, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding on 2-d points. Points are
/// standardized to zero mean / unit variance per axis before clustering.
/// Deterministic in `seed`; the objective is non-increasing per iteration.
pub fn kmeans(
    points: &[[f64; 2]],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<GroupingResult> {
    if !(1..=3).contains(&k) {
        return Err(Error::domain(format!("k must be in 1..=3, got {k}")));
    }
    if points.len() < k {
        return Err(Error::domain(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    // standardize per axis
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    for p in points {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut var = [0.0; 2];
    for p in points {
        var[0] += (p[0] - mean[0]).powi(2);
        var[1] += (p[1] - mean[1]).powi(2);
    }
    let std = [
        (var[0] / n).sqrt().max(1e-12),
        (var[1] / n).sqrt().max(1e-12),
    ];
    let pts: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [(p[0] - mean[0]) / std[0], (p[1] - mean[1]) / std[1]])
        .collect();

    // k-means++ seeding
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<[f64; 2]> = Vec::with_capacity(k);
    centroids.push(pts[rng.gen_range(0..pts.len())]);
    while centroids.len() < k {
        let d2: Vec<f64> = pts
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| squared_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..pts.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = 0;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
                idx = i;
            }
            idx
        };
        centroids.push(pts[next]);
    }

    let mut assignment = vec![0usize; pts.len()];
    let mut prev_obj = f64::INFINITY;
    let mut objective = Vec::new();
    for _ in 0..max_iter {
        // assign
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    squared_dist(p, &centroids[a])
                        .partial_cmp(&squared_dist(p, &centroids[b]))
                        .unwrap()
                })
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        // empty-cluster repair: steal the farthest point from its centroid
        for c in 0..k {
            if !assignment.contains(&c) {
                let far = (0..pts.len())
                    .max_by(|&a, &b| {
                        squared_dist(&pts[a], &centroids[assignment[a]])
                            .partial_cmp(&squared_dist(&pts[b], &centroids[assignment[b]]))
                            .unwrap()
                    })
                    .unwrap();
                assignment[far] = c;
                centroids[c] = pts[far];
                changed = true;
            }
        }
        // update
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assignment) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        let obj = wcss(&pts, &centroids, &assignment);
        debug_assert!(obj <= prev_obj + 1e-9, "objective increased: {prev_obj} -> {obj}");
        prev_obj = obj;
        objective.push(obj);
        if !changed {
            break;
        }
    }

    // order clusters by ascending mean complexity, taken as the mean of the
    // standardized feature sum (both axes grow with difficulty)
    let mut means: Vec<(usize, f64)> = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..pts.len()).filter(|&i| assignment[i] == c).collect();
            let m = members
                .iter()
                .map(|&i| pts[i][0] + pts[i][1])
                .sum::<f64>()
                / members.len().max(1) as f64;
            (c, m)
        })
        .collect();
    means.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let order = means.into_iter().map(|(c, _)| c).collect();

    Ok(GroupingResult {
        k,
        centroids,
        assignment,
        order,
        objective,
    })
}

/// Scores every train pair, clusters, and writes `score` and `group` back
/// into the manifest entries. Group ids are 1-based curriculum positions
/// (1 = easiest). Test entries stay untouched.
pub fn group_corpus(
    manifest: &mut CorpusManifest,
    k: usize,
    seed: u64,
    l1: f64,
    l2: f64,
) -> Result<GroupingResult> {
    let train_idx: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == crate::synthcloud::Split::Train)
        .map(|(i, _)| i)
        .collect();
    let mut points = Vec::with_capacity(train_idx.len());
    let mut scores = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        let e = &manifest.entries[i];
        let clean = load_image(manifest.clean_path(e))?;
        let cloudy = load_image(manifest.cloudy_path(e))?;
        let m = mse(&cloudy, &clean)?;
        let s = 1.0 - ssim(&cloudy, &clean)?;
        points.push([m, s]);
        scores.push(complexity_score(&cloudy, &clean, l1, l2)?);
    }
    let result = kmeans(&points, k, seed, DEFAULT_MAX_ITER)?;
    // map raw cluster index -> 1-based curriculum position
    let mut position = vec![0usize; k];
    for (stage, &cluster) in result.order.iter().enumerate() {
        position[cluster] = stage + 1;
    }
    for (j, &i) in train_idx.iter().enumerate() {
        manifest.entries[i].score = Some(scores[j]);
        manifest.entries[i].group = Some(position[result.assignment[j]]);
    }
    Ok(result)
}

/// Splits `total_epochs` across stages proportionally to group sizes
/// (floor, remainder to the last stage); stages run in ascending complexity.
pub fn make_stage_plan(
    group_sizes: &[usize],
    total_epochs: usize,
) -> Result<StagePlan> {
    let k = group_sizes.len();
    if total_epochs < k {
        return Err(Error::domain(format!(
            "{total_epochs} epochs cannot cover {k} stages"
        )));
    }
    let total: usize = group_sizes.iter().sum();
    if total == 0 {
        return Err(Error::domain("all groups are empty".to_string()));
    }
    let mut epochs: Vec<usize> = group_sizes
        .iter()
        .map(|&s| (total_epochs * s) / total)
        .collect();
    // every stage runs at least one epoch
    for e in &mut epochs {
        if *e == 0 {
            *e = 1;
        }
    }
    let assigned: usize = epochs.iter().sum();
    let last = k - 1;
    if assigned <= total_epochs {
        epochs[last] += total_epochs - assigned;
    } else {
        // borrow back from the largest allocations
        let mut excess = assigned - total_epochs;
        while excess > 0 {
            let big = (0..k).max_by_key(|&i| epochs[i]).unwrap();
            if epochs[big] <= 1 {
                return Err(Error::domain(format!(
                    "cannot fit {k} stages into {total_epochs} epochs"
                )));
            }
            epochs[big] -= 1;
            excess -= 1;
        }
    }
    let stages = epochs
        .into_iter()
        .enumerate()
        .map(|(i, e)| (vec![i + 1], e))
        .collect();
    Ok(StagePlan { stages })
}

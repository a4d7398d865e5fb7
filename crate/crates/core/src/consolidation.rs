//! Hierarchical knowledge consolidation.
//!
//! Tasks are clustered on their flattened effective deltas; inside each
//! cluster every coordinate whose values spread by at most `beta` moves into
//! the group's locally-shared weights (set to the cluster mean) and is zeroed
//! in the members. Other coordinates stay with the members unchanged.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};
use crate::params::{DecomposedState, Dense, GroupId, LocalShared};
use crate::trainer::HyperParams;

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index of every point, in input order.
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Member indices of every non-empty cluster, ordered by cluster index.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k()];
        for (i, &g) in self.assignment.iter().enumerate() {
            groups[g].push(i);
        }
        groups.into_iter().filter(|g| !g.is_empty()).collect()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Nearest centroid, lowest index on ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, squared_distance(point, &centroids[0]));
    for (g, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (g, d);
        }
    }
    best
}

/// Coordinate-wise mean of the selected points.
pub fn mean_of(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = points[members[0]].len();
    let mut m = vec![0.0; d];
    for &i in members {
        for (a, x) in m.iter_mut().zip(&points[i]) {
            *a += x;
        }
    }
    let n = members.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Lloyd's algorithm with Euclidean distance.
///
/// `k` is clamped to the number of points. The first centroids come from
/// `init`; the rest are copies of distinct, uniformly drawn points. A cluster
/// that empties is reseeded at the point farthest from its own centroid.
/// Stops after `max_iter` assignment steps or once assignments stop changing.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    init: &[Vec<f64>],
    max_iter: usize,
    rng: &mut R,
) -> Result<ClusterModel> {
    let n = points.len();
    if n == 0 {
        return Err(ApdError::Empty("k-means points"));
    }
    if max_iter == 0 {
        return Err(ApdError::InvalidArgument("max_iter must be >= 1".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) || init.iter().any(|c| c.len() != d) {
        return Err(ApdError::ShapeMismatch("k-means vectors differ in length".into()));
    }
    let k = k.clamp(1, n);
    let mut centroids: Vec<Vec<f64>> = init.iter().take(k).cloned().collect();
    let missing = k - centroids.len();
    if missing > 0 {
        for i in sample(rng, n, missing).into_iter() {
            centroids.push(points[i].clone());
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..max_iter {
        let mut next = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        let mut total = 0.0;
        for p in points {
            let (g, dist) = nearest(p, &centroids);
            next.push(g);
            dists.push(dist);
            total += dist;
        }
        objective.push(total);
        let changed = next != assignment;
        assignment = next;

        let mut counts = vec![0usize; k];
        for &g in &assignment {
            counts[g] += 1;
        }
        for (g, c) in centroids.iter_mut().enumerate() {
            if counts[g] > 0 {
                let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == g).collect();
                *c = mean_of(points, &members);
            }
        }
        let mut taken = vec![false; n];
        for g in 0..k {
            if counts[g] != 0 {
                continue;
            }
            let mut far: Option<usize> = None;
            for i in 0..n {
                if taken[i] || counts[assignment[i]] < 2 {
                    continue;
                }
                if far.is_none_or(|f| dists[i] > dists[f]) {
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                taken[i] = true;
                counts[assignment[i]] -= 1;
                counts[g] += 1;
                centroids[g] = points[i].clone();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(ClusterModel {
        centroids,
        assignment,
        objective,
    })
}

/// Splits a group's effective deltas into locally-shared values and
/// residual per-task deltas.
///
/// For each coordinate whose values spread (max - min) by at most `beta`, the
/// shared value is `mean[j]` and every member is zeroed; otherwise the shared
/// value is 0 and members keep their values.
pub fn decompose_group(
    taus: &[Vec<f64>],
    mean: &[f64],
    beta: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !(beta >= 0.0) {
        return Err(ApdError::InvalidArgument(format!("negative beta {beta}")));
    }
    if taus.is_empty() {
        return Err(ApdError::Empty("group members"));
    }
    let d = mean.len();
    if taus.iter().any(|t| t.len() != d) {
        return Err(ApdError::ShapeMismatch(
            "group members and mean differ in length".into(),
        ));
    }
    let mut local = vec![0.0; d];
    let mut out: Vec<Vec<f64>> = taus.to_vec();
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in taus {
            lo = lo.min(t[j]);
            hi = hi.max(t[j]);
        }
        if hi - lo <= beta {
            local[j] = mean[j];
            for t in out.iter_mut() {
                t[j] = 0.0;
            }
        }
    }
    Ok((local, out))
}

/// Bookkeeping of one consolidation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub centroids: usize,
    pub groups: Vec<Vec<u32>>,
    /// Stored nonzeros (deltas + locally-shared) before the event.
    pub nonzeros_before: usize,
    /// Nonzeros of the materialised effective deltas.
    pub nonzeros_materialized: usize,
    pub nonzeros_after: usize,
    pub max_reconstruction_error: f64,
    pub kmeans_objective: Vec<f64>,
}

fn unflatten(state: &DecomposedState, flat: &[f64]) -> Vec<Dense> {
    let mut k = 0;
    state
        .layers
        .iter()
        .map(|l| {
            let mut d = Dense::zeros(l.shared.input_dim(), l.shared.output_dim());
            k += d.assign_from(&flat[k..]);
            d
        })
        .collect()
}

/// Re-clusters all tasks and rebuilds the locally-shared weights; the
/// centroid count grows by `hp.centroid_increment` for the next event.
pub fn consolidate(state: &mut DecomposedState, hp: &HyperParams) -> Result<ConsolidationReport> {
    let tasks = state.tasks();
    let nonzeros_before = state.tau_nonzeros() + state.local_shared_nonzeros();
    let points: Vec<Vec<f64>> = tasks
        .iter()
        .map(|&t| state.effective_tau_flat(t))
        .collect::<Result<_>>()?;
    let nonzeros_materialized = points
        .iter()
        .map(|p| p.iter().filter(|&&v| v != 0.0).count())
        .sum();
    let previous: Vec<Vec<f64>> = state
        .groups
        .values()
        .map(|g| {
            let mut v = Vec::new();
            g.layers.iter().for_each(|d| d.flatten_into(&mut v));
            v
        })
        .collect();

    // Materialise tau + local into tau and drop the old groups.
    for (&t, p) in tasks.iter().zip(&points) {
        let layers = unflatten(state, p);
        for (layer, tau) in state.layers.iter_mut().zip(layers) {
            layer.adaptive.insert(t, tau);
        }
    }
    state.groups.clear();
    state.assignment.clear();

    let mut report = ConsolidationReport {
        centroids: 0,
        groups: Vec::new(),
        nonzeros_before,
        nonzeros_materialized,
        nonzeros_after: 0,
        max_reconstruction_error: 0.0,
        kmeans_objective: Vec::new(),
    };
    if tasks.is_empty() {
        state.centroids += hp.centroid_increment;
        return Ok(report);
    }

    let model = kmeans(
        &points,
        state.centroids.max(1),
        &previous,
        hp.kmeans_max_iter,
        &mut state.rng,
    )?;
    report.centroids = model.k();
    report.kmeans_objective = model.objective.clone();

    let mut new_groups = BTreeMap::new();
    for (gi, members) in model.groups().into_iter().enumerate() {
        let member_points: Vec<Vec<f64>> = members.iter().map(|&i| points[i].clone()).collect();
        let mean = mean_of(&points, &members);
        let (local, residual) = decompose_group(&member_points, &mean, hp.beta)?;
        let gid = GroupId(gi as u32);
        for (m, &i) in members.iter().enumerate() {
            for j in 0..local.len() {
                let err = (points[i][j] - (residual[m][j] + local[j])).abs();
                report.max_reconstruction_error = report.max_reconstruction_error.max(err);
            }
            let t = tasks[i];
            let layers = unflatten(state, &residual[m]);
            for (layer, tau) in state.layers.iter_mut().zip(layers) {
                layer.adaptive.insert(t, tau);
            }
            state.assignment.insert(t, gid);
        }
        report
            .groups
            .push(members.iter().map(|&i| tasks[i].0).collect());
        new_groups.insert(
            gid,
            LocalShared {
                layers: unflatten(state, &local),
            },
        );
    }
    state.groups = new_groups;
    state.centroids += hp.centroid_increment;
    report.nonzeros_after = state.tau_nonzeros() + state.local_shared_nonzeros();
    Ok(report)
}

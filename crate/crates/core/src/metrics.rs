//! Accuracy, order-robustness and forgetting measures, parameter capacity,
//! selective task forgetting and the 2-D PCA projection of parameter
//! trajectories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};
use crate::network;
use crate::numeric::{argmax, dot, Matrix};
use crate::objective::Batch;
use crate::parallel::{map_collect, Exec};
use crate::params::{DecomposedState, Dense, HistoryEntry, TaskId};

const EVAL_CHUNK: usize = 128;

/// Fraction of argmax-correct predictions of task `t` on `batch`.
pub fn evaluate(state: &DecomposedState, t: TaskId, batch: &Batch) -> Result<f64> {
    evaluate_with(state, t, batch, Exec::for_work(batch.labels.len(), 2 * EVAL_CHUNK))
}

pub fn evaluate_with(state: &DecomposedState, t: TaskId, batch: &Batch, exec: Exec) -> Result<f64> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(ApdError::Empty("test set"));
    }
    if batch.x.rows() != n {
        return Err(ApdError::ShapeMismatch(format!(
            "{} feature rows for {n} labels",
            batch.x.rows()
        )));
    }
    if batch.x.cols() != state.arch.input_dim {
        return Err(ApdError::ShapeMismatch(format!(
            "input of dimension {} for a network expecting {}",
            batch.x.cols(),
            state.arch.input_dim
        )));
    }
    let layers = state.composed_layers(t)?;
    let head = &state.heads[&t];
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let counts = map_collect(exec, &starts, |&s| -> Result<usize> {
        let e = (s + EVAL_CHUNK).min(n);
        let cols = batch.x.cols();
        let x = Matrix::new(e - s, cols, batch.x.data()[s * cols..e * cols].to_vec())?;
        let logits = network::forward(&layers, head, state.arch.activation, &x)?.logits;
        Ok((0..e - s)
            .filter(|&r| argmax(logits.row(r)) == batch.labels[s + r])
            .count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracies after each checkpoint of one run.
///
/// `rows[c][q]` is the accuracy of the task trained at position `q`, measured
/// after training the task at position `c` (`q <= c`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub order: Vec<TaskId>,
    pub rows: Vec<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn from_history(history: &[HistoryEntry]) -> Result<Self> {
        let order: Vec<TaskId> = history.iter().map(|h| h.task).collect();
        let mut rows = Vec::with_capacity(history.len());
        for (c, h) in history.iter().enumerate() {
            if h.accuracies.len() != c + 1 {
                return Err(ApdError::InvalidArgument(format!(
                    "checkpoint {c} holds {} accuracies, expected {}",
                    h.accuracies.len(),
                    c + 1
                )));
            }
            for (q, (task, _)) in h.accuracies.iter().enumerate() {
                if *task != order[q] {
                    return Err(ApdError::InvalidArgument(format!(
                        "checkpoint {c} lists task {task} at position {q}"
                    )));
                }
            }
            rows.push(h.accuracies.iter().map(|(_, a)| *a).collect());
        }
        Ok(PerformanceMatrix { order, rows })
    }

    pub fn num_tasks(&self) -> usize {
        self.order.len()
    }

    /// Final accuracy of every task, keyed by task id.
    pub fn final_accuracies(&self) -> BTreeMap<TaskId, f64> {
        match self.rows.last() {
            None => BTreeMap::new(),
            Some(last) => self.order.iter().copied().zip(last.iter().copied()).collect(),
        }
    }

    pub fn mean_final_accuracy(&self) -> f64 {
        let f = self.final_accuracies();
        if f.is_empty() {
            return 0.0;
        }
        f.values().sum::<f64>() / f.len() as f64
    }

    /// Accuracy of the task trained at position `q` right after its own training.
    pub fn own_checkpoint_accuracy(&self, q: usize) -> Option<f64> {
        self.rows.get(q).and_then(|r| r.get(q)).copied()
    }
}

/// `max - min` of one task's final performance across orders.
pub fn opd(per_order_final: &[f64]) -> Result<f64> {
    if per_order_final.len() < 2 {
        return Err(ApdError::InvalidArgument(
            "order disparity needs at least two orders".into(),
        ));
    }
    let max = per_order_final.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_order_final.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

fn opds(per_task: &[Vec<f64>]) -> Result<Vec<f64>> {
    if per_task.is_empty() {
        return Err(ApdError::Empty("task list"));
    }
    per_task.iter().map(|r| opd(r)).collect()
}

/// Mean of per-task OPD; `per_task[t][r]` is task `t`'s final performance under order `r`.
pub fn aopd(per_task: &[Vec<f64>]) -> Result<f64> {
    let o = opds(per_task)?;
    Ok(o.iter().sum::<f64>() / o.len() as f64)
}

/// Maximum per-task OPD.
pub fn mopd(per_task: &[Vec<f64>]) -> Result<f64> {
    Ok(opds(per_task)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Average and worst-case forgetting of a lower-triangular accuracy matrix.
///
/// Task `q` forgets `max(a[l][q] for q <= l < T-1) - a[T-1][q]`, clamped at
/// zero; both statistics range over every task except the last one.
pub fn forgetting(rows: &[Vec<f64>]) -> Result<(f64, f64)> {
    let t = rows.len();
    if t < 2 {
        return Err(ApdError::InvalidArgument(
            "forgetting needs at least two checkpoints".into(),
        ));
    }
    for (c, r) in rows.iter().enumerate() {
        if r.len() < c + 1 {
            return Err(ApdError::ShapeMismatch(format!(
                "checkpoint {c} has {} accuracies, needs {}",
                r.len(),
                c + 1
            )));
        }
    }
    let last = &rows[t - 1];
    let mut sum = 0.0;
    let mut worst: f64 = 0.0;
    for q in 0..t - 1 {
        let best = (q..t - 1).map(|l| rows[l][q]).fold(f64::NEG_INFINITY, f64::max);
        let f = (best - last[q]).max(0.0);
        sum += f;
        worst = worst.max(f);
    }
    Ok((sum / (t - 1) as f64, worst))
}

/// Stored-parameter accounting of a decomposed state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub shared: usize,
    pub local_shared: usize,
    pub adaptive: BTreeMap<TaskId, usize>,
    /// Mask logits are stored densely per task and counted in full.
    pub mask_logits: usize,
    pub heads: usize,
    pub total: usize,
    pub base_count: usize,
    pub percent: f64,
}

/// Exact nonzeros in shared, locally-shared, adaptive and head weights plus
/// every stored mask logit, relative to `base_count`.
pub fn capacity(state: &DecomposedState, base_count: usize) -> Result<CapacityReport> {
    if base_count == 0 {
        return Err(ApdError::InvalidArgument("base_count must be positive".into()));
    }
    let shared = state.layers.iter().map(|l| l.shared.count_nonzero()).sum();
    let local_shared = state.local_shared_nonzeros();
    let mut adaptive = BTreeMap::new();
    for t in state.tasks() {
        let n = state
            .layers
            .iter()
            .filter_map(|l| l.adaptive.get(&t))
            .map(Dense::count_nonzero)
            .sum();
        adaptive.insert(t, n);
    }
    let mask_logits = if state.arch.adaptive_mask {
        state
            .layers
            .iter()
            .flat_map(|l| l.mask_logits.values())
            .map(Vec::len)
            .sum()
    } else {
        0
    };
    let heads = state.heads.values().map(Dense::count_nonzero).sum();
    let total = shared + local_shared + adaptive.values().sum::<usize>() + mask_logits + heads;
    Ok(CapacityReport {
        shared,
        local_shared,
        adaptive,
        mask_logits,
        heads,
        total,
        base_count,
        percent: 100.0 * total as f64 / base_count as f64,
    })
}

/// Drops task `k`'s delta, mask logits, head and group membership. Shared and
/// locally-shared weights are untouched.
pub fn forget_task(state: &mut DecomposedState, k: TaskId) -> Result<()> {
    if state.heads.remove(&k).is_none() {
        return Err(ApdError::UnknownTask(k));
    }
    for layer in state.layers.iter_mut() {
        layer.adaptive.remove(&k);
        layer.mask_logits.remove(&k);
    }
    state.assignment.remove(&k);
    state.restored.remove(&k);
    Ok(())
}

/// Top-two principal directions and the projected points.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2d {
    pub points: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component (covariance eigenvalues).
    pub explained_variance: [f64; 2],
    pub mean: Vec<f64>,
}

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITER: usize = 1000;

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `C v` with `C = X^T X / (n - 1)` for centered rows `X`.
fn cov_apply(rows: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let denom = (rows.len() - 1) as f64;
    let mut out = vec![0.0; v.len()];
    for r in rows {
        let s = dot(r, v) / denom;
        for (o, x) in out.iter_mut().zip(r) {
            *o += s * x;
        }
    }
    out
}

fn power_iteration(rows: &[Vec<f64>], deflate: Option<&[f64]>, start: &[f64]) -> (Vec<f64>, f64) {
    let project = |w: &mut Vec<f64>| {
        if let Some(u) = deflate {
            let c = dot(w, u);
            for (x, y) in w.iter_mut().zip(u) {
                *x -= c * y;
            }
        }
    };
    let mut v = start.to_vec();
    project(&mut v);
    if normalize(&mut v) == 0.0 {
        return (vec![0.0; start.len()], 0.0);
    }
    for _ in 0..PCA_MAX_ITER {
        let mut w = cov_apply(rows, &v);
        let raw = dot(&w, &w).sqrt();
        project(&mut w);
        // Whatever survives deflation at roundoff level is not a direction.
        if normalize(&mut w) <= 1e-10 * raw || raw == 0.0 {
            return (vec![0.0; v.len()], 0.0);
        }
        project(&mut w);
        normalize(&mut w);
        let diff: f64 = v
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = w;
        if diff < PCA_TOL {
            break;
        }
    }
    let rayleigh = dot(&v, &cov_apply(rows, &v));
    (v, rayleigh.max(0.0))
}

fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Projects equal-length vectors onto their top two principal directions,
/// found by power iteration with deflation. Each component is signed so its
/// first nonzero loading is positive.
pub fn pca2d(trajectory: &[Vec<f64>]) -> Result<Pca2d> {
    let n = trajectory.len();
    if n < 3 {
        return Err(ApdError::InvalidArgument(format!(
            "pca needs at least 3 vectors, got {n}"
        )));
    }
    let d = trajectory[0].len();
    if trajectory.iter().any(|v| v.len() != d) {
        return Err(ApdError::ShapeMismatch("trajectory vectors differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for v in trajectory {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = trajectory
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let scale = centered
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Err(ApdError::RankZero);
    }
    // Start from the longest centered row, nudged off any exact symmetry.
    let longest = centered
        .iter()
        .max_by(|a, b| dot(a, a).partial_cmp(&dot(b, b)).unwrap_or(std::cmp::Ordering::Equal))
        .expect("non-empty");
    let start: Vec<f64> = longest
        .iter()
        .enumerate()
        .map(|(j, x)| x + 1e-3 * scale * (1.0 + j as f64).recip())
        .collect();
    let (mut c1, l1) = power_iteration(&centered, None, &start);
    if l1 <= 0.0 {
        return Err(ApdError::RankZero);
    }
    fix_sign(&mut c1);
    let start2: Vec<f64> = (0..d).map(|j| 1.0 + ((j * 7919) % 13) as f64 / 13.0).collect();
    let (mut c2, mut l2) = power_iteration(&centered, Some(&c1), &start2);
    if l2 <= 1e-14 * l1 {
        c2 = vec![0.0; d];
        l2 = 0.0;
    }
    fix_sign(&mut c2);
    let points = centered.iter().map(|r| [dot(r, &c1), dot(r, &c2)]).collect();
    Ok(Pca2d {
        points,
        components: [c1, c2],
        explained_variance: [l1, l2],
        mean,
    })
}

/// Sum of Euclidean step lengths along a 2-D path.
pub fn path_length(points: &[[f64; 2]]) -> f64 {
    points
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Architecture, TauInit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn opd_examples() {
        assert!((opd(&[0.8, 0.6, 0.7]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(opd(&[0.5, 0.5]).unwrap(), 0.0);
        assert!(opd(&[0.5]).is_err());
        let per_task = vec![vec![0.8, 0.6], vec![0.3, 0.4]];
        assert!((aopd(&per_task).unwrap() - 0.15).abs() < 1e-15);
        assert!((mopd(&per_task).unwrap() - 0.2).abs() < 1e-15);
        let same = vec![vec![0.7; 3]; 4];
        assert_eq!(aopd(&same).unwrap(), 0.0);
        assert_eq!(mopd(&same).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_examples() {
        let rows = vec![vec![0.9], vec![0.7, 0.8]];
        let (avg, worst) = forgetting(&rows).unwrap();
        assert!((avg - 0.2).abs() < 1e-15 && (worst - 0.2).abs() < 1e-15);
        let rising = vec![vec![0.5], vec![0.6, 0.4], vec![0.7, 0.5, 0.9]];
        assert_eq!(forgetting(&rising).unwrap(), (0.0, 0.0));
        assert!(forgetting(&[vec![0.5]]).is_err());
        assert!(forgetting(&[vec![0.5], vec![0.5]]).is_err());
    }

    #[test]
    fn evaluate_ties_go_to_class_zero() {
        let mut s = DecomposedState::new(Architecture::new(2, vec![3]), 0);
        s.init_task(TaskId(0), TauInit::Zeros, 3).unwrap();
        let h = s.heads.get_mut(&TaskId(0)).unwrap();
        *h = Dense::zeros(3, 3);
        let batch = Batch {
            x: Matrix::new(4, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.0, 3.0, 3.0]).unwrap(),
            labels: vec![0; 4],
        };
        assert_eq!(evaluate(&s, TaskId(0), &batch).unwrap(), 1.0);
        let empty = Batch {
            x: Matrix::zeros(0, 2),
            labels: vec![],
        };
        assert!(evaluate(&s, TaskId(0), &empty).is_err());
    }

    #[test]
    fn evaluate_policies_agree() {
        let mut s = DecomposedState::new(Architecture::new(4, vec![8]), 1);
        s.init_task(TaskId(0), TauInit::CopyShared, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1000;
        let batch = Batch {
            x: Matrix::new(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
        };
        let a = evaluate_with(&s, TaskId(0), &batch, Exec::Sequential).unwrap();
        let b = evaluate_with(&s, TaskId(0), &batch, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forget_unknown_task_errors() {
        let mut s = DecomposedState::new(Architecture::new(2, vec![2]), 0);
        assert!(forget_task(&mut s, TaskId(3)).is_err());
    }

    #[test]
    fn pca_line_has_flat_second_coordinate() {
        let dir = [0.3, -1.0, 2.0, 0.5, 0.1];
        let traj: Vec<Vec<f64>> = [-2.0, -0.5, 0.0, 1.0, 4.0]
            .iter()
            .map(|s| dir.iter().map(|d| d * s).collect())
            .collect();
        let p = pca2d(&traj).unwrap();
        assert!(p.points.iter().all(|q| q[1].abs() < 1e-8));
        assert!(p.components[0].iter().find(|x| x.abs() > 1e-12).unwrap() > &0.0);
    }

    #[test]
    fn pca_preserves_distances_in_a_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = [1.0, 2.0, 0.0, -1.0];
        let v = [0.5, -0.5, 3.0, 0.0];
        let traj: Vec<Vec<f64>> = (0..7)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                (0..4).map(|j| 1.0 + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let p = pca2d(&traj).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let orig: f64 = traj[i].iter().zip(&traj[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let proj = ((p.points[i][0] - p.points[j][0]).powi(2)
                    + (p.points[i][1] - p.points[j][1]).powi(2))
                .sqrt();
                assert!((orig - proj).abs() < 1e-8, "{orig} vs {proj}");
            }
        }
    }

    #[test]
    fn pca_errors() {
        assert!(matches!(pca2d(&vec![vec![1.0, 2.0]; 4]), Err(ApdError::RankZero)));
        assert!(pca2d(&[vec![1.0], vec![2.0]]).is_err());
        assert!(pca2d(&[vec![1.0], vec![2.0, 3.0], vec![1.0]]).is_err());
    }

    #[test]
    fn path_length_of_unit_steps() {
        assert_eq!(path_length(&[[0.0, 0.0], [3.0, 4.0], [3.0, 5.0]]), 6.0);
    }
}

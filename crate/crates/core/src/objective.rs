//! Training objectives over a decomposed state and their gradients.
//!
//! Every objective is `data loss + smooth penalty + l1`, where the l1 part on
//! the task-adaptive deltas is reported but never differentiated: the trainer
//! applies it as a proximal step. Returned gradients therefore cover only the
//! smooth part.

use std::collections::BTreeMap;

use crate::error::{ApdError, Result};
use crate::network;
use crate::numeric::Matrix;
use crate::params::{compose, effective_tau, DecomposedState, Dense, TaskId};
use crate::trainer::HyperParams;

/// A minibatch of row-vector features and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

/// What besides the data loss enters the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    None,
    /// `weight * ||shared - shared_snapshot||^2`.
    SharedAnchor { weight: f64 },
    /// `weight * sum_i ||restored_i - compose(shared, mask_i, tau_i)||^2` over
    /// every earlier task; `local_shared` selects `tau_i + local_g` for `tau_i`.
    Retroactive { weight: f64, local_shared: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub penalty: Penalty,
    /// Per-layer l1 weights on the deltas listed in `l1_tasks`.
    pub lambda1: Vec<f64>,
    pub l1_tasks: Vec<TaskId>,
    /// Treat the current task's masks as exactly 1 (plain first-task training).
    pub unit_mask_current: bool,
}

/// Gradient of the smooth part w.r.t. everything the objective touches.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub shared: Vec<Dense>,
    pub adaptive: BTreeMap<TaskId, Vec<Dense>>,
    pub mask: BTreeMap<TaskId, Vec<Vec<f64>>>,
    pub head: (TaskId, Dense),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub data_loss: f64,
    pub penalty: f64,
    pub l1: f64,
    /// `sqrt` of the summed squared retroactive residuals (0 otherwise).
    pub drift_norm: f64,
    pub grads: Grads,
}

impl ObjectiveValue {
    pub fn smooth(&self) -> f64 {
        self.data_loss + self.penalty
    }

    pub fn total(&self) -> f64 {
        self.smooth() + self.l1
    }
}

pub fn lambda_for_layer(lambda1: &[f64], l: usize) -> f64 {
    match lambda1.len() {
        0 => 0.0,
        n => lambda1[l.min(n - 1)],
    }
}

fn zeros_like(d: &Dense) -> Dense {
    Dense::zeros(d.input_dim(), d.output_dim())
}

/// Accumulates `d composed` into shared, delta and mask-logit gradients.
fn chain_compose(
    shared: &Dense,
    mask: &[f64],
    d_theta: &Dense,
    d_shared: &mut Dense,
    d_tau: &mut Dense,
    d_logits: Option<&mut Vec<f64>>,
) {
    let cols = shared.output_dim();
    for (k, (ds, &g)) in d_shared
        .weight
        .data_mut()
        .iter_mut()
        .zip(d_theta.weight.data())
        .enumerate()
    {
        *ds += g * mask[k % cols];
    }
    for ((ds, &g), &m) in d_shared.bias.iter_mut().zip(&d_theta.bias).zip(mask) {
        *ds += g * m;
    }
    for (dt, &g) in d_tau.values_mut().zip(d_theta.values()) {
        *dt += g;
    }
    if let Some(dv) = d_logits {
        let mut col = vec![0.0; cols];
        for r in 0..shared.input_dim() {
            let srow = shared.weight.row(r);
            let grow = d_theta.weight.row(r);
            for j in 0..cols {
                col[j] += grow[j] * srow[j];
            }
        }
        for j in 0..cols {
            let m = mask[j];
            dv[j] += (col[j] + d_theta.bias[j] * shared.bias[j]) * m * (1.0 - m);
        }
    }
}

/// Evaluates the objective for task `t` on `batch`.
pub fn evaluate(
    state: &DecomposedState,
    batch: &Batch,
    t: TaskId,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveValue> {
    if !state.has_task(t) {
        return Err(ApdError::UnknownTask(t));
    }
    let n_layers = state.layers.len();
    let adaptive_mask = state.arch.adaptive_mask && !spec.unit_mask_current;

    let mut d_shared: Vec<Dense> = state.layers.iter().map(|l| zeros_like(&l.shared)).collect();
    let mut d_adaptive: BTreeMap<TaskId, Vec<Dense>> = BTreeMap::new();
    let mut d_mask: BTreeMap<TaskId, Vec<Vec<f64>>> = BTreeMap::new();

    // Data term through the composed weights of the current task.
    let mut masks_t = Vec::with_capacity(n_layers);
    let mut composed = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let m = if spec.unit_mask_current {
            vec![1.0; state.layers[l].shared.output_dim()]
        } else {
            state.mask(l, t)?
        };
        composed.push(compose(&state.layers[l].shared, &m, &state.effective_tau(l, t)?)?);
        masks_t.push(m);
    }
    let head = &state.heads[&t];
    let cache = network::forward(&composed, head, state.arch.activation, &batch.x)?;
    let (data_loss, dlogits) = network::mean_cross_entropy(&cache.logits, &batch.labels)?;
    let (d_theta, d_head) =
        network::backward(&composed, head, state.arch.activation, &cache, &dlogits)?;
    {
        let mut taus: Vec<Dense> = state.layers.iter().map(|l| zeros_like(&l.shared)).collect();
        let mut dv: Vec<Vec<f64>> = state
            .layers
            .iter()
            .map(|l| vec![0.0; l.shared.output_dim()])
            .collect();
        for l in 0..n_layers {
            chain_compose(
                &state.layers[l].shared,
                &masks_t[l],
                &d_theta[l],
                &mut d_shared[l],
                &mut taus[l],
                adaptive_mask.then_some(&mut dv[l]),
            );
        }
        d_adaptive.insert(t, taus);
        d_mask.insert(t, dv);
    }

    let mut penalty = 0.0;
    let mut drift_sq = 0.0;
    match spec.penalty {
        Penalty::None => {}
        Penalty::SharedAnchor { weight } => {
            for l in 0..n_layers {
                let live = &state.layers[l].shared;
                let snap = &state.shared_snapshot[l];
                for ((g, &a), &b) in d_shared[l].values_mut().zip(live.values()).zip(snap.values()) {
                    let diff = a - b;
                    penalty += weight * diff * diff;
                    *g += 2.0 * weight * diff;
                }
            }
        }
        Penalty::Retroactive {
            weight,
            local_shared,
        } => {
            for i in state.tasks() {
                if i == t {
                    continue;
                }
                let targets = state
                    .restored
                    .get(&i)
                    .ok_or(ApdError::MissingRestoreTarget(i))?;
                let mut taus: Vec<Dense> =
                    state.layers.iter().map(|l| zeros_like(&l.shared)).collect();
                let mut dv: Vec<Vec<f64>> = state
                    .layers
                    .iter()
                    .map(|l| vec![0.0; l.shared.output_dim()])
                    .collect();
                for l in 0..n_layers {
                    let layer = &state.layers[l];
                    let tau = layer.adaptive.get(&i).ok_or(ApdError::UnknownTask(i))?;
                    let tau_eff = if local_shared {
                        effective_tau(tau, state.local_shared(l, i)?)?
                    } else {
                        tau.clone()
                    };
                    let mask = state.mask(l, i)?;
                    let theta = compose(&layer.shared, &mask, &tau_eff)?;
                    let target = &targets[l];
                    if !theta.same_shape(target) {
                        return Err(ApdError::ShapeMismatch(format!(
                            "restore target of task {i}, layer {l}"
                        )));
                    }
                    let mut d_theta = zeros_like(&theta);
                    for ((d, &a), &b) in d_theta.values_mut().zip(theta.values()).zip(target.values()) {
                        let r = a - b;
                        drift_sq += r * r;
                        penalty += weight * r * r;
                        *d = 2.0 * weight * r;
                    }
                    chain_compose(
                        &layer.shared,
                        &mask,
                        &d_theta,
                        &mut d_shared[l],
                        &mut taus[l],
                        state.arch.adaptive_mask.then_some(&mut dv[l]),
                    );
                }
                d_adaptive.insert(i, taus);
                d_mask.insert(i, dv);
            }
        }
    }

    let mut l1 = 0.0;
    for &i in &spec.l1_tasks {
        for (l, layer) in state.layers.iter().enumerate() {
            let lam = lambda_for_layer(&spec.lambda1, l);
            if lam == 0.0 {
                continue;
            }
            let tau = layer.adaptive.get(&i).ok_or(ApdError::UnknownTask(i))?;
            let mut s = 0.0;
            for v in tau.values() {
                s += v.abs();
            }
            l1 += lam * s;
        }
    }

    Ok(ObjectiveValue {
        data_loss,
        penalty,
        l1,
        drift_norm: drift_sq.sqrt(),
        grads: Grads {
            shared: d_shared,
            adaptive: d_adaptive,
            mask: d_mask,
            head: (t, d_head),
        },
    })
}

/// Data loss + l1 on `tau_t` + `lambda2 * ||shared - shared_snapshot||^2`.
pub fn loss_eq1(
    batch: &Batch,
    state: &DecomposedState,
    t: TaskId,
    hp: &HyperParams,
) -> Result<ObjectiveValue> {
    evaluate(
        state,
        batch,
        t,
        &ObjectiveSpec {
            penalty: Penalty::SharedAnchor { weight: hp.lambda2 },
            lambda1: hp.lambda1.clone(),
            l1_tasks: vec![t],
            unit_mask_current: false,
        },
    )
}

/// Data loss + l1 on every delta + retroactive drift to the restore targets.
pub fn loss_eq2(
    batch: &Batch,
    state: &DecomposedState,
    t: TaskId,
    hp: &HyperParams,
) -> Result<ObjectiveValue> {
    evaluate(
        state,
        batch,
        t,
        &ObjectiveSpec {
            penalty: Penalty::Retroactive {
                weight: hp.lambda2,
                local_shared: false,
            },
            lambda1: hp.lambda1.clone(),
            l1_tasks: state.tasks(),
            unit_mask_current: false,
        },
    )
}

/// As [`loss_eq2`], with earlier tasks' deltas including their group's
/// locally-shared weights.
pub fn loss_eq3(
    batch: &Batch,
    state: &DecomposedState,
    t: TaskId,
    hp: &HyperParams,
) -> Result<ObjectiveValue> {
    evaluate(
        state,
        batch,
        t,
        &ObjectiveSpec {
            penalty: Penalty::Retroactive {
                weight: hp.lambda2,
                local_shared: true,
            },
            lambda1: hp.lambda1.clone(),
            l1_tasks: state.tasks(),
            unit_mask_current: false,
        },
    )
}

/// Which parameter blocks are trainable, in flattening order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSet {
    pub shared: bool,
    pub adaptive: Vec<TaskId>,
    pub masks: Vec<TaskId>,
    pub head: Option<TaskId>,
}

impl ParamSet {
    pub fn flatten(&self, state: &DecomposedState) -> Vec<f64> {
        let mut out = Vec::new();
        if self.shared {
            for l in &state.layers {
                l.shared.flatten_into(&mut out);
            }
        }
        for t in &self.adaptive {
            for l in &state.layers {
                l.adaptive[t].flatten_into(&mut out);
            }
        }
        for t in &self.masks {
            for l in &state.layers {
                out.extend_from_slice(&l.mask_logits[t]);
            }
        }
        if let Some(t) = self.head {
            state.heads[&t].flatten_into(&mut out);
        }
        out
    }

    pub fn assign(&self, state: &mut DecomposedState, values: &[f64]) {
        let mut k = 0;
        if self.shared {
            for l in state.layers.iter_mut() {
                k += l.shared.assign_from(&values[k..]);
            }
        }
        for t in &self.adaptive {
            for l in state.layers.iter_mut() {
                k += l.adaptive.get_mut(t).expect("task").assign_from(&values[k..]);
            }
        }
        for t in &self.masks {
            for l in state.layers.iter_mut() {
                let v = l.mask_logits.get_mut(t).expect("task");
                let n = v.len();
                v.copy_from_slice(&values[k..k + n]);
                k += n;
            }
        }
        if let Some(t) = self.head {
            state.heads.get_mut(&t).expect("task").assign_from(&values[k..]);
        }
    }

    /// Gradient entries in the same order as [`ParamSet::flatten`]; blocks
    /// the objective did not touch contribute zeros.
    pub fn flatten_grads(&self, state: &DecomposedState, g: &Grads) -> Vec<f64> {
        let mut out = Vec::new();
        if self.shared {
            for d in &g.shared {
                d.flatten_into(&mut out);
            }
        }
        for t in &self.adaptive {
            match g.adaptive.get(t) {
                Some(ds) => ds.iter().for_each(|d| d.flatten_into(&mut out)),
                None => state
                    .layers
                    .iter()
                    .for_each(|l| out.extend(std::iter::repeat_n(0.0, l.shared.len()))),
            }
        }
        for t in &self.masks {
            match g.mask.get(t) {
                Some(vs) => vs.iter().for_each(|v| out.extend_from_slice(v)),
                None => state
                    .layers
                    .iter()
                    .for_each(|l| out.extend(std::iter::repeat_n(0.0, l.shared.output_dim()))),
            }
        }
        if let Some(t) = self.head {
            if g.head.0 == t {
                g.head.1.flatten_into(&mut out);
            } else {
                state.heads[&t].values().for_each(|_| out.push(0.0));
            }
        }
        out
    }
}

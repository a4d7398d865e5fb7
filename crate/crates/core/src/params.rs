//! Decomposed parameter store.
//!
//! Every hidden layer keeps one task-shared weight `shared`, plus per task a
//! sparse additive delta (`adaptive`) and a vector of mask logits. The
//! effective weight of task `t` is
//!
//! ```text
//! theta_t[:, j] = shared[:, j] * sigmoid(v_t[j]) + tau_t[:, j]
//! ```
//!
//! where `tau_t` additionally receives the locally-shared weight of the
//! task's group once consolidation has run. Output heads are task-private
//! and never decomposed.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};
use crate::network;
use crate::numeric::{sigmoid, Activation, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId(pub u32);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Weight matrix `d_in x d_out` plus bias of length `d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Number of stored scalars (weights + biases).
    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_nonzero(&self) -> usize {
        self.weight.count_nonzero() + self.bias.iter().filter(|&&b| b != 0.0).count()
    }

    pub fn same_shape(&self, other: &Dense) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }

    /// Weights then biases, row-major.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.data().iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.data_mut().iter_mut().chain(self.bias.iter_mut())
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.values());
    }

    /// Overwrites all values from `src`, returning how many were consumed.
    pub fn assign_from(&mut self, src: &[f64]) -> usize {
        let n = self.len();
        for (d, s) in self.values_mut().zip(src) {
            *d = *s;
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &Dense, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ApdError::ShapeMismatch(format!(
                "{what}: {:?}+{} vs {:?}+{}",
                self.weight.shape(),
                self.bias.len(),
                other.weight.shape(),
                other.bias.len()
            )))
        }
    }

    pub fn add(&self, other: &Dense) -> Result<Dense> {
        self.check_shape(other, "add")?;
        let mut out = self.clone();
        for (o, v) in out.values_mut().zip(other.values()) {
            *o += v;
        }
        Ok(out)
    }
}

/// Network shape shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// When false every mask is pinned to exactly 1.
    #[serde(default = "default_true")]
    pub adaptive_mask: bool,
}

fn default_true() -> bool {
    true
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        Architecture {
            input_dim,
            hidden,
            activation: Activation::Relu,
            adaptive_mask: true,
        }
    }

    /// `(d_in, d_out)` of every decomposed layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len());
        let mut d_in = self.input_dim;
        for &h in &self.hidden {
            dims.push((d_in, h));
            d_in = h;
        }
        dims
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    /// Parameters of one undecomposed network with a `classes`-way head.
    pub fn base_count(&self, classes: usize) -> usize {
        let body: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        body + self.feature_dim() * classes + classes
    }
}

/// How a new task-adaptive delta is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TauInit {
    #[default]
    CopyShared,
    Zeros,
}

/// One decomposed hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLayer {
    pub shared: Dense,
    pub adaptive: BTreeMap<TaskId, Dense>,
    pub mask_logits: BTreeMap<TaskId, Vec<f64>>,
}

/// Locally-shared weights of one consolidation group, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalShared {
    pub layers: Vec<Dense>,
}

/// Accuracies of every task seen so far, recorded after training one task.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub task: TaskId,
    /// `(task, test accuracy)` in training order.
    pub accuracies: Vec<(TaskId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedState {
    pub arch: Architecture,
    pub layers: Vec<DecomposedLayer>,
    pub groups: BTreeMap<GroupId, LocalShared>,
    pub assignment: BTreeMap<TaskId, GroupId>,
    pub heads: BTreeMap<TaskId, Dense>,
    /// Shared weights as they were when the current task arrived.
    pub shared_snapshot: Vec<Dense>,
    /// Frozen composed weights of earlier tasks for the current task.
    pub restored: BTreeMap<TaskId, Vec<Dense>>,
    /// Centroid count for the next consolidation.
    pub centroids: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<HistoryEntry>,
}

/// Elementwise logistic of the mask logits.
pub fn mask_of(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&v| sigmoid(v)).collect()
}

/// `shared * mask + tau`, with the mask broadcast over output units.
pub fn compose(shared: &Dense, mask: &[f64], tau: &Dense) -> Result<Dense> {
    shared.check_shape(tau, "compose")?;
    if mask.len() != shared.output_dim() {
        return Err(ApdError::ShapeMismatch(format!(
            "mask of length {} for {} outputs",
            mask.len(),
            shared.output_dim()
        )));
    }
    let cols = shared.output_dim();
    let mut out = tau.clone();
    for (k, (o, s)) in out
        .weight
        .data_mut()
        .iter_mut()
        .zip(shared.weight.data())
        .enumerate()
    {
        *o += s * mask[k % cols];
    }
    for ((o, s), m) in out.bias.iter_mut().zip(&shared.bias).zip(mask) {
        *o += s * m;
    }
    Ok(out)
}

/// `tau + local` for grouped tasks, `tau` otherwise.
pub fn effective_tau(tau: &Dense, local: Option<&Dense>) -> Result<Dense> {
    match local {
        Some(l) => tau.add(l),
        None => Ok(tau.clone()),
    }
}

fn he_normal(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, gain: f64) -> Matrix {
    let std = (gain / d_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
    Matrix::new(d_in, d_out, data).expect("shape")
}

impl DecomposedState {
    /// Fresh state with randomly initialised shared weights and no tasks.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<DecomposedLayer> = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| DecomposedLayer {
                shared: Dense {
                    weight: he_normal(&mut rng, i, o, 2.0),
                    bias: vec![0.0; o],
                },
                adaptive: BTreeMap::new(),
                mask_logits: BTreeMap::new(),
            })
            .collect();
        let shared_snapshot = layers.iter().map(|l| l.shared.clone()).collect();
        DecomposedState {
            arch,
            layers,
            groups: BTreeMap::new(),
            assignment: BTreeMap::new(),
            heads: BTreeMap::new(),
            shared_snapshot,
            restored: BTreeMap::new(),
            centroids: 0,
            rng,
            history: Vec::new(),
        }
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.heads.keys().copied().collect()
    }

    pub fn has_task(&self, t: TaskId) -> bool {
        self.heads.contains_key(&t)
    }

    fn require_task(&self, t: TaskId) -> Result<()> {
        if self.has_task(t) {
            Ok(())
        } else {
            Err(ApdError::UnknownTask(t))
        }
    }

    /// Mask of task `t` in layer `l`; exactly 1 when masks are pinned.
    pub fn mask(&self, l: usize, t: TaskId) -> Result<Vec<f64>> {
        let layer = &self.layers[l];
        if !self.arch.adaptive_mask {
            return Ok(vec![1.0; layer.shared.output_dim()]);
        }
        layer
            .mask_logits
            .get(&t)
            .map(|v| mask_of(v))
            .ok_or(ApdError::UnknownTask(t))
    }

    /// Locally-shared weight of `t`'s group in layer `l`, if grouped.
    pub fn local_shared(&self, l: usize, t: TaskId) -> Result<Option<&Dense>> {
        match self.assignment.get(&t) {
            None => Ok(None),
            Some(g) => self
                .groups
                .get(g)
                .map(|ls| Some(&ls.layers[l]))
                .ok_or(ApdError::MissingGroup { task: t, group: *g }),
        }
    }

    pub fn effective_tau(&self, l: usize, t: TaskId) -> Result<Dense> {
        let tau = self.layers[l]
            .adaptive
            .get(&t)
            .ok_or(ApdError::UnknownTask(t))?;
        effective_tau(tau, self.local_shared(l, t)?)
    }

    /// Live composed weights of every hidden layer for task `t`.
    pub fn composed_layers(&self, t: TaskId) -> Result<Vec<Dense>> {
        self.require_task(t)?;
        (0..self.layers.len())
            .map(|l| compose(&self.layers[l].shared, &self.mask(l, t)?, &self.effective_tau(l, t)?))
            .collect()
    }

    /// Composed weights of task `i` against the shared snapshot.
    pub fn restore(&self, i: TaskId) -> Result<Vec<Dense>> {
        self.require_task(i)?;
        (0..self.layers.len())
            .map(|l| compose(&self.shared_snapshot[l], &self.mask(l, i)?, &self.effective_tau(l, i)?))
            .collect()
    }

    /// Recomputes and freezes restore targets for every task except `current`.
    pub fn prepare_restore_targets(&mut self, current: Option<TaskId>) -> Result<()> {
        let mut restored = BTreeMap::new();
        for t in self.tasks() {
            if Some(t) != current {
                restored.insert(t, self.restore(t)?);
            }
        }
        self.restored = restored;
        Ok(())
    }

    /// Copies the live shared weights into the snapshot.
    pub fn snapshot_shared(&mut self) {
        self.shared_snapshot = self.layers.iter().map(|l| l.shared.clone()).collect();
    }

    /// Logits of task `t` for a batch of row-vector inputs.
    pub fn forward_batch(&self, x: &Matrix, t: TaskId) -> Result<Matrix> {
        let layers = self.composed_layers(t)?;
        let head = &self.heads[&t];
        if x.cols() != self.arch.input_dim {
            return Err(ApdError::ShapeMismatch(format!(
                "input of dimension {} for a network expecting {}",
                x.cols(),
                self.arch.input_dim
            )));
        }
        Ok(network::forward(&layers, head, self.arch.activation, x)?.logits)
    }

    pub fn forward(&self, x: &[f64], t: TaskId) -> Result<Vec<f64>> {
        let m = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&m, t)?.into_data())
    }

    /// Adds task `t`: delta per `mode`, zero mask logits, a random head, and
    /// the shared snapshot refreshed to the current shared weights.
    pub fn init_task(&mut self, t: TaskId, mode: TauInit, classes: usize) -> Result<()> {
        if self.has_task(t) {
            return Err(ApdError::DuplicateTask(t));
        }
        if classes == 0 {
            return Err(ApdError::InvalidArgument("a task needs at least one class".into()));
        }
        for layer in self.layers.iter_mut() {
            let tau = match mode {
                TauInit::CopyShared => layer.shared.clone(),
                TauInit::Zeros => Dense::zeros(layer.shared.input_dim(), layer.shared.output_dim()),
            };
            layer.adaptive.insert(t, tau);
            layer
                .mask_logits
                .insert(t, vec![0.0; layer.shared.output_dim()]);
        }
        let f = self.arch.feature_dim();
        let head = Dense {
            weight: he_normal(&mut self.rng, f, classes, 1.0),
            bias: vec![0.0; classes],
        };
        self.heads.insert(t, head);
        self.snapshot_shared();
        Ok(())
    }

    /// Flattened composed hidden weights of task `t`.
    pub fn composed_flat(&self, t: TaskId) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for d in self.composed_layers(t)? {
            d.flatten_into(&mut out);
        }
        Ok(out)
    }

    /// Flattened effective deltas of task `t` over all layers.
    pub fn effective_tau_flat(&self, t: TaskId) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            self.effective_tau(l, t)?.flatten_into(&mut out);
        }
        Ok(out)
    }

    pub fn shared_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.shared.flatten_into(&mut out);
        }
        out
    }

    /// Total stored nonzeros across all task-adaptive deltas.
    pub fn tau_nonzeros(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.adaptive.values())
            .map(Dense::count_nonzero)
            .sum()
    }

    pub fn local_shared_nonzeros(&self) -> usize {
        self.groups
            .values()
            .flat_map(|g| g.layers.iter())
            .map(Dense::count_nonzero)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.shared.is_finite()
                && l.adaptive.values().all(Dense::is_finite)
                && l.mask_logits.values().flatten().all(|v| v.is_finite())
        }) && self.heads.values().all(Dense::is_finite)
    }
}

//! Per-task optimisation and the continual-learning sequence driver.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consolidation::{self, ConsolidationReport};
use crate::error::{ApdError, Result};
use crate::metrics::{self, PerformanceMatrix};
use crate::objective::{self, lambda_for_layer, Grads, ObjectiveSpec, ParamSet, Penalty};
use crate::params::{Architecture, DecomposedState, HistoryEntry, TauInit, TaskId};
use crate::taskgen::TaskDataset;

/// Optimisation and consolidation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// l1 weight on task-adaptive deltas, per hidden layer (last value repeats).
    pub lambda1: Vec<f64>,
    /// Drift weight of the decomposed objectives.
    pub lambda2: f64,
    /// Weight of `||theta - theta_prev||^2` for the plain L2-transfer baseline.
    pub l2t_lambda: f64,
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Spread threshold of the consolidation rule.
    pub beta: f64,
    /// Consolidate after every `consolidation_period` tasks.
    pub consolidation_period: usize,
    /// Centroids added per consolidation.
    pub centroid_increment: usize,
    pub initial_centroids: usize,
    pub kmeans_max_iter: usize,
    pub tau_init: TauInit,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda1: vec![0.1],
            lambda2: 2.0,
            l2t_lambda: 1e-3,
            lr0: 0.05,
            lr_decay: 0.95,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 16,
            beta: 1e-2,
            consolidation_period: 5,
            centroid_increment: 2,
            initial_centroids: 2,
            kmeans_max_iter: 100,
            tau_init: TauInit::CopyShared,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ApdError::InvalidArgument(m.to_string()));
        if self.lambda1.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return bad("lambda1 must be finite and >= 0");
        }
        if !(self.lambda2 >= 0.0) || !(self.l2t_lambda >= 0.0) || !(self.beta >= 0.0) {
            return bad("lambda2, l2t_lambda and beta must be >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.consolidation_period == 0
            || self.centroid_increment == 0
            || self.initial_centroids == 0
        {
            return bad("consolidation_period, centroid_increment and initial_centroids must be >= 1");
        }
        if self.kmeans_max_iter == 0 {
            return bad("kmeans_max_iter must be >= 1");
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    /// One dense network with an l2 pull towards the previous task's weights.
    L2Transfer,
    /// Decomposed, without retroactive updates of earlier tasks.
    ApdFixed,
    /// Decomposed with retroactive updates.
    Apd1,
    /// Apd1 plus hierarchical consolidation.
    Apd2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Ablations {
    pub no_sparsity: bool,
    pub no_adaptive_mask: bool,
    pub fixed_shared: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub kind: VariantKind,
    pub ablations: Ablations,
}

impl Variant {
    pub const fn new(kind: VariantKind) -> Self {
        Variant {
            kind,
            ablations: Ablations {
                no_sparsity: false,
                no_adaptive_mask: false,
                fixed_shared: false,
            },
        }
    }

    pub fn with(mut self, ablations: Ablations) -> Self {
        self.ablations = ablations;
        self
    }

    pub fn is_decomposed(&self) -> bool {
        self.kind != VariantKind::L2Transfer
    }

    pub fn consolidates(&self) -> bool {
        self.kind == VariantKind::Apd2
    }

    pub fn retroactive(&self) -> bool {
        matches!(self.kind, VariantKind::Apd1 | VariantKind::Apd2)
    }

    pub fn adaptive_mask(&self) -> bool {
        self.is_decomposed() && !self.ablations.no_adaptive_mask
    }

    pub fn sparse(&self) -> bool {
        self.is_decomposed() && !self.ablations.no_sparsity
    }

    /// The architecture actually trained for this variant.
    pub fn architecture(&self, base: &Architecture) -> Architecture {
        let mut arch = base.clone();
        arch.adaptive_mask = self.adaptive_mask();
        arch
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            VariantKind::L2Transfer => "l2t",
            VariantKind::ApdFixed => "apd-fixed",
            VariantKind::Apd1 => "apd1",
            VariantKind::Apd2 => "apd2",
        };
        f.write_str(base)?;
        if self.ablations.no_sparsity {
            f.write_str("+no-sparsity")?;
        }
        if self.ablations.no_adaptive_mask {
            f.write_str("+no-adaptive-mask")?;
        }
        if self.ablations.fixed_shared {
            f.write_str("+fixed-shared")?;
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = ApdError;

    /// `base[+flag]*`, e.g. `apd1+no-sparsity`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let kind = match parts.next().unwrap_or("").trim().to_ascii_lowercase().as_str() {
            "l2t" | "l2-transfer" => VariantKind::L2Transfer,
            "apd-fixed" | "apd_fixed" => VariantKind::ApdFixed,
            "apd1" | "apd(1)" => VariantKind::Apd1,
            "apd2" | "apd(2)" => VariantKind::Apd2,
            other => {
                return Err(ApdError::InvalidArgument(format!("unknown variant `{other}`")));
            }
        };
        let mut ablations = Ablations::default();
        for flag in parts {
            match flag.trim().replace('_', "-").as_str() {
                "no-sparsity" => ablations.no_sparsity = true,
                "no-adaptive-mask" => ablations.no_adaptive_mask = true,
                "fixed-shared" => ablations.fixed_shared = true,
                other => {
                    return Err(ApdError::InvalidArgument(format!("unknown ablation `{other}`")));
                }
            }
        }
        Ok(Variant { kind, ablations })
    }
}

#[inline]
fn soft_threshold(x: f64, threshold: f64) -> f64 {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Soft-thresholding: `sign(x) * max(|x| - threshold, 0)` per coordinate.
pub fn proximal_l1(values: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold >= 0.0) {
        return Err(ApdError::InvalidArgument(format!(
            "negative proximal threshold {threshold}"
        )));
    }
    Ok(values.iter().map(|&x| soft_threshold(x, threshold)).collect())
}

/// One epoch of training output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: u32,
    pub epoch: usize,
    pub lr: f64,
    /// Mean over minibatches of the full objective (smooth + l1).
    pub loss: f64,
    pub data_loss: f64,
    pub drift_norm: f64,
    /// Fraction of exact zeros in the current task's delta.
    pub tau_sparsity: f64,
    pub tau_nonzeros: usize,
    pub val_accuracy: Option<f64>,
}

/// The objective and trainable blocks of one task under `variant`.
pub fn training_plan(
    state: &DecomposedState,
    t: TaskId,
    hp: &HyperParams,
    variant: &Variant,
    first: bool,
) -> (ObjectiveSpec, ParamSet) {
    if first {
        return (
            ObjectiveSpec {
                penalty: Penalty::None,
                lambda1: Vec::new(),
                l1_tasks: Vec::new(),
                unit_mask_current: true,
            },
            ParamSet {
                shared: true,
                adaptive: Vec::new(),
                masks: Vec::new(),
                head: Some(t),
            },
        );
    }
    let shared = !variant.ablations.fixed_shared;
    let lambda1 = if variant.sparse() {
        hp.lambda1.clone()
    } else {
        Vec::new()
    };
    match variant.kind {
        VariantKind::L2Transfer => (
            ObjectiveSpec {
                penalty: Penalty::SharedAnchor {
                    weight: hp.l2t_lambda,
                },
                lambda1: Vec::new(),
                l1_tasks: Vec::new(),
                unit_mask_current: false,
            },
            ParamSet {
                shared,
                adaptive: Vec::new(),
                masks: Vec::new(),
                head: Some(t),
            },
        ),
        VariantKind::ApdFixed => (
            ObjectiveSpec {
                penalty: Penalty::SharedAnchor { weight: hp.lambda2 },
                lambda1,
                l1_tasks: vec![t],
                unit_mask_current: false,
            },
            ParamSet {
                shared,
                adaptive: vec![t],
                masks: if variant.adaptive_mask() { vec![t] } else { Vec::new() },
                head: Some(t),
            },
        ),
        VariantKind::Apd1 | VariantKind::Apd2 => {
            let all = state.tasks();
            (
                ObjectiveSpec {
                    penalty: Penalty::Retroactive {
                        weight: hp.lambda2,
                        local_shared: variant.kind == VariantKind::Apd2,
                    },
                    lambda1,
                    l1_tasks: all.clone(),
                    unit_mask_current: false,
                },
                ParamSet {
                    shared,
                    adaptive: all.clone(),
                    masks: if variant.adaptive_mask() { all } else { Vec::new() },
                    head: Some(t),
                },
            )
        }
    }
}

/// One SGD step with decoupled weight decay on shared weights and heads,
/// followed by soft-thresholding of every trainable delta.
fn sgd_step(
    state: &mut DecomposedState,
    set: &ParamSet,
    grads: &Grads,
    lr: f64,
    hp: &HyperParams,
    prox_lambda1: &[f64],
) {
    let wd = hp.weight_decay;
    if set.shared {
        for (layer, g) in state.layers.iter_mut().zip(&grads.shared) {
            for (p, &d) in layer.shared.values_mut().zip(g.values()) {
                *p -= lr * d + lr * wd * *p;
            }
        }
    }
    for t in &set.adaptive {
        if let Some(gs) = grads.adaptive.get(t) {
            for (layer, g) in state.layers.iter_mut().zip(gs) {
                let tau = layer.adaptive.get_mut(t).expect("trainable task");
                for (p, &d) in tau.values_mut().zip(g.values()) {
                    *p -= lr * d;
                }
            }
        }
        for (l, layer) in state.layers.iter_mut().enumerate() {
            let th = lr * lambda_for_layer(prox_lambda1, l);
            if th > 0.0 {
                let tau = layer.adaptive.get_mut(t).expect("trainable task");
                for p in tau.values_mut() {
                    *p = soft_threshold(*p, th);
                }
            }
        }
    }
    for t in &set.masks {
        if let Some(gs) = grads.mask.get(t) {
            for (layer, g) in state.layers.iter_mut().zip(gs) {
                let v = layer.mask_logits.get_mut(t).expect("trainable task");
                for (p, &d) in v.iter_mut().zip(g) {
                    *p -= lr * d;
                }
            }
        }
    }
    if let Some(t) = set.head {
        if grads.head.0 == t {
            let head = state.heads.get_mut(&t).expect("trainable head");
            for (p, &d) in head.values_mut().zip(grads.head.1.values()) {
                *p -= lr * d + lr * wd * *p;
            }
        }
    }
}

fn tau_stats(state: &DecomposedState, t: TaskId) -> (f64, usize) {
    let mut total = 0;
    let mut nz = 0;
    for layer in &state.layers {
        if let Some(tau) = layer.adaptive.get(&t) {
            total += tau.len();
            nz += tau.count_nonzero();
        }
    }
    let sparsity = if total == 0 {
        1.0
    } else {
        1.0 - nz as f64 / total as f64
    };
    (sparsity, nz)
}

/// Trains task `t` on its train split. The task must be initialised and, for
/// retroactive variants, every earlier task needs a restore target.
///
/// `first` selects plain training of the shared weights with unit masks;
/// afterwards the shared weights are rescaled so that the task's composed
/// weights reproduce the plainly trained network exactly.
pub fn train_task(
    state: &mut DecomposedState,
    data: &TaskDataset,
    hp: &HyperParams,
    variant: &Variant,
    first: bool,
) -> Result<Vec<EpochLog>> {
    let t = data.task_id;
    if !state.has_task(t) {
        return Err(ApdError::UnknownTask(t));
    }
    let train = &data.splits.train;
    if train.is_empty() {
        return Err(ApdError::Empty("training split"));
    }
    let (spec, set) = training_plan(state, t, hp, variant, first);
    let prox_lambda1 = spec.lambda1.clone();
    let mut logs = Vec::with_capacity(hp.epochs);
    let mut order = train.clone();
    for epoch in 0..hp.epochs {
        let lr = hp.learning_rate(epoch);
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut data_sum = 0.0;
        let mut drift = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let batch = data.batch(chunk)?;
            let value = objective::evaluate(state, &batch, t, &spec)?;
            loss_sum += value.total();
            data_sum += value.data_loss;
            drift = value.drift_norm;
            batches += 1;
            sgd_step(state, &set, &value.grads, lr, hp, &prox_lambda1);
        }
        let (tau_sparsity, tau_nonzeros) = tau_stats(state, t);
        let val_accuracy = if data.splits.val.is_empty() {
            None
        } else if first {
            None
        } else {
            Some(metrics::evaluate(state, t, &data.batch(&data.splits.val)?)?)
        };
        logs.push(EpochLog {
            task: t.0,
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            data_loss: data_sum / batches as f64,
            drift_norm: drift,
            tau_sparsity,
            tau_nonzeros,
            val_accuracy,
        });
    }
    if first && state.arch.adaptive_mask {
        for l in 0..state.layers.len() {
            let mask = state.mask(l, t)?;
            let cols = mask.len();
            let shared = &mut state.layers[l].shared;
            for (k, w) in shared.weight.data_mut().iter_mut().enumerate() {
                *w /= mask[k % cols];
            }
            for (b, m) in shared.bias.iter_mut().zip(&mask) {
                *b /= m;
            }
        }
    }
    Ok(logs)
}

/// Flattened composed weights of one task after one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub checkpoint: usize,
    pub task: u32,
    pub params: Vec<f64>,
}

/// Everything produced by training one task of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub position: usize,
    pub task: TaskId,
    pub logs: Vec<EpochLog>,
    pub consolidation: Option<ConsolidationReport>,
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub state: DecomposedState,
    pub performance: PerformanceMatrix,
    pub trajectory: Vec<TrajectoryPoint>,
    pub logs: Vec<EpochLog>,
    pub consolidations: Vec<ConsolidationReport>,
}

/// Drives a task sequence one task at a time so it can be checkpointed and
/// resumed.
#[derive(Debug)]
pub struct SequenceRunner<'a> {
    tasks: &'a [TaskDataset],
    order: Vec<usize>,
    hp: HyperParams,
    variant: Variant,
    state: DecomposedState,
}

fn check_order(tasks: &[TaskDataset], order: &[usize]) -> Result<()> {
    if order.len() != tasks.len() {
        return Err(ApdError::InvalidArgument(format!(
            "order has {} entries for {} tasks",
            order.len(),
            tasks.len()
        )));
    }
    let mut seen = vec![false; tasks.len()];
    for &o in order {
        if o >= tasks.len() {
            return Err(ApdError::InvalidArgument(format!("order index {o} out of range")));
        }
        if seen[o] {
            return Err(ApdError::InvalidArgument(format!("duplicate order index {o}")));
        }
        seen[o] = true;
    }
    let mut ids: Vec<TaskId> = tasks.iter().map(|d| d.task_id).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != tasks.len() {
        return Err(ApdError::InvalidArgument("duplicate task ids in stream".into()));
    }
    Ok(())
}

impl<'a> SequenceRunner<'a> {
    pub fn new(
        tasks: &'a [TaskDataset],
        order: &[usize],
        hp: &HyperParams,
        variant: &Variant,
        arch: &Architecture,
    ) -> Result<Self> {
        hp.validate()?;
        check_order(tasks, order)?;
        if let Some(d) = tasks.iter().find(|d| d.input_dim() != arch.input_dim) {
            return Err(ApdError::ShapeMismatch(format!(
                "task {} has {} features, network expects {}",
                d.task_id,
                d.input_dim(),
                arch.input_dim
            )));
        }
        let mut state = DecomposedState::new(variant.architecture(arch), hp.seed);
        state.centroids = hp.initial_centroids;
        Ok(SequenceRunner {
            tasks,
            order: order.to_vec(),
            hp: hp.clone(),
            variant: *variant,
            state,
        })
    }

    /// Continues from a state checkpointed after some prefix of `order`.
    pub fn resume(
        state: DecomposedState,
        tasks: &'a [TaskDataset],
        order: &[usize],
        hp: &HyperParams,
        variant: &Variant,
    ) -> Result<Self> {
        hp.validate()?;
        check_order(tasks, order)?;
        let done = state.history.len();
        if done > order.len() {
            return Err(ApdError::InvalidArgument(
                "checkpoint has more tasks than the order".into(),
            ));
        }
        for (p, h) in state.history.iter().enumerate() {
            if tasks[order[p]].task_id != h.task {
                return Err(ApdError::InvalidArgument(format!(
                    "checkpoint trained task {} at position {p}, order expects {}",
                    h.task,
                    tasks[order[p]].task_id
                )));
            }
        }
        Ok(SequenceRunner {
            tasks,
            order: order.to_vec(),
            hp: hp.clone(),
            variant: *variant,
            state,
        })
    }

    pub fn state(&self) -> &DecomposedState {
        &self.state
    }

    pub fn position(&self) -> usize {
        self.state.history.len()
    }

    pub fn is_done(&self) -> bool {
        self.position() >= self.order.len()
    }

    /// Trains the next task in the order, consolidates when scheduled and
    /// evaluates every task seen so far.
    pub fn step(&mut self) -> Result<Option<StepOutput>> {
        if self.is_done() {
            return Ok(None);
        }
        let p = self.position();
        let data = &self.tasks[self.order[p]];
        let t = data.task_id;
        let first = p == 0;
        let mode = if first || !self.variant.is_decomposed() {
            TauInit::Zeros
        } else {
            self.hp.tau_init
        };
        self.state.init_task(t, mode, data.num_classes)?;
        if self.variant.retroactive() && !first {
            self.state.prepare_restore_targets(Some(t))?;
        } else {
            self.state.restored.clear();
        }
        let logs = train_task(&mut self.state, data, &self.hp, &self.variant, first)?;
        let consolidation = if self.variant.consolidates()
            && (p + 1) % self.hp.consolidation_period == 0
        {
            Some(consolidation::consolidate(&mut self.state, &self.hp)?)
        } else {
            None
        };

        let mut accuracies = Vec::with_capacity(p + 1);
        let mut trajectory = Vec::with_capacity(p + 1);
        for q in 0..=p {
            let d = &self.tasks[self.order[q]];
            let acc = metrics::evaluate(&self.state, d.task_id, &d.batch(&d.splits.test)?)?;
            accuracies.push((d.task_id, acc));
            trajectory.push(TrajectoryPoint {
                checkpoint: p,
                task: d.task_id.0,
                params: self.state.composed_flat(d.task_id)?,
            });
        }
        self.state.history.push(HistoryEntry { task: t, accuracies });
        Ok(Some(StepOutput {
            position: p,
            task: t,
            logs,
            consolidation,
            trajectory,
        }))
    }

    pub fn run(mut self) -> Result<RunOutput> {
        let mut trajectory = Vec::new();
        let mut logs = Vec::new();
        let mut consolidations = Vec::new();
        while let Some(out) = self.step()? {
            trajectory.extend(out.trajectory);
            logs.extend(out.logs);
            consolidations.extend(out.consolidation);
        }
        let performance = PerformanceMatrix::from_history(&self.state.history)?;
        Ok(RunOutput {
            state: self.state,
            performance,
            trajectory,
            logs,
            consolidations,
        })
    }
}

/// Trains `tasks` in `order` from scratch.
pub fn run_sequence(
    tasks: &[TaskDataset],
    order: &[usize],
    hp: &HyperParams,
    variant: &Variant,
    arch: &Architecture,
) -> Result<RunOutput> {
    SequenceRunner::new(tasks, order, hp, variant, arch)?.run()
}

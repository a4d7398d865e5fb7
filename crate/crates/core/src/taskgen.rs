//! Deterministic synthetic task streams.
//!
//! Each task is a Gaussian-cloud classification problem. Class prototypes mix
//! a basis shared by every task (weight `relatedness`) with directions owned by
//! the task or, when families are configured, mostly by its family. All
//! randomness flows from `StreamSpec::seed`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};
use crate::numeric::{dot, Matrix};
use crate::objective::Batch;
use crate::params::TaskId;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: TaskId,
    /// One sample per row.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Splits,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Gathers the listed rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(ApdError::InvalidArgument(format!(
                    "row {r} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        Ok(Batch {
            x: Matrix::new(rows.len(), d, data)?,
            labels,
        })
    }

    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn class_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &r in rows {
            c[self.labels[r]] += 1;
        }
        c
    }
}

/// Shape of a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    /// Weight of the basis shared by every task, in [0, 1].
    pub relatedness: f64,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub noise: f64,
    /// Norm of every class prototype.
    pub separation: f64,
    /// Latent task families; task `t` belongs to family `t % families`.
    pub families: Option<usize>,
    /// Within-family weight of the family directions, in [0, 1].
    pub family_share: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            tasks: 5,
            dim: 16,
            classes: 4,
            samples_per_class: 200,
            relatedness: 0.5,
            noise: 1.5,
            separation: 3.0,
            families: None,
            family_share: 0.85,
            split: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ApdError::InvalidArgument(m));
        if self.tasks == 0 || self.dim == 0 || self.classes == 0 || self.samples_per_class == 0 {
            return bad("tasks, dim, classes and samples_per_class must be >= 1".into());
        }
        if self.classes > self.dim {
            return bad(format!(
                "{} classes cannot be represented in {} dimensions",
                self.classes, self.dim
            ));
        }
        if !(0.0..=1.0).contains(&self.relatedness) || !(0.0..=1.0).contains(&self.family_share) {
            return bad("relatedness and family_share must lie in [0, 1]".into());
        }
        if !(self.noise >= 0.0) || !(self.separation >= 0.0) {
            return bad("noise and separation must be >= 0".into());
        }
        if self.families == Some(0) {
            return bad("families must be >= 1 when set".into());
        }
        check_ratios(&self.split)
    }
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(ApdError::InvalidArgument(format!(
            "split ratios {r:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn mix(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// Generates `spec.tasks` datasets with ids `0..tasks`, already split.
pub fn gen_stream(spec: &StreamSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, c) = (spec.dim, spec.classes);
    let global: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(&mut rng, d)).collect();
    let families: Vec<Vec<Vec<f64>>> = (0..spec.families.unwrap_or(0))
        .map(|_| (0..c).map(|_| unit_vector(&mut rng, d)).collect())
        .collect();
    let (wg, wu) = (spec.relatedness.sqrt(), (1.0 - spec.relatedness).sqrt());
    let (wf, ws) = (spec.family_share.sqrt(), (1.0 - spec.family_share).sqrt());

    let mut out = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let protos: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                let own = unit_vector(&mut rng, d);
                let specific = if families.is_empty() {
                    own
                } else {
                    let fam = &families[t % families.len()][k];
                    let m = mix(fam, wf, &own, ws);
                    let n = dot(&m, &m).sqrt().max(1e-12);
                    m.into_iter().map(|x| x / n).collect()
                };
                mix(&global[k], wg, &specific, wu)
                    .into_iter()
                    .map(|x| x * spec.separation)
                    .collect()
            })
            .collect();
        let n = c * spec.samples_per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (k, p) in protos.iter().enumerate() {
            for _ in 0..spec.samples_per_class {
                for &x in p {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    data.push(x + spec.noise * e);
                }
                labels.push(k);
            }
        }
        let ds = TaskDataset {
            task_id: TaskId(t as u32),
            features: Matrix::new(n, d, data)?,
            labels,
            num_classes: c,
            splits: Splits::default(),
        };
        let split_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64 + 1);
        out.push(split(ds, &spec.split, split_seed)?);
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` items over `ratios`.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut rems = [(0.0, 0usize); 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = ratios[i] * n as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        rems[i] = (exact - counts[i] as f64, i);
    }
    rems.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    for k in 0..n.saturating_sub(assigned) {
        counts[rems[k % 3].1] += 1;
    }
    counts
}

/// Stratified, seeded train / validation / test split.
pub fn split(mut dataset: TaskDataset, ratios: &[f64; 3], seed: u64) -> Result<TaskDataset> {
    check_ratios(ratios)?;
    let parts = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for class in 0..dataset.num_classes {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < parts {
            return Err(ApdError::InvalidArgument(format!(
                "class {class} has {} samples, fewer than the {parts} split parts",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let [a, b, _] = apportion(idx.len(), ratios);
        splits.train.extend_from_slice(&idx[..a]);
        splits.val.extend_from_slice(&idx[a..a + b]);
        splits.test.extend_from_slice(&idx[a + b..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    dataset.splits = splits;
    Ok(dataset)
}

/// `r` permutations of `0..t`; the first is always the identity.
pub fn orders(t: usize, r: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if r == 0 {
        return Err(ApdError::InvalidArgument("need at least one order".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..t).collect();
    let mut out = vec![identity.clone()];
    for _ in 1..r {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        out.push(p);
    }
    Ok(out)
}

const T10: [[usize; 10]; 5] = [
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    [1, 7, 4, 5, 2, 0, 8, 6, 9, 3],
    [7, 0, 5, 1, 8, 4, 3, 6, 2, 9],
    [5, 8, 2, 9, 0, 4, 3, 7, 6, 1],
    [2, 9, 5, 4, 8, 0, 6, 1, 3, 7],
];

const T20: [[usize; 20]; 5] = [
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19],
    [15, 12, 5, 9, 7, 16, 18, 17, 1, 0, 3, 8, 11, 14, 10, 6, 2, 4, 13, 19],
    [17, 1, 19, 18, 12, 7, 6, 0, 11, 15, 10, 5, 13, 3, 9, 16, 4, 14, 2, 8],
    [11, 9, 6, 5, 12, 4, 0, 10, 13, 7, 14, 3, 15, 16, 8, 1, 2, 19, 18, 17],
    [6, 14, 0, 11, 12, 17, 13, 4, 9, 1, 7, 19, 8, 10, 3, 15, 18, 5, 2, 16],
];

/// Named benchmark orders: `T10-orderA` .. `T10-orderE`, `T20-orderA` .. `T20-orderE`.
pub fn fixture_orders(name: &str) -> Result<Vec<usize>> {
    let unknown = || ApdError::InvalidArgument(format!("unknown order fixture `{name}`"));
    let lower = name.trim().to_ascii_lowercase();
    let (size, letter) = lower.split_once("-order").ok_or_else(unknown)?;
    let idx = match letter {
        "a" => 0,
        "b" => 1,
        "c" => 2,
        "d" => 3,
        "e" => 4,
        _ => return Err(unknown()),
    };
    match size {
        "t10" => Ok(T10[idx].to_vec()),
        "t20" => Ok(T20[idx].to_vec()),
        _ => Err(unknown()),
    }
}

/// A fixture order restricted to tasks `< t`, keeping their relative order.
/// Uses the 10-task fixtures for `t <= 10` and the 20-task ones up to 20.
pub fn restricted_fixture(letter: char, t: usize) -> Result<Vec<usize>> {
    let size = if t <= 10 { 10 } else { 20 };
    if t > 20 {
        return Err(ApdError::InvalidArgument(format!("no fixture covers {t} tasks")));
    }
    let full = fixture_orders(&format!("T{size}-order{letter}"))?;
    Ok(full.into_iter().filter(|&i| i < t).collect())
}

/// Loads one task from CSV: header row, integer label first, real features after.
/// All rows land in the training split; call [`split`] to re-split.
pub fn load_task_csv(path: &Path, task_id: TaskId) -> Result<TaskDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = line + 2;
        let bad = |m: String| ApdError::InvalidArgument(format!("{}:{row}: {m}", path.display()));
        if record.len() < 2 {
            return Err(bad("need a label and at least one feature".into()));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label `{}` is not a class index", &record[0])))?;
        let feats: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("bad feature: {e}")))?;
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature".into()));
        }
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(bad(format!("{} features, expected {d}", feats.len())));
            }
            _ => {}
        }
        data.extend(feats);
        labels.push(label);
    }
    let d = dim.ok_or(ApdError::Empty("CSV task"))?;
    let n = labels.len();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(TaskDataset {
        task_id,
        features: Matrix::new(n, d, data)?,
        labels,
        num_classes,
        splits: Splits {
            train: (0..n).collect(),
            val: Vec::new(),
            test: Vec::new(),
        },
    })
}

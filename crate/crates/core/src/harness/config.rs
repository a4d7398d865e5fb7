//! Experiment configuration, read from TOML.
//!
//! ```toml
//! output_dir = "results"          # relative to the config file
//! variants = ["l2t", "apd1", "apd2"]
//! seeds = [0, 1, 2]
//!
//! [network]
//! hidden = [32, 32]
//! activation = "relu"
//!
//! [stream]                        # or [data] with csv = [...]
//! tasks = 5
//! relatedness = 0.5
//!
//! [orders]
//! mode = "fixtures"               # or "random"
//! fixtures = ["A", "B", "C"]
//!
//! [hyper]
//! epochs = 20
//! ```
//!
//! Every section and key is optional except `variants`; omitted values take
//! the defaults of [`StreamSpec`], [`HyperParams`] and the types below.
//! Run seed `s` trains with `hyper.seed = s` and generates its stream with
//! `stream.seed + s`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{ApdError, Result};
use crate::numeric::Activation;
use crate::params::{Architecture, TaskId};
use crate::taskgen::{self, StreamSpec, TaskDataset};
use crate::trainer::{HyperParams, Variant};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// One CSV per task; list position is the task id.
    pub csv: Vec<PathBuf>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

fn default_split() -> [f64; 3] {
    StreamSpec::default().split
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    #[default]
    Fixtures,
    Random,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrdersConfig {
    pub mode: OrderMode,
    /// Fixture letters (`"A"`) or full names (`"T10-orderB"`).
    pub fixtures: Vec<String>,
    /// Number of random orders; the first is the identity.
    pub count: usize,
    pub seed: u64,
}

impl Default for OrdersConfig {
    fn default() -> Self {
        OrdersConfig {
            mode: OrderMode::Fixtures,
            fixtures: vec!["A".into(), "B".into(), "C".into()],
            count: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_output")]
    output_dir: PathBuf,
    variants: Vec<String>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_true")]
    checkpoints: bool,
    #[serde(default)]
    network: NetworkConfig,
    stream: Option<StreamSpec>,
    data: Option<DataConfig>,
    #[serde(default)]
    orders: OrdersConfig,
    #[serde(default)]
    hyper: HyperParams,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_true() -> bool {
    true
}

/// Where the tasks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synthetic(StreamSpec),
    Csv(DataConfig),
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub checkpoints: bool,
    pub network: NetworkConfig,
    pub source: TaskSource,
    pub orders: OrdersConfig,
    pub hyper: HyperParams,
}

/// 1-based line of byte offset `at`.
fn line_at(text: &str, at: usize) -> usize {
    text[..at.min(text.len())].matches('\n').count() + 1
}

/// 1-based line where `key` is assigned or its table opens; 0 if absent.
fn line_of(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('=') || rest.starts_with(']'))
                || l.strip_prefix('[')
                    .and_then(|r| r.strip_prefix(key))
                    .is_some_and(|r| r.starts_with(']'))
        })
        .map_or(0, |i| i + 1)
}

impl ExperimentConfig {
    /// Parses and validates `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ApdError::Config {
            line: e.span().map_or(0, |s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        let bad = |key: &str, message: String| ApdError::Config {
            line: line_of(text, key),
            message,
        };

        if raw.variants.is_empty() {
            return Err(bad("variants", "at least one variant is required".into()));
        }
        let mut variants = Vec::with_capacity(raw.variants.len());
        for v in &raw.variants {
            let parsed: Variant = v.parse().map_err(|e: ApdError| bad("variants", e.to_string()))?;
            if variants.contains(&parsed) {
                return Err(bad("variants", format!("variant `{v}` listed twice")));
            }
            variants.push(parsed);
        }
        if raw.seeds.is_empty() {
            return Err(bad("seeds", "at least one seed is required".into()));
        }
        let mut seeds = raw.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != raw.seeds.len() {
            return Err(bad("seeds", "duplicate seeds".into()));
        }
        if raw.network.hidden.is_empty() || raw.network.hidden.contains(&0) {
            return Err(bad("hidden", "need at least one hidden layer, all widths >= 1".into()));
        }
        raw.hyper.validate().map_err(|e| bad("hyper", e.to_string()))?;
        let source = match (raw.stream, raw.data) {
            (Some(_), Some(_)) => {
                return Err(bad("data", "give either [stream] or [data], not both".into()));
            }
            (None, Some(mut d)) => {
                if d.csv.is_empty() {
                    return Err(bad("csv", "at least one CSV file is required".into()));
                }
                d.csv = d.csv.iter().map(|p| base.join(p)).collect();
                TaskSource::Csv(d)
            }
            (s, None) => {
                let s = s.unwrap_or_default();
                s.validate().map_err(|e| bad("stream", e.to_string()))?;
                TaskSource::Synthetic(s)
            }
        };
        match raw.orders.mode {
            OrderMode::Fixtures if raw.orders.fixtures.is_empty() => {
                return Err(bad("fixtures", "at least one fixture order is required".into()));
            }
            OrderMode::Random if raw.orders.count == 0 => {
                return Err(bad("count", "at least one order is required".into()));
            }
            _ => {}
        }
        let cfg = ExperimentConfig {
            output_dir: base.join(&raw.output_dir),
            variants,
            seeds: raw.seeds,
            checkpoints: raw.checkpoints,
            network: raw.network,
            source,
            orders: raw.orders,
            hyper: raw.hyper,
        };
        if let TaskSource::Synthetic(s) = &cfg.source {
            cfg.resolve_orders(s.tasks)
                .map_err(|e| bad("orders", e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        let mut a = Architecture::new(input_dim, self.network.hidden.clone());
        a.activation = self.network.activation;
        a
    }

    /// The task orders for a stream of `t` tasks.
    pub fn resolve_orders(&self, t: usize) -> Result<Vec<Vec<usize>>> {
        match self.orders.mode {
            OrderMode::Random => taskgen::orders(t, self.orders.count, self.orders.seed),
            OrderMode::Fixtures => self
                .orders
                .fixtures
                .iter()
                .map(|name| {
                    let order = match name.trim().chars().collect::<Vec<_>>().as_slice() {
                        [c] => taskgen::restricted_fixture(c.to_ascii_uppercase(), t)?,
                        _ => taskgen::fixture_orders(name)?,
                    };
                    if order.len() != t {
                        return Err(ApdError::InvalidArgument(format!(
                            "fixture `{name}` has {} tasks, the stream has {t}",
                            order.len()
                        )));
                    }
                    Ok(order)
                })
                .collect(),
        }
    }

    /// The task stream of run seed `seed`.
    pub fn tasks(&self, seed: u64) -> Result<Vec<TaskDataset>> {
        match &self.source {
            TaskSource::Synthetic(spec) => taskgen::gen_stream(&StreamSpec {
                seed: spec.seed.wrapping_add(seed),
                ..spec.clone()
            }),
            TaskSource::Csv(d) => {
                let mut out = Vec::with_capacity(d.csv.len());
                for (i, path) in d.csv.iter().enumerate() {
                    let task = taskgen::load_task_csv(path, TaskId(i as u32))?;
                    let split_seed = d.split_seed.wrapping_add(seed).wrapping_add(i as u64);
                    out.push(taskgen::split(task, &d.split, split_seed)?);
                }
                if out.iter().any(|t| t.input_dim() != out[0].input_dim()) {
                    return Err(ApdError::InvalidArgument(
                        "CSV tasks differ in feature count".into(),
                    ));
                }
                Ok(out)
            }
        }
    }
}

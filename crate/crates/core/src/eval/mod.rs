//! Few-shot experiment protocol, efficiency accounting, scalability timing and
//! parameter sweeps.

mod report;
mod scalability;

pub use report::{summary_table, write_report_artifacts, write_sweep_artifacts, CSV_HEADER};
pub use scalability::{fit_line, scalability_run, LinearFit, ScalabilityConfig, ScalabilityReport, ScalePoint};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{sample_kshot_task, GraphCollection, TaskRequest, TaskTriple};
use crate::graph::TaskLevel;
use crate::parallel::Execution;
use crate::pretrain::{run_pretraining_with, PretrainConfig};
use crate::prompt::{tune_head, Classifier, FrozenContext, Readouts, TuneConfig, TunedHead, Variant};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Node,
    #[default]
    Graph,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Node => "node",
            Level::Graph => "graph",
        }
    }

    /// Tasks per experiment when the protocol leaves it open.
    pub fn default_tasks(self) -> usize {
        match self {
            Level::Node => 10,
            Level::Graph => 100,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Level::Node),
            "graph" => Ok(Level::Graph),
            _ => Err(Error::Config(format!("unknown level `{s}` (expected node or graph)"))),
        }
    }
}

/// Which tasks an experiment runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub level: Level,
    pub k: usize,
    /// Defaults to 10 node-level or 100 graph-level tasks.
    pub num_tasks: Option<usize>,
    /// Node-level tasks only use graphs with more nodes than this.
    pub min_graph_nodes: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            level: Level::Graph,
            k: 5,
            num_tasks: None,
            min_graph_nodes: 50,
        }
    }
}

impl Protocol {
    pub fn tasks(&self) -> usize {
        self.num_tasks.unwrap_or_else(|| self.level.default_tasks())
    }
}

/// Graphs that can host a node-level task under `protocol`.
pub fn eligible_node_graphs(collection: &GraphCollection, protocol: &Protocol) -> Vec<usize> {
    (0..collection.len())
        .filter(|&g| {
            let req = TaskRequest {
                min_graph_nodes: protocol.min_graph_nodes,
                ..TaskRequest::node_level(g, protocol.k)
            };
            crate::graph::class_pools(collection, &req)
                .is_ok_and(|pools| pools.iter().all(|(_, p)| p.len() >= 2 * protocol.k))
        })
        .collect()
}

/// Task triples of an experiment. Task `i` depends only on the master seed
/// and `i`, so every variant sees the same tasks.
pub fn sample_tasks(collection: &GraphCollection, protocol: &Protocol, master_seed: u64) -> Result<Vec<TaskTriple>> {
    let eligible = match protocol.level {
        Level::Node => {
            let e = eligible_node_graphs(collection, protocol);
            if e.is_empty() {
                return Err(Error::Contract(format!(
                    "no graph has more than {} nodes and {} nodes of every class",
                    protocol.min_graph_nodes,
                    2 * protocol.k
                )));
            }
            e
        }
        Level::Graph => Vec::new(),
    };
    (0..protocol.tasks())
        .map(|i| {
            let seed = derive_seed(master_seed, &format!("task/{i}"));
            let request = match protocol.level {
                Level::Graph => TaskRequest::graph_level(protocol.k),
                Level::Node => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let &g = eligible.choose(&mut rng).expect("non-empty");
                    TaskRequest {
                        min_graph_nodes: protocol.min_graph_nodes,
                        ..TaskRequest::node_level(g, protocol.k)
                    }
                }
            };
            sample_kshot_task(collection, &request, derive_seed(seed, "split"))
        })
        .collect()
}

/// Fraction of `triple.test_query` classified correctly with prototypes from
/// the train support.
pub fn evaluate_task(ctx: &FrozenContext, triple: &TaskTriple, head: &TunedHead) -> Result<f64> {
    if triple.test_query.is_empty() {
        return Err(Error::Contract("task has an empty test query".into()));
    }
    let support = Readouts::collect(ctx, &triple.train.support)?;
    let query = Readouts::collect(ctx, &triple.test_query)?;
    Classifier::new(head, &support)?.accuracy(&query)
}

/// Everything `run_experiment` needs besides data and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub protocol: Protocol,
    pub tune: TuneConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: usize,
    pub accuracy: f64,
    pub tune_epochs: usize,
    pub selected_epoch: usize,
    pub test_size: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub level: Level,
    pub k: usize,
    pub variant: Variant,
    pub tasks: Vec<TaskOutcome>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub wall_clock_seconds: f64,
    pub config: serde_json::Value,
    pub seed: u64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.accuracy).collect()
    }

    /// Stored statistics agree with the per-task list and accuracies are in
    /// `[0, 1]`.
    pub fn is_consistent(&self) -> bool {
        let (m, s) = mean_std(&self.accuracies());
        m.to_bits() == self.mean.to_bits()
            && s.to_bits() == self.std.to_bits()
            && self.tasks.iter().all(|t| (0.0..=1.0).contains(&t.accuracy))
    }
}

/// Runs the protocol with frozen `params`: samples tasks, tunes one head per
/// task and scores it on the task's test instances.
pub fn run_experiment(
    collection: &GraphCollection,
    params: &EncoderParams,
    spec: &ExperimentSpec,
    exec: Execution,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    spec.tune.validate()?;
    if collection.feature_dim() != params.config.input_dim {
        return Err(Error::Dimension {
            what: "dataset feature dim vs checkpoint input_dim",
            expected: params.config.input_dim,
            found: collection.feature_dim(),
        });
    }
    let triples = sample_tasks(collection, &spec.protocol, spec.seed)?;
    let graphs: Vec<usize> = match spec.protocol.level {
        Level::Graph => (0..collection.len()).collect(),
        Level::Node => triples
            .iter()
            .filter_map(|t| match t.train.level {
                TaskLevel::Node { graph } => Some(graph),
                TaskLevel::Graph => None,
            })
            .collect(),
    };
    let ctx = FrozenContext::new(collection, params, graphs, spec.tune.delta, exec)?;
    let outcomes = exec.map_range(triples.len(), |i| -> Result<TaskOutcome> {
        let t0 = Instant::now();
        let tune = TuneConfig {
            seed: derive_seed(spec.seed, &format!("tune/{i}")),
            ..spec.tune.clone()
        };
        let head = tune_head(&triples[i].train, &ctx, &tune)?;
        let accuracy = evaluate_task(&ctx, &triples[i], &head)?;
        log::debug!("task={i} accuracy={accuracy:.4} epochs={}", head.epochs_run);
        Ok(TaskOutcome {
            task_id: i,
            accuracy,
            tune_epochs: head.epochs_run,
            selected_epoch: head.selected_epoch,
            test_size: triples[i].test_query.len(),
            seconds: t0.elapsed().as_secs_f64(),
        })
    });
    let tasks = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&tasks.iter().map(|t| t.accuracy).collect::<Vec<_>>());
    Ok(ExperimentReport {
        dataset: spec.dataset.clone(),
        level: spec.protocol.level,
        k: spec.protocol.k,
        variant: spec.tune.variant,
        tasks,
        mean,
        std,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config: serde_json::to_value(spec).unwrap_or(serde_json::Value::Null),
        seed: spec.seed,
    })
}

/// Tunable-parameter and head-FLOP accounting of one variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub variant: Variant,
    pub tunable_params: usize,
    /// Multiply-accumulates applying the head to one instance embedding.
    pub head_flops: usize,
    /// Informational: encoder multiply-accumulates per node (dense layers).
    pub encoder_macs_per_node: usize,
}

pub fn efficiency_report(variant: Variant, encoder: &EncoderConfig, classes: usize) -> EfficiencyReport {
    let d = encoder.embedding_dim();
    let h = encoder.hidden_dim;
    let encoder_macs_per_node = (0..encoder.num_layers)
        .map(|l| (if l == 0 { encoder.input_dim } else { h }) * h + h * h)
        .sum();
    EfficiencyReport {
        variant,
        tunable_params: variant.tunable_params(d, classes),
        head_flops: variant.head_flops(d, classes),
        encoder_macs_per_node,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Delta,
    HiddenDim,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(SweepAxis::Delta),
            "hidden_dim" => Ok(SweepAxis::HiddenDim),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (expected delta or hidden_dim)"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            SweepAxis::Delta => "delta",
            SweepAxis::HiddenDim => "hidden_dim",
        })
    }
}

/// Re-runs pre-training and the experiment for each value of `axis`.
pub fn sweep(
    collection: &GraphCollection,
    axis: SweepAxis,
    values: &[usize],
    encoder: &EncoderConfig,
    pretrain: &PretrainConfig,
    spec: &ExperimentSpec,
    exec: Execution,
) -> Result<Vec<(usize, ExperimentReport)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let (mut enc, mut pre, mut spec) = (encoder.clone(), pretrain.clone(), spec.clone());
            match axis {
                SweepAxis::Delta => {
                    pre.delta = value;
                    spec.tune.delta = value;
                }
                SweepAxis::HiddenDim => enc.hidden_dim = value,
            }
            let ckpt = run_pretraining_with(collection, &enc, &pre, exec)?;
            let mut report = run_experiment(collection, &ckpt.params, &spec, exec)?;
            report.config = serde_json::json!({
                "axis": axis,
                "value": value,
                "encoder": enc,
                "pretrain": pre,
                "experiment": spec,
            });
            Ok((value, report))
        })
        .collect()
}

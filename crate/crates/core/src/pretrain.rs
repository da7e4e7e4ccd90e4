//! Link-prediction pre-training by subgraph similarity.
//!
//! For a triplet `(v, a, b)` the loss is
//! `−ln( exp(sim(s_v,s_a)/τ) / Σ_{u∈{a,b}} exp(sim(s_v,s_u)/τ) )`
//! where `s_x` is the sum read-out of the contextual subgraph of `x`.
//!
//! Training batches are graph-grouped: each epoch the triplets are laid out
//! graph by graph (graphs in shuffled order, triplets shuffled within a graph)
//! and cut into `batch_size` chunks, so a batch touches only a few graphs and
//! encodes their disjoint union once. Early stopping and model selection use a
//! fixed monitor triplet set drawn once per run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::encoder::{encode_on_tape, init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{link_anchors, sample_triplet_for, Graph, GraphCollection, LinkTriplet};
use crate::optim::Adam;
use crate::parallel::Execution;
use crate::persist::{self, FORMAT_VERSION};
use crate::seed::derive_seed;
use crate::subgraph::{cosine_similarity, khop_nodes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub tau: f64,
    pub triplets_per_graph: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub delta: usize,
    pub seed: u64,
    /// Negatives per positive. One matches the two-term denominator.
    pub negatives: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            triplets_per_graph: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 20,
            delta: 1,
            seed: 0,
            negatives: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("pretrain tau and learning_rate must be positive".into()));
        }
        if self.triplets_per_graph == 0 || self.batch_size == 0 || self.patience == 0 || self.negatives == 0 {
            return Err(Error::Config(
                "pretrain triplets_per_graph, batch_size, patience and negatives must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-triplet loss from the two similarities, computed stably.
pub fn triplet_loss<T: Scalar>(sim_pos: T, sim_neg: T, tau: T) -> T {
    let (p, n) = (sim_pos / tau, sim_neg / tau);
    let m = p.max(n);
    m + ((p - m).exp() + (n - m).exp()).ln() - p
}

/// Summed loss over `(s_v, s_a, s_b)` embedding triples.
pub fn pretrain_loss<T: Scalar>(triplets: &[(&[T], &[T], &[T])], tau: T) -> Result<T> {
    if triplets.is_empty() {
        return Err(Error::Contract("pre-training loss of an empty triplet list".into()));
    }
    Ok(triplets
        .iter()
        .map(|(v, a, b)| triplet_loss(cosine_similarity(v, a), cosine_similarity(v, b), tau))
        .sum())
}

/// A positive and its negatives around one anchor of one graph.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Sample {
    graph: usize,
    v: usize,
    a: usize,
    negatives: Vec<usize>,
}

/// Triplets over a disjoint union of graphs, laid out for the tape: every
/// referenced subgraph becomes one read-out row.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    union: Graph,
    gather: Vec<usize>,
    segments: Vec<usize>,
    readouts: usize,
    /// Read-out rows per triplet: anchor, positive, then negatives.
    rows: Vec<Vec<usize>>,
}

impl TripletBatch {
    /// Batch of single-negative triplets on one graph.
    pub fn from_triplets(graph: &Graph, triplets: &[LinkTriplet], delta: usize) -> Result<Self> {
        let samples: Vec<Sample> = triplets
            .iter()
            .map(|t| Sample {
                graph: 0,
                v: t.v,
                a: t.a,
                negatives: vec![t.b],
            })
            .collect();
        Self::build(&[graph], &samples, |_, v| khop_nodes(graph, v, delta))
    }

    fn build(graphs: &[&Graph], samples: &[Sample], khop: impl Fn(usize, usize) -> Vec<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("pre-training loss of an empty triplet list".into()));
        }
        let (union, starts) = Graph::disjoint_union(graphs)?;
        let mut gather = Vec::new();
        let mut segments = Vec::new();
        let mut readouts = 0;
        let mut push = |g: usize, v: usize| {
            for u in khop(g, v) {
                gather.push(starts[g] + u);
                segments.push(readouts);
            }
            readouts += 1;
            readouts - 1
        };
        let rows = samples
            .iter()
            .map(|s| {
                let mut r = vec![push(s.graph, s.v), push(s.graph, s.a)];
                r.extend(s.negatives.iter().map(|&b| push(s.graph, b)));
                r
            })
            .collect();
        Ok(Self {
            union,
            gather,
            segments,
            readouts,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Summed loss of the batch recorded on `tape`.
    pub fn loss_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, config: &EncoderConfig, vars: &[Var], tau: f64) -> Result<Var> {
        let h = encode_on_tape(tape, &self.union, config, vars)?;
        let picked = tape.gather_rows(h, &self.gather)?;
        let s = tape.segment_sum(picked, &self.segments, self.readouts)?;
        let s = tape.l2_normalize(s)?;
        let anchors: Vec<usize> = self.rows.iter().map(|r| r[0]).collect();
        let sv = tape.gather_rows(s, &anchors)?;
        let width = self.rows[0].len();
        let mut sims = Vec::with_capacity(width - 1);
        for j in 1..width {
            let idx: Vec<usize> = self.rows.iter().map(|r| r[j]).collect();
            let su = tape.gather_rows(s, &idx)?;
            sims.push(tape.dot(sv, su)?);
        }
        let logits = tape.concat(&sims)?;
        let logits = tape.div_scalar(logits, T::of(tau))?;
        tape.cross_entropy(logits, &vec![0; self.rows.len()])
    }

    /// Summed loss under frozen parameters, forward only.
    pub fn loss(&self, params: &EncoderParams, tau: f64) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let vars = params.record(&mut tape, false);
        let l = self.loss_on_tape(&mut tape, &params.config, &vars, tau)?;
        Ok(f64::from(tape.value(l).item()?))
    }
}

/// Everything needed to resume encoding: the frozen parameters plus how
/// they were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: EncoderParams,
    pub pretrain: PretrainConfig,
    pub dataset: String,
    /// Monitor loss (mean per triplet) of the initial parameters.
    pub initial_loss: f64,
    /// Monitor loss of the returned parameters.
    pub final_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    /// Snapshot of the run configuration that produced the checkpoint, when
    /// the caller has one.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.params.config
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    persist::save_document(ckpt, path.as_ref())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    persist::load_document(path.as_ref())
}

/// Pre-computed neighbourhoods and anchor sets of every graph.
struct Prepared<'a> {
    graphs: &'a [Graph],
    khop: Vec<Vec<Vec<usize>>>,
    anchors: Vec<Vec<usize>>,
    usable: Vec<usize>,
}

impl<'a> Prepared<'a> {
    fn new(collection: &'a GraphCollection, delta: usize, exec: Execution) -> Self {
        let graphs = collection.graphs();
        let khop = exec.map(graphs, |g| (0..g.num_nodes()).map(|v| khop_nodes(g, v, delta)).collect());
        let anchors: Vec<Vec<usize>> = graphs.iter().map(link_anchors).collect();
        let usable = (0..graphs.len()).filter(|&g| !anchors[g].is_empty()).collect();
        Self {
            graphs,
            khop,
            anchors,
            usable,
        }
    }

    fn sample_graph(&self, g: usize, count: usize, negatives: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
        let graph = &self.graphs[g];
        let anchors = &self.anchors[g];
        (0..count)
            .map(|_| {
                let v = anchors[rng.random_range(0..anchors.len())];
                let first = sample_triplet_for(graph, v, rng)?;
                let mut negs = vec![first.b];
                for _ in 1..negatives {
                    negs.push(sample_triplet_for(graph, v, rng)?.b);
                }
                Ok(Sample {
                    graph: g,
                    v,
                    a: first.a,
                    negatives: negs,
                })
            })
            .collect()
    }

    /// Batch over the graphs referenced by `samples`, renumbered locally.
    fn batch(&self, samples: &[Sample]) -> Result<TripletBatch> {
        let mut ids: Vec<usize> = samples.iter().map(|s| s.graph).collect();
        ids.sort_unstable();
        ids.dedup();
        let local: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                graph: ids.binary_search(&s.graph).unwrap(),
                ..s.clone()
            })
            .collect();
        let graphs: Vec<&Graph> = ids.iter().map(|&g| &self.graphs[g]).collect();
        TripletBatch::build(&graphs, &local, |g, v| self.khop[ids[g]][v].clone())
    }
}

/// Mean monitor loss per triplet; graphs evaluated independently and summed
/// in graph order.
fn monitor_loss(prep: &Prepared, monitor: &[Vec<Sample>], params: &EncoderParams, tau: f64, exec: Execution) -> Result<f64> {
    let parts = exec.map(monitor, |samples| prep.batch(samples)?.loss(params, tau));
    let mut total = 0.0;
    let mut count = 0;
    for (p, s) in parts.into_iter().zip(monitor) {
        total += p?;
        count += s.len();
    }
    Ok(total / count as f64)
}

pub fn run_pretraining(collection: &GraphCollection, encoder: &EncoderConfig, config: &PretrainConfig) -> Result<Checkpoint> {
    run_pretraining_with(collection, encoder, config, Execution::default())
}

pub fn run_pretraining_with(
    collection: &GraphCollection,
    encoder: &EncoderConfig,
    config: &PretrainConfig,
    exec: Execution,
) -> Result<Checkpoint> {
    config.validate()?;
    encoder.validate()?;
    if collection.is_empty() {
        return Err(Error::Pretrain("empty graph collection".into()));
    }
    if collection.feature_dim() != encoder.input_dim {
        return Err(Error::Dimension {
            what: "dataset feature dim vs encoder input_dim",
            expected: encoder.input_dim,
            found: collection.feature_dim(),
        });
    }
    let prep = Prepared::new(collection, config.delta, exec);
    if prep.usable.is_empty() {
        return Err(Error::Pretrain(
            "no graph admits a link triplet (every graph is edgeless or complete)".into(),
        ));
    }

    let mut params = init_params(encoder, derive_seed(config.seed, "encoder-init"))?;
    let mut monitor_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "monitor"));
    let monitor = prep
        .usable
        .iter()
        .map(|&g| prep.sample_graph(g, config.triplets_per_graph, config.negatives, &mut monitor_rng))
        .collect::<Result<Vec<_>>>()?;

    let initial = monitor_loss(&prep, &monitor, &params, config.tau, exec)?;
    log::info!("epoch=0 loss={initial:.6}");
    let mut history = vec![initial];
    let mut best = (initial, 0usize, params.clone());
    let mut opt = Adam::new(config.learning_rate as f32);
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("epoch/{epoch}")));
        let mut order = prep.usable.clone();
        order.shuffle(&mut rng);
        let mut samples = Vec::with_capacity(order.len() * config.triplets_per_graph);
        for &g in &order {
            let mut s = prep.sample_graph(g, config.triplets_per_graph, config.negatives, &mut rng)?;
            s.shuffle(&mut rng);
            samples.extend(s);
        }
        for chunk in samples.chunks(config.batch_size) {
            let batch = prep.batch(chunk)?;
            let mut tape = Tape::<f32>::new();
            let vars = params.record(&mut tape, true);
            let loss = batch.loss_on_tape(&mut tape, encoder, &vars, config.tau)?;
            let mean = tape.div_scalar(loss, chunk.len() as f32)?;
            if !tape.value(mean).item()?.is_finite() {
                return Err(Error::Pretrain(format!("non-finite loss in epoch {epoch}")));
            }
            let grads = tape.backward(mean)?;
            let g: Vec<_> = vars.iter().map(|&v| grads.get(v).clone()).collect();
            opt.step(&mut params.tensors_mut(), &g)?;
        }
        epochs_run = epoch;
        let l = monitor_loss(&prep, &monitor, &params, config.tau, exec)?;
        log::info!("epoch={epoch} loss={l:.6}");
        history.push(l);
        if l < best.0 {
            best = (l, epoch, params.clone());
        } else if epoch - best.1 >= config.patience {
            log::info!("early stop at epoch {epoch}; best epoch {}", best.1);
            break;
        }
    }

    let (final_loss, best_epoch, params) = best;
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        params,
        pretrain: config.clone(),
        dataset: collection.name.clone(),
        initial_loss: initial,
        final_loss,
        best_epoch,
        epochs_run,
        loss_history: history,
        seed: config.seed,
        config: serde_json::Value::Null,
    })
}

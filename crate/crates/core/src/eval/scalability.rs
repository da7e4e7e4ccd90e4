use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::graph::{GraphCollection, InstanceRef};
use crate::optim::Adam;
use crate::parallel::Execution;
use crate::prompt::{tuning_step, FrozenContext, TunedHead, Variant};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalabilityConfig {
    /// A graph belongs to bucket `c` when `|nodes − c| <= half_width`.
    pub half_width: usize,
    pub graphs_per_bucket: usize,
    pub repeats: usize,
    /// Epochs averaged inside one repeat.
    pub epochs_per_repeat: usize,
    pub delta: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ScalabilityConfig {
    fn default() -> Self {
        Self {
            half_width: 5,
            graphs_per_bucket: 10,
            repeats: 3,
            epochs_per_repeat: 5,
            delta: 1,
            tau: 1.0,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub center: usize,
    pub mean_nodes: f64,
    pub graphs: Vec<usize>,
    /// Median over repeats of the mean epoch time.
    pub seconds_per_epoch: f64,
    pub repeat_seconds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityReport {
    pub points: Vec<ScalePoint>,
    /// Least-squares line through `(mean_nodes, seconds_per_epoch)`; absent
    /// with fewer than two points.
    pub fit: Option<LinearFit>,
    pub skipped: Vec<usize>,
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r2 })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Graphs sampled for bucket `center`, ascending.
pub(crate) fn bucket_graphs(collection: &GraphCollection, center: usize, config: &ScalabilityConfig) -> Vec<usize> {
    let candidates: Vec<usize> = (0..collection.len())
        .filter(|&g| collection.graphs()[g].num_nodes().abs_diff(center) <= config.half_width)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("bucket/{center}")));
    let mut chosen: Vec<usize> = candidates
        .choose_multiple(&mut rng, config.graphs_per_bucket)
        .copied()
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Times prompt-tuning epochs for node classification over every node of the
/// graphs sampled per size bucket. Empty buckets are skipped with a warning.
pub fn scalability_run(
    collection: &GraphCollection,
    params: &EncoderParams,
    buckets: &[usize],
    config: &ScalabilityConfig,
) -> Result<ScalabilityReport> {
    if config.repeats == 0 || config.epochs_per_repeat == 0 || config.graphs_per_bucket == 0 {
        return Err(Error::Config("scalability repeats, epochs and graphs per bucket must be at least 1".into()));
    }
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &center in buckets {
        let graphs = bucket_graphs(collection, center, config);
        if graphs.is_empty() {
            log::warn!("bucket {center} has no graph within ±{} nodes; skipped", config.half_width);
            skipped.push(center);
            continue;
        }
        let ctx = FrozenContext::new(collection, params, graphs.iter().copied(), config.delta, Execution::Sequential)?;
        let mut labelled = Vec::new();
        for &g in &graphs {
            let labels = collection.graphs()[g]
                .node_labels()
                .ok_or_else(|| Error::Contract(format!("graph {g} has no node labels")))?;
            labelled.extend(labels.iter().enumerate().map(|(node, &l)| (InstanceRef::Node { graph: g, node }, l)));
        }
        let mut classes: Vec<usize> = labelled.iter().map(|&(_, l)| l).collect();
        classes.sort_unstable();
        classes.dedup();
        let layout = ctx.layout(&labelled, &classes)?;
        let mut head = TunedHead::init(Variant::Prompt, ctx.emb_dim(), classes, config.seed);
        let mut opt = Adam::new(config.learning_rate as f32);
        tuning_step(&mut head, &mut opt, &layout, config.tau)?;
        let mut repeat_seconds = Vec::with_capacity(config.repeats);
        for _ in 0..config.repeats {
            let t = Instant::now();
            for _ in 0..config.epochs_per_repeat {
                tuning_step(&mut head, &mut opt, &layout, config.tau)?;
            }
            repeat_seconds.push(t.elapsed().as_secs_f64() / config.epochs_per_repeat as f64);
        }
        let mean_nodes =
            graphs.iter().map(|&g| collection.graphs()[g].num_nodes() as f64).sum::<f64>() / graphs.len() as f64;
        points.push(ScalePoint {
            center,
            mean_nodes,
            graphs,
            seconds_per_epoch: median(repeat_seconds.clone()),
            repeat_seconds,
        });
    }
    if points.is_empty() {
        return Err(Error::Contract("every scalability bucket was empty".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.mean_nodes).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds_per_epoch).collect();
    Ok(ScalabilityReport {
        fit: fit_line(&xs, &ys),
        points,
        skipped,
    })
}

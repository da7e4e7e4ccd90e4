use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Graph, GraphCollection};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Parameters of a planted-partition collection.
///
/// Node classes are assigned round-robin then shuffled, so every class is
/// present whenever `nodes_per_graph >= node_class_count`. Two nodes are
/// joined with probability `edge_prob` when they share a class and
/// `cross_class_edge_prob` (defaulting to `edge_prob`) otherwise. Features
/// are a class mean (`class_separation` on the dimensions `k` with
/// `k % node_class_count == c`, zero elsewhere), plus a per-graph-class
/// Gaussian offset, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_graphs: usize,
    pub nodes_per_graph: usize,
    pub edge_prob: f64,
    pub feature_dim: usize,
    pub node_class_count: usize,
    pub graph_class_count: usize,
    #[serde(default)]
    pub cross_class_edge_prob: Option<f64>,
    #[serde(default = "default_noise")]
    pub feature_noise: f64,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
}

fn default_noise() -> f64 {
    0.5
}

fn default_separation() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(
        num_graphs: usize,
        nodes_per_graph: usize,
        edge_prob: f64,
        feature_dim: usize,
        node_class_count: usize,
        graph_class_count: usize,
    ) -> Self {
        Self {
            num_graphs,
            nodes_per_graph,
            edge_prob,
            feature_dim,
            node_class_count,
            graph_class_count,
            cross_class_edge_prob: None,
            feature_noise: default_noise(),
            class_separation: default_separation(),
        }
    }

    pub fn with_cross_class_edge_prob(mut self, p: f64) -> Self {
        self.cross_class_edge_prob = Some(p);
        self
    }

    fn validate(&self) -> Result<()> {
        let probs = [Some(self.edge_prob), self.cross_class_edge_prob];
        if probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("edge probabilities must lie in [0, 1]".into()));
        }
        let counts = [
            self.num_graphs,
            self.nodes_per_graph,
            self.feature_dim,
            self.node_class_count,
            self.graph_class_count,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic counts must be at least 1".into()));
        }
        if self.feature_noise < 0.0 {
            return Err(Error::Config("feature_noise must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<GraphCollection> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.feature_dim;
    let sep = spec.class_separation;
    // class c is lifted on the dimensions k with k % classes == c
    let node_means: Vec<Vec<f64>> = (0..spec.node_class_count)
        .map(|c| (0..d).map(|k| if k % spec.node_class_count == c { sep } else { 0.0 }).collect())
        .collect();
    let graph_offsets: Vec<Vec<f64>> = (0..spec.graph_class_count)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * sep
                })
                .collect()
        })
        .collect();
    let cross = spec.cross_class_edge_prob.unwrap_or(spec.edge_prob);

    let n = spec.nodes_per_graph;
    let mut graphs = Vec::with_capacity(spec.num_graphs);
    for g in 0..spec.num_graphs {
        let graph_class = g % spec.graph_class_count;
        let mut classes: Vec<usize> = (0..n).map(|i| i % spec.node_class_count).collect();
        for i in (1..n).rev() {
            classes.swap(i, rng.random_range(0..=i));
        }
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let p = if classes[u] == classes[v] { spec.edge_prob } else { cross };
                if rng.random_bool(p) {
                    edges.push((u, v));
                }
            }
        }
        let mut feats = Vec::with_capacity(n * d);
        for &c in &classes {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                feats.push((node_means[c][k] + graph_offsets[graph_class][k] + spec.feature_noise * z) as f32);
            }
        }
        graphs.push(Graph::new(
            n,
            edges,
            Tensor::matrix(n, d, feats),
            Some(classes),
            Some(graph_class),
        )?);
    }
    GraphCollection::new(format!("synthetic-{seed}"), graphs)
}

//! Graph data model, dataset ingestion, synthetic fixtures and sampling.

mod sampling;
mod synthetic;
mod tu;

pub use sampling::{
    link_anchors, sample_kshot_task, sample_link_triplets, sample_triplet_for, FewShotTask, InstanceRef, LinkTriplet,
    TaskLevel, TaskRequest, TaskTriple,
};
pub(crate) use sampling::class_pools;
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tu::{load_tu_dataset, write_tu_dataset};

use std::collections::BTreeSet;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Simple undirected graph in CSR form with a dense node-feature matrix.
///
/// Rows of the adjacency are strictly ascending, symmetric and loop-free.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: Tensor<f32>,
    node_labels: Option<Vec<usize>>,
    graph_label: Option<usize>,
}

impl Graph {
    /// Builds a graph from an arbitrary edge list. Edges are symmetrized;
    /// self-loops and duplicates are dropped.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Tensor<f32>,
        node_labels: Option<Vec<usize>>,
        graph_label: Option<usize>,
    ) -> Result<Self> {
        let (rows, dim) = features.dims2()?;
        if rows != num_nodes {
            return Err(Error::Dimension {
                what: "feature rows",
                expected: num_nodes,
                found: rows,
            });
        }
        if dim == 0 {
            return Err(Error::Dimension {
                what: "feature dim",
                expected: 1,
                found: 0,
            });
        }
        if let Some(l) = &node_labels {
            if l.len() != num_nodes {
                return Err(Error::Dimension {
                    what: "node labels",
                    expected: num_nodes,
                    found: l.len(),
                });
            }
        }
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_nodes];
        for (u, v) in edges {
            for w in [u, v] {
                if w >= num_nodes {
                    return Err(Error::Index {
                        op: "edge endpoint",
                        index: w,
                        bound: num_nodes,
                    });
                }
            }
            if u != v {
                adj[u].insert(v);
                adj[v].insert(u);
            }
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for row in adj {
            targets.extend(row);
            offsets.push(targets.len());
        }
        Ok(Self {
            offsets,
            targets,
            features,
            node_labels,
            graph_label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn csr_targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes())
            .flat_map(|u| self.neighbors(u).iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
            .collect()
    }

    /// Half-edge index for neighbourhood aggregation: message `src[i]` flows
    /// into node `dst[i]`. `dst` is non-decreasing.
    pub fn message_index(&self) -> (Vec<usize>, Vec<usize>) {
        let mut dst = Vec::with_capacity(self.targets.len());
        for v in 0..self.num_nodes() {
            dst.extend(std::iter::repeat_n(v, self.degree(v)));
        }
        (self.targets.clone(), dst)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("permutation is not a bijection on nodes".into()));
        }
        let dim = self.feature_dim();
        let mut feats = vec![0.0f32; n * dim];
        for (old, &new) in perm.iter().enumerate() {
            feats[new * dim..(new + 1) * dim].copy_from_slice(self.features.row(old));
        }
        let labels = self.node_labels.as_ref().map(|l| {
            let mut out = vec![0; n];
            for (old, &new) in perm.iter().enumerate() {
                out[new] = l[old];
            }
            out
        });
        Graph::new(
            n,
            self.edges().into_iter().map(|(u, v)| (perm[u], perm[v])),
            Tensor::matrix(n, dim, feats),
            labels,
            self.graph_label,
        )
    }

    /// Block-diagonal union. Returns the union and the node offset of each
    /// input graph within it. Node labels survive when every input has them.
    pub fn disjoint_union(graphs: &[&Graph]) -> Result<(Graph, Vec<usize>)> {
        let dim = graphs.first().map_or(1, |g| g.feature_dim());
        let mut starts = Vec::with_capacity(graphs.len());
        let mut total = 0;
        let mut feats = Vec::new();
        let mut edges = Vec::new();
        let mut labels = Some(Vec::new());
        for g in graphs {
            if g.feature_dim() != dim {
                return Err(Error::Dimension {
                    what: "feature dim in union",
                    expected: dim,
                    found: g.feature_dim(),
                });
            }
            starts.push(total);
            feats.extend_from_slice(g.features.data());
            edges.extend(g.edges().into_iter().map(|(u, v)| (u + total, v + total)));
            labels = labels.zip(g.node_labels()).map(|(mut acc, l)| {
                acc.extend_from_slice(l);
                acc
            });
            total += g.num_nodes();
        }
        let union = Graph::new(total, edges, Tensor::matrix(total, dim, feats), labels, None)?;
        Ok((union, starts))
    }
}

/// An ordered set of graphs sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphCollection {
    pub name: String,
    graphs: Vec<Graph>,
    feature_dim: usize,
    node_class_count: Option<usize>,
    graph_class_count: Option<usize>,
}

fn class_count<'a>(ids: impl Iterator<Item = &'a usize>, what: &str) -> Result<Option<usize>> {
    let used: BTreeSet<usize> = ids.copied().collect();
    let Some(&max) = used.iter().next_back() else {
        return Ok(None);
    };
    if used.len() != max + 1 {
        return Err(Error::Contract(format!("{what} class ids are not contiguous from 0")));
    }
    Ok(Some(max + 1))
}

impl GraphCollection {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        let feature_dim = graphs.first().map_or(1, Graph::feature_dim);
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != feature_dim) {
            return Err(Error::Dimension {
                what: "collection feature dim",
                expected: feature_dim,
                found: g.feature_dim(),
            });
        }
        let node_class_count = class_count(
            graphs.iter().filter_map(|g| g.node_labels()).flatten(),
            "node",
        )?;
        let graph_class_count = class_count(graphs.iter().filter_map(|g| g.graph_label.as_ref()), "graph")?;
        Ok(Self {
            name: name.into(),
            graphs,
            feature_dim,
            node_class_count,
            graph_class_count,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn node_class_count(&self) -> Option<usize> {
        self.node_class_count
    }

    pub fn graph_class_count(&self) -> Option<usize> {
        self.graph_class_count
    }

    pub fn avg_nodes(&self) -> f64 {
        mean(self.graphs.iter().map(|g| g.num_nodes() as f64))
    }

    pub fn avg_edges(&self) -> f64 {
        mean(self.graphs.iter().map(|g| g.num_edges() as f64))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphCollection};
use crate::error::{Error, Result};

/// `(v, a, b)` with `(v, a)` an edge and `b` neither `v` nor a neighbour of `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinkTriplet {
    pub v: usize,
    pub a: usize,
    pub b: usize,
}

/// `r`-th node (ascending) outside `excluded`, which must be sorted.
fn nth_outside(excluded: &[usize], r: usize) -> usize {
    let mut cand = r;
    for &s in excluded {
        if s <= cand {
            cand += 1;
        } else {
            break;
        }
    }
    cand
}

fn non_neighbor_count(graph: &Graph, v: usize) -> usize {
    graph.num_nodes() - 1 - graph.degree(v)
}

/// Samples one triplet anchored at `v`.
pub fn sample_triplet_for<R: Rng + ?Sized>(graph: &Graph, v: usize, rng: &mut R) -> Result<LinkTriplet> {
    if v >= graph.num_nodes() {
        return Err(Error::Index {
            op: "triplet anchor",
            index: v,
            bound: graph.num_nodes(),
        });
    }
    let nbrs = graph.neighbors(v);
    if nbrs.is_empty() {
        return Err(Error::Sampling(format!("node {v} has no neighbours")));
    }
    let free = non_neighbor_count(graph, v);
    if free == 0 {
        return Err(Error::Sampling(format!("node {v} is linked to every other node")));
    }
    let a = nbrs[rng.random_range(0..nbrs.len())];
    // N(v) ∪ {v}, sorted
    let pos = nbrs.partition_point(|&u| u < v);
    let mut excluded = Vec::with_capacity(nbrs.len() + 1);
    excluded.extend_from_slice(&nbrs[..pos]);
    excluded.push(v);
    excluded.extend_from_slice(&nbrs[pos..]);
    let b = nth_outside(&excluded, rng.random_range(0..free));
    Ok(LinkTriplet { v, a, b })
}

/// Nodes with at least one neighbour and at least one non-neighbour.
pub fn link_anchors(graph: &Graph) -> Vec<usize> {
    (0..graph.num_nodes())
        .filter(|&v| graph.degree(v) > 0 && non_neighbor_count(graph, v) > 0)
        .collect()
}

/// Draws `count` triplets. Anchors are uniform over nodes that have at least
/// one neighbour and at least one non-neighbour; positives and negatives are
/// uniform within their candidate sets.
pub fn sample_link_triplets(graph: &Graph, count: usize, seed: u64) -> Result<Vec<LinkTriplet>> {
    if graph.num_edges() == 0 {
        return Err(Error::Sampling("graph has no edges".into()));
    }
    let anchors = link_anchors(graph);
    if anchors.is_empty() {
        return Err(Error::Sampling("graph is complete; no negative candidates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v = anchors[rng.random_range(0..anchors.len())];
            sample_triplet_for(graph, v, &mut rng)
        })
        .collect()
}

/// A labelled instance: a node inside one graph, or a whole graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstanceRef {
    Node { graph: usize, node: usize },
    Graph(usize),
}

impl InstanceRef {
    pub fn graph(&self) -> usize {
        match *self {
            InstanceRef::Node { graph, .. } | InstanceRef::Graph(graph) => graph,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskLevel {
    /// Node classification inside one graph.
    Node { graph: usize },
    Graph,
}

/// A k-shot episode: exactly `k` support instances per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub level: TaskLevel,
    pub k: usize,
    pub classes: Vec<usize>,
    pub support: Vec<(InstanceRef, usize)>,
    pub query: Vec<(InstanceRef, usize)>,
}

/// Paired train/validation tasks and the held-out test instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTriple {
    pub train: FewShotTask,
    pub val: FewShotTask,
    pub test_query: Vec<(InstanceRef, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRequest {
    pub level: TaskLevel,
    pub k: usize,
    /// `None` selects every class of the level.
    pub classes: Option<Vec<usize>>,
    /// Node-level tasks need strictly more nodes than this.
    pub min_graph_nodes: usize,
}

impl TaskRequest {
    pub fn graph_level(k: usize) -> Self {
        Self {
            level: TaskLevel::Graph,
            k,
            classes: None,
            min_graph_nodes: 50,
        }
    }

    pub fn node_level(graph: usize, k: usize) -> Self {
        Self {
            level: TaskLevel::Node { graph },
            k,
            classes: None,
            min_graph_nodes: 50,
        }
    }
}

/// Candidate instances per class for a request, or why there are none.
pub(crate) fn class_pools(collection: &GraphCollection, request: &TaskRequest) -> Result<Vec<(usize, Vec<InstanceRef>)>> {
    let (count, labelled): (usize, Vec<(InstanceRef, usize)>) = match request.level {
        TaskLevel::Node { graph } => {
            let g = collection.graphs().get(graph).ok_or(Error::Index {
                op: "task graph",
                index: graph,
                bound: collection.len(),
            })?;
            if g.num_nodes() <= request.min_graph_nodes {
                return Err(Error::Contract(format!(
                    "graph {graph} has {} nodes; node-level tasks need more than {}",
                    g.num_nodes(),
                    request.min_graph_nodes
                )));
            }
            let labels = g
                .node_labels()
                .ok_or_else(|| Error::Contract(format!("graph {graph} has no node labels")))?;
            let count = collection.node_class_count().unwrap_or(0);
            let inst = labels
                .iter()
                .enumerate()
                .map(|(node, &c)| (InstanceRef::Node { graph, node }, c))
                .collect();
            (count, inst)
        }
        TaskLevel::Graph => {
            let count = collection
                .graph_class_count()
                .ok_or_else(|| Error::Contract("collection has no graph labels".into()))?;
            let inst = collection
                .graphs()
                .iter()
                .enumerate()
                .filter_map(|(i, g)| g.graph_label().map(|c| (InstanceRef::Graph(i), c)))
                .collect();
            (count, inst)
        }
    };
    let classes = request.classes.clone().unwrap_or_else(|| (0..count).collect());
    Ok(classes
        .into_iter()
        .map(|c| (c, labelled.iter().filter(|(_, l)| *l == c).map(|(i, _)| *i).collect()))
        .collect())
}

/// Samples a disjoint train/validation pair of k-shot tasks; every other
/// labelled instance of the selected classes becomes test data.
pub fn sample_kshot_task(collection: &GraphCollection, request: &TaskRequest, seed: u64) -> Result<TaskTriple> {
    if request.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let pools = class_pools(collection, request)?;
    let k = request.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut classes = Vec::with_capacity(pools.len());
    for (class, mut pool) in pools {
        if pool.len() < 2 * k {
            return Err(Error::TaskConstruction {
                class,
                message: format!("{} instances available, {} needed for train and validation supports", pool.len(), 2 * k),
            });
        }
        pool.shuffle(&mut rng);
        train.extend(pool[..k].iter().map(|&i| (i, class)));
        val.extend(pool[k..2 * k].iter().map(|&i| (i, class)));
        test.extend(pool[2 * k..].iter().map(|&i| (i, class)));
        classes.push(class);
    }
    test.sort();
    let task = |support| FewShotTask {
        level: request.level,
        k,
        classes: classes.clone(),
        support,
        query: Vec::new(),
    };
    let mut train = task(train);
    let mut val = task(val);
    // each support is the other's evaluation set
    train.query = val.support.clone();
    val.query = train.support.clone();
    Ok(TaskTriple {
        train,
        val,
        test_query: test,
    })
}

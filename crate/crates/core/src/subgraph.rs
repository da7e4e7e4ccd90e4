//! Contextual subgraphs, sum read-outs (plain and prompted) and cosine
//! similarity.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Node subset of a parent graph together with its induced edges. Node
/// indices refer to the parent and are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl Subgraph {
    /// The maximal subgraph: the graph itself.
    pub fn whole(graph: &Graph) -> Self {
        Self {
            nodes: (0..graph.num_nodes()).collect(),
            edges: graph.edges(),
        }
    }
}

/// Nodes within `delta` hops of `v` (breadth-first) and the edges among them.
pub fn extract_subgraph(graph: &Graph, v: usize, delta: usize) -> Subgraph {
    let nodes = khop_nodes(graph, v, delta);
    let mut edges = Vec::new();
    for &u in &nodes {
        for &w in graph.neighbors(u) {
            if u < w && nodes.binary_search(&w).is_ok() {
                edges.push((u, w));
            }
        }
    }
    Subgraph { nodes, edges }
}

/// Sorted node set of the `delta`-hop neighbourhood of `v`.
pub fn khop_nodes(graph: &Graph, v: usize, delta: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.num_nodes()];
    let mut queue = VecDeque::from([v]);
    dist[v] = 0;
    let mut out = vec![v];
    while let Some(u) = queue.pop_front() {
        if dist[u] == delta {
            continue;
        }
        for &w in graph.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                out.push(w);
                queue.push_back(w);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Learnable per-task reweighting of embedding dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVector(pub Vec<f32>);

impl PromptVector {
    pub fn ones(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Square linear transform applied to each node embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMatrix(pub Tensor<f32>);

impl PromptMatrix {
    pub fn identity(dim: usize) -> Self {
        Self(Tensor::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }
}

fn check_cover<T: Scalar>(embeddings: &Tensor<T>, sub: &Subgraph) -> Result<()> {
    if sub.nodes.is_empty() {
        return Err(Error::Contract("read-out of an empty subgraph".into()));
    }
    let rows = embeddings.rows();
    match sub.nodes.iter().find(|&&v| v >= rows) {
        Some(&v) => Err(Error::Index {
            op: "readout",
            index: v,
            bound: rows,
        }),
        None => Ok(()),
    }
}

/// Sum pooling of the subgraph's node embeddings, accumulated in node order.
pub fn readout<T: Scalar>(embeddings: &Tensor<T>, sub: &Subgraph) -> Result<Vec<T>> {
    check_cover(embeddings, sub)?;
    let mut out = vec![T::zero(); embeddings.cols()];
    for &v in &sub.nodes {
        for (o, &h) in out.iter_mut().zip(embeddings.row(v)) {
            *o = *o + h;
        }
    }
    Ok(out)
}

/// `Σ_v p ⊙ h_v`.
pub fn prompted_readout(embeddings: &Tensor<f32>, sub: &Subgraph, prompt: &PromptVector) -> Result<Vec<f32>> {
    check_cover(embeddings, sub)?;
    if prompt.len() != embeddings.cols() {
        return Err(Error::Dimension {
            what: "prompt length",
            expected: embeddings.cols(),
            found: prompt.len(),
        });
    }
    let mut out = vec![0.0f32; prompt.len()];
    for &v in &sub.nodes {
        for ((o, &h), &p) in out.iter_mut().zip(embeddings.row(v)).zip(&prompt.0) {
            *o += p * h;
        }
    }
    Ok(out)
}

/// `Σ_v P · h_v`.
pub fn linear_prompted_readout(embeddings: &Tensor<f32>, sub: &Subgraph, prompt: &PromptMatrix) -> Result<Vec<f32>> {
    check_cover(embeddings, sub)?;
    let d = embeddings.cols();
    if prompt.0.shape() != [d, d] {
        return Err(Error::shape("linear prompt", prompt.0.shape(), &[d, d]));
    }
    let mut out = vec![0.0f32; d];
    for &v in &sub.nodes {
        let h = embeddings.row(v);
        for (i, o) in out.iter_mut().enumerate() {
            *o += prompt.0.row(i).iter().zip(h).map(|(&p, &x)| p * x).sum::<f32>();
        }
    }
    Ok(out)
}

/// `x·y / (‖x‖‖y‖)` with each norm clamped below at `1e-12`, clamped to
/// `[-1, 1]`. A zero vector therefore has similarity 0 with everything.
pub fn cosine_similarity<T: Scalar>(x: &[T], y: &[T]) -> T {
    let eps = T::of(1e-12);
    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    let nx = x.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
    let ny = y.iter().map(|&b| b * b).sum::<T>().sqrt().max(eps);
    (dot / (nx * ny)).max(-T::one()).min(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        Graph::new(3, [(0, 1), (1, 2)], Tensor::filled(&[3, 1], 1.0), None, None).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f32> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn zero_hops_is_the_node_alone() {
        let s = extract_subgraph(&path3(), 1, 0);
        assert_eq!(s.nodes, vec![1]);
        assert!(s.edges.is_empty());
    }

    #[test]
    fn one_hop_on_path() {
        let s = extract_subgraph(&path3(), 0, 1);
        assert_eq!(s.nodes, vec![0, 1]);
        assert_eq!(s.edges, vec![(0, 1)]);
    }

    #[test]
    fn induced_edges_are_exact() {
        let c = generate_synthetic(&SyntheticSpec::new(1, 25, 0.15, 1, 1, 1), 6).unwrap();
        let g = &c.graphs()[0];
        for v in 0..25 {
            let s = extract_subgraph(g, v, 2);
            let expect: Vec<_> = g
                .edges()
                .into_iter()
                .filter(|(a, b)| s.nodes.contains(a) && s.nodes.contains(b))
                .collect();
            assert_eq!(s.edges, expect);
        }
    }

    #[test]
    fn readout_examples() {
        let emb = Tensor::matrix(2, 2, vec![1.0f32, 2.0, 3.0, -1.0]);
        let one = Subgraph { nodes: vec![1], edges: vec![] };
        assert_eq!(readout(&emb, &one).unwrap(), vec![3.0, -1.0]);
        let both = Subgraph { nodes: vec![0, 1], edges: vec![] };
        assert_eq!(readout(&emb, &both).unwrap(), vec![4.0, 1.0]);
        let empty = Subgraph { nodes: vec![], edges: vec![] };
        assert!(matches!(readout(&emb, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn prompt_identity_and_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = random_matrix(&mut rng, 6, 5);
        let s = Subgraph { nodes: vec![0, 2, 3, 5], edges: vec![] };
        let plain = readout(&emb, &s).unwrap();
        assert_eq!(prompted_readout(&emb, &s, &PromptVector::ones(5)).unwrap(), plain);
        let twice = prompted_readout(&emb, &s, &PromptVector(vec![2.0; 5])).unwrap();
        assert_eq!(twice, plain.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
        assert!(prompted_readout(&emb, &s, &PromptVector::ones(4)).is_err());
    }

    #[test]
    fn prompted_readout_matches_scalar_loop_and_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = random_matrix(&mut rng, 7, 4);
        let p = PromptVector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let s = Subgraph { nodes: vec![1, 2, 4, 6], edges: vec![] };
        let got = prompted_readout(&emb, &s, &p).unwrap();
        let plain = readout(&emb, &s).unwrap();
        for j in 0..4 {
            let mut oracle = 0.0f64;
            for &v in &s.nodes {
                oracle += p.0[j] as f64 * emb.at(v, j) as f64;
            }
            assert!((got[j] as f64 - oracle).abs() < 1e-6);
            assert!((got[j] - p.0[j] * plain[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_prompt_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = random_matrix(&mut rng, 5, 3);
        let s = Subgraph { nodes: vec![0, 1, 4], edges: vec![] };
        let plain = readout(&emb, &s).unwrap();
        assert_eq!(linear_prompted_readout(&emb, &s, &PromptMatrix::identity(3)).unwrap(), plain);

        let p = vec![0.5f32, -2.0, 3.0];
        let mut diag = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            diag.data_mut()[i * 3 + i] = p[i];
        }
        let lin = linear_prompted_readout(&emb, &s, &PromptMatrix(diag)).unwrap();
        let vec_form = prompted_readout(&emb, &s, &PromptVector(p)).unwrap();
        for (a, b) in lin.iter().zip(&vec_form) {
            assert!((a - b).abs() < 1e-6);
        }

        let m = random_matrix(&mut rng, 3, 3);
        let got = linear_prompted_readout(&emb, &s, &PromptMatrix(m.clone())).unwrap();
        for i in 0..3 {
            let mut oracle = 0.0f64;
            for &v in &s.nodes {
                for j in 0..3 {
                    oracle += m.at(i, j) as f64 * emb.at(v, j) as f64;
                }
            }
            assert!((got[i] as f64 - oracle).abs() < 1e-5);
            let factored: f32 = (0..3).map(|j| m.at(i, j) * plain[j]).sum();
            assert!((got[i] - factored).abs() < 1e-5);
        }
        assert!(linear_prompted_readout(&emb, &s, &PromptMatrix::identity(2)).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0f64, 4.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
        let v = cosine_similarity(&[1.0f64, 0.0], &[1.0, 1.0]);
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((v - 0.70711).abs() < 1e-5);
        assert_eq!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 1.0]), 0.0);
    }

    proptest! {
        #[test]
        fn neighbourhoods_grow_with_delta(seed in 0u64..200, v in 0usize..20) {
            let c = generate_synthetic(&SyntheticSpec::new(1, 20, 0.12, 1, 1, 1), seed).unwrap();
            let g = &c.graphs()[0];
            let mut prev = khop_nodes(g, v, 0);
            for d in 1..5 {
                let cur = khop_nodes(g, v, d);
                prop_assert!(prev.iter().all(|x| cur.contains(x)));
                prev = cur;
            }
        }

        #[test]
        fn cosine_argmax_is_scale_invariant(
            x in prop::collection::vec(-3.0f64..3.0, 4),
            protos in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 3),
            alpha in 0.01f64..100.0,
        ) {
            let argmax = |s: &[f64]| {
                let sims: Vec<f64> = protos.iter().map(|p| cosine_similarity(s, p)).collect();
                (0..sims.len()).fold(0, |b, i| if sims[i] > sims[b] { i } else { b })
            };
            let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let sims: Vec<f64> = protos.iter().map(|p| cosine_similarity(&x, p)).collect();
            let mut sorted = sims.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            // skip near-ties where rounding can legitimately flip the winner
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax(&x), argmax(&scaled));
        }

        #[test]
        fn readout_ignores_node_order(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb: Tensor<f64> = Tensor::matrix(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect());
            let a = Subgraph { nodes: vec![0, 2, 5], edges: vec![] };
            let b = Subgraph { nodes: vec![5, 0, 2], edges: vec![] };
            let (ra, rb) = (readout(&emb, &a).unwrap(), readout(&emb, &b).unwrap());
            for (x, y) in ra.iter().zip(&rb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

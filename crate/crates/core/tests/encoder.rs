use std::collections::VecDeque;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphprompt::autodiff::Tensor;
use graphprompt::encoder::{count_params, encode, init_params, param_count_for, EmbeddingMode, EncoderConfig};
use graphprompt::graph::{generate_synthetic, Graph, SyntheticSpec};

fn config(layers: usize, input: usize, hidden: usize, mode: EmbeddingMode) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        input_dim: input,
        hidden_dim: hidden,
        embedding_mode: mode,
        epsilon: 0.0,
    }
}

fn random_graph(n: usize, p: f64, dim: usize, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    let x = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Graph::new(n, edges, Tensor::matrix(n, dim, x), None, None).unwrap()
}

fn hops_from(graph: &Graph, v: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.num_nodes()];
    dist[v] = 0;
    let mut queue = VecDeque::from([v]);
    while let Some(u) = queue.pop_front() {
        for &w in graph.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

fn bits(row: &[f32]) -> Vec<u32> {
    row.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_equivariance_is_exact(seed in any::<u64>(), n in 1usize..=20, p in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, p, 3, &mut rng);
        let params = init_params(&config(3, 3, 8, EmbeddingMode::Concat), rng.random()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let h = encode(&g, &params).unwrap();
        let hp = encode(&g.permuted(&perm).unwrap(), &params).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            prop_assert_eq!(bits(h.row(i)), bits(hp.row(pi)), "node {} -> {}", i, pi);
        }
    }
}

#[test]
fn edits_beyond_receptive_field_leave_embedding_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for _ in 0..40 {
        let layers = rng.random_range(1..=3);
        let g = random_graph(25, 0.08, 2, &mut rng);
        let params = init_params(&config(layers, 2, 6, EmbeddingMode::Concat), rng.random()).unwrap();
        let v = rng.random_range(0..25);
        let dist = hops_from(&g, v);
        let far: Vec<usize> = (0..25).filter(|&u| dist[u] > layers).collect();
        if far.len() < 2 {
            continue;
        }
        // rewire and re-feature the far region only
        let mut edges: Vec<(usize, usize)> = g
            .edges()
            .into_iter()
            .filter(|&(a, b)| !(dist[a] > layers && dist[b] > layers))
            .collect();
        for (i, &a) in far.iter().enumerate() {
            for &b in &far[i + 1..] {
                if rng.random_bool(0.5) {
                    edges.push((a, b));
                }
            }
        }
        let mut x = g.features().clone();
        for &u in &far {
            for j in 0..2 {
                x.data_mut()[u * 2 + j] = rng.random_range(-5.0..5.0);
            }
        }
        let edited = Graph::new(25, edges, x, None, None).unwrap();
        let before = encode(&g, &params).unwrap();
        let after = encode(&edited, &params).unwrap();
        assert_eq!(bits(before.row(v)), bits(after.row(v)), "node {v}, {layers} layers");
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} fixtures had a far region");
}

#[test]
fn concat_prefix_is_first_layer_output() {
    let c = generate_synthetic(&SyntheticSpec::new(1, 15, 0.3, 4, 2, 1), 3).unwrap();
    let g = &c.graphs()[0];
    let concat = init_params(&config(3, 4, 7, EmbeddingMode::Concat), 5).unwrap();
    let mut one_layer = concat.clone();
    one_layer.layers.truncate(1);
    one_layer.config = config(1, 4, 7, EmbeddingMode::Last);
    let mut last = concat.clone();
    last.config.embedding_mode = EmbeddingMode::Last;
    let h = encode(g, &concat).unwrap();
    let h1 = encode(g, &one_layer).unwrap();
    let hl = encode(g, &last).unwrap();
    assert_eq!(h.cols(), 21);
    for v in 0..g.num_nodes() {
        assert_eq!(bits(&h.row(v)[..7]), bits(h1.row(v)));
        assert_eq!(bits(&h.row(v)[14..]), bits(hl.row(v)));
    }
}

#[test]
fn parameter_count_audit() {
    let cfg = config(3, 18, 32, EmbeddingMode::Concat);
    let closed = (18 * 32 + 32 + 32 * 32 + 32) + 2 * (32 * 32 + 32 + 32 * 32 + 32);
    assert_eq!(closed, 5_888);
    assert_eq!(count_params(&init_params(&cfg, 1).unwrap()), closed);
    assert_eq!(param_count_for(&cfg), closed);
    assert_eq!(param_count_for(&config(1, 1, 1, EmbeddingMode::Last)), 4);
    for (layers, input, hidden) in [(1, 3, 4), (2, 7, 16), (4, 1, 9)] {
        let a = init_params(&config(layers, input, hidden, EmbeddingMode::Concat), 0).unwrap();
        let b = init_params(&config(layers, input, hidden, EmbeddingMode::Last), 0).unwrap();
        assert_eq!(count_params(&a), count_params(&b));
        assert_eq!(a.config.embedding_dim(), layers * hidden);
        assert_eq!(b.config.embedding_dim(), hidden);
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = EncoderConfig::new(5);
    assert_eq!(init_params(&cfg, 4).unwrap(), init_params(&cfg, 4).unwrap());
    assert_ne!(init_params(&cfg, 4).unwrap(), init_params(&cfg, 5).unwrap());
}

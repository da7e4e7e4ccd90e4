use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphprompt::autodiff::{Tape, Tensor};
use graphprompt::encoder::{init_params, EncoderConfig, EncoderParams};
use graphprompt::graph::{generate_synthetic, sample_kshot_task, GraphCollection, InstanceRef, SyntheticSpec, TaskRequest};
use graphprompt::parallel::Execution;
use graphprompt::prompt::{
    class_prototypes, loss_on_tape, predict, prompt_loss, tune_head, Classifier, FrozenContext, HeadParams, HeadVars,
    InstanceLayout, Readouts, TuneConfig, TunedHead, Variant,
};
use graphprompt::subgraph::cosine_similarity;
use graphprompt::Error;

/// Homophilous planted graphs: no cross-class edges, so every node's
/// subgraph carries its own class mean.
fn planted() -> (GraphCollection, EncoderParams) {
    let mut spec = SyntheticSpec::new(4, 60, 0.08, 6, 3, 2).with_cross_class_edge_prob(0.0);
    spec.class_separation = 3.0;
    spec.feature_noise = 0.3;
    let c = generate_synthetic(&spec, 10).unwrap();
    let params = init_params(&EncoderConfig::new(6), 2).unwrap();
    (c, params)
}

fn node_task(c: &GraphCollection, k: usize, seed: u64) -> graphprompt::graph::TaskTriple {
    sample_kshot_task(c, &TaskRequest::node_level(1, k), seed).unwrap()
}

/// One instance per row, each a single node row.
fn single_row_layout(rows: &[Vec<f64>], targets: &[usize], classes: usize) -> InstanceLayout {
    let d = rows[0].len();
    InstanceLayout {
        rows: Tensor::matrix(rows.len(), d, rows.iter().flatten().map(|&x| x as f32).collect()),
        segments: (0..rows.len()).collect(),
        count: rows.len(),
        targets: targets.to_vec(),
        classes,
    }
}

fn ones_loss(support: &InstanceLayout, query: Option<&InstanceLayout>, tau: f64) -> Result<f64, Error> {
    let mut tape = Tape::<f64>::new();
    let d = support.rows.cols();
    let p = tape.param(Tensor::row_vector(vec![1.0; d]));
    let l = loss_on_tape(&mut tape, HeadVars::Prompt(p), support, query, tau)?;
    tape.value(l).item()
}

#[test]
fn closed_form_loss_examples() {
    let e = |i: usize| (0..3).map(|j| f64::from(u8::from(i == j))).collect::<Vec<f64>>();
    let support = single_row_layout(&[e(0), e(1), e(2)], &[0, 1, 2], 3);
    let query = single_row_layout(&[e(0)], &[0], 3);
    let l = ones_loss(&support, Some(&query), 1.0).unwrap();
    let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
    assert!((l - expected).abs() < 1e-12);
    assert!((l - 0.5514).abs() < 1e-4);

    let support = single_row_layout(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 2);
    let query = single_row_layout(&[vec![1.0, 1.0]], &[0], 2);
    let l = ones_loss(&support, Some(&query), 1.0).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn class_without_support_is_a_contract_error() {
    let support = single_row_layout(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 3);
    assert!(matches!(ones_loss(&support, None, 1.0), Err(Error::Contract(_))));

    let (c, params) = planted();
    let ctx = FrozenContext::all(&c, &params, 1, Execution::Sequential).unwrap();
    let labelled = [(InstanceRef::Node { graph: 0, node: 0 }, 5)];
    assert!(matches!(ctx.layout(&labelled, &[0, 1, 2]), Err(Error::Contract(_))));
}

/// Prompt-free loss computed by hand from plain read-outs.
fn unprompted_loss(readouts: &Readouts, classes: &[usize], tau: f64) -> f64 {
    let mut protos = Vec::new();
    for &c in classes {
        let members: Vec<&Vec<f32>> = readouts.vectors.iter().zip(&readouts.labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        let d = members[0].len();
        protos.push((0..d).map(|j| members.iter().map(|r| f64::from(r[j])).sum::<f64>() / members.len() as f64).collect::<Vec<f64>>());
    }
    let mut total = 0.0;
    for (r, &l) in readouts.vectors.iter().zip(&readouts.labels) {
        let r: Vec<f64> = r.iter().map(|&x| f64::from(x)).collect();
        let logits: Vec<f64> = protos.iter().map(|p| cosine_similarity(&r, p) / tau).collect();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        total += lse - logits[classes.iter().position(|&c| c == l).unwrap()];
    }
    total
}

#[test]
fn all_ones_prompt_loss_equals_plain_loss() {
    let (c, params) = planted();
    let ctx = FrozenContext::all(&c, &params, 1, Execution::Sequential).unwrap();
    for seed in 0..5 {
        let task = node_task(&c, 3, seed);
        let head = TunedHead::init(Variant::Prompt, ctx.emb_dim(), task.train.classes.clone(), 0);
        for tau in [0.5, 1.0, 2.0] {
            let got = prompt_loss(&task.train.support, &head, &ctx, tau).unwrap();
            let want = unprompted_loss(&Readouts::collect(&ctx, &task.train.support).unwrap(), &task.train.classes, tau);
            assert!((got - want).abs() <= 1e-5 * want.max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn untrained_heads_reproduce_the_plain_prototype_classifier() {
    let (c, params) = planted();
    let ctx = FrozenContext::all(&c, &params, 1, Execution::Sequential).unwrap();
    let task = node_task(&c, 2, 3);
    let cfg = TuneConfig {
        max_epochs: 0,
        ..TuneConfig::default()
    };
    let support = Readouts::collect(&ctx, &task.train.support).unwrap();
    let mut grouped: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    for (r, &l) in support.vectors.iter().zip(&support.labels) {
        grouped.entry(l).or_default().push(r.clone());
    }
    let protos = class_prototypes(&grouped).unwrap();
    for variant in [Variant::Prompt, Variant::LinearPrompt] {
        let head = tune_head(&task.train, &ctx, &TuneConfig { variant, ..cfg.clone() }).unwrap();
        assert_eq!(head.epochs_run, 0);
        match &head.params {
            HeadParams::Prompt { prompt } => assert!(prompt.0.iter().all(|&x| x == 1.0)),
            HeadParams::LinearPrompt { matrix } => assert_eq!(matrix.0, Tensor::identity(ctx.emb_dim())),
            HeadParams::NoPrompt { .. } => unreachable!(),
        }
        let clf = Classifier::new(&head, &support).unwrap();
        for &(inst, _) in &task.test_query {
            let r = ctx.readout(inst).unwrap();
            assert_eq!(clf.classify(&r).unwrap(), predict(&r, &protos).unwrap(), "{variant} at {inst:?}");
        }
    }
}

#[test]
fn planted_task_reaches_full_support_accuracy() {
    let (c, params) = planted();
    let ctx = FrozenContext::all(&c, &params, 1, Execution::Sequential).unwrap();
    for seed in 0..3 {
        let task = node_task(&c, 5, seed);
        let head = tune_head(&task.train, &ctx, &TuneConfig::default()).unwrap();
        let support = Readouts::collect(&ctx, &task.train.support).unwrap();
        let acc = Classifier::new(&head, &support).unwrap().accuracy(&support).unwrap();
        assert_eq!(acc, 1.0, "task {seed}");
    }
}

fn params_hash(p: &EncoderParams) -> u64 {
    let mut h = DefaultHasher::new();
    for t in p.tensors() {
        t.shape().hash(&mut h);
        for x in t.data() {
            x.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

#[test]
fn tuning_is_deterministic_and_leaves_the_encoder_untouched() {
    let (c, params) = planted();
    let before = params_hash(&params);
    let ctx = FrozenContext::all(&c, &params, 1, Execution::Sequential).unwrap();
    let task = node_task(&c, 3, 8);
    for variant in Variant::ALL {
        let cfg = TuneConfig {
            variant,
            max_epochs: 30,
            seed: 6,
            ..TuneConfig::default()
        };
        let a = tune_head(&task.train, &ctx, &cfg).unwrap();
        let b = tune_head(&task.train, &ctx, &cfg).unwrap();
        assert_eq!(a, b, "{variant}");
        assert!(a.selected_epoch <= a.epochs_run);
    }
    assert_eq!(params_hash(&params), before);
}

#[test]
fn prediction_matches_exhaustive_similarity_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let d = 6;
    let vec = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>();
    let ids = [1usize, 4, 7, 9];
    let protos: BTreeMap<usize, Vec<f32>> = ids.iter().map(|&c| (c, vec(&mut rng))).collect();
    for _ in 0..20 {
        let x = vec(&mut rng);
        let table: Vec<(usize, f32)> = ids.iter().map(|c| (*c, cosine_similarity(&x, &protos[c]))).collect();
        let mut best = table[0];
        for &(c, s) in &table[1..] {
            if s > best.1 {
                best = (c, s);
            }
        }
        assert_eq!(predict(&x, &protos).unwrap(), best.0);
    }
}

#[test]
fn five_shot_prototype_is_the_loop_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut support: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    for c in 0..3 {
        support.insert(c, (0..5).map(|_| (0..8).map(|_| rng.random_range(-3.0f32..3.0)).collect()).collect());
    }
    let protos = class_prototypes(&support).unwrap();
    for (c, embs) in &support {
        for j in 0..8 {
            let mut sum = 0.0f32;
            for e in embs {
                sum += e[j];
            }
            assert!((protos[c][j] - sum / 5.0).abs() < 1e-6);
        }
    }
}

//! Finite-difference suites for the trainable losses, shared by the
//! `gradcheck` command and the test suites.
//!
//! Each fixture is small (at most 8 nodes, 2 GIN layers, width 4) and fully
//! determined by its seed; everything runs in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, GradCheckReport, Tape, Tensor, DEFAULT_STEP};
use crate::encoder::{init_params, EmbeddingMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{generate_synthetic, link_anchors, sample_link_triplets, SyntheticSpec};
use crate::pretrain::TripletBatch;
use crate::prompt::{loss_on_tape, HeadVars, InstanceLayout};

/// Relative-error threshold every suite must stay under.
pub const TOLERANCE: f64 = 1e-4;

const MAX_DRAWS: usize = 64;
/// Agreement required between the oracle at two step sizes.
const STABILITY: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Pre-training loss w.r.t. every encoder parameter.
    Pretrain,
    /// Prompt-tuning loss w.r.t. the prompt vector and the prompt matrix.
    Prompt,
    /// Cross-entropy of the classifier ablation w.r.t. weights and bias.
    Classifier,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Pretrain, Suite::Prompt, Suite::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Pretrain => "pretrain",
            Suite::Prompt => "prompt",
            Suite::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    /// Fixtures checked; the prompt suite runs a vector and a matrix head per seed.
    pub fixtures: usize,
    pub max_relative_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < TOLERANCE
    }
}

fn fixture_encoder(num_layers: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers,
        input_dim: 3,
        hidden_dim: 4,
        embedding_mode: EmbeddingMode::Concat,
        epsilon: 0.0,
    }
}

/// True when the oracle can be trusted at every entry: central differences
/// at `DEFAULT_STEP` and half of it agree to [`STABILITY`] relative, and the
/// rounding noise of a central difference (about `ε·|f|/step`) is below the
/// same fraction of the gradient. Rejects draws where a relu kink sits inside
/// the step, where curvature dominates the truncation error, or where a
/// gradient is too small to resolve. Entries whose loss does not move at all
/// are fine. Uses loss values only, so a wrong backward rule cannot make a
/// fixture pass.
fn oracle_is_stable(f: impl Fn(&[Tensor<f64>]) -> Result<f64>, theta: &[Tensor<f64>]) -> Result<bool> {
    let noise = f64::EPSILON * f(theta)?.abs().max(1.0) / DEFAULT_STEP;
    let mut work = theta.to_vec();
    let mut central = |p: usize, e: usize, h: f64| -> Result<f64> {
        let orig = theta[p].data()[e];
        work[p].data_mut()[e] = orig + h;
        let fp = f(&work)?;
        work[p].data_mut()[e] = orig - h;
        let fm = f(&work)?;
        work[p].data_mut()[e] = orig;
        Ok((fp - fm) / (2.0 * h))
    };
    for p in 0..theta.len() {
        for e in 0..theta[p].numel() {
            let full = central(p, e, DEFAULT_STEP)?;
            let half = central(p, e, DEFAULT_STEP / 2.0)?;
            if full == 0.0 && half == 0.0 {
                continue;
            }
            let scale = STABILITY * full.abs().max(half.abs()).max(1e-8);
            if (full - half).abs() > scale || noise > scale {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// One pre-training fixture: a random graph of 6 to 8 nodes, a 2-layer
/// encoder of width 4, random parameters, temperature and triplets. Draws on which the oracle itself is
/// unreliable (see [`oracle_is_stable`]) are discarded and redrawn.
pub fn pretrain_fixture(seed: u64, fault: bool) -> Result<GradCheckReport> {
    pretrain_fixture_with_layers(seed, 2, fault)
}

/// [`pretrain_fixture`] with a chosen encoder depth.
pub fn pretrain_fixture_with_layers(seed: u64, num_layers: usize, fault: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = fixture_encoder(num_layers);
    for _ in 0..MAX_DRAWS {
        let n = rng.random_range(6..=8);
        let c = generate_synthetic(&SyntheticSpec::new(1, n, 0.4, 3, 2, 1), rng.random())?;
        let graph = &c.graphs()[0];
        if link_anchors(graph).is_empty() {
            continue;
        }
        let triplets = sample_link_triplets(graph, 4, rng.random())?;
        let delta = rng.random_range(0..=2);
        let tau = rng.random_range(0.5..2.0);
        let batch = TripletBatch::from_triplets(graph, &triplets, delta)?;
        let theta: Vec<Tensor<f64>> = init_params(&cfg, rng.random())?
            .tensors()
            .into_iter()
            .map(|t| {
                let data = t.data().iter().map(|&x| f64::from(x) + rng.random_range(-0.1..0.1)).collect();
                Tensor::new(t.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        let eval = |ps: &[Tensor<f64>], fault: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
            let mut tape = Tape::<f64>::new();
            if fault {
                tape.inject_backward_fault();
            }
            let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let loss = batch.loss_on_tape(&mut tape, &cfg, &vars, tau)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, vars.iter().map(|&v| g.get(v).clone()).collect()))
        };
        if oracle_is_stable(|ps| Ok(eval(ps, false)?.0), &theta)? {
            return finite_diff_check(|ps: &[Tensor<f64>]| eval(ps, fault), &theta, DEFAULT_STEP);
        }
    }
    Err(Error::Sampling(format!("no well-conditioned draw for pretrain fixture {seed}")))
}

/// Random support layout: `classes` classes, 1 to 3 instances each, 1 to 4
/// node rows per instance, width `d`.
fn random_layout(rng: &mut ChaCha8Rng, classes: usize, d: usize) -> InstanceLayout {
    let mut targets = Vec::new();
    for c in 0..classes {
        for _ in 0..rng.random_range(1..=3) {
            targets.push(c);
        }
    }
    let mut segments = Vec::new();
    for i in 0..targets.len() {
        for _ in 0..rng.random_range(1..=4) {
            segments.push(i);
        }
    }
    let rows = Tensor::matrix(
        segments.len(),
        d,
        (0..segments.len() * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    InstanceLayout {
        rows,
        segments,
        count: targets.len(),
        targets,
        classes,
    }
}

/// Which head a prompt-side fixture differentiates.
#[derive(Debug, Clone, Copy)]
enum HeadKind {
    Vector,
    Matrix,
    Classifier,
}

fn head_fixture(seed: u64, kind: HeadKind, fault: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let classes = rng.random_range(2..=3);
    let support = random_layout(&mut rng, classes, d);
    let query = random_layout(&mut rng, classes, d);
    let use_query = rng.random_bool(0.5);
    let tau = rng.random_range(0.5..2.0);
    let params: Vec<Tensor<f64>> = match kind {
        HeadKind::Vector => vec![Tensor::matrix(1, d, (0..d).map(|_| rng.random_range(0.5..1.5)).collect())],
        HeadKind::Matrix => vec![Tensor::matrix(
            d,
            d,
            (0..d * d)
                .map(|i| f64::from(u8::from(i % (d + 1) == 0)) + rng.random_range(-0.3..0.3))
                .collect(),
        )],
        HeadKind::Classifier => vec![
            Tensor::matrix(d, classes, (0..d * classes).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Tensor::matrix(1, classes, (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect()),
        ],
    };
    finite_diff_check(
        |ps: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            if fault {
                tape.inject_backward_fault();
            }
            let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let head = match kind {
                HeadKind::Vector => HeadVars::Prompt(vars[0]),
                HeadKind::Matrix => HeadVars::Linear(vars[0]),
                HeadKind::Classifier => HeadVars::Classifier {
                    weights: vars[0],
                    bias: vars[1],
                },
            };
            let q = use_query.then_some(&query);
            let loss = loss_on_tape(&mut tape, head, &support, q, tau)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, vars.iter().map(|&v| g.get(v).clone()).collect()))
        },
        &params,
        DEFAULT_STEP,
    )
}

fn merge(suite: Suite, reports: Vec<GradCheckReport>) -> SuiteResult {
    SuiteResult {
        suite: suite.name(),
        fixtures: reports.len(),
        max_relative_error: reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        excluded: reports.iter().map(|r| r.excluded).sum(),
    }
}

/// Runs `fixtures` randomized fixtures of `suite` starting at `seed`.
/// `fault` corrupts one backward rule, which every suite must detect.
pub fn run_suite(suite: Suite, fixtures: usize, seed: u64, fault: bool) -> Result<SuiteResult> {
    if fixtures == 0 {
        return Err(Error::Config("at least one fixture is required".into()));
    }
    let seeds = (0..fixtures as u64).map(|i| seed.wrapping_mul(1_000_033).wrapping_add(i));
    let reports = match suite {
        Suite::Pretrain => seeds.map(|s| pretrain_fixture(s, fault)).collect::<Result<Vec<_>>>()?,
        Suite::Prompt => seeds
            .flat_map(|s| [head_fixture(s, HeadKind::Vector, fault), head_fixture(s, HeadKind::Matrix, fault)])
            .collect::<Result<Vec<_>>>()?,
        Suite::Classifier => seeds
            .map(|s| head_fixture(s, HeadKind::Classifier, fault))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(merge(suite, reports))
}

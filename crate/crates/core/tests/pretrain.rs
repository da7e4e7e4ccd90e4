use std::f64::consts::LN_2;
use std::sync::Mutex;
use std::thread::{self, ThreadId};

use proptest::prelude::*;

use graphprompt::encoder::{init_params, EncoderConfig};
use graphprompt::graph::{generate_synthetic, SyntheticSpec};
use graphprompt::parallel::Execution;
use graphprompt::pretrain::{pretrain_loss, run_pretraining, run_pretraining_with, triplet_loss, PretrainConfig};
use graphprompt::seed::derive_seed;

proptest! {
    #[test]
    fn temperature_scales_out(sp in -1.0f64..1.0, sn in -1.0f64..1.0, tau in 0.05f64..5.0, alpha in 0.1f64..10.0) {
        let base = triplet_loss(sp, sn, tau);
        let scaled = triplet_loss(alpha * sp, alpha * sn, alpha * tau);
        prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0), "{} vs {}", base, scaled);
    }

    #[test]
    fn positive_and_ln2_only_at_a_tie(sp in -1.0f64..1.0, gap in 1e-6f64..2.0, tau in 0.05f64..5.0) {
        let tie = triplet_loss(sp, sp, tau);
        prop_assert!((tie - LN_2).abs() < 1e-15);
        let better = triplet_loss(sp, sp - gap, tau);
        let worse = triplet_loss(sp - gap, sp, tau);
        prop_assert!(better > 0.0 && better < LN_2);
        prop_assert!(worse > LN_2);
    }

    #[test]
    fn monotone_in_each_similarity(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, tau in 0.1f64..2.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(triplet_loss(hi, c, tau) <= triplet_loss(lo, c, tau));
        prop_assert!(triplet_loss(c, lo, tau) <= triplet_loss(c, hi, tau));
    }
}

#[test]
fn summed_loss_of_equal_similarities() {
    let v = [1.0f64, 0.0];
    let a = [0.0f64, 1.0];
    let b = [0.0f64, -1.0];
    // both similarities are 0
    let l = pretrain_loss(&[(&v[..], &a[..], &b[..]), (&v[..], &b[..], &a[..])], 1.0).unwrap();
    assert!((l - 2.0 * LN_2).abs() < 1e-15);
}

fn small_run() -> (graphprompt::graph::GraphCollection, EncoderConfig, PretrainConfig) {
    let c = generate_synthetic(&SyntheticSpec::new(6, 14, 0.3, 3, 2, 2), 3).unwrap();
    let cfg = PretrainConfig {
        max_epochs: 8,
        triplets_per_graph: 20,
        batch_size: 32,
        seed: 77,
        ..PretrainConfig::default()
    };
    (c, EncoderConfig::new(3), cfg)
}

#[test]
fn same_seed_same_checkpoint_under_either_execution() {
    let (c, enc, cfg) = small_run();
    let seq = run_pretraining_with(&c, &enc, &cfg, Execution::Sequential).unwrap();
    let par = run_pretraining_with(&c, &enc, &cfg, Execution::Parallel).unwrap();
    let again = run_pretraining_with(&c, &enc, &cfg, Execution::Sequential).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq, again);
    let other = run_pretraining(&c, &enc, &PretrainConfig { seed: 78, ..cfg }).unwrap();
    assert_ne!(seq.params, other.params);
}

#[test]
fn zero_epochs_returns_the_seeded_initialization() {
    let (c, enc, cfg) = small_run();
    let cfg = PretrainConfig { max_epochs: 0, ..cfg };
    let ckpt = run_pretraining(&c, &enc, &cfg).unwrap();
    assert_eq!(ckpt.params, init_params(&enc, derive_seed(cfg.seed, "encoder-init")).unwrap());
    assert_eq!(ckpt.loss_history.len(), 1);
    assert_eq!(ckpt.initial_loss, ckpt.final_loss);
}

#[test]
fn planted_blocks_are_learnable() {
    let spec = SyntheticSpec::new(4, 20, 1.0, 1, 2, 1).with_cross_class_edge_prob(0.02);
    let c = generate_synthetic(&spec, 17).unwrap();
    let cfg = PretrainConfig {
        seed: 4,
        ..PretrainConfig::default()
    };
    let ckpt = run_pretraining(&c, &EncoderConfig::new(1), &cfg).unwrap();
    assert!(ckpt.epochs_run <= 200);
    assert!(
        ckpt.final_loss <= 0.5 * ckpt.initial_loss,
        "{} -> {}",
        ckpt.initial_loss,
        ckpt.final_loss
    );
    assert!(ckpt.final_loss <= ckpt.loss_history.iter().copied().fold(f64::INFINITY, f64::min));
}

/// Records every log line with its thread; tests in this binary run
/// concurrently, so each one reads back only its own lines.
struct Capture(Mutex<Vec<(ThreadId, String)>>);

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }
    fn log(&self, record: &log::Record) {
        self.0.lock().unwrap().push((thread::current().id(), record.args().to_string()));
    }
    fn flush(&self) {}
}

static CAPTURE: Capture = Capture(Mutex::new(Vec::new()));

/// `epoch=<n> loss=<x.xxxxxx>` with exactly six decimals.
fn parse_epoch_line(line: &str) -> Option<(usize, f64)> {
    let (epoch, loss) = line.strip_prefix("epoch=")?.split_once(" loss=")?;
    let (int, frac) = loss.split_once('.')?;
    let well_formed = !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.len() == 6
        && frac.bytes().all(|b| b.is_ascii_digit());
    well_formed.then_some(())?;
    Some((epoch.parse().ok()?, loss.parse().ok()?))
}

#[test]
fn epoch_log_lines_follow_the_format() {
    log::set_logger(&CAPTURE).unwrap();
    log::set_max_level(log::LevelFilter::Info);
    let (c, enc, cfg) = small_run();
    let ckpt = run_pretraining(&c, &enc, &PretrainConfig { seed: 5, ..cfg }).unwrap();
    let me = thread::current().id();
    let lines: Vec<String> =
        CAPTURE.0.lock().unwrap().iter().filter(|(t, _)| *t == me).map(|(_, l)| l.clone()).collect();
    let epochs: Vec<(usize, f64)> = lines.iter().filter_map(|l| parse_epoch_line(l)).collect();
    assert_eq!(epochs.len(), ckpt.loss_history.len(), "{lines:#?}");
    for (i, ((n, loss), recorded)) in epochs.iter().zip(&ckpt.loss_history).enumerate() {
        assert_eq!(*n, i);
        assert!((loss - recorded).abs() <= 5e-7);
    }
    assert!(parse_epoch_line("epoch=3 loss=0.69315").is_none());
    assert!(parse_epoch_line("epoch=3 loss=0.693147").is_some());
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use graphprompt::checks::{run_suite, Suite, SuiteResult, TOLERANCE};
use graphprompt::config::RunConfig;
use graphprompt::eval::{
    evaluate_task, run_experiment, sample_tasks, scalability_run, summary_table, sweep, write_report_artifacts,
    write_sweep_artifacts, ExperimentReport, Level, SweepAxis,
};
use graphprompt::graph::{generate_synthetic, write_tu_dataset, GraphCollection, SyntheticSpec, TaskLevel};
use graphprompt::parallel::{with_jobs, Execution};
use graphprompt::persist::FORMAT_VERSION;
use graphprompt::pretrain::{load_checkpoint, run_pretraining_with, save_checkpoint, Checkpoint};
use graphprompt::prompt::{tune_head, FrozenContext, TuneConfig, TunedHead, Variant};
use graphprompt::seed::derive_seed;

use crate::{Command, Common, Failure, Module, ProtocolArgs, EXIT_CONFIG, EXIT_DATA, EXIT_GRADCHECK};

type Outcome = Result<String, Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Pretrain { common, out } => with_jobs(common.jobs, || pretrain(&common, out)),
        Command::Tune {
            common,
            ckpt,
            protocol,
            variant,
            task,
            out,
        } => with_jobs(common.jobs, || tune(&common, &ckpt, &protocol, variant, task, out)),
        Command::Eval {
            common,
            ckpt,
            protocol,
            variant,
            out,
        } => with_jobs(common.jobs, || eval(&common, &ckpt, &protocol, variant, out)),
        Command::Ablate {
            common,
            ckpt,
            protocol,
            out,
        } => with_jobs(common.jobs, || ablate(&common, &ckpt, &protocol, out)),
        Command::Sweep {
            common,
            axis,
            values,
            protocol,
            out,
        } => with_jobs(common.jobs, || run_sweep(&common, axis, &values, &protocol, out)),
        Command::Scalability {
            common,
            ckpt,
            buckets,
            out,
        } => with_jobs(common.jobs, || scalability(&common, &ckpt, &buckets, out)),
        Command::Gradcheck {
            module,
            fixtures,
            seed,
            inject_fault,
        } => gradcheck(module, fixtures, seed, inject_fault),
        Command::Inspect { common } => inspect(&common),
        Command::Synth {
            out,
            name,
            graphs,
            nodes,
            edge_prob,
            feature_dim,
            node_classes,
            graph_classes,
            seed,
        } => {
            let spec = SyntheticSpec::new(graphs, nodes, edge_prob, feature_dim, node_classes, graph_classes);
            let c = generate_synthetic(&spec, seed)?;
            write_tu_dataset(&c, &out, &name)?;
            Ok(format!("wrote {} graphs to {}\n", c.len(), out.display()))
        }
    }
}

/// Loads the config, applies the seed override and resolves derived seeds.
fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolve()?)
}

fn apply_protocol(cfg: &mut RunConfig, p: &ProtocolArgs) -> Result<(), Failure> {
    if let Some(level) = p.level {
        cfg.protocol.level = level;
    }
    if let Some(k) = p.k {
        if k == 0 {
            return Err(Failure::new(EXIT_CONFIG, "--k must be at least 1"));
        }
        cfg.protocol.k = k;
    }
    if p.tasks.is_some() {
        cfg.protocol.num_tasks = p.tasks;
    }
    Ok(())
}

fn snapshot(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_DATA, format!("cannot create {}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::new(EXIT_DATA, format!("cannot write {}: {e}", path.display())))
}

fn load_inputs(cfg: &RunConfig, ckpt: &Path) -> Result<(GraphCollection, Checkpoint), Failure> {
    let collection = cfg.load_collection()?;
    let checkpoint = load_checkpoint(ckpt)?;
    log::info!(
        "dataset {} ({} graphs); checkpoint {} (embedding dim {})",
        collection.name,
        collection.len(),
        ckpt.display(),
        checkpoint.params.config.embedding_dim()
    );
    Ok((collection, checkpoint))
}

fn pretrain(common: &Common, out: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    let collection = cfg.load_collection()?;
    let encoder = cfg.encoder.with_input(collection.feature_dim());
    log::info!(
        "pre-training on {} ({} graphs, feature dim {}), seed {}",
        collection.name,
        collection.len(),
        collection.feature_dim(),
        cfg.pretrain.seed
    );
    let mut ckpt = run_pretraining_with(&collection, &encoder, &cfg.pretrain, Execution::default())?;
    ckpt.config = snapshot(&cfg);
    let path = out.unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"));
    save_checkpoint(&ckpt, &path)?;
    Ok(format!(
        "{:<12} {:>7} {:>10} {:>10} {:>10}  {}\n{:<12} {:>7} {:>10.6} {:>10.6} {:>10}  {}\n",
        "dataset",
        "epochs",
        "initial",
        "final",
        "best_epoch",
        "checkpoint",
        ckpt.dataset,
        ckpt.epochs_run,
        ckpt.initial_loss,
        ckpt.final_loss,
        ckpt.best_epoch,
        path.display()
    ))
}

/// Everything the `tune` command writes. Readable by `TunedHead::load`.
#[derive(Serialize)]
struct HeadArtifact<'a> {
    format_version: u32,
    head: &'a TunedHead,
    task_id: usize,
    test_accuracy: f64,
    config: serde_json::Value,
}

fn tune(common: &Common, ckpt: &Path, p: &ProtocolArgs, variant: Option<Variant>, task: usize, out: Option<PathBuf>) -> Outcome {
    let mut cfg = load_config(common)?;
    apply_protocol(&mut cfg, p)?;
    if let Some(v) = variant {
        cfg.tune.variant = v;
    }
    let (collection, checkpoint) = load_inputs(&cfg, ckpt)?;
    let spec = cfg.experiment_spec();
    let mut protocol = spec.protocol.clone();
    protocol.num_tasks = Some(task + 1);
    let triples = sample_tasks(&collection, &protocol, spec.seed)?;
    let triple = &triples[task];
    let graphs: Vec<usize> = match triple.train.level {
        TaskLevel::Graph => (0..collection.len()).collect(),
        TaskLevel::Node { graph } => vec![graph],
    };
    let ctx = FrozenContext::new(&collection, &checkpoint.params, graphs, cfg.tune.delta, Execution::default())?;
    let tune_cfg = TuneConfig {
        seed: derive_seed(spec.seed, &format!("tune/{task}")),
        ..cfg.tune.clone()
    };
    let head = tune_head(&triple.train, &ctx, &tune_cfg)?;
    let accuracy = evaluate_task(&ctx, triple, &head)?;
    let path = out.unwrap_or_else(|| cfg.out_dir.join("head.json"));
    write_json(
        &HeadArtifact {
            format_version: FORMAT_VERSION,
            head: &head,
            task_id: task,
            test_accuracy: accuracy,
            config: snapshot(&cfg),
        },
        &path,
    )?;
    Ok(format!(
        "{:<6} {:<14} {:>7} {:>9} {:>9}  {}\n{:<6} {:<14} {:>7} {:>9} {:>9.2}  {}\n",
        "task",
        "variant",
        "epochs",
        "selected",
        "acc(%)",
        "head",
        task,
        head.variant(),
        head.epochs_run,
        head.selected_epoch,
        100.0 * accuracy,
        path.display()
    ))
}

fn experiment(cfg: &RunConfig, collection: &GraphCollection, checkpoint: &Checkpoint) -> Result<ExperimentReport, Failure> {
    let mut report = run_experiment(collection, &checkpoint.params, &cfg.experiment_spec(), Execution::default())?;
    report.config = snapshot(cfg);
    Ok(report)
}

fn eval(common: &Common, ckpt: &Path, p: &ProtocolArgs, variant: Option<Variant>, out: Option<PathBuf>) -> Outcome {
    let mut cfg = load_config(common)?;
    apply_protocol(&mut cfg, p)?;
    if let Some(v) = variant {
        cfg.tune.variant = v;
    }
    let (collection, checkpoint) = load_inputs(&cfg, ckpt)?;
    let report = experiment(&cfg, &collection, &checkpoint)?;
    write_report_artifacts(&report, out.unwrap_or_else(|| cfg.out_dir.clone()))?;
    Ok(summary_table(&[&report]))
}

fn ablate(common: &Common, ckpt: &Path, p: &ProtocolArgs, out: Option<PathBuf>) -> Outcome {
    let mut cfg = load_config(common)?;
    apply_protocol(&mut cfg, p)?;
    let (collection, checkpoint) = load_inputs(&cfg, ckpt)?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let mut reports = Vec::new();
    for variant in Variant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.tune.variant = variant;
        let report = experiment(&vcfg, &collection, &checkpoint)?;
        write_report_artifacts(&report, dir.join(variant.as_str()))?;
        reports.push(report);
    }
    let refs: Vec<&ExperimentReport> = reports.iter().collect();
    let table = summary_table(&refs);
    fs::write(dir.join("summary.txt"), &table).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
    Ok(table)
}

fn run_sweep(common: &Common, axis: SweepAxis, values: &[usize], p: &ProtocolArgs, out: Option<PathBuf>) -> Outcome {
    let mut cfg = load_config(common)?;
    apply_protocol(&mut cfg, p)?;
    let collection = cfg.load_collection()?;
    let encoder = cfg.encoder.with_input(collection.feature_dim());
    let mut results = sweep(
        &collection,
        axis,
        values,
        &encoder,
        &cfg.pretrain,
        &cfg.experiment_spec(),
        Execution::default(),
    )?;
    for (value, report) in &mut results {
        let mut vcfg = cfg.clone();
        match axis {
            SweepAxis::Delta => {
                vcfg.pretrain.delta = *value;
                vcfg.tune.delta = *value;
            }
            SweepAxis::HiddenDim => vcfg.encoder.hidden_dim = *value,
        }
        report.config = snapshot(&vcfg);
    }
    write_sweep_artifacts(&axis.to_string(), &results, out.unwrap_or_else(|| cfg.out_dir.clone()))?;
    let refs: Vec<&ExperimentReport> = results.iter().map(|(_, r)| r).collect();
    let mut table = summary_table(&refs);
    let values: Vec<String> = results.iter().map(|(v, _)| v.to_string()).collect();
    let _ = writeln!(table, "{axis} = {}", values.join(", "));
    Ok(table)
}

fn scalability(common: &Common, ckpt: &Path, buckets: &[usize], out: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    if buckets.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "--buckets needs at least one value"));
    }
    let (collection, checkpoint) = load_inputs(&cfg, ckpt)?;
    let report = scalability_run(&collection, &checkpoint.params, buckets, &cfg.scalability)?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    write_json(
        &serde_json::json!({ "report": report, "config": snapshot(&cfg) }),
        &dir.join("scalability.json"),
    )?;
    let mut csv = String::from("center,graphs,mean_nodes,seconds_per_epoch\n");
    let mut table = format!("{:>7} {:>7} {:>11} {:>14}\n", "bucket", "graphs", "mean_nodes", "sec/epoch");
    for p in &report.points {
        let _ = writeln!(csv, "{},{},{:.3},{:.9}", p.center, p.graphs.len(), p.mean_nodes, p.seconds_per_epoch);
        let _ = writeln!(
            table,
            "{:>7} {:>7} {:>11.2} {:>14.6}",
            p.center,
            p.graphs.len(),
            p.mean_nodes,
            p.seconds_per_epoch
        );
    }
    fs::write(dir.join("scalability.csv"), csv).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
    for s in &report.skipped {
        let _ = writeln!(table, "{s:>7} skipped (no graph in range)");
    }
    if let Some(fit) = report.fit {
        let _ = writeln!(
            table,
            "fit: seconds = {:.3e} * nodes + {:.3e} (r2 {:.3})",
            fit.slope, fit.intercept, fit.r2
        );
    }
    Ok(table)
}

fn gradcheck(module: Module, fixtures: usize, seed: u64, fault: bool) -> Outcome {
    let suites: &[Suite] = match module {
        Module::All => &Suite::ALL,
        Module::Pretrain => &[Suite::Pretrain],
        Module::Prompt => &[Suite::Prompt],
        Module::Classifier => &[Suite::Classifier],
    };
    let results: Vec<SuiteResult> = suites
        .iter()
        .map(|&s| run_suite(s, fixtures, seed, fault))
        .collect::<Result<_, _>>()?;
    let mut table = format!(
        "{:<11} {:>8} {:>8} {:>9} {:>12}  {}\n",
        "suite", "fixtures", "entries", "excluded", "max_rel_err", "status"
    );
    for r in &results {
        let _ = writeln!(
            table,
            "{:<11} {:>8} {:>8} {:>9} {:>12.3e}  {}",
            r.suite,
            r.fixtures,
            r.checked,
            r.excluded,
            r.max_relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if results.iter().all(SuiteResult::passed) {
        Ok(table)
    } else {
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("gradient check failed (threshold {TOLERANCE:e})"),
            summary: Some(table),
        })
    }
}

fn inspect(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let c = cfg.load_collection()?;
    let opt = |x: Option<usize>| x.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut table = format!(
        "{:<12} {:>7} {:>10} {:>10} {:>8} {:>13} {:>14}\n",
        "dataset", "graphs", "avg_nodes", "avg_edges", "feat_dim", "node_classes", "graph_classes"
    );
    let _ = writeln!(
        table,
        "{:<12} {:>7} {:>10.2} {:>10.2} {:>8} {:>13} {:>14}",
        c.name,
        c.len(),
        c.avg_nodes(),
        c.avg_edges(),
        c.feature_dim(),
        opt(c.node_class_count()),
        opt(c.graph_class_count())
    );
    let eligible = graphprompt::eval::eligible_node_graphs(&c, &cfg.protocol);
    let _ = writeln!(
        table,
        "graphs eligible for {}-shot node tasks: {} (more than {} nodes)",
        cfg.protocol.k,
        eligible.len(),
        cfg.protocol.min_graph_nodes
    );
    if cfg.protocol.level == Level::Graph {
        log::debug!("protocol level is graph; node eligibility shown for reference");
    }
    Ok(table)
}

//! Downstream prompt tuning on a frozen encoder.
//!
//! Every instance (a node's contextual subgraph, or a whole graph) is read out
//! through a task head and compared by cosine similarity against class
//! prototypes, the mean head read-outs of the support instances. Three heads
//! are supported: a prompt vector `p` (`Σ p⊙h_v`), a full prompt matrix `P`
//! (`Σ P·h_v`), and, as an ablation, a plain linear classifier on the
//! unprompted read-out.
//!
//! The tuning loss is recorded on the tape in its literal form (prompt applied
//! per node, then summed) so its cost scales with subgraph size. Evaluation
//! reuses cached plain read-outs and applies the head afterwards, which is the
//! same quantity up to rounding because the head is linear.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{FewShotTask, GraphCollection, InstanceRef};
use crate::optim::Adam;
use crate::parallel::Execution;
use crate::persist::{self, FORMAT_VERSION};
use crate::seed::derive_seed;
use crate::subgraph::{cosine_similarity, khop_nodes, PromptMatrix, PromptVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Prompt,
    LinearPrompt,
    NoPrompt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Prompt, Variant::LinearPrompt, Variant::NoPrompt];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Prompt => "prompt",
            Variant::LinearPrompt => "linear_prompt",
            Variant::NoPrompt => "no_prompt",
        }
    }

    /// Tunable scalars for an embedding width and class count.
    pub fn tunable_params(self, emb_dim: usize, classes: usize) -> usize {
        match self {
            Variant::Prompt => emb_dim,
            Variant::LinearPrompt => emb_dim * emb_dim,
            Variant::NoPrompt => emb_dim * classes + classes,
        }
    }

    /// Multiply-accumulates spent applying the head to one instance embedding.
    pub fn head_flops(self, emb_dim: usize, classes: usize) -> usize {
        match self {
            Variant::Prompt => emb_dim,
            Variant::LinearPrompt => emb_dim * emb_dim,
            Variant::NoPrompt => emb_dim * classes,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected prompt, linear_prompt or no_prompt)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub tau: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub variant: Variant,
    pub delta: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            learning_rate: 1e-2,
            max_epochs: 200,
            patience: 20,
            variant: Variant::Prompt,
            delta: 1,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.learning_rate > 0.0) || self.patience == 0 {
            return Err(Error::Config("tune tau, learning_rate and patience must be positive".into()));
        }
        Ok(())
    }
}

/// Tunable parameters of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum HeadParams {
    Prompt { prompt: PromptVector },
    LinearPrompt { matrix: PromptMatrix },
    NoPrompt { weights: Tensor<f32>, bias: Tensor<f32> },
}

/// A tuned task head. `classes` maps head positions to class ids (ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedHead {
    pub classes: Vec<usize>,
    pub params: HeadParams,
    /// Epoch whose head was selected (0 = initialization).
    pub selected_epoch: usize,
    pub epochs_run: usize,
}

impl TunedHead {
    /// Initial head: all-ones prompt, identity matrix, or a Glorot classifier.
    pub fn init(variant: Variant, emb_dim: usize, classes: Vec<usize>, seed: u64) -> Self {
        let params = match variant {
            Variant::Prompt => HeadParams::Prompt {
                prompt: PromptVector::ones(emb_dim),
            },
            Variant::LinearPrompt => HeadParams::LinearPrompt {
                matrix: PromptMatrix::identity(emb_dim),
            },
            Variant::NoPrompt => {
                let c = classes.len();
                let a = (6.0 / (emb_dim + c) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "classifier-init"));
                let w = (0..emb_dim * c).map(|_| rng.random_range(-a..=a) as f32).collect();
                HeadParams::NoPrompt {
                    weights: Tensor::matrix(emb_dim, c, w),
                    bias: Tensor::zeros(&[1, c]),
                }
            }
        };
        Self {
            classes,
            params,
            selected_epoch: 0,
            epochs_run: 0,
        }
    }

    pub fn variant(&self) -> Variant {
        match self.params {
            HeadParams::Prompt { .. } => Variant::Prompt,
            HeadParams::LinearPrompt { .. } => Variant::LinearPrompt,
            HeadParams::NoPrompt { .. } => Variant::NoPrompt,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.params {
            HeadParams::Prompt { prompt } => prompt.len(),
            HeadParams::LinearPrompt { matrix } => matrix.0.numel(),
            HeadParams::NoPrompt { weights, bias } => weights.numel() + bias.numel(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        match &mut self.params {
            HeadParams::Prompt { .. } => Vec::new(),
            HeadParams::LinearPrompt { matrix } => vec![&mut matrix.0],
            HeadParams::NoPrompt { weights, bias } => vec![weights, bias],
        }
    }

    fn record<T: Scalar>(&self, tape: &mut Tape<T>) -> HeadVars {
        match &self.params {
            HeadParams::Prompt { prompt } => {
                HeadVars::Prompt(tape.param(Tensor::row_vector(prompt.0.clone()).cast()))
            }
            HeadParams::LinearPrompt { matrix } => HeadVars::Linear(tape.param(matrix.0.cast())),
            HeadParams::NoPrompt { weights, bias } => HeadVars::Classifier {
                weights: tape.param(weights.cast()),
                bias: tape.param(bias.cast()),
            },
        }
    }

    fn apply_update(&mut self, opt: &mut Adam, vars: &HeadVars, grads: &crate::autodiff::Gradients<f32>) -> Result<()> {
        match (&mut self.params, vars) {
            (HeadParams::Prompt { prompt }, HeadVars::Prompt(v)) => {
                let mut t = Tensor::row_vector(std::mem::take(&mut prompt.0));
                let r = opt.step(&mut [&mut t], std::slice::from_ref(grads.get(*v)));
                prompt.0 = t.into_data();
                r
            }
            (_, HeadVars::Linear(v)) => opt.step(&mut self.tensors_mut(), std::slice::from_ref(grads.get(*v))),
            (_, HeadVars::Classifier { weights, bias }) => {
                let g = [grads.get(*weights).clone(), grads.get(*bias).clone()];
                opt.step(&mut self.tensors_mut(), &g)
            }
            _ => Err(Error::Contract("head variables do not match the head".into())),
        }
    }

    /// Head applied to a plain read-out: `p⊙r`, `P·r`, or classifier logits.
    pub fn apply(&self, r: &[f32]) -> Vec<f32> {
        match &self.params {
            HeadParams::Prompt { prompt } => prompt.0.iter().zip(r).map(|(p, x)| p * x).collect(),
            HeadParams::LinearPrompt { matrix } => (0..matrix.dim())
                .map(|i| matrix.0.row(i).iter().zip(r).map(|(p, x)| p * x).sum())
                .collect(),
            HeadParams::NoPrompt { weights, bias } => (0..weights.cols())
                .map(|c| r.iter().enumerate().map(|(j, x)| x * weights.at(j, c)).sum::<f32>() + bias.data()[c])
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::save_document(
            &HeadDocument {
                format_version: FORMAT_VERSION,
                head: self.clone(),
            },
            path.as_ref(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        persist::load_document::<HeadDocument>(path.as_ref()).map(|d| d.head)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadDocument {
    format_version: u32,
    head: TunedHead,
}

/// Head parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Prompt(Var),
    Linear(Var),
    Classifier { weights: Var, bias: Var },
}

/// Arithmetic mean of each class's embeddings.
pub fn class_prototypes(support: &BTreeMap<usize, Vec<Vec<f32>>>) -> Result<BTreeMap<usize, Vec<f32>>> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (&c, embs) in support {
        let Some(first) = embs.first() else {
            return Err(Error::Contract(format!("class {c} has no support embedding")));
        };
        let d = *dim.get_or_insert(first.len());
        let mut acc = vec![0.0f64; d];
        for e in embs {
            if e.len() != d {
                return Err(Error::Dimension {
                    what: "support embedding width",
                    expected: d,
                    found: e.len(),
                });
            }
            for (a, &x) in acc.iter_mut().zip(e) {
                *a += f64::from(x);
            }
        }
        let n = embs.len() as f64;
        out.insert(c, acc.into_iter().map(|a| (a / n) as f32).collect());
    }
    Ok(out)
}

/// Class of the most cosine-similar prototype; ties go to the smallest id.
pub fn predict(instance: &[f32], prototypes: &BTreeMap<usize, Vec<f32>>) -> Result<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (&c, p) in prototypes {
        let s = cosine_similarity(instance, p);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Contract("prediction needs at least one prototype".into()))
}

/// Frozen node embeddings of the graphs a task touches.
pub struct FrozenContext<'a> {
    collection: &'a GraphCollection,
    delta: usize,
    emb_dim: usize,
    embeddings: BTreeMap<usize, Tensor<f32>>,
}

impl<'a> FrozenContext<'a> {
    /// Encodes `graphs` once under `params`.
    pub fn new(
        collection: &'a GraphCollection,
        params: &EncoderParams,
        graphs: impl IntoIterator<Item = usize>,
        delta: usize,
        exec: Execution,
    ) -> Result<Self> {
        if collection.feature_dim() != params.config.input_dim {
            return Err(Error::Dimension {
                what: "dataset feature dim vs checkpoint input_dim",
                expected: params.config.input_dim,
                found: collection.feature_dim(),
            });
        }
        let ids: Vec<usize> = graphs.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if let Some(&bad) = ids.iter().find(|&&g| g >= collection.len()) {
            return Err(Error::Index {
                op: "frozen context graph",
                index: bad,
                bound: collection.len(),
            });
        }
        let encoded = exec.map(&ids, |&g| encode(&collection.graphs()[g], params));
        let mut embeddings = BTreeMap::new();
        for (g, e) in ids.into_iter().zip(encoded) {
            embeddings.insert(g, e?);
        }
        Ok(Self {
            collection,
            delta,
            emb_dim: params.config.embedding_dim(),
            embeddings,
        })
    }

    /// Context covering every graph of the collection.
    pub fn all(collection: &'a GraphCollection, params: &EncoderParams, delta: usize, exec: Execution) -> Result<Self> {
        Self::new(collection, params, 0..collection.len(), delta, exec)
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn collection(&self) -> &GraphCollection {
        self.collection
    }

    fn embedding(&self, graph: usize) -> Result<&Tensor<f32>> {
        self.embeddings.get(&graph).ok_or_else(|| {
            Error::Contract(format!("graph {graph} was not encoded in this context"))
        })
    }

    /// Node set read out for an instance: the contextual subgraph of a node,
    /// or every node of a graph.
    pub fn instance_nodes(&self, inst: InstanceRef) -> Vec<usize> {
        match inst {
            InstanceRef::Node { graph, node } => khop_nodes(&self.collection.graphs()[graph], node, self.delta),
            InstanceRef::Graph(g) => (0..self.collection.graphs()[g].num_nodes()).collect(),
        }
    }

    /// Plain sum read-out of an instance.
    pub fn readout(&self, inst: InstanceRef) -> Result<Vec<f32>> {
        let emb = self.embedding(inst.graph())?;
        let mut out = vec![0.0f32; self.emb_dim];
        for v in self.instance_nodes(inst) {
            for (o, &h) in out.iter_mut().zip(emb.row(v)) {
                *o += h;
            }
        }
        Ok(out)
    }

    /// Stacked node-embedding rows and segment ids of labelled instances.
    pub fn layout(&self, labelled: &[(InstanceRef, usize)], classes: &[usize]) -> Result<InstanceLayout> {
        let mut data = Vec::new();
        let mut segments = Vec::new();
        let mut targets = Vec::with_capacity(labelled.len());
        for (i, &(inst, label)) in labelled.iter().enumerate() {
            let pos = classes.iter().position(|&c| c == label).ok_or_else(|| {
                Error::Contract(format!("label {label} is not one of the task classes {classes:?}"))
            })?;
            targets.push(pos);
            let emb = self.embedding(inst.graph())?;
            for v in self.instance_nodes(inst) {
                data.extend_from_slice(emb.row(v));
                segments.push(i);
            }
        }
        Ok(InstanceLayout {
            rows: Tensor::matrix(segments.len(), self.emb_dim, data),
            segments,
            count: labelled.len(),
            targets,
            classes: classes.len(),
        })
    }
}

/// Instances flattened for the tape: `rows[i]` is a node embedding belonging
/// to instance `segments[i]`; `targets` are class positions.
#[derive(Debug, Clone)]
pub struct InstanceLayout {
    pub rows: Tensor<f32>,
    pub segments: Vec<usize>,
    pub count: usize,
    pub targets: Vec<usize>,
    pub classes: usize,
}

impl InstanceLayout {
    /// Head read-outs of every instance (`count × width`), literal form.
    fn head_readouts<T: Scalar>(&self, tape: &mut Tape<T>, head: HeadVars) -> Result<Var> {
        let rows = tape.constant(self.rows.cast());
        let z = match head {
            HeadVars::Prompt(p) => tape.mul(rows, p)?,
            HeadVars::Linear(m) => {
                let mt = tape.transpose(m)?;
                tape.matmul(rows, mt)?
            }
            HeadVars::Classifier { .. } => rows,
        };
        tape.segment_sum(z, &self.segments, self.count)
    }

    fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &t in &self.targets {
            c[t] += 1;
        }
        c
    }
}

/// Summed prompt-tuning loss of `query` against prototypes built from
/// `support` (`query = None` scores the support itself). For the classifier
/// head this is plain softmax cross-entropy on `query` (or `support`).
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    head: HeadVars,
    support: &InstanceLayout,
    query: Option<&InstanceLayout>,
    tau: f64,
) -> Result<Var> {
    let target_set = query.unwrap_or(support);
    if target_set.count == 0 {
        return Err(Error::Contract("prompt loss of an empty labelled set".into()));
    }
    if let HeadVars::Classifier { weights, bias } = head {
        let s = target_set.head_readouts(tape, head)?;
        let logits = tape.matmul(s, weights)?;
        let logits = tape.add(logits, bias)?;
        return tape.cross_entropy(logits, &target_set.targets);
    }
    if let Some(c) = support.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::Contract(format!("class position {c} has no support instance for its prototype")));
    }
    let s_support = support.head_readouts(tape, head)?;
    let protos = tape.segment_mean(s_support, &support.targets, support.classes)?;
    let s = match query {
        Some(q) => q.head_readouts(tape, head)?,
        None => s_support,
    };
    let s = tape.l2_normalize(s)?;
    let protos = tape.l2_normalize(protos)?;
    let pt = tape.transpose(protos)?;
    let sims = tape.matmul(s, pt)?;
    let logits = tape.div_scalar(sims, T::of(tau))?;
    tape.cross_entropy(logits, &target_set.targets)
}

/// Prompt-tuning loss of a labelled set under `head`, prototypes from the
/// same set.
pub fn prompt_loss(labelled: &[(InstanceRef, usize)], head: &TunedHead, ctx: &FrozenContext, tau: f64) -> Result<f64> {
    if matches!(head.params, HeadParams::NoPrompt { .. }) {
        return Err(Error::Contract("prompt loss needs a prompt or linear_prompt head".into()));
    }
    let layout = ctx.layout(labelled, &head.classes)?;
    let mut tape = Tape::<f64>::new();
    let vars = head.record(&mut tape);
    let l = loss_on_tape(&mut tape, vars, &layout, None, tau)?;
    tape.value(l).item()
}

/// Cached plain read-outs of labelled instances.
#[derive(Debug, Clone)]
pub struct Readouts {
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Readouts {
    pub fn collect(ctx: &FrozenContext, labelled: &[(InstanceRef, usize)]) -> Result<Self> {
        Ok(Self {
            vectors: labelled.iter().map(|&(i, _)| ctx.readout(i)).collect::<Result<_>>()?,
            labels: labelled.iter().map(|&(_, l)| l).collect(),
        })
    }
}

/// A head ready to classify: prototypes for prompt heads, nothing extra for
/// the classifier.
pub struct Classifier<'h> {
    head: &'h TunedHead,
    prototypes: BTreeMap<usize, Vec<f32>>,
}

impl<'h> Classifier<'h> {
    pub fn new(head: &'h TunedHead, support: &Readouts) -> Result<Self> {
        let prototypes = if matches!(head.params, HeadParams::NoPrompt { .. }) {
            BTreeMap::new()
        } else {
            let mut by_class: BTreeMap<usize, Vec<Vec<f32>>> = head.classes.iter().map(|&c| (c, Vec::new())).collect();
            for (r, &l) in support.vectors.iter().zip(&support.labels) {
                by_class
                    .get_mut(&l)
                    .ok_or_else(|| Error::Contract(format!("support label {l} is not a head class")))?
                    .push(head.apply(r));
            }
            class_prototypes(&by_class)?
        };
        Ok(Self { head, prototypes })
    }

    pub fn prototypes(&self) -> &BTreeMap<usize, Vec<f32>> {
        &self.prototypes
    }

    /// Class of a plain read-out.
    pub fn classify(&self, r: &[f32]) -> Result<usize> {
        let z = self.head.apply(r);
        if matches!(self.head.params, HeadParams::NoPrompt { .. }) {
            let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
            return Ok(self.head.classes[best]);
        }
        predict(&z, &self.prototypes)
    }

    pub fn accuracy(&self, query: &Readouts) -> Result<f64> {
        if query.vectors.is_empty() {
            return Err(Error::Contract("accuracy of an empty query set".into()));
        }
        let mut hits = 0usize;
        for (r, &l) in query.vectors.iter().zip(&query.labels) {
            hits += usize::from(self.classify(r)? == l);
        }
        Ok(hits as f64 / query.vectors.len() as f64)
    }
}

/// One optimizer step on the support loss (one epoch: the support is a
/// single batch). Returns the loss before the step.
pub fn tuning_step(head: &mut TunedHead, opt: &mut Adam, support: &InstanceLayout, tau: f64) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let vars = head.record(&mut tape);
    let loss = loss_on_tape(&mut tape, vars, support, None, tau)?;
    let grads = tape.backward(loss)?;
    head.apply_update(opt, &vars, &grads)?;
    Ok(f64::from(tape.value(loss).item()?))
}

/// Tunes a head on `task.support`, selecting by accuracy on `task.query`
/// (ties broken by lower loss there). The encoder never enters the tape.
pub fn tune_head(task: &FewShotTask, ctx: &FrozenContext, config: &TuneConfig) -> Result<TunedHead> {
    config.validate()?;
    let classes = task.classes.clone();
    let support = ctx.layout(&task.support, &classes)?;
    let select = ctx.layout(&task.query, &classes)?;
    let support_r = Readouts::collect(ctx, &task.support)?;
    let select_r = Readouts::collect(ctx, &task.query)?;

    let mut head = TunedHead::init(config.variant, ctx.emb_dim(), classes, config.seed);
    let score = |h: &TunedHead| -> Result<(f64, f64)> {
        let acc = Classifier::new(h, &support_r)?.accuracy(&select_r)?;
        let mut tape = Tape::<f32>::new();
        let vars = h.record(&mut tape);
        let l = loss_on_tape(&mut tape, vars, &support, Some(&select), config.tau)?;
        Ok((acc, f64::from(tape.value(l).item()?)))
    };
    let mut best = (score(&head)?, head.clone());
    let mut opt = Adam::new(config.learning_rate as f32);
    for epoch in 1..=config.max_epochs {
        tuning_step(&mut head, &mut opt, &support, config.tau)?;
        head.epochs_run = epoch;
        let s = score(&head)?;
        let ((best_acc, best_loss), _) = best;
        if s.0 > best_acc || (s.0 == best_acc && s.1 < best_loss) {
            head.selected_epoch = epoch;
            best = (s, head.clone());
        } else if epoch - best.1.selected_epoch >= config.patience {
            break;
        }
    }
    let epochs_run = head.epochs_run;
    let mut out = best.1;
    out.epochs_run = epochs_run;
    Ok(out)
}

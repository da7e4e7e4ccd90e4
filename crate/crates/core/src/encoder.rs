//! GIN message-passing encoder.
//!
//! Layer `l` computes `h^l_v = MLP_l((1+ε)·h^{l-1}_v + Σ_{u∈N(v)} h^{l-1}_u)`
//! with `h^0 = x`. Each MLP is `Linear → ReLU → Linear`; nothing is applied
//! after the second linear map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Output of the final layer only.
    Last,
    /// Outputs of every layer side by side.
    #[default]
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub embedding_mode: EmbeddingMode,
    #[serde(default)]
    pub epsilon: f32,
}

fn default_layers() -> usize {
    3
}

fn default_hidden() -> usize {
    32
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            num_layers: default_layers(),
            input_dim,
            hidden_dim: default_hidden(),
            embedding_mode: EmbeddingMode::Concat,
            epsilon: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("encoder layers and dimensions must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the node embeddings `encode` returns.
    pub fn embedding_dim(&self) -> usize {
        match self.embedding_mode {
            EmbeddingMode::Last => self.hidden_dim,
            EmbeddingMode::Concat => self.num_layers * self.hidden_dim,
        }
    }
}

/// Weights of one GIN perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

impl GinLayer {
    fn tensors(&self) -> [&Tensor<f32>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<GinLayer>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a) as f32).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden_dim;
    let layers = (0..config.num_layers)
        .map(|l| {
            let fan_in = if l == 0 { config.input_dim } else { h };
            GinLayer {
                w1: glorot(&mut rng, fan_in, h),
                b1: Tensor::zeros(&[1, h]),
                w2: glorot(&mut rng, h, h),
                b2: Tensor::zeros(&[1, h]),
            }
        })
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        layers,
    })
}

impl EncoderParams {
    /// Every parameter tensor in a fixed order (`w1, b1, w2, b2` per layer).
    pub fn tensors(&self) -> Vec<&Tensor<f32>> {
        self.layers.iter().flat_map(GinLayer::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2])
            .collect()
    }

    /// Rebuilds parameters from tensors in [`EncoderParams::tensors`] order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        let template = init_params(&config, 0)?;
        if tensors.len() != template.tensors().len() {
            return Err(Error::Dimension {
                what: "parameter tensor count",
                expected: template.tensors().len(),
                found: tensors.len(),
            });
        }
        for (t, expect) in tensors.iter().zip(template.tensors()) {
            if t.shape() != expect.shape() {
                return Err(Error::shape("encoder parameter", expect.shape(), t.shape()));
            }
        }
        let mut it = tensors.into_iter();
        let layers = (0..config.num_layers)
            .map(|_| GinLayer {
                w1: it.next().unwrap(),
                b1: it.next().unwrap(),
                w2: it.next().unwrap(),
                b2: it.next().unwrap(),
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn record<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| {
                let t = t.cast::<T>();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }
}

/// Exact count of scalar parameters.
pub fn count_params(params: &EncoderParams) -> usize {
    params.tensors().iter().map(|t| t.numel()).sum()
}

/// Closed form of [`count_params`] for a configuration.
pub fn param_count_for(config: &EncoderConfig) -> usize {
    let h = config.hidden_dim;
    (0..config.num_layers)
        .map(|l| {
            let fan_in = if l == 0 { config.input_dim } else { h };
            fan_in * h + h + h * h + h
        })
        .sum()
}

/// Runs the encoder on `tape` given parameter vars in [`EncoderParams::tensors`]
/// order. Returns the `num_nodes × embedding_dim` node-embedding matrix.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &Graph,
    config: &EncoderConfig,
    vars: &[Var],
) -> Result<Var> {
    if graph.feature_dim() != config.input_dim {
        return Err(Error::Dimension {
            what: "graph feature dim vs encoder input_dim",
            expected: config.input_dim,
            found: graph.feature_dim(),
        });
    }
    let n = graph.num_nodes();
    let (src, dst) = graph.message_index();
    let mut h = tape.constant(graph.features().cast::<T>());
    let mut outputs = Vec::with_capacity(config.num_layers);
    for layer in vars.chunks(4) {
        let &[w1, b1, w2, b2] = layer else {
            return Err(Error::Contract("encoder vars must come in groups of four".into()));
        };
        let msgs = tape.gather_rows(h, &src)?;
        let agg = tape.segment_sum(msgs, &dst, n)?;
        let own = if config.epsilon == 0.0 {
            h
        } else {
            let width = tape.value(h).cols();
            let scale = tape.constant(Tensor::filled(&[1, width], T::of(1.0 + config.epsilon as f64)));
            tape.mul(h, scale)?
        };
        let z = tape.add(agg, own)?;
        let z = tape.matmul(z, w1)?;
        let z = tape.add(z, b1)?;
        let z = tape.relu(z);
        let z = tape.matmul(z, w2)?;
        h = tape.add(z, b2)?;
        outputs.push(h);
    }
    match config.embedding_mode {
        EmbeddingMode::Last => Ok(h),
        EmbeddingMode::Concat => tape.concat(&outputs),
    }
}

/// Node embeddings of `graph` under frozen `params`.
pub fn encode(graph: &Graph, params: &EncoderParams) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let vars = params.record(&mut tape, false);
    let out = encode_on_tape(&mut tape, graph, &params.config, &vars)?;
    Ok(tape.value(out).clone())
}

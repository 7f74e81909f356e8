use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::encoder::{BlockKind, Encoder, EncoderSpec, FEATURE_DIM};
use crate::nn::gradcheck::{grad_check, GradCheckReport};
use crate::nn::layers::{ConvLayer, Linear, SeqLayout};
use crate::nn::params::{Binder, Gradients, Init, Initializer, ParamId, ParamSource, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::numkernel::RealMatrix;
use crate::pretrain::objectives::{
    apc_l1, apply_mask, cpc_info_nce, mpc_loss_with_targets, mpc_mask, ObjectiveConfig, Proposal,
};

pub const MODEL_NAMES: [&str; 9] = [
    "apc-fw-rnn",
    "apc-fw+bw-rnn",
    "apc-fw-trf",
    "apc-fw+bw-trf",
    "mpc-birnn",
    "mpc-trf",
    "cpc-mixed_spk-rnn",
    "cpc-within_spk-rnn",
    "cpc-within_spk-cnn",
];

/// Layers in the convolutional frame encoder of the CNN contrastive model.
pub const CNN_FRAME_LAYERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameEncoderKind {
    Linear,
    Conv { layers: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub objective: ObjectiveConfig,
    /// Encoder of one direction; split models hold two of these.
    pub encoder: EncoderSpec,
    /// Two independent models, the second reading time-reversed input,
    /// with outputs concatenated.
    pub split_directions: bool,
    /// Contrastive models only.
    pub frame_encoder: Option<FrameEncoderKind>,
}

impl ModelConfig {
    /// Configuration for one of [`MODEL_NAMES`] with total representation
    /// size `hidden`.
    pub fn from_name(name: &str, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let half = || {
            if !hidden.is_multiple_of(2) {
                Err(Error::Config(format!("{name} needs an even hidden size, got {hidden}")))
            } else {
                Ok(hidden / 2)
            }
        };
        let spec = |kind, h| EncoderSpec::new(kind, h);
        let (objective, encoder, split, frame) = match name {
            "apc-fw-rnn" => (ObjectiveConfig::apc(), spec(BlockKind::Gru, hidden), false, None),
            "apc-fw+bw-rnn" => (ObjectiveConfig::apc(), spec(BlockKind::Gru, half()?), true, None),
            "apc-fw-trf" => (ObjectiveConfig::apc(), spec(BlockKind::CausalAttention, hidden), false, None),
            "apc-fw+bw-trf" => (ObjectiveConfig::apc(), spec(BlockKind::CausalAttention, half()?), true, None),
            "mpc-birnn" => {
                half()?;
                (ObjectiveConfig::mpc(), spec(BlockKind::BiGru, hidden), false, None)
            }
            "mpc-trf" => (ObjectiveConfig::mpc(), spec(BlockKind::BidirectionalAttention, hidden), false, None),
            "cpc-mixed_spk-rnn" => (
                ObjectiveConfig::cpc(Proposal::MixedSpk),
                spec(BlockKind::Gru, hidden),
                false,
                Some(FrameEncoderKind::Linear),
            ),
            "cpc-within_spk-rnn" => (
                ObjectiveConfig::cpc(Proposal::WithinSpk),
                spec(BlockKind::Gru, hidden),
                false,
                Some(FrameEncoderKind::Linear),
            ),
            "cpc-within_spk-cnn" => (
                ObjectiveConfig::cpc(Proposal::WithinSpk),
                spec(BlockKind::CausalConv, hidden),
                false,
                Some(FrameEncoderKind::Conv { layers: CNN_FRAME_LAYERS }),
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown model {other:?}; expected one of {}",
                    MODEL_NAMES.join(", ")
                )))
            }
        };
        let mut cfg =
            Self { name: name.to_string(), objective, encoder, split_directions: split, frame_encoder: frame };
        if frame.is_some() {
            cfg.encoder.input_dim = hidden;
        }
        Ok(cfg)
    }

    pub fn input_dim(&self) -> usize {
        if self.frame_encoder.is_some() {
            FEATURE_DIM
        } else {
            self.encoder.input_dim
        }
    }

    /// Width of extracted representations.
    pub fn output_dim(&self) -> usize {
        self.encoder.hidden * if self.split_directions { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.encoder.validate()?;
        let cpc = matches!(self.objective, ObjectiveConfig::Cpc { .. });
        if cpc != self.frame_encoder.is_some() {
            return Err(Error::Config("a frame encoder is used by contrastive models only".into()));
        }
        match self.objective {
            ObjectiveConfig::Mpc { .. } if self.encoder.kind.is_causal() => {
                Err(Error::Config("masked prediction needs a bidirectional encoder".into()))
            }
            ObjectiveConfig::Apc { .. } | ObjectiveConfig::Cpc { .. } if !self.encoder.kind.is_causal() => {
                Err(Error::Config("predictive objectives need a causal encoder".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Packed minibatch of utterances in batch order.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub layout: SeqLayout,
    pub frames: RealMatrix,
}

impl SeqBatch {
    pub fn new(seqs: &[&FeatureSequence]) -> Result<Self> {
        let mats: Vec<&RealMatrix> = seqs.iter().map(|s| &s.frames).collect();
        Self::from_matrices(&mats)
    }

    pub fn from_matrices(mats: &[&RealMatrix]) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let frames = RealMatrix::vstack(mats)?;
        Ok(Self { layout: SeqLayout::new(mats.iter().map(|m| m.rows()).collect()), frames })
    }
}

#[derive(Debug, Clone)]
enum FrameEncoder {
    Linear(Linear),
    Conv(Vec<ConvLayer>),
}

impl FrameEncoder {
    fn forward(&self, t: &mut Tape, x: Var, layout: &SeqLayout) -> Var {
        match self {
            FrameEncoder::Linear(l) => l.forward(t, x),
            FrameEncoder::Conv(layers) => layers.iter().fold(x, |h, c| c.forward(t, h, layout)),
        }
    }
}

#[derive(Debug, Clone)]
enum Head {
    Regression(Linear),
    Bilinear(Vec<ParamId>),
}

#[derive(Debug, Clone)]
struct Net {
    reverse: bool,
    frame: Option<FrameEncoder>,
    encoder: Encoder,
    head: Head,
}

struct NetOutput {
    /// Input frames in the net's own time direction.
    frames: RealMatrix,
    z: Option<Var>,
    repr: Var,
}

impl Net {
    fn build(cfg: &ModelConfig, src: &mut dyn ParamSource, prefix: &str, reverse: bool) -> Result<Self> {
        let name = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        let h = cfg.encoder.hidden;
        let frame = match cfg.frame_encoder {
            None => None,
            Some(FrameEncoderKind::Linear) => {
                Some(FrameEncoder::Linear(Linear::new(src, &name("frame"), FEATURE_DIM, h)?))
            }
            Some(FrameEncoderKind::Conv { layers }) => Some(FrameEncoder::Conv(
                (0..layers)
                    .map(|l| {
                        ConvLayer::new(src, &name(&format!("frame{l}")), if l == 0 { FEATURE_DIM } else { h }, h, true)
                    })
                    .collect::<Result<_>>()?,
            )),
        };
        let encoder = Encoder::new(cfg.encoder, src, &name("enc"))?;
        let head = match cfg.objective {
            ObjectiveConfig::Apc { .. } | ObjectiveConfig::Mpc { .. } => {
                Head::Regression(Linear::new(src, &name("head"), h, FEATURE_DIM)?)
            }
            ObjectiveConfig::Cpc { horizon, .. } => Head::Bilinear(
                (1..=horizon)
                    .map(|k| src.param(&name(&format!("step{k}")), h, h, Init::Xavier))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self { reverse, frame, encoder, head })
    }

    fn run(&self, t: &mut Tape, input: &RealMatrix, layout: &SeqLayout) -> NetOutput {
        let frames = if self.reverse { input.select_rows(&layout.reverse_index()) } else { input.clone() };
        let x = t.constant(frames.clone());
        let (z, ctx_in) = match &self.frame {
            Some(f) => {
                let z = f.forward(t, x, layout);
                (Some(z), z)
            }
            None => (None, x),
        };
        let repr = self.encoder.forward(t, ctx_in, layout);
        NetOutput { frames, z, repr }
    }

    fn loss(&self, t: &mut Tape, cfg: &ObjectiveConfig, batch: &SeqBatch, seed: u64) -> Result<Var> {
        let layout = &batch.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match (*cfg, &self.head) {
            (ObjectiveConfig::Apc { shift }, Head::Regression(head)) => {
                let out = self.run(t, &batch.frames, layout);
                let pred = head.forward(t, out.repr);
                apc_l1(t, pred, &out.frames, layout, shift)
            }
            (ObjectiveConfig::Mpc { span, fraction }, Head::Regression(head)) => {
                let mask = mpc_mask(layout, span, fraction, &mut rng);
                let masked = apply_mask(&batch.frames, &mask);
                let out = self.run(t, &masked, layout);
                let pred = head.forward(t, out.repr);
                mpc_loss_with_targets(t, pred, &batch.frames, &mask)
            }
            (ObjectiveConfig::Cpc { negatives, proposal, .. }, Head::Bilinear(steps)) => {
                let out = self.run(t, &batch.frames, layout);
                let heads: Vec<Var> = steps.iter().map(|&w| t.param(w)).collect();
                let z = out.z.expect("contrastive net without frame encoder");
                cpc_info_nce(t, z, out.repr, &heads, layout, negatives, proposal, &mut rng)
            }
            _ => Err(Error::Config("objective does not match the model head".into())),
        }
    }
}

/// Objective-specific architecture without its parameter values.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    config: ModelConfig,
    nets: Vec<Net>,
}

impl ModelGraph {
    fn build(config: &ModelConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let nets = if config.split_directions {
            vec![Net::build(config, src, "fw", false)?, Net::build(config, src, "bw", true)?]
        } else {
            vec![Net::build(config, src, "", false)?]
        };
        Ok(Self { config: config.clone(), nets })
    }

    /// Training loss on a batch; masks and negatives are drawn from `seed`.
    /// Split models average the two directions.
    pub fn loss(&self, t: &mut Tape, batch: &SeqBatch, seed: u64) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.nets.len());
        for (i, net) in self.nets.iter().enumerate() {
            parts.push(net.loss(t, &self.config.objective, batch, seed.wrapping_add(i as u64))?);
        }
        Ok(match parts.as_slice() {
            [one] => *one,
            _ => {
                let n = parts.len() as f64;
                let col = t.concat_rows(parts);
                let s = t.sum(col);
                t.scale(s, 1.0 / n)
            }
        })
    }

    /// Final-layer representations (context vectors for contrastive models),
    /// packed, with split models concatenated in forward time order.
    pub fn represent(&self, t: &mut Tape, batch: &SeqBatch) -> Var {
        let mut outs = Vec::with_capacity(self.nets.len());
        for net in &self.nets {
            let out = net.run(t, &batch.frames, &batch.layout);
            outs.push(if net.reverse { t.select_rows(out.repr, &batch.layout.reverse_index()) } else { out.repr });
        }
        t.concat_cols(outs)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub graph: ModelGraph,
    pub store: ParamStore,
}

impl Model {
    /// Freshly initialized model; initial weights depend only on `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = ModelGraph::build(config, &mut Initializer { store: &mut store, rng: &mut rng })?;
        Ok(Self { graph, store })
    }

    /// Model over an existing store whose names and shapes match `config`.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let graph = ModelGraph::build(config, &mut Binder { store: &store })?;
        if store.len() != graph_param_count(config)? {
            return Err(Error::Config("parameter store holds tensors the model does not use".into()));
        }
        Ok(Self { graph, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.graph.config
    }

    pub fn loss_value(&self, batch: &SeqBatch, seed: u64) -> Result<f64> {
        let mut t = Tape::new(&self.store);
        let l = self.graph.loss(&mut t, batch, seed)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{} loss is {v}", self.config().name)));
        }
        Ok(v)
    }

    pub fn loss_and_gradients(&self, batch: &SeqBatch, seed: u64) -> Result<(f64, Gradients)> {
        let mut t = Tape::new(&self.store);
        let l = self.graph.loss(&mut t, batch, seed)?;
        let v = t.scalar(l);
        Ok((v, t.backward(l)?))
    }

    pub fn grad_check(&mut self, batch: &SeqBatch, seed: u64, step: f64) -> Result<GradCheckReport> {
        let graph = &self.graph;
        grad_check(&mut self.store, |t| graph.loss(t, batch, seed), step)
    }

    /// Per-utterance `T × output_dim` representations. Utterances are
    /// encoded in chunks of `chunk` in parallel; the result does not depend
    /// on the chunking.
    pub fn extract(&self, seqs: &[&RealMatrix], chunk: usize) -> Result<Vec<RealMatrix>> {
        let dim = self.config().input_dim();
        if let Some(bad) = seqs.iter().find(|s| s.cols() != dim) {
            return Err(Error::Config(format!("features have {} dims, model expects {dim}", bad.cols())));
        }
        let chunks: Vec<Result<Vec<RealMatrix>>> = seqs
            .par_chunks(chunk.max(1))
            .map(|part| {
                let batch = SeqBatch::from_matrices(part)?;
                let mut t = Tape::new(&self.store);
                let y = self.graph.represent(&mut t, &batch);
                let out = t.value(y);
                if !out.is_finite() {
                    return Err(Error::Numerical("non-finite representations".into()));
                }
                Ok(batch
                    .layout
                    .lengths()
                    .iter()
                    .zip(batch.layout.offsets())
                    .map(|(&l, &o)| out.slice_rows(o, l))
                    .collect())
            })
            .collect();
        let mut all = Vec::with_capacity(seqs.len());
        for c in chunks {
            all.extend(c?);
        }
        Ok(all)
    }

    pub fn checkpoint(&self, step: u64, running_loss: f64, data_hours: f64) -> Checkpoint {
        Checkpoint { config: self.config().clone(), step, running_loss, data_hours, tensors: self.store.snapshot() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(&ckpt.config, 0)?;
        model.store.load_named(&ckpt.tensors)?;
        Ok(model)
    }
}

fn graph_param_count(config: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    ModelGraph::build(config, &mut Initializer { store: &mut store, rng: &mut rng })?;
    Ok(store.len())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    step: u64,
    running_loss: f64,
    data_hours: f64,
}

/// A saved model state together with its training context.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub running_loss: f64,
    /// Amount of pre-training audio, in hours at 100 frames per second.
    pub data_hours: f64,
    pub tensors: Vec<(String, RealMatrix)>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            step: self.step,
            running_loss: self.running_loss,
            data_hours: self.data_hours,
        };
        write_checkpoint(path, &serde_json::to_value(meta)?, &self.tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, tensors) = read_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        Ok(Self {
            config: meta.config,
            step: meta.step,
            running_loss: meta.running_loss,
            data_hours: meta.data_hours,
            tensors,
        })
    }

    /// Short identifier used in provenance records.
    pub fn id(&self) -> String {
        format!("{}@{}", self.config.name, self.step)
    }
}

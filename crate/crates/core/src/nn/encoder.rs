use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    positional_encoding, reversed, AttentionBlock, ConvLayer, GruLayer, LayerNormParams, Linear, SeqLayout,
};
use crate::nn::params::{Binder, ParamSource, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::numkernel::RealMatrix;

pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;
pub const FEATURE_DIM: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Gru,
    /// Forward and backward GRUs of `hidden / 2` each, concatenated per layer.
    BiGru,
    CausalAttention,
    BidirectionalAttention,
    CausalConv,
    Conv,
}

impl BlockKind {
    pub fn is_causal(self) -> bool {
        matches!(self, BlockKind::Gru | BlockKind::CausalAttention | BlockKind::CausalConv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: BlockKind,
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
}

impl EncoderSpec {
    pub fn new(kind: BlockKind, hidden: usize) -> Self {
        Self { kind, layers: DEFAULT_LAYERS, hidden, input_dim: FEATURE_DIM }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.kind == BlockKind::BiGru && !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("bidirectional hidden size {} is odd", self.hidden)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Stack {
    Gru(Vec<GruLayer>),
    BiGru(Vec<(GruLayer, GruLayer)>),
    Attention { input: Linear, blocks: Vec<AttentionBlock>, norm: LayerNormParams },
    Conv(Vec<ConvLayer>),
}

/// An encoder whose parameters live in a [`ParamStore`] under a name prefix.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    stack: Stack,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, src: &mut dyn ParamSource, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let name = |s: String| {
            if prefix.is_empty() {
                s
            } else {
                format!("{prefix}.{s}")
            }
        };
        let (h, d) = (spec.hidden, spec.input_dim);
        let stack = match spec.kind {
            BlockKind::Gru => Stack::Gru(
                (0..spec.layers)
                    .map(|l| GruLayer::new(src, &name(format!("gru{l}")), if l == 0 { d } else { h }, h))
                    .collect::<Result<_>>()?,
            ),
            BlockKind::BiGru => Stack::BiGru(
                (0..spec.layers)
                    .map(|l| {
                        let input = if l == 0 { d } else { h };
                        Ok((
                            GruLayer::new(src, &name(format!("bigru{l}.fw")), input, h / 2)?,
                            GruLayer::new(src, &name(format!("bigru{l}.bw")), input, h / 2)?,
                        ))
                    })
                    .collect::<Result<_>>()?,
            ),
            BlockKind::CausalAttention | BlockKind::BidirectionalAttention => {
                let causal = spec.kind == BlockKind::CausalAttention;
                Stack::Attention {
                    input: Linear::new(src, &name("proj".into()), d, h)?,
                    blocks: (0..spec.layers)
                        .map(|l| AttentionBlock::new(src, &name(format!("block{l}")), h, causal))
                        .collect::<Result<_>>()?,
                    norm: LayerNormParams::new(src, &name("norm".into()), h)?,
                }
            }
            BlockKind::CausalConv | BlockKind::Conv => {
                let causal = spec.kind == BlockKind::CausalConv;
                Stack::Conv(
                    (0..spec.layers)
                        .map(|l| ConvLayer::new(src, &name(format!("conv{l}")), if l == 0 { d } else { h }, h, causal))
                        .collect::<Result<_>>()?,
                )
            }
        };
        Ok(Self { spec, stack })
    }

    /// Resolves an encoder against parameters already in `store`.
    pub fn bind(spec: EncoderSpec, store: &ParamStore, prefix: &str) -> Result<Self> {
        Self::new(spec, &mut Binder { store }, prefix)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.spec.hidden
    }

    /// Packed `total × input_dim` in, packed `total × hidden` out.
    pub fn forward(&self, t: &mut Tape, x: Var, layout: &SeqLayout) -> Var {
        match &self.stack {
            Stack::Gru(layers) => layers.iter().fold(x, |h, g| g.forward(t, h, layout)),
            Stack::BiGru(layers) => layers.iter().fold(x, |h, (fw, bw)| {
                let f = fw.forward(t, h, layout);
                let b = reversed(t, h, layout, |t, hr| bw.forward(t, hr, layout));
                t.concat_cols(vec![f, b])
            }),
            Stack::Attention { input, blocks, norm } => {
                let p = input.forward(t, x);
                let pe = t.constant(positional_encoding(layout, self.spec.hidden));
                let h = t.add(p, pe);
                let h = blocks.iter().fold(h, |h, b| b.forward(t, h, layout));
                norm.forward(t, h)
            }
            Stack::Conv(layers) => layers.iter().fold(x, |h, c| c.forward(t, h, layout)),
        }
    }
}

/// Utterances padded to a common length `T`, each `T × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub frames: Vec<RealMatrix>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    /// Pads variable-length sequences with zero rows.
    pub fn from_sequences(seqs: &[&RealMatrix]) -> Result<Self> {
        let t = seqs.iter().map(|s| s.rows()).max().unwrap_or(0);
        let dim = seqs.first().map(|s| s.cols()).unwrap_or(0);
        let mut frames = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.cols() != dim {
                return Err(Error::Shape(format!("sequence dim {} differs from {dim}", s.cols())));
            }
            let mut m = RealMatrix::zeros(t, dim);
            m.data_mut()[..s.data().len()].copy_from_slice(s.data());
            frames.push(m);
        }
        Ok(Self { frames, lengths: seqs.iter().map(|s| s.rows()).collect() })
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout::new(self.lengths.clone())
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.frames.len() != self.lengths.len() {
            return Err(Error::Shape(format!("{} sequences but {} lengths", self.frames.len(), self.lengths.len())));
        }
        let t = self.frames.first().map(|f| f.rows()).unwrap_or(0);
        for (f, &len) in self.frames.iter().zip(&self.lengths) {
            if f.rows() != t {
                return Err(Error::Shape("padded sequences differ in length".into()));
            }
            if f.cols() != dim {
                return Err(Error::Shape(format!("frame dim {} does not match encoder input {dim}", f.cols())));
            }
            if len > t {
                return Err(Error::Shape(format!("length {len} exceeds padded length {t}")));
            }
        }
        Ok(())
    }

    /// Valid frames of every sequence stacked in batch order.
    pub fn packed(&self) -> RealMatrix {
        let dim = self.frames.first().map(|f| f.cols()).unwrap_or(0);
        let mut data = Vec::with_capacity(self.lengths.iter().sum::<usize>() * dim);
        for (f, &len) in self.frames.iter().zip(&self.lengths) {
            data.extend_from_slice(&f.data()[..len * dim]);
        }
        RealMatrix::from_vec(data.len() / dim.max(1), dim, data)
    }
}

/// Splits a packed output back into zero-padded per-sequence matrices.
pub fn unpack(packed: &RealMatrix, layout: &SeqLayout, padded_len: usize) -> Vec<RealMatrix> {
    let cols = packed.cols();
    layout
        .lengths()
        .iter()
        .zip(layout.offsets())
        .map(|(&len, &off)| {
            let mut m = RealMatrix::zeros(padded_len, cols);
            m.data_mut()[..len * cols].copy_from_slice(&packed.data()[off * cols..(off + len) * cols]);
            m
        })
        .collect()
}

/// Runs the encoder described by `spec` over a padded batch using the
/// unprefixed parameters in `store`. Rows past each length are zero.
pub fn encoder_forward(spec: &EncoderSpec, store: &ParamStore, batch: &PaddedBatch) -> Result<Vec<RealMatrix>> {
    batch.validate(spec.input_dim)?;
    let encoder = Encoder::bind(*spec, store, "")?;
    let layout = batch.layout();
    let input = batch.packed();
    if !input.is_finite() {
        return Err(Error::Numerical("non-finite input frames".into()));
    }
    let mut t = Tape::new(store);
    let x = t.constant(input);
    let y = encoder.forward(&mut t, x, &layout);
    let out = t.value(y);
    if !out.is_finite() {
        return Err(Error::Numerical("encoder produced non-finite outputs".into()));
    }
    let padded_len = batch.frames.first().map(|f| f.rows()).unwrap_or(0);
    Ok(unpack(out, &layout, padded_len))
}

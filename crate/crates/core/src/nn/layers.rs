//! Building blocks over packed sequence batches.
//!
//! A batch of utterances is one `(Σ T_b) × D` matrix with the utterances laid
//! out back to back; [`SeqLayout`] records where each one starts.

use crate::error::Result;
use crate::nn::params::{Init, ParamId, ParamSource};
use crate::nn::tape::{Tape, Var};
use crate::numkernel::RealMatrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut total = 0;
        for &l in &lengths {
            offsets.push(total);
            total += l;
        }
        Self { lengths, offsets, total }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_seqs(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Packed row of frame `t` of utterance `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        debug_assert!(t < self.lengths[b]);
        self.offsets[b] + t
    }

    /// Row permutation that reverses time inside every utterance.
    pub fn reverse_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.total);
        for (b, &len) in self.lengths.iter().enumerate() {
            idx.extend((0..len).rev().map(|t| self.offsets[b] + t));
        }
        idx
    }

    /// Row `r` maps to the row `shift` steps earlier in the same utterance,
    /// or `None` when that falls outside it. Negative shifts look ahead.
    pub fn shifted_index(&self, shift: isize) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.total);
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len as isize {
                let s = t - shift;
                idx.push((s >= 0 && s < len as isize).then(|| self.offsets[b] + s as usize));
            }
        }
        idx
    }

    /// Like [`shifted_index`](Self::shifted_index) but clamped to the
    /// utterance's first and last frames instead of leaving the edge empty.
    pub fn clamped_index(&self, shift: isize) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.total);
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len as isize {
                let s = (t - shift).clamp(0, len as isize - 1);
                idx.push(Some(self.offsets[b] + s as usize));
            }
        }
        idx
    }

    /// Position of every packed row within its utterance.
    pub fn positions(&self) -> Vec<usize> {
        self.lengths.iter().flat_map(|&l| 0..l).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(src: &mut dyn ParamSource, name: &str, input: usize, output: usize) -> Result<Self> {
        let w = src.param(&format!("{name}.w"), input, output, Init::Xavier)?;
        let b = src.param(&format!("{name}.b"), 1, output, Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (w, b) = (t.param(self.w), t.param(self.b));
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

/// One GRU layer: `z, r = σ(·)`, `h̃ = tanh(x·W_h + b_h + (r ⊙ h)·U_h)`,
/// `h' = (1 − z) ⊙ h + z ⊙ h̃`, zero initial state.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub wx: ParamId,
    pub bx: ParamId,
    pub uzr: ParamId,
    pub uh: ParamId,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new(src: &mut dyn ParamSource, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let wx = src.param(&format!("{name}.wx"), input, 3 * hidden, Init::Xavier)?;
        let bx = src.param(&format!("{name}.bx"), 1, 3 * hidden, Init::Zeros)?;
        let uzr = src.param(&format!("{name}.uzr"), hidden, 2 * hidden, Init::Xavier)?;
        let uh = src.param(&format!("{name}.uh"), hidden, hidden, Init::Xavier)?;
        Ok(Self { wx, bx, uzr, uh, hidden })
    }

    pub fn forward(&self, t: &mut Tape, x: Var, layout: &SeqLayout) -> Var {
        let h = self.hidden;
        let (wx, bx, uzr, uh) = (t.param(self.wx), t.param(self.bx), t.param(self.uzr), t.param(self.uh));
        let xw = t.matmul(x, wx);
        let xp = t.add_row(xw, bx);

        // Longest utterances first so the active set at each step is a prefix.
        let mut order: Vec<usize> = (0..layout.num_seqs()).collect();
        order.sort_by(|&a, &b| layout.lengths()[b].cmp(&layout.lengths()[a]));
        let mut rank = vec![0; order.len()];
        for (k, &b) in order.iter().enumerate() {
            rank[b] = k;
        }

        let mut steps = Vec::with_capacity(layout.max_len());
        let mut step_start = Vec::with_capacity(layout.max_len());
        let mut produced = 0;
        let mut state: Option<Var> = None;
        for step in 0..layout.max_len() {
            let active = order.iter().take_while(|&&b| layout.lengths()[b] > step).count();
            let rows: Vec<usize> = order[..active].iter().map(|&b| layout.row(b, step)).collect();
            let xs = t.select_rows(xp, &rows);
            let next = match state {
                None => {
                    let xz = t.slice_cols(xs, 0, h);
                    let xh = t.slice_cols(xs, 2 * h, h);
                    let z = t.sigmoid(xz);
                    let cand = t.tanh(xh);
                    t.mul(z, cand)
                }
                Some(prev) => {
                    let prev = if t.value(prev).rows() > active {
                        let keep: Vec<usize> = (0..active).collect();
                        t.select_rows(prev, &keep)
                    } else {
                        prev
                    };
                    let rec = t.matmul(prev, uzr);
                    let xzr = t.slice_cols(xs, 0, 2 * h);
                    let zr = t.add(xzr, rec);
                    let zpre = t.slice_cols(zr, 0, h);
                    let rpre = t.slice_cols(zr, h, h);
                    let z = t.sigmoid(zpre);
                    let r = t.sigmoid(rpre);
                    let rh = t.mul(r, prev);
                    let rhu = t.matmul(rh, uh);
                    let xh = t.slice_cols(xs, 2 * h, h);
                    let pre = t.add(xh, rhu);
                    let cand = t.tanh(pre);
                    let diff = t.sub(cand, prev);
                    let upd = t.mul(z, diff);
                    t.add(prev, upd)
                }
            };
            step_start.push(produced);
            produced += active;
            steps.push(next);
            state = Some(next);
        }
        if steps.is_empty() {
            return t.constant(RealMatrix::zeros(0, h));
        }
        let stacked = t.concat_rows(steps);
        let mut back = Vec::with_capacity(layout.total());
        for (b, &len) in layout.lengths().iter().enumerate() {
            for step in 0..len {
                back.push(step_start[step] + rank[b]);
            }
        }
        t.select_rows(stacked, &back)
    }
}

/// Applies `f` to every utterance reversed in time, then restores the
/// original order on the output rows.
pub fn reversed<F>(t: &mut Tape, x: Var, layout: &SeqLayout, f: F) -> Var
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let rev = layout.reverse_index();
    let xr = t.select_rows(x, &rev);
    let yr = f(t, xr);
    t.select_rows(yr, &rev)
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(src: &mut dyn ParamSource, name: &str, dim: usize) -> Result<Self> {
        let gain = src.param(&format!("{name}.gain"), 1, dim, Init::Ones)?;
        let bias = src.param(&format!("{name}.bias"), 1, dim, Init::Zeros)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (g, b) = (t.param(self.gain), t.param(self.bias));
        t.layer_norm(x, g, b)
    }
}

pub const ATTENTION_HEADS: usize = 4;
pub const FFN_RATIO: usize = 4;

/// Pre-norm self-attention block with a ReLU feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub ln1: LayerNormParams,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub hidden: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttentionBlock {
    pub fn new(src: &mut dyn ParamSource, name: &str, hidden: usize, causal: bool) -> Result<Self> {
        let heads = if hidden.is_multiple_of(ATTENTION_HEADS) { ATTENTION_HEADS } else { 1 };
        Ok(Self {
            ln1: LayerNormParams::new(src, &format!("{name}.ln1"), hidden)?,
            qkv: Linear::new(src, &format!("{name}.qkv"), hidden, 3 * hidden)?,
            out: Linear::new(src, &format!("{name}.out"), hidden, hidden)?,
            ln2: LayerNormParams::new(src, &format!("{name}.ln2"), hidden)?,
            ff1: Linear::new(src, &format!("{name}.ff1"), hidden, FFN_RATIO * hidden)?,
            ff2: Linear::new(src, &format!("{name}.ff2"), FFN_RATIO * hidden, hidden)?,
            hidden,
            heads,
            causal,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: Var, layout: &SeqLayout) -> Var {
        let h = self.hidden;
        let dh = h / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let a = self.ln1.forward(t, x);
        let qkv = self.qkv.forward(t, a);
        let mut per_utt = Vec::with_capacity(layout.num_seqs());
        for (b, &len) in layout.lengths().iter().enumerate() {
            let rows: Vec<usize> = (0..len).map(|s| layout.row(b, s)).collect();
            let u = t.select_rows(qkv, &rows);
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let q = t.slice_cols(u, hd * dh, dh);
                let k = t.slice_cols(u, h + hd * dh, dh);
                let v = t.slice_cols(u, 2 * h + hd * dh, dh);
                let s = t.matmul_nt(q, k);
                let s = t.scale(s, inv);
                let p = t.softmax(s, self.causal);
                heads.push(t.matmul(p, v));
            }
            per_utt.push(t.concat_cols(heads));
        }
        let attn = t.concat_rows(per_utt);
        let o = self.out.forward(t, attn);
        let x = t.add(x, o);
        let b = self.ln2.forward(t, x);
        let f = self.ff1.forward(t, b);
        let f = t.relu(f);
        let f = self.ff2.forward(t, f);
        t.add(x, f)
    }
}

/// Sinusoidal encoding of each row's position inside its utterance.
pub fn positional_encoding(layout: &SeqLayout, dim: usize) -> RealMatrix {
    let pos = layout.positions();
    RealMatrix::from_fn(pos.len(), dim, |r, j| {
        let i = (j / 2) as f64;
        let angle = pos[r] as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub const CONV_KERNEL: usize = 3;

/// Kernel-3, stride-1 1-D convolution followed by ReLU. Edge frames are
/// repeated as padding so the length is kept and utterance boundaries do
/// not inject a position signal; the causal form reads only `t-2..=t`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub lin: Linear,
    pub causal: bool,
}

impl ConvLayer {
    pub fn new(src: &mut dyn ParamSource, name: &str, input: usize, output: usize, causal: bool) -> Result<Self> {
        Ok(Self { lin: Linear::new(src, name, CONV_KERNEL * input, output)?, causal })
    }

    pub fn forward(&self, t: &mut Tape, x: Var, layout: &SeqLayout) -> Var {
        let shifts: [isize; CONV_KERNEL] = if self.causal { [2, 1, 0] } else { [1, 0, -1] };
        let taps: Vec<Var> =
            shifts.iter().map(|&s| if s == 0 { x } else { t.gather(x, layout.clamped_index(s)) }).collect();
        let cols = t.concat_cols(taps);
        let y = self.lin.forward(t, cols);
        t.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Initializer, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> RealMatrix {
        RealMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn layout_indices() {
        let l = SeqLayout::new(vec![2, 3]);
        assert_eq!(l.offsets(), &[0, 2]);
        assert_eq!(l.reverse_index(), vec![1, 0, 4, 3, 2]);
        assert_eq!(l.shifted_index(1), vec![None, Some(0), None, Some(2), Some(3)]);
        assert_eq!(l.shifted_index(-1), vec![Some(1), None, Some(3), Some(4), None]);
        assert_eq!(l.clamped_index(2), vec![Some(0), Some(0), Some(2), Some(2), Some(2)]);
        assert_eq!(l.clamped_index(-1), vec![Some(1), Some(1), Some(3), Some(4), Some(4)]);
        assert_eq!(l.positions(), vec![0, 1, 0, 1, 2]);
    }

    #[test]
    fn gru_matches_stepwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let g = GruLayer::new(&mut Initializer { store: &mut store, rng: &mut rng }, "g", 3, 2).unwrap();
        let bx = RealMatrix::from_fn(1, 6, |_, j| 0.1 * j as f64 - 0.2);
        *store.get_mut(g.bx) = bx;
        let layout = SeqLayout::new(vec![2, 4, 1]);
        let x = random(layout.total(), 3, &mut rng);
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let y = g.forward(&mut t, xv, &layout);
        let out = t.value(y).clone();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (wx, bx, uzr, uh) = (store.get(g.wx), store.get(g.bx), store.get(g.uzr), store.get(g.uh));
        for (b, &len) in layout.lengths().iter().enumerate() {
            let mut hs = [0.0f64; 2];
            for s in 0..len {
                let xr = x.row(layout.row(b, s));
                let proj: Vec<f64> =
                    (0..6).map(|j| (0..3).map(|i| xr[i] * wx[(i, j)]).sum::<f64>() + bx[(0, j)]).collect();
                let rec: Vec<f64> = (0..4).map(|j| (0..2).map(|i| hs[i] * uzr[(i, j)]).sum()).collect();
                let z: Vec<f64> = (0..2).map(|j| sig(proj[j] + rec[j])).collect();
                let r: Vec<f64> = (0..2).map(|j| sig(proj[2 + j] + rec[2 + j])).collect();
                let rh = [r[0] * hs[0], r[1] * hs[1]];
                let cand: Vec<f64> =
                    (0..2).map(|j| (proj[4 + j] + rh[0] * uh[(0, j)] + rh[1] * uh[(1, j)]).tanh()).collect();
                for j in 0..2 {
                    hs[j] = (1.0 - z[j]) * hs[j] + z[j] * cand[j];
                }
                for j in 0..2 {
                    assert!((out[(layout.row(b, s), j)] - hs[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_conv_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = ConvLayer::new(&mut Initializer { store: &mut store, rng: &mut rng }, "c", 2, 3, true).unwrap();
        let layout = SeqLayout::new(vec![5]);
        let x = random(5, 2, &mut rng);
        let run = |x: RealMatrix| {
            let mut t = Tape::new(&store);
            let v = t.constant(x);
            let y = c.forward(&mut t, v, &layout);
            t.value(y).clone()
        };
        let a = run(x.clone());
        let mut x2 = x.clone();
        x2[(3, 0)] += 1.0;
        let b = run(x2);
        assert_eq!(a.slice_rows(0, 3), b.slice_rows(0, 3));
    }

    #[test]
    fn positional_encoding_restarts_per_utterance() {
        let l = SeqLayout::new(vec![2, 2]);
        let pe = positional_encoding(&l, 4);
        assert_eq!(pe.row(0), pe.row(2));
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    }
}

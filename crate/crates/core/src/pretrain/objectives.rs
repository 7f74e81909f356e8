//! Loss terms for the three pre-training objectives, expressed on packed
//! batches (see [`SeqLayout`]).

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::SeqLayout;
use crate::nn::tape::{Tape, Var};
use crate::numkernel::RealMatrix;

/// Where contrastive negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    /// Frames of the other utterances in the batch.
    MixedSpk,
    /// Other frames of the utterance holding the positive.
    WithinSpk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "lowercase")]
pub enum ObjectiveConfig {
    Apc { shift: usize },
    Mpc { span: usize, fraction: f64 },
    Cpc { horizon: usize, negatives: usize, proposal: Proposal },
}

pub const APC_SHIFT: usize = 3;
pub const MPC_SPAN: usize = 7;
pub const MPC_FRACTION: f64 = 0.15;
pub const CPC_HORIZON: usize = 3;
pub const CPC_NEGATIVES: usize = 10;

impl ObjectiveConfig {
    pub fn apc() -> Self {
        ObjectiveConfig::Apc { shift: APC_SHIFT }
    }

    pub fn mpc() -> Self {
        ObjectiveConfig::Mpc { span: MPC_SPAN, fraction: MPC_FRACTION }
    }

    pub fn cpc(proposal: Proposal) -> Self {
        ObjectiveConfig::Cpc { horizon: CPC_HORIZON, negatives: CPC_NEGATIVES, proposal }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ObjectiveConfig::Apc { shift } if shift == 0 => Err(Error::Config("APC shift must be positive".into())),
            ObjectiveConfig::Mpc { span, fraction } if span == 0 || !(fraction > 0.0 && fraction <= 1.0) => {
                Err(Error::Config(format!("MPC span {span} / fraction {fraction} out of range")))
            }
            ObjectiveConfig::Cpc { horizon, negatives, .. } if horizon == 0 || negatives == 0 => {
                Err(Error::Config("CPC horizon and negative count must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Mean absolute error between `predictions[t]` and `frames[t + shift]`
/// over every utterance longer than `shift`. Shorter ones are skipped.
pub fn apc_l1(t: &mut Tape, predictions: Var, frames: &RealMatrix, layout: &SeqLayout, shift: usize) -> Result<Var> {
    let mut pred_rows = Vec::new();
    let mut target_rows = Vec::new();
    for (b, &len) in layout.lengths().iter().enumerate() {
        if len <= shift {
            warn!("skipping utterance {b} of length {len}: not longer than APC shift {shift}");
            continue;
        }
        for s in 0..len - shift {
            pred_rows.push(layout.row(b, s));
            target_rows.push(layout.row(b, s + shift));
        }
    }
    if pred_rows.is_empty() {
        return Err(Error::Degenerate(format!("no utterance in the batch is longer than the APC shift {shift}")));
    }
    let p = t.select_rows(predictions, &pred_rows);
    Ok(t.l1_loss(p, frames.select_rows(&target_rows)))
}

/// Span mask over packed rows: per utterance `max(1, round(fraction·T/span))`
/// spans of width `min(span, T)` with uniformly drawn starts.
pub fn mpc_mask(layout: &SeqLayout, span: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; layout.total()];
    for (b, &len) in layout.lengths().iter().enumerate() {
        if len == 0 {
            continue;
        }
        let width = span.min(len);
        let count = ((fraction * len as f64 / span as f64).round() as usize).max(1);
        for _ in 0..count {
            let start = rng.random_range(0..=len - width);
            for s in start..start + width {
                mask[layout.row(b, s)] = true;
            }
        }
    }
    mask
}

/// Frames with masked rows replaced by zeros.
pub fn apply_mask(frames: &RealMatrix, mask: &[bool]) -> RealMatrix {
    let mut out = frames.clone();
    for (r, &m) in mask.iter().enumerate() {
        if m {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

/// Mean L1 between predictions and targets restricted to masked rows.
pub fn mpc_loss_with_targets(t: &mut Tape, predictions: Var, targets: &RealMatrix, mask: &[bool]) -> Result<Var> {
    let rows: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(r, _)| r).collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("MPC mask selects no frames".into()));
    }
    let p = t.select_rows(predictions, &rows);
    Ok(t.l1_loss(p, targets.select_rows(&rows)))
}

/// InfoNCE over every anchor `t` and step `k ∈ 1..=K` with the bilinear
/// score `z_j · (c_t W_k)`. `heads[k-1]` holds `W_k`. Negatives are drawn
/// with replacement from `rng` according to `proposal`.
pub fn cpc_info_nce(
    t: &mut Tape,
    z: Var,
    c: Var,
    heads: &[Var],
    layout: &SeqLayout,
    negatives: usize,
    proposal: Proposal,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let horizon = heads.len();
    let group = negatives + 1;
    if proposal == Proposal::MixedSpk && layout.num_seqs() < 2 {
        return Err(Error::ProposalUnsatisfiable(
            "mixed-speaker negatives need at least two utterances in the batch".into(),
        ));
    }
    let usable: Vec<bool> = layout
        .lengths()
        .iter()
        .enumerate()
        .map(|(b, &len)| match proposal {
            Proposal::WithinSpk if len < negatives + horizon + 1 => {
                warn!(
                    "skipping utterance {b} of length {len}: within-utterance proposal needs {}",
                    negatives + horizon + 1
                );
                false
            }
            _ => true,
        })
        .collect();

    let mut score_parts = Vec::with_capacity(horizon);
    for (k0, &w) in heads.iter().enumerate() {
        let k = k0 + 1;
        let mut anchors = Vec::new();
        let mut candidates = Vec::new();
        for (b, &len) in layout.lengths().iter().enumerate() {
            if !usable[b] || len <= k {
                continue;
            }
            for s in 0..len - k {
                anchors.push(layout.row(b, s));
                let pos = s + k;
                candidates.push(layout.row(b, pos));
                for _ in 0..negatives {
                    let j = match proposal {
                        Proposal::WithinSpk => {
                            let j = rng.random_range(0..len - 1);
                            layout.row(b, if j >= pos { j + 1 } else { j })
                        }
                        Proposal::MixedSpk => {
                            let j = rng.random_range(0..layout.total() - len);
                            let start = layout.offsets()[b];
                            if j >= start {
                                j + len
                            } else {
                                j
                            }
                        }
                    };
                    candidates.push(j);
                }
            }
        }
        if anchors.is_empty() {
            continue;
        }
        let ctx = t.select_rows(c, &anchors);
        let proj = t.matmul(ctx, w);
        let repeated: Vec<usize> = (0..anchors.len()).flat_map(|i| std::iter::repeat_n(i, group)).collect();
        let proj = t.select_rows(proj, &repeated);
        let cand = t.select_rows(z, &candidates);
        score_parts.push(t.row_dot(cand, proj));
    }
    if score_parts.is_empty() {
        return Err(Error::Degenerate("no CPC prediction terms in the batch".into()));
    }
    let scores = t.concat_rows(score_parts);
    Ok(t.info_nce(scores, group))
}

//! Representation similarity: seeded frame pooling, linear CKA, SVCCA and
//! model-by-model heatmaps.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{center_columns, gemm, inv_sqrt_psd, svd, RealMatrix};

pub const DEFAULT_MAX_FRAMES: usize = 20_000;
pub const DEFAULT_VARIANCE_KEEP: f64 = 0.99;
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Lincka,
    Svcca,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Lincka => "lincka",
            Measure::Svcca => "svcca",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lincka" => Ok(Measure::Lincka),
            "svcca" => Ok(Measure::Svcca),
            other => Err(Error::Config(format!("unknown similarity measure {other:?} (expected lincka or svcca)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub checkpoint: String,
    pub manifest_id: String,
    pub pooling_seed: u64,
}

/// Pooled frames of one model, `n × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMatrix {
    pub data: RealMatrix,
    pub provenance: Provenance,
}

impl RepresentationMatrix {
    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn d(&self) -> usize {
        self.data.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub measure: Measure,
}

/// Frame positions kept when pooling a corpus of `total` frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolingPlan {
    pub total: usize,
    /// Ascending positions into the concatenation of all utterances.
    pub indices: Vec<usize>,
}

impl PoolingPlan {
    /// Keeps every frame when `total ≤ max_frames`, otherwise a uniform
    /// sample of `max_frames` positions without replacement.
    pub fn new(total: usize, max_frames: usize, seed: u64) -> Result<Self> {
        if total == 0 {
            return Err(Error::Degenerate("no frames to pool".into()));
        }
        if max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        let indices = if total <= max_frames {
            (0..total).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, total, max_frames).into_vec();
            idx.sort_unstable();
            idx
        };
        Ok(Self { total, indices })
    }

    pub fn apply(&self, mats: &[&RealMatrix]) -> Result<RealMatrix> {
        let total: usize = mats.iter().map(|m| m.rows()).sum();
        if total != self.total {
            return Err(Error::Alignment(format!("plan covers {} frames, input has {total}", self.total)));
        }
        let d = mats.first().map_or(0, |m| m.cols());
        if mats.iter().any(|m| m.cols() != d) {
            return Err(Error::Shape("utterance representations differ in width".into()));
        }
        let mut starts = Vec::with_capacity(mats.len());
        let mut acc = 0;
        for m in mats {
            starts.push(acc);
            acc += m.rows();
        }
        let mut data = Vec::with_capacity(self.indices.len() * d);
        let mut u = 0;
        for &i in &self.indices {
            while i >= starts[u] + mats[u].rows() {
                u += 1;
            }
            data.extend_from_slice(mats[u].row(i - starts[u]));
        }
        Ok(RealMatrix::from_vec(self.indices.len(), d, data))
    }
}

/// Concatenates per-utterance representations in the given order and
/// subsamples with `provenance.pooling_seed`.
pub fn pool_frames(mats: &[&RealMatrix], max_frames: usize, provenance: Provenance) -> Result<RepresentationMatrix> {
    let total: usize = mats.iter().map(|m| m.rows()).sum();
    let plan = PoolingPlan::new(total, max_frames, provenance.pooling_seed)?;
    let data = plan.apply(mats)?;
    if data.rows() < 2 {
        return Err(Error::Degenerate("at least two frames are needed".into()));
    }
    Ok(RepresentationMatrix { data, provenance })
}

fn check_aligned(x: &RepresentationMatrix, y: &RepresentationMatrix) -> Result<()> {
    if x.n() != y.n() {
        return Err(Error::Alignment(format!("{} rows vs {} rows", x.n(), y.n())));
    }
    let (p, q) = (&x.provenance, &y.provenance);
    if p.manifest_id != q.manifest_id || p.pooling_seed != q.pooling_seed {
        return Err(Error::Alignment(format!(
            "pooled from different frames: ({}, seed {}) vs ({}, seed {})",
            p.manifest_id, p.pooling_seed, q.manifest_id, q.pooling_seed
        )));
    }
    if x.n() < 2 {
        return Err(Error::Degenerate("at least two frames are needed".into()));
    }
    Ok(())
}

/// Linear CKA of already aligned matrices.
pub fn lincka_matrices(x: &RealMatrix, y: &RealMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Alignment(format!("{} rows vs {} rows", x.rows(), y.rows())));
    }
    let (xc, yc) = (center_columns(x)?, center_columns(y)?);
    let mut xx = RealMatrix::zeros(x.cols(), x.cols());
    gemm(1.0, &xc, true, &xc, false, 0.0, &mut xx);
    let mut yy = RealMatrix::zeros(y.cols(), y.cols());
    gemm(1.0, &yc, true, &yc, false, 0.0, &mut yy);
    let mut yx = RealMatrix::zeros(y.cols(), x.cols());
    gemm(1.0, &yc, true, &xc, false, 0.0, &mut yx);
    let (nx, ny) = (xx.frobenius_norm(), yy.frobenius_norm());
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("representation has zero variance".into()));
    }
    let cross = yx.frobenius_norm();
    Ok(cross * cross / (nx * ny))
}

pub fn lincka(x: &RepresentationMatrix, y: &RepresentationMatrix) -> Result<SimilarityScore> {
    check_aligned(x, y)?;
    Ok(SimilarityScore { value: lincka_matrices(&x.data, &y.data)?, measure: Measure::Lincka })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvccaParams {
    pub variance_keep: f64,
    /// Added to the diagonal of each covariance block, relative to the
    /// smallest kept variance.
    pub ridge: f64,
}

impl Default for SvccaParams {
    fn default() -> Self {
        Self { variance_keep: DEFAULT_VARIANCE_KEEP, ridge: DEFAULT_RIDGE }
    }
}

/// Centered data projected onto its leading singular directions, `U_k·S_k`.
fn reduce(x: &RealMatrix, keep: f64) -> Result<RealMatrix> {
    let xc = center_columns(x)?;
    let dec = svd(&xc)?;
    let energy: Vec<f64> = dec.s.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("representation has zero variance".into()));
    }
    let floor = dec.s[0] * 1e-10;
    let mut acc = 0.0;
    let mut k = 0;
    for (e, s) in energy.iter().zip(&dec.s) {
        if acc / total >= keep - 1e-12 || *s <= floor {
            break;
        }
        acc += e;
        k += 1;
    }
    if k == 0 {
        return Err(Error::Degenerate("no singular directions kept".into()));
    }
    Ok(RealMatrix::from_fn(xc.rows(), k, |i, j| dec.u[(i, j)] * dec.s[j]))
}

fn covariance(a: &RealMatrix, b: &RealMatrix) -> RealMatrix {
    let mut c = RealMatrix::zeros(a.cols(), b.cols());
    gemm(1.0 / (a.rows() - 1) as f64, a, true, b, false, 0.0, &mut c);
    c
}

/// The reduced views have diagonal covariance, so the smallest diagonal
/// entry is the smallest eigenvalue.
fn ridge_for(cov: &RealMatrix, ridge: f64) -> f64 {
    ridge * (0..cov.rows()).map(|i| cov[(i, i)]).fold(f64::INFINITY, f64::min)
}

/// Canonical correlations between the SVD-reduced views, descending, each
/// clamped to `[0, 1]`; `min(k_x, k_y)` values.
pub fn svcca_correlations(x: &RealMatrix, y: &RealMatrix, params: SvccaParams) -> Result<Vec<f64>> {
    if x.rows() != y.rows() {
        return Err(Error::Alignment(format!("{} rows vs {} rows", x.rows(), y.rows())));
    }
    if !(params.variance_keep > 0.0 && params.variance_keep <= 1.0) {
        return Err(Error::Config(format!("variance_keep {} outside (0, 1]", params.variance_keep)));
    }
    let (xr, yr) = (reduce(x, params.variance_keep)?, reduce(y, params.variance_keep)?);
    if x.rows() <= xr.cols().max(yr.cols()) {
        return Err(Error::Degenerate(format!("{} frames do not exceed the kept dimensions", x.rows())));
    }
    let sxx = covariance(&xr, &xr);
    let syy = covariance(&yr, &yr);
    let sxy = covariance(&xr, &yr);
    let wx = inv_sqrt_psd(&sxx, ridge_for(&sxx, params.ridge))?;
    let wy = inv_sqrt_psd(&syy, ridge_for(&syy, params.ridge))?;
    let m = wx.matmul(&sxy).matmul(&wy);
    let mut rho = svd(&m)?.s;
    for r in &mut rho {
        *r = r.clamp(0.0, 1.0);
    }
    Ok(rho)
}

pub fn svcca(x: &RepresentationMatrix, y: &RepresentationMatrix, params: SvccaParams) -> Result<SimilarityScore> {
    check_aligned(x, y)?;
    let rho = svcca_correlations(&x.data, &y.data, params)?;
    Ok(SimilarityScore { value: rho.iter().sum::<f64>() / rho.len() as f64, measure: Measure::Svcca })
}

pub fn similarity(
    x: &RepresentationMatrix,
    y: &RepresentationMatrix,
    measure: Measure,
    params: SvccaParams,
) -> Result<SimilarityScore> {
    match measure {
        Measure::Lincka => lincka(x, y),
        Measure::Svcca => svcca(x, y, params),
    }
}

/// Symmetric model-by-model similarity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub models: Vec<String>,
    pub values: RealMatrix,
    pub measure: Measure,
    pub manifest_id: String,
    pub pooling_seed: u64,
}

impl Heatmap {
    pub fn new(
        models: Vec<String>,
        values: RealMatrix,
        measure: Measure,
        manifest_id: String,
        pooling_seed: u64,
    ) -> Result<Self> {
        let n = models.len();
        if values.shape() != (n, n) {
            return Err(Error::Shape(format!("{n} models but a {:?} table", values.shape())));
        }
        for i in 0..n {
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!("heatmap not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { models, values, measure, manifest_id, pooling_seed })
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.models.iter().position(|m| m == a)?;
        let j = self.models.iter().position(|m| m == b)?;
        Some(self.values[(i, j)])
    }

    /// Reorders rows and columns; `order[k]` is the old index of new row `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.models.len();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidInput("not a permutation of the heatmap rows".into()));
        }
        Ok(Self {
            models: order.iter().map(|&i| self.models[i].clone()).collect(),
            values: RealMatrix::from_fn(n, n, |i, j| self.values[(order[i], order[j])]),
            ..self.clone()
        })
    }

    /// Header row and column of model names, cells to 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for m in &self.models {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for (i, m) in self.models.iter().enumerate() {
            s.push_str(m);
            for j in 0..self.models.len() {
                s.push_str(&format!(",{:.6}", self.values[(i, j)]));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<Vec<f64>> = (0..self.models.len()).map(|i| self.values.row(i).to_vec()).collect();
        let v = serde_json::json!({
            "measure": self.measure,
            "models": self.models,
            "values": rows,
            "manifest_id": self.manifest_id,
            "pooling_seed": self.pooling_seed,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Computes every unordered pair once (in parallel) and sets the diagonal
/// to exactly 1.
pub fn build_heatmap(reps: &[RepresentationMatrix], measure: Measure, params: SvccaParams) -> Result<Heatmap> {
    let first = reps.first().ok_or_else(|| Error::Degenerate("no representations".into()))?;
    for r in &reps[1..] {
        check_aligned(first, r)?;
    }
    let n = reps.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let scores = pairs
        .par_iter()
        .map(|&(i, j)| similarity(&reps[i], &reps[j], measure, params).map(|s| s.value))
        .collect::<Result<Vec<f64>>>()?;
    let mut values = RealMatrix::identity(n);
    for (&(i, j), v) in pairs.iter().zip(scores) {
        values[(i, j)] = v;
        values[(j, i)] = v;
    }
    let models = reps.iter().map(|r| r.provenance.model.clone()).collect();
    Heatmap::new(models, values, measure, first.provenance.manifest_id.clone(), first.provenance.pooling_seed)
}

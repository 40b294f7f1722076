//! Activation maxima, pair energies, FC1–FC2 alignment, the direction-zeroing
//! intervention and surrogate agreement.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::model::{ActivationTrace, BlockMaxima, ObsPoint, TraceMode, TransformerModel};
use crate::pairs::{canonical_matrices, energy_of, enumerate_pairs, pair_energy, write_back, MatrixPair, PairKind, PairSet};
use crate::model::{BlockParam, ParamId};

const SLICE: usize = 512;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MaxActReport {
    pub module_max: f64,
    pub block_max: f64,
    pub embed_max: f64,
    pub per_block: Vec<BlockMaxima>,
}

impl MaxActReport {
    pub fn from_trace(trace: &ActivationTrace) -> Self {
        Self {
            module_max: trace.module_max(),
            block_max: trace.block_max(),
            embed_max: trace.embed_max,
            per_block: trace.blocks.clone(),
        }
    }
}

pub fn max_activation(model: &TransformerModel, dataset: &Dataset) -> Result<MaxActReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trace = ActivationTrace::default();
    for start in (0..dataset.len()).step_by(SLICE) {
        let idx: Vec<usize> = (start..(start + SLICE).min(dataset.len())).collect();
        trace.merge(model.forward(&dataset.select(&idx), TraceMode::Maxima)?.trace);
    }
    Ok(MaxActReport::from_trace(&trace))
}

/// Sum of normalized pair energies over a pair set.
pub fn total_pair_energy(model: &TransformerModel, set: PairSet) -> Result<f64> {
    enumerate_pairs(model, set)
        .iter()
        .map(|p| pair_energy(p, model, true))
        .sum()
}

#[derive(Clone, Debug)]
pub struct AlignmentEntry {
    /// `alpha[(i, j)] = |ŵ₂ⱼᵀ u_i|`, one row per left singular direction of `W₁`.
    pub alpha: Matrix,
    pub singular_values: Vec<f64>,
    pub max_alpha: Vec<f64>,
}

/// Alignment of every `W₂` row (unit-normalized) with every left singular
/// direction of `W₁`. Zero rows score 0.
pub fn alignment_scores(w1: &Matrix, w2: &Matrix) -> Result<AlignmentEntry> {
    if w2.cols() != w1.rows() {
        return Err(Error::shape("alignment_scores", w2.shape(), w1.shape()));
    }
    let s = svd(w1)?;
    let k = s.s.len();
    let mut alpha = Matrix::zeros(k, w2.rows());
    let norms: Vec<f64> = (0..w2.rows())
        .map(|j| w2.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for i in 0..k {
        let u = s.left(i);
        for j in 0..w2.rows() {
            if norms[j] > 0.0 {
                let ip: f64 = w2.row(j).iter().zip(&u).map(|(a, b)| a * b).sum();
                alpha[(i, j)] = (ip / norms[j]).abs();
            }
        }
    }
    let max_alpha = (0..k).map(|i| alpha.row(i).iter().cloned().fold(0.0, f64::max)).collect();
    Ok(AlignmentEntry { alpha, singular_values: s.s, max_alpha })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankScore {
    /// `max_j α_ij`.
    #[default]
    MaxAlpha,
    /// `Σ_j α_ij²`.
    SumSquares,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairFilter {
    /// `(W_F1, W_F2)` pairs only.
    #[default]
    Ffn,
    /// Every functional pair (adds `(W_V, W_O)`).
    Functional,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub k: usize,
    #[serde(default)]
    pub pairs: PairFilter,
    /// Restrict to these blocks; all blocks when `None`.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub score: RankScore,
}

#[derive(Clone, Debug, Serialize)]
pub struct RankedDirection {
    pub block: usize,
    pub pair: String,
    pub index: usize,
    pub score: f64,
    pub singular_value: f64,
    /// `s_i² ‖W₂ u_i‖²`: the unnormalized energy this direction carries.
    pub energy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairEnergyChange {
    pub pair: String,
    pub raw_before: f64,
    pub raw_after: f64,
    pub normalized_before: Option<f64>,
    pub normalized_after: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InterventionReport {
    pub removed: Vec<RankedDirection>,
    pub energies: Vec<PairEnergyChange>,
}

fn selected_pairs(model: &TransformerModel, cfg: &InterventionConfig) -> Vec<MatrixPair> {
    enumerate_pairs(model, PairSet::B)
        .into_iter()
        .filter(|p| p.kind == PairKind::Functional)
        .filter(|p| match cfg.pairs {
            PairFilter::Ffn => p.downstream == crate::pairs::Operand::Weight(ParamId::Block(p.block, BlockParam::Wf2)),
            PairFilter::Functional => true,
        })
        .filter(|p| cfg.blocks.as_ref().is_none_or(|b| b.contains(&p.block)))
        .collect()
}

/// Every direction of every selected pair, best first: score, then larger
/// singular value, then lower block.
pub fn rank_directions(model: &TransformerModel, cfg: &InterventionConfig) -> Result<Vec<RankedDirection>> {
    let mut out = Vec::new();
    for p in selected_pairs(model, cfg) {
        let (w1, w2) = canonical_matrices(&p, model);
        let a = alignment_scores(&w1, &w2)?;
        let s = svd(&w1)?;
        for i in 0..a.singular_values.len() {
            let score = match cfg.score {
                RankScore::MaxAlpha => a.max_alpha[i],
                RankScore::SumSquares => a.alpha.row(i).iter().map(|v| v * v).sum(),
            };
            let u = Matrix::from_vec(s.u.rows(), 1, s.left(i))?;
            let si = a.singular_values[i];
            out.push(RankedDirection {
                block: p.block,
                pair: p.id(),
                index: i,
                score,
                singular_value: si,
                energy: si * si * w2.matmul(&u)?.frobenius_norm_sq(),
            });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.singular_value.total_cmp(&a.singular_value))
            .then(a.block.cmp(&b.block))
            .then(a.pair.cmp(&b.pair))
            .then(a.index.cmp(&b.index))
    });
    Ok(out)
}

/// Zero the `k` best-aligned singular directions of the selected upstream
/// matrices, using each matrix's original SVD. Returns a modified copy.
pub fn zero_top_aligned_directions(
    model: &TransformerModel,
    cfg: &InterventionConfig,
) -> Result<(TransformerModel, InterventionReport)> {
    let ranked = rank_directions(model, cfg)?;
    if cfg.k == 0 || cfg.k > ranked.len() {
        return Err(Error::Invalid(format!(
            "k = {} but {} directions are available",
            cfg.k,
            ranked.len()
        )));
    }
    let removed: Vec<RankedDirection> = ranked.into_iter().take(cfg.k).collect();
    let mut out = model.clone();
    let mut energies = Vec::new();
    for p in selected_pairs(model, cfg) {
        let id = p.id();
        let idx: Vec<usize> = removed.iter().filter(|d| d.pair == id).map(|d| d.index).collect();
        if idx.is_empty() {
            continue;
        }
        let (w1, w2) = canonical_matrices(&p, model);
        let mut s = svd(&w1)?;
        for &i in &idx {
            s.s[i] = 0.0;
        }
        let w1_new = s.reconstruct();
        write_back(p.upstream, &mut out, &w1_new)?;
        energies.push(PairEnergyChange {
            raw_before: energy_of(&w1, &w2, false, &id)?,
            raw_after: energy_of(&w1_new, &w2, false, &id)?,
            normalized_before: energy_of(&w1, &w2, true, &id).ok(),
            normalized_after: energy_of(&w1_new, &w2, true, &id).ok(),
            pair: id,
        });
    }
    Ok((out, InterventionReport { removed, energies }))
}

#[derive(Clone, Debug, Serialize)]
pub struct SurrogateReport {
    pub block: usize,
    /// `None` when either output vector is constant.
    pub pearson_r: Option<f64>,
    pub undefined: bool,
    pub max_real: f64,
    pub max_surrogate: f64,
    /// Flattened `(real, surrogate)` values for plotting.
    #[serde(skip)]
    pub points: Vec<(f64, f64)>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.is_empty() || x.len() != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Real FFN branch vs its linear surrogate `x·W_F1·W_F2` on the LN2 outputs
/// of every probe token.
pub fn surrogate_agreement(model: &TransformerModel, block: usize, probe: &Dataset) -> Result<SurrogateReport> {
    if probe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if block >= model.config().depth {
        return Err(Error::Invalid(format!("block {block} out of range")));
    }
    let trace = model.forward(probe, TraceMode::Full)?.trace;
    let inputs = &trace.retained[&ObsPoint::Fc1(block)];
    let d = model.config().d_model;
    let mut real = Vec::with_capacity(inputs.len());
    let mut sur = Vec::with_capacity(inputs.len());
    for row in inputs.chunks_exact(d) {
        real.extend(model.ffn_branch(block, row)?);
        sur.extend(model.ffn_surrogate(block, row)?);
    }
    let r = pearson(&real, &sur);
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    Ok(SurrogateReport {
        block,
        pearson_r: r,
        undefined: r.is_none(),
        max_real: max_abs(&real),
        max_surrogate: max_abs(&sur),
        points: real.into_iter().zip(sur).collect(),
    })
}

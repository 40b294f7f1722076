//! Ordered (upstream, downstream) matrix pairs of each block, in column-vector
//! form: the composed map is `W₂ · W₁`.
//!
//! Weights are stored `(in, out)` for `y = x · W`, so the canonical form of a
//! stored weight is its transpose. All transposition lives here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BlockParam, LnWhich, ParamId, TransformerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Composable,
    Functional,
}

/// One side of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    /// `D_γ` of a block's LayerNorm.
    LnScale(usize, LnWhich),
    /// `[W_Q | W_K | W_V]` of a block as one matrix.
    Qkv(usize),
    Weight(ParamId),
}

impl Operand {
    /// Stored tensors this operand reads and writes.
    pub fn params(self) -> Vec<ParamId> {
        match self {
            Operand::LnScale(l, LnWhich::Ln1) => vec![ParamId::Block(l, BlockParam::Ln1Scale)],
            Operand::LnScale(l, LnWhich::Ln2) => vec![ParamId::Block(l, BlockParam::Ln2Scale)],
            Operand::Qkv(l) => vec![
                ParamId::Block(l, BlockParam::Wq),
                ParamId::Block(l, BlockParam::Wk),
                ParamId::Block(l, BlockParam::Wv),
            ],
            Operand::Weight(id) => vec![id],
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::LnScale(l, LnWhich::Ln1) => write!(f, "blocks.{l}.ln1.scale"),
            Operand::LnScale(l, LnWhich::Ln2) => write!(f, "blocks.{l}.ln2.scale"),
            Operand::Qkv(l) => write!(f, "blocks.{l}.attn.wqkv"),
            Operand::Weight(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecayTarget {
    Downstream,
    Upstream,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixPair {
    pub kind: PairKind,
    pub block: usize,
    pub upstream: Operand,
    pub downstream: Operand,
    pub decay_targets: Vec<DecayTarget>,
}

impl MatrixPair {
    pub fn id(&self) -> String {
        format!("{}->{}", self.upstream, self.downstream)
    }

    pub fn decays(&self, t: DecayTarget) -> bool {
        self.decay_targets.contains(&t)
    }

    /// Operands that receive a decoupled update.
    pub fn target_operands(&self) -> Vec<Operand> {
        self.decay_targets
            .iter()
            .map(|t| match t {
                DecayTarget::Downstream => self.downstream,
                DecayTarget::Upstream => self.upstream,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSet {
    /// Composable pairs, downstream decayed.
    #[serde(rename = "A")]
    A,
    /// Functional pairs, downstream decayed.
    #[serde(rename = "B")]
    B,
    /// Functional pairs, both matrices decayed.
    #[serde(rename = "C")]
    C,
    #[default]
    #[serde(rename = "A+B")]
    AB,
}

impl fmt::Display for PairSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairSet::A => "A",
            PairSet::B => "B",
            PairSet::C => "C",
            PairSet::AB => "A+B",
        })
    }
}

impl FromStr for PairSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(PairSet::A),
            "B" => Ok(PairSet::B),
            "C" => Ok(PairSet::C),
            "A+B" | "AB" => Ok(PairSet::AB),
            _ => Err(Error::Invalid(format!("unknown pair set {s:?}"))),
        }
    }
}

pub fn enumerate_pairs(model: &TransformerModel, set: PairSet) -> Vec<MatrixPair> {
    let composable = matches!(set, PairSet::A | PairSet::AB);
    let functional = !matches!(set, PairSet::A);
    let targets = if set == PairSet::C {
        vec![DecayTarget::Downstream, DecayTarget::Upstream]
    } else {
        vec![DecayTarget::Downstream]
    };
    let w = |l, p| Operand::Weight(ParamId::Block(l, p));
    let mut out = Vec::new();
    for l in 0..model.config().depth {
        let mut push = |kind, upstream, downstream| {
            out.push(MatrixPair {
                kind,
                block: l,
                upstream,
                downstream,
                decay_targets: targets.clone(),
            })
        };
        if composable {
            push(PairKind::Composable, Operand::LnScale(l, LnWhich::Ln1), Operand::Qkv(l));
            push(PairKind::Composable, Operand::LnScale(l, LnWhich::Ln2), w(l, BlockParam::Wf1));
        }
        if functional {
            push(PairKind::Functional, w(l, BlockParam::Wv), w(l, BlockParam::Wo));
            push(PairKind::Functional, w(l, BlockParam::Wf1), w(l, BlockParam::Wf2));
        }
    }
    out
}

/// Canonical column-vector form of one operand.
pub fn canonical(op: Operand, model: &TransformerModel) -> Matrix {
    match op {
        Operand::LnScale(l, which) => model
            .ln_scale_matrix(l, which)
            .expect("pair references an existing block"),
        Operand::Qkv(_) => {
            let parts: Vec<&Matrix> = op.params().into_iter().map(|id| model.param(id)).collect();
            let d = parts[0].rows();
            let mut out = Matrix::zeros(3 * d, d);
            for (k, m) in parts.iter().enumerate() {
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        out[(k * d + j, i)] = m[(i, j)];
                    }
                }
            }
            out
        }
        Operand::Weight(id) => model.param(id).transpose(),
    }
}

/// Store a canonical matrix back into the model (inverse of [`canonical`]).
/// For LN scales only the diagonal is written.
pub fn write_back(op: Operand, model: &mut TransformerModel, m: &Matrix) -> Result<()> {
    let expect = canonical_shape(op, model);
    if m.shape() != expect {
        return Err(Error::shape("write_back", m.shape(), expect));
    }
    match op {
        Operand::LnScale(..) => {
            let id = op.params()[0];
            for (j, v) in model.param_mut(id).data_mut().iter_mut().enumerate() {
                *v = m[(j, j)];
            }
        }
        Operand::Qkv(_) => {
            let d = m.cols();
            for (k, id) in op.params().into_iter().enumerate() {
                let t = model.param_mut(id);
                for i in 0..d {
                    for j in 0..d {
                        t[(i, j)] = m[(k * d + j, i)];
                    }
                }
            }
        }
        Operand::Weight(id) => *model.param_mut(id) = m.transpose(),
    }
    Ok(())
}

pub fn canonical_shape(op: Operand, model: &TransformerModel) -> (usize, usize) {
    let d = model.config().d_model;
    match op {
        Operand::LnScale(..) => (d, d),
        Operand::Qkv(_) => (3 * d, d),
        Operand::Weight(id) => {
            let (r, c) = id.shape(model.config());
            (c, r)
        }
    }
}

/// `(W₁, W₂)` in canonical form.
pub fn canonical_matrices(pair: &MatrixPair, model: &TransformerModel) -> (Matrix, Matrix) {
    (canonical(pair.upstream, model), canonical(pair.downstream, model))
}

/// `d_out(W₁) / ‖W₁‖²_F`: the squared factor that normalizes `W₁` to
/// `W̄₁ = W₁ · √d_out / ‖W₁‖_F`.
pub fn normalization_factor(w1: &Matrix, pair: &str) -> Result<f64> {
    let n2 = w1.frobenius_norm_sq();
    if n2 == 0.0 {
        return Err(Error::ZeroUpstream { pair: pair.to_string() });
    }
    Ok(w1.rows() as f64 / n2)
}

/// `‖W₂W₁‖²_F`, or `‖W₂W̄₁‖²_F` when `normalized`.
pub fn energy_of(w1: &Matrix, w2: &Matrix, normalized: bool, pair: &str) -> Result<f64> {
    let raw = w2.matmul(w1)?.frobenius_norm_sq();
    if normalized {
        Ok(normalization_factor(w1, pair)? * raw)
    } else {
        Ok(raw)
    }
}

pub fn pair_energy(pair: &MatrixPair, model: &TransformerModel, normalized: bool) -> Result<f64> {
    let (w1, w2) = canonical_matrices(pair, model);
    energy_of(&w1, &w2, normalized, &pair.id())
}

#[derive(Clone, Debug, Serialize)]
pub struct PairListing {
    pub id: String,
    pub kind: PairKind,
    pub block: usize,
    pub upstream: String,
    pub downstream: String,
    pub upstream_shape: [usize; 2],
    pub downstream_shape: [usize; 2],
    pub decay_targets: Vec<String>,
    pub energy: f64,
    pub normalized_energy: Option<f64>,
}

pub fn list_pairs(model: &TransformerModel, set: PairSet) -> Result<Vec<PairListing>> {
    enumerate_pairs(model, set)
        .iter()
        .map(|p| {
            let (w1, w2) = canonical_matrices(p, model);
            let id = p.id();
            Ok(PairListing {
                kind: p.kind,
                block: p.block,
                upstream: p.upstream.to_string(),
                downstream: p.downstream.to_string(),
                upstream_shape: [w1.rows(), w1.cols()],
                downstream_shape: [w2.rows(), w2.cols()],
                decay_targets: p
                    .decay_targets
                    .iter()
                    .map(|t| format!("{t:?}").to_lowercase())
                    .collect(),
                energy: energy_of(&w1, &w2, false, &id)?,
                normalized_energy: energy_of(&w1, &w2, true, &id).ok(),
                id,
            })
        })
        .collect()
}

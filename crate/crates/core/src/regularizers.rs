//! Colinearity decay (decoupled update and loss form), the TWEO activation
//! penalty, and the weight-decay budget split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram_right, right_gram_product, Matrix};
use crate::model::{
    ActivationPenalty, ActivationTrace, BlockParam, GradientSet, LnWhich, ParamId, TransformerModel,
};
use crate::pairs::{
    canonical_matrices, energy_of, normalization_factor, write_back, DecayTarget,
    MatrixPair, Operand, PairSet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdConfig {
    pub lambda_cd: f64,
    #[serde(default = "default_true")]
    pub normalized: bool,
    #[serde(default)]
    pub pair_set: PairSet,
    /// Per-operand strengths keyed by operand name (e.g. `blocks.0.ffn.w2`).
    #[serde(default)]
    pub per_matrix_overrides: BTreeMap<String, f64>,
}

fn default_true() -> bool {
    true
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            lambda_cd: 0.005,
            normalized: true,
            pair_set: PairSet::AB,
            per_matrix_overrides: BTreeMap::new(),
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cd >= 0.0) || !self.lambda_cd.is_finite() {
            return Err(Error::Invalid(format!("lambda_cd must be >= 0, got {}", self.lambda_cd)));
        }
        for (k, v) in &self.per_matrix_overrides {
            if !(*v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("override for {k} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lambda_for(&self, op: Operand) -> f64 {
        self.per_matrix_overrides
            .get(&op.to_string())
            .copied()
            .unwrap_or(self.lambda_cd)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base weight to 0 over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TweoConfig {
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub lambda_schedule: LambdaSchedule,
    #[serde(default)]
    pub rescale_to_task_loss: bool,
}

fn default_tau() -> f64 {
    3.0
}
fn default_p() -> u32 {
    4
}
fn default_epsilon() -> f64 {
    1e-6
}

impl Default for TweoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            tau: default_tau(),
            p: default_p(),
            epsilon: default_epsilon(),
            lambda_schedule: LambdaSchedule::Constant,
            rescale_to_task_loss: false,
        }
    }
}

impl TweoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.p < 1 || !(self.epsilon >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Invalid(
                "tweo needs tau > 0, p >= 1, epsilon >= 0, lambda >= 0".into(),
            ));
        }
        Ok(())
    }

    /// `λ(t)` for 1-indexed `step` of `total`.
    pub fn weight_at(&self, step: u64, total: u64) -> f64 {
        match self.lambda_schedule {
            LambdaSchedule::Constant => self.lambda,
            LambdaSchedule::Cosine => {
                let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
                0.5 * self.lambda * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// `∂‖W₂W₁‖²_F / ∂W₂ = 2 W₂ W₁ W₁ᵀ`.
pub fn cd_gradient_w2(w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    Ok(right_gram_product(w2, w1)?.scale(2.0))
}

/// `∂‖W₂W₁‖²_F / ∂W₁ = 2 W₂ᵀ W₂ W₁`.
pub fn cd_gradient_w1(w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    Ok(w2.t_matmul(&w2.matmul(w1)?)?.scale(2.0))
}

/// Gradient for one downstream row, `2 w₂ⱼᵀ U S² Uᵀ`, via the SVD of `W₁`.
pub fn cd_row_gradient(w1: &Matrix, w2_row: &[f64]) -> Result<Vec<f64>> {
    if w2_row.len() != w1.rows() {
        return Err(Error::shape("cd_row_gradient", (1, w2_row.len()), w1.shape()));
    }
    let svd = crate::linalg::svd(w1)?;
    let mut out = vec![0.0; w2_row.len()];
    for i in 0..svd.rank {
        let u = svd.left(i);
        let c: f64 = w2_row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() * svd.s[i] * svd.s[i];
        for (o, ui) in out.iter_mut().zip(&u) {
            *o += 2.0 * c * ui;
        }
    }
    Ok(out)
}

/// Applied downstream direction `(d_out(W₁)/‖W₁‖²_F) · W₂W₁W₁ᵀ`; the factor 2
/// of the gradient is folded into `λ_cd`.
pub fn normalized_cd_direction(w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    let f = normalization_factor(w1, "normalized_cd_direction")?;
    Ok(right_gram_product(w2, w1)?.scale(f))
}

/// Upstream counterpart `(d_out(W₁)/‖W₁‖²_F) · W₂ᵀW₂W₁`.
pub fn normalized_cd_direction_w1(w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    let f = normalization_factor(w1, "normalized_cd_direction_w1")?;
    Ok(w2.t_matmul(&w2.matmul(w1)?)?.scale(f))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairUpdate {
    pub pair: String,
    pub target: String,
    pub direction_norm: f64,
    pub energy_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateReport {
    pub updates: Vec<PairUpdate>,
}

impl UpdateReport {
    pub fn total_energy_after(&self) -> f64 {
        let mut seen = std::collections::HashSet::new();
        self.updates
            .iter()
            .filter(|u| seen.insert(u.pair.clone()))
            .map(|u| u.energy_after)
            .sum()
    }
}

/// Decoupled update `W ← W − ηλ·direction` for every decay target. All
/// directions are computed from the values at entry, then applied.
pub fn apply_cd_update(
    model: &mut TransformerModel,
    pairs: &[MatrixPair],
    eta: f64,
    cfg: &CdConfig,
) -> Result<UpdateReport> {
    let mut pending: Vec<(usize, Operand, Matrix, f64)> = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        let targets = pair.target_operands();
        if targets.iter().all(|&op| cfg.lambda_for(op) == 0.0) {
            continue;
        }
        let id = pair.id();
        let (w1, w2) = canonical_matrices(pair, model);
        let f = if cfg.normalized { normalization_factor(&w1, &id)? } else { 1.0 };
        for t in &pair.decay_targets {
            let (op, base, dir) = match t {
                DecayTarget::Downstream => (pair.downstream, &w2, right_gram_product(&w2, &w1)?),
                DecayTarget::Upstream => (pair.upstream, &w1, w2.t_matmul(&w2.matmul(&w1)?)?),
            };
            let lambda = cfg.lambda_for(op);
            if lambda == 0.0 {
                continue;
            }
            let dir = dir.scale(f);
            let mut next = base.clone();
            next.axpy(-eta * lambda, &dir)?;
            if !next.is_finite() {
                return Err(Error::NonFinite { location: format!("cd update of pair {id}") });
            }
            pending.push((k, op, next, dir.frobenius_norm()));
        }
    }
    for (_, op, next, _) in &pending {
        write_back(*op, model, next)?;
    }
    let mut report = UpdateReport::default();
    for (k, op, _, norm) in pending {
        let pair = &pairs[k];
        let (w1, w2) = canonical_matrices(pair, model);
        report.updates.push(PairUpdate {
            pair: pair.id(),
            target: op.to_string(),
            direction_norm: norm,
            energy_after: energy_of(&w1, &w2, cfg.normalized, &pair.id())?,
        });
    }
    Ok(report)
}

/// Add a gradient given in canonical form for `op` into stored-layout grads.
pub fn accumulate_canonical(op: Operand, grads: &mut GradientSet, g: &Matrix) {
    match op {
        Operand::LnScale(l, which) => {
            let p = match which {
                LnWhich::Ln1 => BlockParam::Ln1Scale,
                LnWhich::Ln2 => BlockParam::Ln2Scale,
            };
            for (j, v) in grads.get_mut(ParamId::Block(l, p)).data_mut().iter_mut().enumerate() {
                *v += g[(j, j)];
            }
        }
        Operand::Qkv(_) => {
            let d = g.cols();
            for (k, id) in op.params().into_iter().enumerate() {
                let t = grads.get_mut(id);
                for i in 0..d {
                    for j in 0..d {
                        t[(i, j)] += g[(k * d + j, i)];
                    }
                }
            }
        }
        Operand::Weight(id) => {
            let t = grads.get_mut(id);
            for i in 0..t.rows() {
                for j in 0..t.cols() {
                    t[(i, j)] += g[(j, i)];
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CdLoss {
    /// `λ · s · Σ energy`: the value added to the task loss.
    pub value: f64,
    /// `Σ energy` before `λ` and the stabilizer.
    pub term: f64,
    pub grads: GradientSet,
}

/// Loss-form colinearity penalty `λ · s · Σ_pairs E(pair)` with exact
/// gradients to both matrices of every pair. `s` is the stabilizer.
pub fn cd_loss(
    model: &TransformerModel,
    pairs: &[MatrixPair],
    cfg: &CdConfig,
    stabilizer: f64,
) -> Result<CdLoss> {
    let mut grads = GradientSet::zeros(model.config());
    let (mut value, mut term) = (0.0, 0.0);
    for pair in pairs {
        let id = pair.id();
        let (w1, w2) = canonical_matrices(pair, model);
        let e = energy_of(&w1, &w2, cfg.normalized, &id)?;
        let c = cfg.lambda_for(pair.downstream) * stabilizer;
        term += e;
        value += c * e;
        let (g1, g2) = if cfg.normalized {
            let f = normalization_factor(&w1, &id)?;
            let mut g1 = cd_gradient_w1(&w1, &w2)?;
            // Quotient rule through 1/‖W₁‖²: −2 E_raw/‖W₁‖² · W₁.
            let raw = e / f;
            g1.axpy(-2.0 * raw / w1.frobenius_norm_sq(), &w1)?;
            (g1.scale(f), cd_gradient_w2(&w1, &w2)?.scale(f))
        } else {
            (cd_gradient_w1(&w1, &w2)?, cd_gradient_w2(&w1, &w2)?)
        };
        accumulate_canonical(pair.upstream, &mut grads, &g1.scale(c));
        accumulate_canonical(pair.downstream, &mut grads, &g2.scale(c));
    }
    Ok(CdLoss { value, term, grads })
}

/// Previous-step `task / aux` ratio used to bring an auxiliary term to the
/// task loss scale; 1 when unavailable or degenerate.
pub fn stabilizer(prev_task: Option<f64>, prev_aux: Option<f64>) -> f64 {
    match (prev_task, prev_aux) {
        (Some(t), Some(a)) if a != 0.0 && (t / a).is_finite() => t / a,
        _ => 1.0,
    }
}

/// `(1/L) Σ_l mean((|Y_l|/(τ+ε))^p)` over the block outputs retained in a
/// full trace.
pub fn tweo_loss(trace: &ActivationTrace, cfg: &TweoConfig) -> f64 {
    let l = trace.block_outputs.len();
    if l == 0 {
        return 0.0;
    }
    let denom = cfg.tau + cfg.epsilon;
    trace
        .block_outputs
        .iter()
        .map(|y| {
            if y.is_empty() {
                return 0.0;
            }
            y.iter().map(|v| (v.abs() / denom).powi(cfg.p as i32)).sum::<f64>() / y.len() as f64
        })
        .sum::<f64>()
        / l as f64
}

/// The TWEO term as an [`ActivationPenalty`] for one batch. Each sample
/// contributes its share of the block mean, scaled by `weight`.
pub struct TweoPenalty {
    pub weight: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub p: u32,
    pub depth: usize,
    /// Elements of one block output over the whole batch.
    pub block_elems: usize,
}

impl TweoPenalty {
    pub fn new(cfg: &TweoConfig, weight: f64, depth: usize, batch: usize, tokens: usize, d_model: usize) -> Self {
        Self {
            weight,
            tau: cfg.tau,
            epsilon: cfg.epsilon,
            p: cfg.p,
            depth,
            block_elems: batch * tokens * d_model,
        }
    }
}

impl ActivationPenalty for TweoPenalty {
    fn apply(&self, _block: usize, y: &Matrix, dy: &mut Matrix) -> f64 {
        let denom = self.tau + self.epsilon;
        let c = self.weight / (self.depth as f64 * self.block_elems as f64);
        let p = self.p as i32;
        let mut sum = 0.0;
        for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
            let r = v.abs() / denom;
            sum += r.powi(p);
            *g += c * p as f64 * r.powi(p - 1) * v.signum() / denom;
        }
        c * sum
    }
}

fn round15(x: f64) -> f64 {
    format!("{x:.14e}").parse().expect("formatted float parses")
}

/// Split a base weight-decay coefficient into `(λ_wd, λ_cd)` with
/// `λ_cd = ratio · base` and `λ_wd = base − λ_cd`. Values are rounded to 15
/// significant digits so decimal inputs give decimal outputs, unless that
/// would move `λ_wd + λ_cd` more than two ulps away from `base`.
pub fn budget_split(lambda_base_wd: f64, ratio: f64) -> Result<(f64, f64)> {
    if !(lambda_base_wd >= 0.0) || !(0.0..1.0).contains(&ratio) || !lambda_base_wd.is_finite() {
        return Err(Error::Invalid(format!(
            "budget split needs base >= 0 and 0 <= ratio < 1, got ({lambda_base_wd}, {ratio})"
        )));
    }
    let cd = round15(lambda_base_wd * ratio);
    let wd = round15(lambda_base_wd - cd);
    if (wd + cd - lambda_base_wd).abs() <= 2.0 * f64::EPSILON * lambda_base_wd {
        Ok((wd, cd))
    } else {
        Ok((lambda_base_wd - cd, cd))
    }
}

/// `zᵀ (W₁W₁ᵀ) z`.
pub fn gram_quadratic_form(w1: &Matrix, z: &[f64]) -> f64 {
    let g = gram_right(w1);
    let mut acc = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            acc += z[i] * g[(i, j)] * z[j];
        }
    }
    acc
}

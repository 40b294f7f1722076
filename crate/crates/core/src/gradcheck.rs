//! Central finite-difference checks for the model backward pass and the
//! colinearity gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Batch;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::{ParamId, TransformerModel};
use crate::pairs::{canonical, canonical_matrices, enumerate_pairs, normalization_factor, PairSet};
use crate::regularizers::{cd_gradient_w1, cd_gradient_w2, cd_loss, cd_row_gradient, normalized_cd_direction, CdConfig};

pub const MODEL_TOL: f64 = 1e-4;
pub const CD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: String, rel_error: f64, tolerance: f64) -> Self {
        Self { name, rel_error, tolerance, passed: rel_error <= tolerance }
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

fn central_difference(x: &Matrix, h: f64, f: impl Fn(&Matrix) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.data().len()];
    for (k, o) in out.iter_mut().enumerate() {
        let mut p = x.clone();
        p.data_mut()[k] += h;
        let mut m = x.clone();
        m.data_mut()[k] -= h;
        *o = (f(&p)? - f(&m)?) / (2.0 * h);
    }
    Ok(out)
}

/// Adds uniform noise of amplitude `amp` to every parameter so biases and
/// LayerNorm affines are away from their trivial initial values.
pub fn randomize(model: &mut TransformerModel, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += amp * rng.random_range(-1.0..1.0));
    }
}

/// Per-parameter relative error of the analytic gradient against central
/// differences of the task loss. `perturb` adds a constant to one analytic
/// gradient, for fault-injection tests.
pub fn check_model_gradients(
    model: &TransformerModel,
    batch: &Batch,
    h: f64,
    perturb: Option<(ParamId, f64)>,
) -> Result<Vec<CheckResult>> {
    let mut grads = model.backward(batch)?;
    if let Some((id, delta)) = perturb {
        grads.get_mut(id).data_mut().iter_mut().for_each(|g| *g += delta);
    }
    let mut out = Vec::new();
    for (id, t) in model.params().iter() {
        let num = central_difference(t, h, |p| {
            let mut m = model.clone();
            *m.param_mut(id) = p.clone();
            m.loss(batch)
        })?;
        // b_K has an exactly zero gradient; the floor keeps its ratio meaningful.
        let rel = relative_error(grads.get(id).data(), &num, 1e-6);
        out.push(CheckResult::new(id.to_string(), rel, MODEL_TOL));
    }
    Ok(out)
}

fn raw_energy(w1: &Matrix, w2: &Matrix) -> Result<f64> {
    Ok(w2.matmul(w1)?.frobenius_norm_sq())
}

/// A random pair `(W₁: m×n, W₂: p×m)` with dims in `1..=max_dim`.
pub fn random_pair(rng: &mut impl Rng, max_dim: usize) -> (Matrix, Matrix) {
    let (m, n, p) = (
        rng.random_range(1..=max_dim),
        rng.random_range(1..=max_dim),
        rng.random_range(1..=max_dim),
    );
    let mut fill = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).expect("sized buffer")
    };
    let w1 = fill(m, n);
    let w2 = fill(p, m);
    (w1, w2)
}

#[derive(Clone, Debug, Serialize)]
pub struct CdCheck {
    pub w1: CheckResult,
    pub w2: CheckResult,
    /// Max-abs gap between `cd_row_gradient` and the rows of the W₂ gradient.
    pub row_gap: f64,
}

/// Finite-difference check of `cd_gradient_w1`/`cd_gradient_w2` on `n` random
/// pairs; also compares the per-row gradient with the matrix gradient.
pub fn check_cd_gradients(n: usize, max_dim: usize, seed: u64, h: f64) -> Result<Vec<CdCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (w1, w2) = random_pair(&mut rng, max_dim);
        let g1 = cd_gradient_w1(&w1, &w2)?;
        let g2 = cd_gradient_w2(&w1, &w2)?;
        let n1 = central_difference(&w1, h, |p| raw_energy(p, &w2))?;
        let n2 = central_difference(&w2, h, |p| raw_energy(&w1, p))?;
        let mut row_gap = 0.0f64;
        for j in 0..w2.rows() {
            let r = cd_row_gradient(&w1, w2.row(j))?;
            for (a, b) in r.iter().zip(g2.row(j)) {
                row_gap = row_gap.max((a - b).abs());
            }
        }
        out.push(CdCheck {
            w1: CheckResult::new(format!("pair {k} w1"), relative_error(g1.data(), &n1, 1e-12), CD_TOL),
            w2: CheckResult::new(format!("pair {k} w2"), relative_error(g2.data(), &n2, 1e-12), CD_TOL),
            row_gap,
        });
    }
    Ok(out)
}

/// For every pair of `model`: twice the decoupled downstream direction must
/// equal the loss-form downstream gradient at `λ = 1`, `s = 1`. Returns the
/// max-abs gap per pair.
pub fn check_absorb_factor(model: &TransformerModel) -> Result<Vec<(String, f64)>> {
    let cfg = CdConfig { lambda_cd: 1.0, normalized: true, ..CdConfig::default() };
    let mut out = Vec::new();
    for pair in enumerate_pairs(model, PairSet::AB) {
        let (w1, w2) = canonical_matrices(&pair, model);
        let id = pair.id();
        normalization_factor(&w1, &id)?;
        let dir = normalized_cd_direction(&w1, &w2)?;
        let loss = cd_loss(model, std::slice::from_ref(&pair), &cfg, 1.0)?;
        // Route the gradient set through the canonical view of its downstream operand.
        let holder = TransformerModel::from_params(model.config().clone(), loss.grads)?;
        let g2 = canonical(pair.downstream, &holder);
        let gap = dir
            .data()
            .iter()
            .zip(g2.data())
            .map(|(d, g)| (2.0 * d - g).abs())
            .fold(0.0, f64::max);
        out.push((id, gap));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_batch;
    use crate::model::{BlockParam, ModelConfig};

    fn tiny_model() -> TransformerModel {
        let mut m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        randomize(&mut m, 3, 0.4);
        m
    }

    #[test]
    fn tiny_model_passes() {
        let m = tiny_model();
        let r = check_model_gradients(&m, &random_batch(3, 1, 8, 3, 4), 1e-5, None).unwrap();
        assert_eq!(r.len(), m.params().len());
        assert!(r.iter().all(|c| c.passed), "{r:?}");
    }

    #[test]
    fn perturbed_gradient_is_named() {
        let m = tiny_model();
        let id = ParamId::Block(0, BlockParam::Wf1);
        let r = check_model_gradients(&m, &random_batch(3, 1, 8, 3, 4), 1e-5, Some((id, 1e-2))).unwrap();
        let failed: Vec<&str> = r.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec![id.to_string().as_str()]);
    }

    #[test]
    fn cd_gradients_pass() {
        for c in check_cd_gradients(10, 8, 1, 1e-6).unwrap() {
            assert!(c.w1.passed && c.w2.passed && c.row_gap <= 1e-10, "{c:?}");
        }
    }

    #[test]
    fn absorb_factor_is_two() {
        for (id, gap) in check_absorb_factor(&tiny_model()).unwrap() {
            assert!(gap <= 1e-10, "{id}: {gap}");
        }
    }
}

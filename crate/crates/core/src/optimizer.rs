//! AdamW with decoupled weight decay, warmup + cosine learning rate, and the
//! per-step phase ordering: forward, loss, backward, CD update, AdamW.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{GradientSet, ParamSet, TraceMode, TransformerModel};
use crate::pairs::{enumerate_pairs, pair_energy, MatrixPair, PairSet};
use crate::regularizers::{
    apply_cd_update, budget_split, cd_loss, stabilizer, CdConfig, TweoConfig, TweoPenalty, UpdateReport,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_peak: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Baseline weight-decay budget; CD modes take their share out of it.
    pub lambda_wd: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            lambda_wd: 0.05,
            warmup_steps: 100,
            total_steps: 2000,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lr_peak >= 0.0
            && self.lambda_wd >= 0.0
            && self.lr_peak.is_finite()
            && self.lambda_wd.is_finite();
        if !ok {
            return Err(Error::Invalid(
                "optimizer needs 0 <= beta1, beta2 < 1, eps > 0, lr_peak >= 0, lambda_wd >= 0".into(),
            ));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate for 1-indexed `step`: linear ramp to `lr_peak` at
/// `warmup_steps`, then half-cosine to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        LrSchedule::Constant => cfg.lr_peak,
        LrSchedule::Cosine => {
            let span = cfg.total_steps - cfg.warmup_steps;
            if span == 0 {
                return cfg.lr_peak;
            }
            let frac = (step - cfg.warmup_steps) as f64 / span as f64;
            cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update plus decoupled decay on the pre-update
/// value: `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + eps)`, decay on weight matrices only.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lambda_wd: f64,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape("adamw_step", g.shape(), params.get(id).shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { location: format!("gradient of {id}") });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let decay = if id.is_decayed() { 1.0 - lr * lambda_wd } else { 1.0 };
        let g = grads.get(id).data();
        let m = state.m.get_mut(id).data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(id).data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(id).data(), state.v.get(id).data());
        for ((p, mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
            let upd = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            *p = *p * decay - lr * upd;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    #[default]
    None,
    CdDecay,
    CdLoss,
    Tweo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    #[serde(default)]
    pub mode: RegMode,
    #[serde(default)]
    pub cd: CdConfig,
    #[serde(default)]
    pub tweo: TweoConfig,
    /// Loss-form CD: rescale the term to the previous step's task loss.
    #[serde(default)]
    pub stabilized: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            mode: RegMode::None,
            cd: CdConfig::default(),
            tweo: TweoConfig::default(),
            stabilized: false,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        self.cd.validate()?;
        self.tweo.validate()
    }

    pub fn uses_cd(&self) -> bool {
        matches!(self.mode, RegMode::CdDecay | RegMode::CdLoss)
    }

    /// `(λ_wd, λ_cd)` for a baseline budget `base`.
    pub fn budget(&self, base: f64) -> Result<(f64, f64)> {
        if !self.uses_cd() || base == 0.0 {
            return Ok((base, if self.uses_cd() { self.cd.lambda_cd } else { 0.0 }));
        }
        let ratio = self.cd.lambda_cd / base;
        if ratio >= 1.0 {
            return Err(Error::Invalid(format!(
                "lambda_cd {} must be below the weight-decay budget {base}",
                self.cd.lambda_cd
            )));
        }
        let (wd, _) = budget_split(base, ratio)?;
        Ok((wd, self.cd.lambda_cd))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub task_loss: f64,
    /// Auxiliary loss added to the task loss (CD loss form or TWEO).
    pub aux_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub batch_accuracy: f64,
    pub lambda_wd: f64,
    pub lambda_cd: f64,
    /// Normalized energy of every tracked pair after the step.
    pub pair_energies: Vec<(String, f64)>,
    pub total_pair_energy: f64,
    pub max_act_mod: f64,
    pub max_act_blk: f64,
    pub embed_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cd_update: Option<UpdateReport>,
}

/// Wall-clock per phase in milliseconds; kept apart from [`StepMetrics`] so
/// the metrics stream stays reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepTiming {
    pub step: u64,
    pub forward_backward_ms: f64,
    pub aux_ms: f64,
    pub cd_update_ms: f64,
    pub adam_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Start,
    AfterBackward,
    AfterCd,
    AfterAdam,
}

/// Observes the model between phases of a training step.
pub trait StepProbe {
    fn observe(&mut self, phase: Phase, model: &TransformerModel, grads: Option<&GradientSet>);
}

pub struct Trainer {
    pub model: TransformerModel,
    pub state: OptimizerState,
    pub opt: OptimizerConfig,
    pub reg: RegConfig,
    pub step: u64,
    cd_pairs: Vec<MatrixPair>,
    tracked: Vec<MatrixPair>,
    lambda_wd: f64,
    lambda_cd: f64,
    prev_task: Option<f64>,
    prev_aux: Option<f64>,
}

impl Trainer {
    pub fn new(model: TransformerModel, opt: OptimizerConfig, reg: RegConfig) -> Result<Self> {
        opt.validate()?;
        reg.validate()?;
        let (lambda_wd, lambda_cd) = reg.budget(opt.lambda_wd)?;
        let cd_pairs = enumerate_pairs(&model, reg.cd.pair_set);
        let tracked = enumerate_pairs(&model, PairSet::AB);
        Ok(Self {
            state: OptimizerState::new(model.params()),
            model,
            opt,
            reg,
            step: 0,
            cd_pairs,
            tracked,
            lambda_wd,
            lambda_cd,
            prev_task: None,
            prev_aux: None,
        })
    }

    pub fn lambdas(&self) -> (f64, f64) {
        (self.lambda_wd, self.lambda_cd)
    }

    pub fn step(&mut self, batch: &Batch) -> Result<(StepMetrics, StepTiming)> {
        self.step_with_probe(batch, None)
    }

    pub fn step_with_probe(
        &mut self,
        batch: &Batch,
        mut probe: Option<&mut dyn StepProbe>,
    ) -> Result<(StepMetrics, StepTiming)> {
        let t0 = Instant::now();
        let step = self.step + 1;
        let lr = lr_at(step, &self.opt);
        let mut cd_cfg = self.reg.cd.clone();
        cd_cfg.lambda_cd = self.lambda_cd;
        if let Some(p) = probe.as_deref_mut() {
            p.observe(Phase::Start, &self.model, None);
        }

        // (1)-(3): forward, task loss (+ activation penalty), backward.
        let cfg = self.model.config();
        let tweo = (self.reg.mode == RegMode::Tweo).then(|| {
            let s = if self.reg.tweo.rescale_to_task_loss {
                stabilizer(self.prev_task, self.prev_aux)
            } else {
                1.0
            };
            let w = self.reg.tweo.weight_at(step, self.opt.total_steps) * s;
            TweoPenalty::new(&self.reg.tweo, w, cfg.depth, batch.len(), cfg.tokens(), cfg.d_model)
        });
        let mut pass = self.model.loss_and_gradients(
            batch,
            tweo.as_ref().map(|p| p as &dyn crate::model::ActivationPenalty),
            TraceMode::Maxima,
        )?;
        let t_fb = t0.elapsed();

        let mut aux_loss = 0.0;
        if let Some(p) = &tweo {
            aux_loss = pass.penalty;
            if p.weight > 0.0 {
                self.prev_aux = Some(pass.penalty / p.weight);
            }
        }
        if self.reg.mode == RegMode::CdLoss {
            let s = if self.reg.stabilized {
                stabilizer(self.prev_task, self.prev_aux)
            } else {
                1.0
            };
            let l = cd_loss(&self.model, &self.cd_pairs, &cd_cfg, s)?;
            pass.grads.axpy(1.0, &l.grads);
            aux_loss = l.value;
            self.prev_aux = Some(l.term);
        }
        self.prev_task = Some(pass.task_loss);
        let total_loss = pass.task_loss + aux_loss;
        if !total_loss.is_finite() {
            return Err(Error::NonFinite { location: format!("loss at step {step}") });
        }
        let t_aux = t0.elapsed();
        if let Some(p) = probe.as_deref_mut() {
            p.observe(Phase::AfterBackward, &self.model, Some(&pass.grads));
        }

        // (4): decoupled CD on the current weights.
        let cd_update = if self.reg.mode == RegMode::CdDecay {
            Some(apply_cd_update(&mut self.model, &self.cd_pairs, lr, &cd_cfg)?)
        } else {
            None
        };
        let t_cd = t0.elapsed();
        if let Some(p) = probe.as_deref_mut() {
            p.observe(Phase::AfterCd, &self.model, Some(&pass.grads));
        }

        // (5): AdamW with the budgeted weight decay.
        adamw_step(self.model.params_mut(), &pass.grads, &mut self.state, &self.opt, self.lambda_wd, lr)?;
        let t_adam = t0.elapsed();
        if let Some(p) = probe.as_deref_mut() {
            p.observe(Phase::AfterAdam, &self.model, Some(&pass.grads));
        }
        self.step = step;

        let pair_energies = self
            .tracked
            .iter()
            .map(|p| Ok((p.id(), pair_energy(p, &self.model, true)?)))
            .collect::<Result<Vec<_>>>()?;
        let total_pair_energy = pair_energies.iter().map(|(_, e)| e).sum();
        let metrics = StepMetrics {
            step,
            lr,
            task_loss: pass.task_loss,
            aux_loss,
            total_loss,
            grad_norm: pass.grads.norm(),
            batch_accuracy: pass.correct as f64 / batch.len() as f64,
            lambda_wd: self.lambda_wd,
            lambda_cd: self.lambda_cd,
            pair_energies,
            total_pair_energy,
            max_act_mod: pass.trace.module_max(),
            max_act_blk: pass.trace.block_max(),
            embed_max: pass.trace.embed_max,
            cd_update,
        };
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        let timing = StepTiming {
            step,
            forward_backward_ms: ms(t_fb),
            aux_ms: ms(t_aux - t_fb),
            cd_update_ms: ms(t_cd - t_aux),
            adam_ms: ms(t_adam - t_cd),
            total_ms: ms(t0.elapsed()),
        };
        Ok((metrics, timing))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_batch;
    use crate::model::{BlockParam, ModelConfig, ParamId};

    fn opt() -> OptimizerConfig {
        OptimizerConfig {
            lr_peak: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let c = opt();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(1, &c), 1e-4);
        assert_eq!(lr_at(10, &c), 1e-3);
        assert!((lr_at(60, &c) - 5e-4).abs() < 1e-18);
        assert!(lr_at(110, &c).abs() < 1e-18);
        let k = OptimizerConfig { schedule: LrSchedule::Constant, ..c };
        assert_eq!(lr_at(80, &k), 1e-3);
    }

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::zeros(&ModelConfig::tiny());
        p.get_mut(ParamId::HeadBias).data_mut()[0] = v;
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = scalar_set(0.5);
        let mut g = ParamSet::zeros_like(&p);
        g.get_mut(ParamId::HeadBias).data_mut()[0] = 1.0;
        let mut s = OptimizerState::new(&p);
        let c = OptimizerConfig { lambda_wd: 0.0, ..opt() };
        adamw_step(&mut p, &g, &mut s, &c, 0.0, 1e-3).unwrap();
        let delta = p.get(ParamId::HeadBias).data()[0] - 0.5;
        assert!((delta + 1e-3).abs() < 1e-9);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradients_are_fixed_points() {
        let mut p = TransformerModel::new(ModelConfig::tiny()).unwrap().params().clone();
        let before = p.clone();
        let g = ParamSet::zeros_like(&p);
        let mut s = OptimizerState::new(&p);
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut s, &opt(), 0.0, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_scales_exactly() {
        let mut p = TransformerModel::new(ModelConfig::tiny()).unwrap().params().clone();
        let before = p.clone();
        let g = ParamSet::zeros_like(&p);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut s, &opt(), 0.1, 0.01).unwrap();
        for (id, t) in p.iter() {
            let b = before.get(id);
            if id.is_decayed() {
                for (x, y) in t.data().iter().zip(b.data()) {
                    assert_eq!(*x, y * (1.0 - 0.001));
                }
            } else {
                assert_eq!(t, b, "{id} must not decay");
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_set(0.0);
        let mut g = ParamSet::zeros_like(&p);
        g.get_mut(ParamId::Block(0, BlockParam::Wq)).data_mut()[3] = f64::NAN;
        let mut s = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &g, &mut s, &opt(), 0.0, 1e-3).unwrap_err();
        assert!(err.to_string().contains("blocks.0.attn.wq"), "{err}");
    }

    fn trainer(mode: RegMode, lambda_cd: f64) -> Trainer {
        let model = TransformerModel::new(ModelConfig { seed: 3, ..ModelConfig::tiny() }).unwrap();
        let reg = RegConfig {
            mode,
            cd: CdConfig { lambda_cd, ..CdConfig::default() },
            ..RegConfig::default()
        };
        Trainer::new(model, opt(), reg).unwrap()
    }

    #[test]
    fn zero_strength_cd_matches_baseline_bitwise() {
        let mut a = trainer(RegMode::None, 0.0);
        let mut b = trainer(RegMode::CdDecay, 0.0);
        for k in 0..5 {
            let batch = random_batch(6, 1, 8, 3, k);
            a.step(&batch).unwrap();
            b.step(&batch).unwrap();
        }
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn metrics_are_reproducible() {
        let run = || {
            let mut t = trainer(RegMode::CdDecay, 0.005);
            (0..4)
                .map(|k| serde_json::to_string(&t.step(&random_batch(6, 1, 8, 3, k)).unwrap().0).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn budget_is_conserved() {
        for lambda in [0.0025, 0.005, 0.01] {
            let t = trainer(RegMode::CdDecay, lambda);
            let (wd, cd) = t.lambdas();
            assert!((wd + cd - 0.05).abs() <= 2.0 * f64::EPSILON * 0.05);
        }
        assert_eq!(trainer(RegMode::CdDecay, 0.005).lambdas(), (0.045, 0.005));
        assert_eq!(trainer(RegMode::None, 0.005).lambdas(), (0.05, 0.0));
        let bad = RegConfig {
            mode: RegMode::CdDecay,
            cd: CdConfig { lambda_cd: 0.06, ..CdConfig::default() },
            ..RegConfig::default()
        };
        assert!(bad.budget(0.05).is_err());
    }

    #[derive(Default)]
    struct Recorder {
        snaps: Vec<(Phase, TransformerModel, Option<GradientSet>)>,
    }

    impl StepProbe for Recorder {
        fn observe(&mut self, phase: Phase, model: &TransformerModel, grads: Option<&GradientSet>) {
            self.snaps.push((phase, model.clone(), grads.cloned()));
        }
    }

    #[test]
    fn cd_reads_pre_adam_weights_and_adam_reads_post_cd_weights() {
        let mut t = trainer(RegMode::CdDecay, 0.01);
        // Warm the optimizer state so Adam moments are nontrivial.
        t.step(&random_batch(6, 1, 8, 3, 1)).unwrap();
        let state0 = t.state.clone();
        let mut rec = Recorder::default();
        t.step_with_probe(&random_batch(6, 1, 8, 3, 2), Some(&mut rec)).unwrap();
        let phases: Vec<Phase> = rec.snaps.iter().map(|s| s.0).collect();
        assert_eq!(phases, [Phase::Start, Phase::AfterBackward, Phase::AfterCd, Phase::AfterAdam]);

        let start = &rec.snaps[0].1;
        assert_eq!(&rec.snaps[1].1, start, "backward must not touch weights");
        let lr = lr_at(2, &t.opt);

        // CD phase equals a CD update applied to the pre-step weights.
        let mut expect_cd = start.clone();
        let cfg = CdConfig { lambda_cd: 0.01, ..CdConfig::default() };
        apply_cd_update(&mut expect_cd, &enumerate_pairs(start, PairSet::AB), lr, &cfg).unwrap();
        assert_eq!(rec.snaps[2].1, expect_cd);
        assert_ne!(rec.snaps[2].1, *start);

        // Adam phase equals AdamW applied to the post-CD weights.
        let grads = rec.snaps[1].2.clone().unwrap();
        let mut params = expect_cd.params().clone();
        let mut st = state0;
        adamw_step(&mut params, &grads, &mut st, &t.opt, 0.04, lr).unwrap();
        assert_eq!(rec.snaps[3].1.params(), &params);
        assert_eq!(t.model.params(), &params);
    }

    #[test]
    fn cd_phase_lowers_energy_versus_skipping_it() {
        let base = trainer(RegMode::CdDecay, 0.01);
        let batch = random_batch(6, 1, 8, 3, 9);
        let mut with = Trainer::new(base.model.clone(), base.opt.clone(), base.reg.clone()).unwrap();
        let mut opt_no = base.opt.clone();
        opt_no.lambda_wd = 0.04;
        let mut without = Trainer::new(base.model.clone(), opt_no, RegConfig::default()).unwrap();
        let (m1, _) = with.step(&batch).unwrap();
        let (m2, _) = without.step(&batch).unwrap();
        assert_eq!(with.lambdas().0, without.lambdas().0);
        assert!(m1.total_pair_energy <= m2.total_pair_energy, "{} > {}", m1.total_pair_energy, m2.total_pair_energy);
    }

    #[test]
    fn loss_modes_add_their_term() {
        for mode in [RegMode::CdLoss, RegMode::Tweo] {
            let mut t = trainer(mode, 0.01);
            let (m, _) = t.step(&random_batch(6, 1, 8, 3, 4)).unwrap();
            assert!(m.aux_loss > 0.0, "{mode:?}");
            assert_eq!(m.total_loss, m.task_loss + m.aux_loss);
            assert!(m.cd_update.is_none());
        }
    }

    #[test]
    fn stabilized_loss_matches_task_scale_from_step_two() {
        let model = TransformerModel::new(ModelConfig { seed: 3, ..ModelConfig::tiny() }).unwrap();
        let reg = RegConfig {
            mode: RegMode::CdLoss,
            cd: CdConfig { lambda_cd: 0.01, ..CdConfig::default() },
            stabilized: true,
            ..RegConfig::default()
        };
        let mut t = Trainer::new(model, opt(), reg).unwrap();
        let b = random_batch(6, 1, 8, 3, 4);
        let (m1, _) = t.step(&b).unwrap();
        let before = t.model.clone();
        let (m2, _) = t.step(&b).unwrap();
        // s = task₁ / term₁, so the step-2 term ≈ λ·task₁·(term₂/term₁).
        let term2 = cd_loss(&before, &t.cd_pairs, &CdConfig { lambda_cd: 1.0, ..CdConfig::default() }, 1.0)
            .unwrap()
            .value;
        let term1 = m1.aux_loss / 0.01;
        let expect = 0.01 * m1.task_loss / term1 * term2;
        assert!((m2.aux_loss - expect).abs() <= 1e-12 * expect);
    }
}

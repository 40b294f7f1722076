use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cdecay::data::{load_idx, synth_generate, BatchStream, Dataset};
use cdecay::diagnostics::{max_activation, total_pair_energy, MaxActReport};
use cdecay::gradcheck::{check_absorb_factor, check_cd_gradients, check_model_gradients, randomize, CdCheck, CheckResult};
use cdecay::model::{load_checkpoint, save_checkpoint, ModelConfig, ParamId, TransformerModel};
use cdecay::optimizer::{StepTiming, Trainer};
use cdecay::pairs::PairSet;
use cdecay::quant::{eval, quantize_model_w4a4, Calibration, QuantConfig, QuantReport};
use serde::{Deserialize, Serialize};

use crate::config::{load_config, DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const GIT_DESCRIBE: &str = env!("CDECAY_GIT_DESCRIBE");

pub struct Data {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load_data(src: &DataSource) -> CliResult<Data> {
    match src {
        DataSource::Synth(s) => {
            let (train, eval) = synth_generate(s)?;
            Ok(Data { train, eval })
        }
        DataSource::Idx(p) => Ok(Data {
            train: load_idx(&p.train_images, &p.train_labels)?,
            eval: load_idx(&p.eval_images, &p.eval_labels)?,
        }),
    }
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> CliResult<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingTotals {
    pub forward_backward_ms: f64,
    pub aux_ms: f64,
    pub cd_update_ms: f64,
    pub adam_ms: f64,
    pub total_ms: f64,
}

impl TimingTotals {
    fn add(&mut self, t: &StepTiming) {
        self.forward_backward_ms += t.forward_backward_ms;
        self.aux_ms += t.aux_ms;
        self.cd_update_ms += t.cd_update_ms;
        self.adam_ms += t.adam_ms;
        self.total_ms += t.total_ms;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub quant_accuracy: f64,
    /// `fp_accuracy − quant_accuracy`; positive means degradation.
    pub acc_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fp_accuracy: f64,
    pub quant: BTreeMap<String, SchemeResult>,
    pub max_act_mod: f64,
    pub max_act_blk: f64,
    pub total_pair_energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: u64,
    pub reg_mode: String,
    pub lambda_budget: f64,
    pub lambda_wd: f64,
    pub lambda_cd: f64,
    pub final_task_loss: f64,
    #[serde(flatten)]
    pub eval: Evaluation,
    pub timing: TimingTotals,
    pub git_describe: String,
    pub config_hash: String,
}

pub const SCHEMES: [Calibration; 2] = [Calibration::Minmax, Calibration::Percentile];

fn quant_config(base: &QuantConfig, scheme: Calibration) -> QuantConfig {
    QuantConfig { calibration: scheme, ..base.clone() }
}

/// Calibrate on the training set and report FP and quantized accuracy.
pub fn quantize(model: &TransformerModel, cfg: &ExperimentConfig, data: &Data, scheme: Calibration) -> CliResult<QuantReport> {
    let q = quantize_model_w4a4(model, &data.train, &quant_config(&cfg.quant, scheme))?;
    let mut report = q.report.clone();
    report.fp_accuracy = Some(eval(model, &data.eval)?);
    report.quant_accuracy = Some(q.accuracy(&data.eval)?);
    Ok(report)
}

pub fn evaluate(model: &TransformerModel, cfg: &ExperimentConfig, data: &Data) -> CliResult<Evaluation> {
    let fp_accuracy = eval(model, &data.eval)?;
    let mut quant = BTreeMap::new();
    for scheme in SCHEMES {
        let q = quantize_model_w4a4(model, &data.train, &quant_config(&cfg.quant, scheme))?;
        let quant_accuracy = q.accuracy(&data.eval)?;
        quant.insert(
            scheme.to_string(),
            SchemeResult { quant_accuracy, acc_drop: fp_accuracy - quant_accuracy },
        );
    }
    let act = max_activation(model, &data.eval)?;
    Ok(Evaluation {
        fp_accuracy,
        quant,
        max_act_mod: act.module_max,
        max_act_blk: act.block_max,
        total_pair_energy: total_pair_energy(model, PairSet::AB)?,
    })
}

/// Train one seed into `dir`: config copy, JSONL metrics and timing,
/// checkpoint and summary.
pub fn train_run(cfg: &ExperimentConfig, seed: u64, data: &Data, dir: &Path) -> CliResult<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.seeds = vec![seed];
    cfg.run_dir = dir.to_path_buf();
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &cfg)?;

    let model = TransformerModel::new(ModelConfig { seed, ..cfg.model.clone() })?;
    let mut trainer = Trainer::new(model, cfg.optimizer.clone(), cfg.reg_config())?;
    let mut stream = BatchStream::new(&data.train, cfg.batch_size, seed)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut timing = BufWriter::new(File::create(dir.join("timing.jsonl"))?);
    let mut totals = TimingTotals::default();
    let mut final_task_loss = f64::NAN;
    for _ in 0..cfg.optimizer.total_steps {
        let batch = stream.next_batch();
        let step = trainer.step + 1;
        let (m, t) = trainer
            .step(&batch)
            .map_err(|e| CliError::from(e).context(format!("step {step}")))?;
        write_line(&mut metrics, &m)?;
        write_line(&mut timing, &t)?;
        totals.add(&t);
        final_task_loss = m.task_loss;
    }
    metrics.flush()?;
    timing.flush()?;
    save_checkpoint(&trainer.model, &dir.join("checkpoint"))?;

    let (lambda_wd, lambda_cd) = trainer.lambdas();
    let summary = RunSummary {
        seed,
        steps: cfg.optimizer.total_steps,
        reg_mode: serde_json::to_value(cfg.reg_mode)?.as_str().unwrap_or_default().to_string(),
        lambda_budget: cfg.optimizer.lambda_wd,
        lambda_wd,
        lambda_cd,
        final_task_loss,
        eval: evaluate(&trainer.model, &cfg, data)?,
        timing: totals,
        git_describe: GIT_DESCRIBE.to_string(),
        config_hash: cfg.hash(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub run_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) {
    if let Some(d) = &o.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = o.seed {
        cfg.seeds = vec![s];
    }
}

/// Train every configured seed into `<run_dir>/seed-<n>`.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<Vec<RunSummary>> {
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    cfg.seeds
        .iter()
        .map(|&s| train_run(cfg, s, &data, &seed_dir(&cfg.run_dir, s)))
        .collect()
}

/// A trained run: its directory, config and checkpoint.
pub struct OpenRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub model: TransformerModel,
}

/// `path` is either a seed directory holding `checkpoint/` or a training
/// root holding `seed-<n>/` directories.
pub fn open_run(path: &Path, config: Option<&Path>, seed: Option<u64>) -> CliResult<OpenRun> {
    let dir = if path.join("checkpoint").is_dir() {
        path.to_path_buf()
    } else {
        let candidate = match seed {
            Some(s) => seed_dir(path, s),
            None => {
                let cfg = load_config(&path.join("config.json")).ok();
                seed_dir(path, cfg.and_then(|c| c.seeds.first().copied()).unwrap_or(0))
            }
        };
        if !candidate.join("checkpoint").is_dir() {
            return Err(CliError::Io(format!("no checkpoint under {}", path.display())));
        }
        candidate
    };
    let config = load_config(&config.map(Path::to_path_buf).unwrap_or_else(|| dir.join("config.json")))?;
    let model = load_checkpoint(&dir.join("checkpoint"))?;
    Ok(OpenRun { dir, config, model })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub fp_accuracy: f64,
    pub total_pair_energy: f64,
    pub max_act: MaxActReport,
}

pub fn cmd_eval(run: &OpenRun) -> CliResult<EvalReport> {
    let data = load_data(&run.config.data)?;
    let report = EvalReport {
        fp_accuracy: eval(&run.model, &data.eval)?,
        total_pair_energy: total_pair_energy(&run.model, PairSet::AB)?,
        max_act: max_activation(&run.model, &data.eval)?,
    };
    write_json(&run.dir.join("eval.json"), &report)?;
    Ok(report)
}

pub fn cmd_quantize(run: &OpenRun, schemes: &[Calibration]) -> CliResult<Vec<QuantReport>> {
    let data = load_data(&run.config.data)?;
    let mut out = Vec::new();
    for &s in schemes {
        let r = quantize(&run.model, &run.config, &data, s)?;
        write_json(&run.dir.join(format!("quant-{s}.json")), &r)?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub model: Vec<CheckResult>,
    pub cd: Vec<CdCheck>,
    /// Max-abs gap between twice the decoupled direction and the loss-form gradient.
    pub absorb: Vec<(String, f64)>,
    pub passed: bool,
}

pub const ABSORB_TOL: f64 = 1e-10;

/// Finite-difference verification on a tiny model. `perturb` corrupts one
/// analytic gradient (fault injection).
pub fn cmd_gradcheck(cfg: &ExperimentConfig, perturb: Option<(ParamId, f64)>) -> CliResult<GradcheckReport> {
    if cfg.model.d_model > 8 {
        return Err(CliError::Config(format!(
            "model.d_model: gradcheck needs d_model <= 8, found {}",
            cfg.model.d_model
        )));
    }
    let seed = cfg.seeds[0];
    let mc = ModelConfig { seed, ..cfg.model.clone() };
    let mut model = TransformerModel::new(mc.clone())?;
    randomize(&mut model, seed, 0.4);
    let batch = cdecay::data::random_batch(4, mc.channels, mc.image_side, mc.classes, seed + 1);
    let model_checks = check_model_gradients(&model, &batch, 1e-5, perturb)?;
    let cd = check_cd_gradients(20, 8, seed, 1e-6)?;
    let absorb = check_absorb_factor(&model)?;
    let passed = model_checks.iter().all(|c| c.passed)
        && cd.iter().all(|c| c.w1.passed && c.w2.passed && c.row_gap <= 1e-10)
        && absorb.iter().all(|(_, g)| *g <= ABSORB_TOL);
    let report = GradcheckReport { model: model_checks, cd, absorb, passed };
    fs::create_dir_all(&cfg.run_dir)?;
    write_json(&cfg.run_dir.join("gradcheck.json"), &report)?;
    Ok(report)
}

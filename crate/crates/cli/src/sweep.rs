use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{from_value, merge_patch, parse_json, DataSource, ExperimentConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::run::{load_data, seed_dir, train_run, Data, RunSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub id: String,
    /// Merge patch applied to the base config.
    #[serde(default)]
    pub patch: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    /// An experiment config shared by every condition; `seeds` and `run_dir`
    /// are supplied by the sweep.
    pub base: Value,
    #[serde(default)]
    pub conditions: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: String,
    pub seed: u64,
    pub fp_acc: f64,
    pub quant_acc_minmax: f64,
    pub quant_acc_percentile: f64,
    pub acc_drop_minmax: f64,
    pub acc_drop_percentile: f64,
    pub max_act_mod: f64,
    pub max_act_blk: f64,
    pub total_pair_energy: f64,
    pub lambda_wd: f64,
    pub lambda_cd: f64,
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "config_id",
    "seed",
    "fp_acc",
    "quant_acc_minmax",
    "quant_acc_percentile",
    "acc_drop_minmax",
    "acc_drop_percentile",
    "max_act_mod",
    "max_act_blk",
    "total_pair_energy",
    "lambda_wd",
    "lambda_cd",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub config_id: String,
    pub seed: u64,
    pub exit_code: i32,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl SweepRow {
    fn from_summary(id: &str, s: &RunSummary) -> CliResult<Self> {
        let q = |k: &str| {
            s.eval
                .quant
                .get(k)
                .cloned()
                .ok_or_else(|| CliError::Numeric(format!("summary lacks scheme {k}")))
        };
        let (mm, pc) = (q("minmax")?, q("percentile")?);
        Ok(Self {
            config_id: id.to_string(),
            seed: s.seed,
            fp_acc: s.eval.fp_accuracy,
            quant_acc_minmax: mm.quant_accuracy,
            quant_acc_percentile: pc.quant_accuracy,
            acc_drop_minmax: mm.acc_drop,
            acc_drop_percentile: pc.acc_drop,
            max_act_mod: s.eval.max_act_mod,
            max_act_blk: s.eval.max_act_blk,
            total_pair_energy: s.eval.total_pair_energy,
            lambda_wd: s.lambda_wd,
            lambda_cd: s.lambda_cd,
        })
    }
}

impl SweepConfig {
    pub fn new(base: &ExperimentConfig, conditions: Vec<Condition>, seeds: Vec<u64>, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            base: serde_json::to_value(base).expect("config serializes"),
            conditions,
            seeds,
            run_dir: run_dir.into(),
        }
    }

    /// The resolved config of one condition.
    pub fn member(&self, c: &Condition) -> CliResult<ExperimentConfig> {
        let mut v = self.base.clone();
        merge_patch(&mut v, &c.patch);
        v["seeds"] = json!(self.seeds);
        v["run_dir"] = json!(self.run_dir.join(&c.id));
        let cfg: ExperimentConfig = from_value(v).map_err(|e| e.context(format!("condition {}", c.id)))?;
        cfg.validate().map_err(|e| e.context(format!("condition {}", c.id)))?;
        Ok(cfg)
    }
}

/// `reg_mode = cd_decay` at each strength.
pub fn lambda_grid(lambdas: &[f64]) -> Vec<Condition> {
    lambdas
        .iter()
        .map(|&l| Condition {
            id: format!("lambda_cd={l}"),
            patch: json!({"reg_mode": "cd_decay", "cd": {"lambda_cd": l}}),
        })
        .collect()
}

/// Decoupled decay vs loss form vs stabilized loss form at one strength.
pub fn mode_grid(lambda_cd: f64) -> Vec<Condition> {
    let cd = json!({"lambda_cd": lambda_cd});
    vec![
        Condition { id: "decay".into(), patch: json!({"reg_mode": "cd_decay", "cd": cd}) },
        Condition { id: "loss".into(), patch: json!({"reg_mode": "cd_loss", "cd": cd}) },
        Condition {
            id: "loss_stabilized".into(),
            patch: json!({"reg_mode": "cd_loss", "cd": cd, "stabilized": true}),
        },
    ]
}

/// Baseline plus decoupled CD on each pair set.
pub fn pair_set_grid(lambda_cd: f64) -> Vec<Condition> {
    let mut out = vec![Condition { id: "baseline".into(), patch: json!({"reg_mode": "none", "cd": null}) }];
    for set in ["A", "B", "C", "A+B"] {
        out.push(Condition {
            id: set.to_string(),
            patch: json!({"reg_mode": "cd_decay", "cd": {"lambda_cd": lambda_cd, "pair_set": set}}),
        });
    }
    out
}

pub fn load_sweep(path: &Path) -> CliResult<SweepConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: SweepConfig = parse_json(&text).map_err(|e| e.context(path.display()))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version: expected {SCHEMA_VERSION}, found {}",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

/// Run every (condition, seed) member sequentially. Member failures are
/// recorded and the sweep continues. Writes `sweep.csv` and
/// `sweep_failures.csv` under the sweep's run directory.
pub fn cmd_sweep(sweep: &SweepConfig) -> CliResult<SweepOutcome> {
    fs::create_dir_all(&sweep.run_dir)?;
    let mut outcome = SweepOutcome::default();
    let mut cache: Vec<(DataSource, Data)> = Vec::new();
    for c in &sweep.conditions {
        let cfg = match sweep.member(c) {
            Ok(cfg) => cfg,
            Err(e) => {
                for &seed in &sweep.seeds {
                    outcome.failures.push(failure(&c.id, seed, &e));
                }
                continue;
            }
        };
        let idx = match cache.iter().position(|(src, _)| *src == cfg.data) {
            Some(i) => i,
            None => match load_data(&cfg.data) {
                Ok(d) => {
                    cache.push((cfg.data.clone(), d));
                    cache.len() - 1
                }
                Err(e) => {
                    for &seed in &sweep.seeds {
                        outcome.failures.push(failure(&c.id, seed, &e));
                    }
                    continue;
                }
            },
        };
        for &seed in &sweep.seeds {
            let res = train_run(&cfg, seed, &cache[idx].1, &seed_dir(&cfg.run_dir, seed))
                .and_then(|s| SweepRow::from_summary(&c.id, &s));
            match res {
                Ok(row) => outcome.rows.push(row),
                Err(e) => outcome.failures.push(failure(&c.id, seed, &e)),
            }
        }
    }
    write_rows(&sweep.run_dir.join("sweep.csv"), &outcome.rows)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(sweep.run_dir.join("sweep_failures.csv"))?;
    w.write_record(["config_id", "seed", "exit_code", "error"])?;
    for f in &outcome.failures {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(outcome)
}

fn failure(id: &str, seed: u64, e: &CliError) -> SweepFailure {
    eprintln!("sweep member {id} seed {seed} failed: {e}");
    SweepFailure { config_id: id.to_string(), seed, exit_code: e.exit_code(), error: e.to_string() }
}

pub fn write_rows(path: &Path, rows: &[SweepRow]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> CliResult<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<SweepRow>, _>>()?)
}

use std::fs;
use std::path::Path;

use cdecay::data::Dataset;
use cdecay::diagnostics::{
    alignment_scores, max_activation, surrogate_agreement, total_pair_energy, zero_top_aligned_directions,
    InterventionConfig, InterventionReport, MaxActReport, SurrogateReport,
};
use cdecay::model::TransformerModel;
use cdecay::pairs::{canonical_matrices, enumerate_pairs, list_pairs, pair_energy, PairKind, PairListing, PairSet};
use cdecay::quant::{eval, quantize_model_w4a4, Calibration, QuantConfig};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::run::{load_data, write_json, Data, OpenRun};

#[derive(Clone, Debug, Serialize)]
pub struct InterventionRow {
    pub k: usize,
    pub max_act_mod: f64,
    pub max_act_blk: f64,
    pub fp_acc: f64,
    pub quant_acc: f64,
    pub total_pair_energy: f64,
    /// Unnormalized energy summed over the pairs eligible for zeroing.
    pub targeted_raw_energy: f64,
    /// Largest surrogate output over the eligible blocks.
    pub surrogate_max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseReport {
    pub max_act: MaxActReport,
    pub pairs: Vec<PairListing>,
    pub surrogate: Vec<SurrogateReport>,
    pub intervention: Vec<InterventionRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub removed: Option<InterventionReport>,
}

fn blocks(cfg: &ExperimentConfig) -> Vec<usize> {
    cfg.diagnose.blocks.clone().unwrap_or_else(|| (0..cfg.model.depth).collect())
}

fn intervention_config(cfg: &ExperimentConfig, k: usize) -> InterventionConfig {
    InterventionConfig {
        k,
        pairs: cfg.diagnose.pairs,
        blocks: cfg.diagnose.blocks.clone(),
        score: cfg.diagnose.score,
    }
}

fn targeted_raw_energy(model: &TransformerModel, cfg: &ExperimentConfig) -> CliResult<f64> {
    let eligible = cdecay::diagnostics::rank_directions(model, &intervention_config(cfg, 1))?;
    let mut ids: Vec<String> = eligible.into_iter().map(|d| d.pair).collect();
    ids.sort();
    ids.dedup();
    let mut total = 0.0;
    for p in enumerate_pairs(model, PairSet::B) {
        if ids.contains(&p.id()) {
            total += pair_energy(&p, model, false)?;
        }
    }
    Ok(total)
}

fn surrogates(model: &TransformerModel, cfg: &ExperimentConfig, probe: &Dataset) -> CliResult<Vec<SurrogateReport>> {
    (0..cfg.model.depth)
        .map(|l| Ok(surrogate_agreement(model, l, probe)?))
        .collect()
}

fn row(
    k: usize,
    model: &TransformerModel,
    cfg: &ExperimentConfig,
    data: &Data,
    probe: &Dataset,
    scheme: Calibration,
) -> CliResult<InterventionRow> {
    let act = max_activation(model, &data.eval)?;
    let q = quantize_model_w4a4(model, &data.train, &QuantConfig { calibration: scheme, ..cfg.quant.clone() })?;
    let eligible = blocks(cfg);
    let surrogate_max = surrogates(model, cfg, probe)?
        .iter()
        .filter(|s| eligible.contains(&s.block))
        .fold(0.0f64, |a, s| a.max(s.max_surrogate));
    Ok(InterventionRow {
        k,
        max_act_mod: act.module_max,
        max_act_blk: act.block_max,
        fp_acc: eval(model, &data.eval)?,
        quant_acc: q.accuracy(&data.eval)?,
        total_pair_energy: total_pair_energy(model, PairSet::AB).unwrap_or(f64::NAN),
        targeted_raw_energy: targeted_raw_energy(model, cfg)?,
        surrogate_max,
    })
}

/// `0, 1, 2, 4, … , k`.
pub fn k_schedule(k: usize) -> Vec<usize> {
    let mut ks = vec![0];
    let mut v = 1;
    while v < k {
        ks.push(v);
        v *= 2;
    }
    if k > 0 {
        ks.push(k);
    }
    ks
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Activation maxima, pair listing, alignment table and surrogate scatter
/// for a trained run; with `zero_top_k`, the direction-zeroing table.
pub fn cmd_diagnose(run: &OpenRun, zero_top_k: Option<usize>, scheme: Calibration) -> CliResult<DiagnoseReport> {
    let cfg = &run.config;
    let model = &run.model;
    let data = load_data(&cfg.data)?;
    let out = run.dir.join("diagnose");
    fs::create_dir_all(&out)?;
    let probe = data.eval.take(cfg.diagnose.probe_samples.min(data.eval.len()));

    let max_act = max_activation(model, &data.eval)?;
    write_json(&out.join("max_act.json"), &max_act)?;
    let pairs = list_pairs(model, PairSet::AB)?;
    write_json(&out.join("pairs.json"), &pairs)?;

    let mut align = csv::Writer::from_path(out.join("alignment.csv"))?;
    align.write_record(["block", "pair", "index", "singular_value", "max_alpha"])?;
    for p in enumerate_pairs(model, PairSet::B).into_iter().filter(|p| p.kind == PairKind::Functional) {
        let (w1, w2) = canonical_matrices(&p, model);
        let a = alignment_scores(&w1, &w2)?;
        for i in 0..a.singular_values.len() {
            align.write_record([
                p.block.to_string(),
                p.id(),
                i.to_string(),
                a.singular_values[i].to_string(),
                a.max_alpha[i].to_string(),
            ])?;
        }
    }
    align.flush()?;

    let surrogate = surrogates(model, cfg, &probe)?;
    for s in &surrogate {
        write_csv(&out.join(format!("surrogate_block{}.csv", s.block)), &s.points, &["real", "surrogate"])?;
    }
    write_json(&out.join("surrogate.json"), &surrogate)?;

    let mut intervention = Vec::new();
    let mut removed = None;
    if let Some(k) = zero_top_k {
        for kk in k_schedule(k) {
            if kk == 0 {
                intervention.push(row(0, model, cfg, &data, &probe, scheme)?);
                continue;
            }
            let (m, rep) = zero_top_aligned_directions(model, &intervention_config(cfg, kk))?;
            intervention.push(row(kk, &m, cfg, &data, &probe, scheme)?);
            if kk == k {
                write_json(&out.join("intervention_surrogate.json"), &surrogates(&m, cfg, &probe)?)?;
                removed = Some(rep);
            }
        }
        write_csv(
            &out.join("intervention.csv"),
            &intervention,
            &[
                "k",
                "max_act_mod",
                "max_act_blk",
                "fp_acc",
                "quant_acc",
                "total_pair_energy",
                "targeted_raw_energy",
                "surrogate_max",
            ],
        )?;
        if let Some(r) = &removed {
            write_json(&out.join("intervention.json"), r)?;
        }
    }

    let report = DiagnoseReport { max_act, pairs, surrogate, intervention, removed };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

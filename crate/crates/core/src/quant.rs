//! Uniform affine fake quantization: symmetric per-channel weights,
//! asymmetric per-tensor activations at the inputs of every linear layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BlockParam, InputTransform, ObsPoint, ParamId, TraceMode, TransformerModel};

pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    #[default]
    Minmax,
    Percentile,
}

impl std::str::FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Calibration::Minmax),
            "percentile" => Ok(Calibration::Percentile),
            _ => Err(Error::Invalid(format!("unknown calibration scheme {s:?}"))),
        }
    }
}

impl std::fmt::Display for Calibration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Calibration::Minmax => "minmax",
            Calibration::Percentile => "percentile",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerChannel,
    PerTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "default_bits")]
    pub weight_bits: u32,
    #[serde(default = "default_bits")]
    pub act_bits: u32,
    #[serde(default)]
    pub weight_granularity: Granularity,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default = "default_q")]
    pub percentile_q: f64,
    #[serde(default = "default_calib_batches")]
    pub calib_batches: usize,
    #[serde(default = "default_calib_batch_size")]
    pub calib_batch_size: usize,
    #[serde(default)]
    pub calib_seed: u64,
}

fn default_bits() -> u32 {
    4
}
fn default_q() -> f64 {
    99.99
}
fn default_calib_batches() -> usize {
    8
}
fn default_calib_batch_size() -> usize {
    32
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 4,
            weight_granularity: Granularity::PerChannel,
            calibration: Calibration::Minmax,
            percentile_q: default_q(),
            calib_batches: default_calib_batches(),
            calib_batch_size: default_calib_batch_size(),
            calib_seed: 0,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.act_bits] {
            if !(2..=16).contains(&b) {
                return Err(Error::Invalid(format!("bit width {b} outside [2, 16]")));
            }
        }
        if !(self.percentile_q > 0.0 && self.percentile_q <= 100.0) {
            return Err(Error::Invalid(format!("percentile_q {} outside (0, 100]", self.percentile_q)));
        }
        if self.calib_batches == 0 || self.calib_batch_size == 0 {
            return Err(Error::Invalid("calibration needs at least one nonempty batch".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub qmin: i64,
    pub qmax: i64,
}

impl QuantParams {
    pub fn symmetric(bits: u32, scale: f64) -> Self {
        Self {
            scale,
            zero_point: 0,
            qmin: -(1 << (bits - 1)),
            qmax: (1 << (bits - 1)) - 1,
        }
    }

    fn asymmetric_grid(bits: u32) -> (i64, i64) {
        (0, (1 << bits) - 1)
    }
}

/// `(clamp(round(x/s) + z, qmin, qmax) − z) · s`, ties to even.
#[inline]
pub fn fake_quantize(x: f64, p: &QuantParams) -> f64 {
    let q = (x / p.scale).round_ties_even() + p.zero_point as f64;
    let q = q.clamp(p.qmin as f64, p.qmax as f64);
    (q - p.zero_point as f64) * p.scale
}

pub fn fake_quantize_slice(xs: &mut [f64], p: &QuantParams) {
    for x in xs {
        *x = fake_quantize(*x, p);
    }
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibration("no samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { location: "calibration samples".into() });
    }
    Ok(())
}

fn params_from_range(lo: f64, hi: f64, bits: u32, symmetric: bool) -> QuantParams {
    if symmetric {
        let m = lo.abs().max(hi.abs());
        let p = QuantParams::symmetric(bits, 1.0);
        let scale = m / p.qmax as f64;
        return QuantParams {
            scale: if scale > 0.0 { scale } else { SCALE_FLOOR },
            ..p
        };
    }
    let (qmin, qmax) = QuantParams::asymmetric_grid(bits);
    // Zero must stay exactly representable (padding, ReLU zeros, zero weights).
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let span = hi - lo;
    if span <= 0.0 {
        return QuantParams {
            scale: SCALE_FLOOR,
            zero_point: (qmin + qmax + 1) / 2,
            qmin,
            qmax,
        };
    }
    let scale = span / (qmax - qmin) as f64;
    let zp = ((-lo / scale).round_ties_even() as i64 + qmin).clamp(qmin, qmax);
    QuantParams { scale, zero_point: zp, qmin, qmax }
}

fn min_max(samples: &[f64]) -> (f64, f64) {
    samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

pub fn calibrate_minmax(samples: &[f64], bits: u32, symmetric: bool) -> Result<QuantParams> {
    check_samples(samples)?;
    let (lo, hi) = min_max(samples);
    Ok(params_from_range(lo, hi, bits, symmetric))
}

/// Nearest-rank `q`-th percentile of `|samples|`: the value at rank
/// `⌈q·n/100⌉` of the ascending order.
pub fn percentile_abs(samples: &[f64], q: f64) -> Result<f64> {
    check_samples(samples)?;
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::Invalid(format!("percentile {q} outside (0, 100]")));
    }
    let mut abs: Vec<f64> = samples.iter().map(|v| v.abs()).collect();
    let n = abs.len();
    let rank = ((q * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    let (_, v, _) = abs.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*v)
}

/// Clip to the `q`-th percentile of `|x|`, then apply the min-max rule.
pub fn calibrate_percentile(samples: &[f64], q: f64, bits: u32, symmetric: bool) -> Result<(QuantParams, f64)> {
    let clip = percentile_abs(samples, q)?;
    let (lo, hi) = min_max(samples);
    Ok((params_from_range(lo.max(-clip), hi.min(clip), bits, symmetric), clip))
}

/// Weight matrices that are quantized: every linear projection.
pub fn quantized_weights(depth: usize) -> Vec<ParamId> {
    let mut v = vec![ParamId::PatchWeight];
    for l in 0..depth {
        for p in [BlockParam::Wq, BlockParam::Wk, BlockParam::Wv, BlockParam::Wo, BlockParam::Wf1, BlockParam::Wf2] {
            v.push(ParamId::Block(l, p));
        }
    }
    v.push(ParamId::HeadWeight);
    v
}

/// Symmetric fake quantization of a stored `(in, out)` weight; per channel
/// means one scale per output column.
pub fn quantize_weight(w: &Matrix, bits: u32, granularity: Granularity) -> (Matrix, Vec<f64>) {
    let mut out = w.clone();
    match granularity {
        Granularity::PerTensor => {
            let p = params_from_range(-w.max_abs(), w.max_abs(), bits, true);
            fake_quantize_slice(out.data_mut(), &p);
            (out, vec![p.scale])
        }
        Granularity::PerChannel => {
            let mut scales = Vec::with_capacity(w.cols());
            for c in 0..w.cols() {
                let col = w.column(c);
                let m = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let p = params_from_range(-m, m, bits, true);
                for r in 0..w.rows() {
                    out[(r, c)] = fake_quantize(w[(r, c)], &p);
                }
                scales.push(p.scale);
            }
            (out, scales)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PointReport {
    pub point: String,
    pub scale: f64,
    pub zero_point: i64,
    pub qmin: i64,
    pub qmax: i64,
    pub clip: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightReport {
    pub param: String,
    pub channels: usize,
    pub scale_min: f64,
    pub scale_max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QuantReport {
    pub scheme: Calibration,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub percentile_q: Option<f64>,
    pub points: Vec<PointReport>,
    pub weights: Vec<WeightReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quant_accuracy: Option<f64>,
}

/// A model with fake-quantized weights plus per-point activation quantizers.
#[derive(Clone, Debug)]
pub struct QuantizedEvalModel {
    pub model: TransformerModel,
    pub act_params: BTreeMap<ObsPoint, QuantParams>,
    pub report: QuantReport,
}

impl InputTransform for QuantizedEvalModel {
    fn transform(&self, point: ObsPoint, x: &mut Matrix) {
        if let Some(p) = self.act_params.get(&point) {
            fake_quantize_slice(x.data_mut(), p);
        }
    }
}

impl QuantizedEvalModel {
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        self.model.accuracy(dataset, Some(self))
    }
}

/// Fake-quantize all linear weights, then calibrate every linear input from
/// full-trace passes of the weight-quantized model over the first
/// `calib_batches` shuffled batches of `calib_data`.
pub fn quantize_model_w4a4(
    model: &TransformerModel,
    calib_data: &Dataset,
    cfg: &QuantConfig,
) -> Result<QuantizedEvalModel> {
    cfg.validate()?;
    if calib_data.is_empty() {
        return Err(Error::EmptyCalibration("calibration dataset is empty".into()));
    }
    let depth = model.config().depth;
    let mut qm = model.clone();
    let mut weights = Vec::new();
    for id in quantized_weights(depth) {
        let (w, scales) = quantize_weight(model.param(id), cfg.weight_bits, cfg.weight_granularity);
        *qm.param_mut(id) = w;
        weights.push(WeightReport {
            param: id.to_string(),
            channels: scales.len(),
            scale_min: scales.iter().cloned().fold(f64::INFINITY, f64::min),
            scale_max: scales.iter().cloned().fold(0.0, f64::max),
        });
    }

    let mut samples: BTreeMap<ObsPoint, Vec<f64>> = BTreeMap::new();
    for batch in batches(calib_data, cfg.calib_batch_size, cfg.calib_seed, 0)?
        .into_iter()
        .take(cfg.calib_batches)
    {
        let trace = qm.forward(&batch, TraceMode::Full)?.trace;
        for (k, v) in trace.retained {
            samples.entry(k).or_default().extend(v);
        }
    }

    let mut act_params = BTreeMap::new();
    let mut points = Vec::new();
    for point in ObsPoint::all(depth) {
        let s = samples.get(&point).filter(|s| !s.is_empty()).ok_or_else(|| {
            Error::EmptyCalibration(format!("no calibration samples at {point}"))
        })?;
        let (p, clip) = match cfg.calibration {
            Calibration::Minmax => (calibrate_minmax(s, cfg.act_bits, false)?, None),
            Calibration::Percentile => {
                let (p, c) = calibrate_percentile(s, cfg.percentile_q, cfg.act_bits, false)?;
                (p, Some(c))
            }
        };
        points.push(PointReport {
            point: point.to_string(),
            scale: p.scale,
            zero_point: p.zero_point,
            qmin: p.qmin,
            qmax: p.qmax,
            clip,
            samples: s.len(),
        });
        act_params.insert(point, p);
    }

    Ok(QuantizedEvalModel {
        model: qm,
        act_params,
        report: QuantReport {
            scheme: cfg.calibration,
            weight_bits: cfg.weight_bits,
            act_bits: cfg.act_bits,
            percentile_q: (cfg.calibration == Calibration::Percentile).then_some(cfg.percentile_q),
            points,
            weights,
            fp_accuracy: None,
            quant_accuracy: None,
        },
    })
}

/// Function-preserving outlier: LN2 of `block` emits channel `channel` scaled
/// by `factor` and `W_F1` absorbs `1/factor` on that input row, so the FFN
/// input activation carries a large channel while the logits are unchanged
/// up to rounding.
pub fn inject_activation_outlier(model: &TransformerModel, block: usize, channel: usize, factor: f64) -> Result<TransformerModel> {
    let cfg = model.config();
    if block >= cfg.depth || channel >= cfg.d_model || factor == 0.0 || !factor.is_finite() {
        return Err(Error::Invalid(format!(
            "outlier injection needs block < {}, channel < {} and a finite nonzero factor",
            cfg.depth, cfg.d_model
        )));
    }
    let mut out = model.clone();
    for p in [BlockParam::Ln2Scale, BlockParam::Ln2Bias] {
        out.param_mut(ParamId::Block(block, p)).data_mut()[channel] *= factor;
    }
    out.param_mut(ParamId::Block(block, BlockParam::Wf1))
        .row_mut(channel)
        .iter_mut()
        .for_each(|w| *w /= factor);
    Ok(out)
}

/// Top-1 accuracy of a full-precision model.
pub fn eval(model: &TransformerModel, dataset: &Dataset) -> Result<f64> {
    model.accuracy(dataset, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_batch;
    use crate::model::{ActivationTrace, ModelConfig};

    #[test]
    fn minmax_examples() {
        let s: Vec<f64> = (0..=15).map(f64::from).collect();
        let p = calibrate_minmax(&s, 4, false).unwrap();
        assert_eq!((p.scale, p.zero_point, p.qmin, p.qmax), (1.0, 0, 0, 15));
        let s: Vec<f64> = (-7..=7).map(f64::from).collect();
        let p = calibrate_minmax(&s, 4, true).unwrap();
        assert_eq!((p.scale, p.qmin, p.qmax), (1.0, -8, 7));
    }

    #[test]
    fn degenerate_ranges() {
        let p = calibrate_minmax(&[0.0; 5], 4, false).unwrap();
        assert_eq!(p.scale, SCALE_FLOOR);
        assert_eq!(p.zero_point, 8);
        assert_eq!(fake_quantize(0.0, &p), 0.0);
        let p = calibrate_minmax(&[0.0; 5], 4, true).unwrap();
        assert_eq!(p.scale, SCALE_FLOOR);
        for c in [2.5, -0.75] {
            let p = calibrate_minmax(&[c; 7], 4, false).unwrap();
            assert!((fake_quantize(c, &p) - c).abs() <= SCALE_FLOOR);
        }
        assert!(matches!(calibrate_minmax(&[], 4, false), Err(Error::EmptyCalibration(_))));
    }

    #[test]
    fn percentile_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_abs(&s, 99.0).unwrap(), 99.0);
        assert_eq!(percentile_abs(&s, 100.0).unwrap(), 100.0);
        assert_eq!(percentile_abs(&s, 0.5).unwrap(), 1.0);
        let mixed: Vec<f64> = (0..1000).map(|i| ((i * 37) % 200) as f64 / 100.0 - 1.0).collect();
        for sym in [true, false] {
            let a = calibrate_minmax(&mixed, 4, sym).unwrap();
            let (b, _) = calibrate_percentile(&mixed, 100.0, 4, sym).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn percentile_ignores_a_single_outlier() {
        let mut s: Vec<f64> = (0..999).map(|i| (i as f64 / 998.0) * 2.0 - 1.0).collect();
        s.push(1e6);
        let (p, clip) = calibrate_percentile(&s, 99.0, 4, false).unwrap();
        assert!(clip <= 1.0);
        let m = calibrate_minmax(&s, 4, false).unwrap();
        let err = |q: &QuantParams| s[..999].iter().map(|v| (v - fake_quantize(*v, q)).powi(2)).sum::<f64>();
        assert!(err(&p) < err(&m));
    }

    #[test]
    fn fake_quantize_examples() {
        let p = QuantParams::symmetric(4, 1.0);
        assert_eq!(fake_quantize(100.0, &p), 7.0);
        assert_eq!(fake_quantize(-100.0, &p), -8.0);
        assert_eq!(fake_quantize(3.5, &p), 4.0);
        assert_eq!(fake_quantize(2.5, &p), 2.0);
        let p = QuantParams::symmetric(4, 0.37);
        for k in -8..=7 {
            let x = k as f64 * 0.37;
            assert_eq!(fake_quantize(x, &p), x);
        }
    }

    #[test]
    fn per_channel_scales_are_independent() {
        let mut w = Matrix::from_vec(4, 3, vec![0.1, 0.2, -0.3, 0.05, 0.1, 0.2, -0.1, 0.0, 0.1, 0.02, -0.2, 0.3]).unwrap();
        for r in 0..4 {
            w[(r, 1)] *= 100.0;
        }
        let (_, scales) = quantize_weight(&w, 4, Granularity::PerChannel);
        assert!(scales[1] > 50.0 * scales[0] && scales[1] > 50.0 * scales[2]);
        let (_, one) = quantize_weight(&w, 4, Granularity::PerTensor);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn zero_weight_model_predicts_the_head_bias() {
        let mut m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        for (_, t) in m.params_mut().iter_mut() {
            t.fill(0.0);
        }
        m.param_mut(ParamId::HeadBias).data_mut().copy_from_slice(&[0.0, 2.0, 1.0]);
        let data = random_batch(30, 1, 8, 3, 4);
        let q = quantize_model_w4a4(&m, &data, &QuantConfig::default()).unwrap();
        let out = q.model.forward_with(&data, TraceMode::Off, Some(&q)).unwrap();
        for r in 0..30 {
            assert_eq!(out.logits.row(r), &[0.0, 2.0, 1.0]);
        }
        let majority = data.labels.iter().filter(|&&l| l == 1).count() as f64 / 30.0;
        assert_eq!(q.accuracy(&data).unwrap(), majority);
    }

    #[test]
    fn sixteen_bits_match_full_precision() {
        let m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        let data = random_batch(64, 1, 8, 3, 5);
        let cfg = QuantConfig { weight_bits: 16, act_bits: 16, ..QuantConfig::default() };
        let q = quantize_model_w4a4(&m, &data, &cfg).unwrap();
        let fp = m.forward(&data, TraceMode::Off).unwrap().logits;
        let ql = q.model.forward_with(&data, TraceMode::Off, Some(&q)).unwrap().logits;
        assert!(fp.max_abs_diff(&ql) < 1e-3);
    }

    #[test]
    fn report_lists_every_point() {
        let m = TransformerModel::new(ModelConfig::default()).unwrap();
        let data = random_batch(40, 1, 16, 10, 6);
        let cfg = QuantConfig { calibration: Calibration::Percentile, ..QuantConfig::default() };
        let q = quantize_model_w4a4(&m, &data, &cfg).unwrap();
        assert_eq!(q.report.points.len(), 10);
        assert_eq!(q.report.weights.len(), 14);
        assert!(q.report.points.iter().all(|p| p.clip.is_some() && p.samples > 0));
        assert_eq!(q.accuracy(&data).unwrap(), q.accuracy(&data).unwrap());
    }

    #[test]
    fn outlier_injection_preserves_logits() {
        let m = TransformerModel::new(ModelConfig::default()).unwrap();
        let batch = random_batch(4, 1, 16, 10, 3);
        let o = inject_activation_outlier(&m, 1, 5, 100.0).unwrap();
        let a = m.forward(&batch, TraceMode::Full).unwrap();
        let b = o.forward(&batch, TraceMode::Full).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        let max_at = |t: &ActivationTrace| t.retained[&ObsPoint::Fc1(1)].iter().fold(0.0f64, |u, v| u.max(v.abs()));
        assert!(max_at(&b.trace) > 20.0 * max_at(&a.trace));
        assert!(inject_activation_outlier(&m, 2, 0, 100.0).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(QuantConfig { weight_bits: 1, ..QuantConfig::default() }.validate().is_err());
        assert!(QuantConfig { act_bits: 17, ..QuantConfig::default() }.validate().is_err());
        assert!(QuantConfig { percentile_q: 0.0, ..QuantConfig::default() }.validate().is_err());
        assert!(QuantConfig { percentile_q: 100.5, ..QuantConfig::default() }.validate().is_err());
    }
}

//! Forward pass, activation tracing and exact reverse-mode gradients.
//!
//! Samples are processed independently in fixed chunks; per-chunk results are
//! reduced in chunk order, so gradients and traces are bit-identical no matter
//! how many threads rayon uses.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use super::{BlockParam, GradientSet, ParamId, ParamSet, TransformerModel};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_nt, gemm_tn_acc, Matrix};

const CHUNK: usize = 8;
const EVAL_SLICE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Off,
    /// Per-block activation maxima only.
    Maxima,
    /// Maxima plus every quantized-linear input and every block output.
    Full,
}

/// Inputs of the linear layers that fake quantization observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ObsPoint {
    PatchInput,
    Qkv(usize),
    AttnProj(usize),
    Fc1(usize),
    Fc2(usize),
    Head,
}

impl ObsPoint {
    pub fn all(depth: usize) -> Vec<ObsPoint> {
        let mut v = vec![ObsPoint::PatchInput];
        for l in 0..depth {
            v.extend([
                ObsPoint::Qkv(l),
                ObsPoint::AttnProj(l),
                ObsPoint::Fc1(l),
                ObsPoint::Fc2(l),
            ]);
        }
        v.push(ObsPoint::Head);
        v
    }
}

impl fmt::Display for ObsPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObsPoint::PatchInput => write!(f, "patch_embed.input"),
            ObsPoint::Qkv(l) => write!(f, "blocks.{l}.attn.qkv.input"),
            ObsPoint::AttnProj(l) => write!(f, "blocks.{l}.attn.proj.input"),
            ObsPoint::Fc1(l) => write!(f, "blocks.{l}.ffn.fc1.input"),
            ObsPoint::Fc2(l) => write!(f, "blocks.{l}.ffn.fc2.input"),
            ObsPoint::Head => write!(f, "head.input"),
        }
    }
}

/// Rewrites a linear layer's input in place before it is multiplied, e.g.
/// activation fake quantization.
pub trait InputTransform: Sync {
    fn transform(&self, point: ObsPoint, x: &mut Matrix);
}

/// A differentiable penalty on block outputs `Y` (one sample at a time).
/// Returns this sample's contribution to the penalty and adds its gradient
/// into `dy`.
pub trait ActivationPenalty: Sync {
    fn apply(&self, block: usize, y: &Matrix, dy: &mut Matrix) -> f64;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BlockMaxima {
    pub q: f64,
    pub k: f64,
    pub v: f64,
    pub attn_out: f64,
    pub ffn_hidden: f64,
    pub ffn_out: f64,
    pub x_mid: f64,
    pub y: f64,
}

impl BlockMaxima {
    /// Max over the module group: Q, K, V, attention output, FFN hidden, FFN output.
    pub fn module_max(&self) -> f64 {
        [self.q, self.k, self.v, self.attn_out, self.ffn_hidden, self.ffn_out]
            .into_iter()
            .fold(0.0, f64::max)
    }

    /// Max over the block outputs `X'` and `Y`.
    pub fn block_max(&self) -> f64 {
        self.x_mid.max(self.y)
    }

    fn merge(&mut self, o: &BlockMaxima) {
        self.q = self.q.max(o.q);
        self.k = self.k.max(o.k);
        self.v = self.v.max(o.v);
        self.attn_out = self.attn_out.max(o.attn_out);
        self.ffn_hidden = self.ffn_hidden.max(o.ffn_hidden);
        self.ffn_out = self.ffn_out.max(o.ffn_out);
        self.x_mid = self.x_mid.max(o.x_mid);
        self.y = self.y.max(o.y);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    /// Max |·| of the patch embedding output, before positional embedding.
    pub embed_max: f64,
    pub blocks: Vec<BlockMaxima>,
    /// Full mode: flattened inputs of each quantized linear layer.
    pub retained: BTreeMap<ObsPoint, Vec<f64>>,
    /// Full mode: flattened block outputs `Y` per block.
    pub block_outputs: Vec<Vec<f64>>,
    pub samples: usize,
}

impl ActivationTrace {
    pub fn module_max(&self) -> f64 {
        self.blocks.iter().map(BlockMaxima::module_max).fold(0.0, f64::max)
    }

    pub fn block_max(&self) -> f64 {
        self.blocks.iter().map(BlockMaxima::block_max).fold(0.0, f64::max)
    }

    /// Componentwise max of maxima; retained tensors are appended in order.
    pub fn merge(&mut self, other: ActivationTrace) {
        self.embed_max = self.embed_max.max(other.embed_max);
        if self.blocks.is_empty() {
            self.blocks = other.blocks;
        } else {
            for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
                a.merge(b);
            }
        }
        for (k, v) in other.retained {
            self.retained.entry(k).or_default().extend(v);
        }
        if self.block_outputs.is_empty() {
            self.block_outputs = other.block_outputs;
        } else {
            for (a, b) in self.block_outputs.iter_mut().zip(other.block_outputs) {
                a.extend(b);
            }
        }
        self.samples += other.samples;
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(batch, classes)`.
    pub logits: Matrix,
    pub trace: ActivationTrace,
}

#[derive(Clone, Debug)]
pub struct TrainPass {
    /// Mean cross-entropy over the batch.
    pub task_loss: f64,
    /// Sum of the penalty contributions reported by the [`ActivationPenalty`].
    pub penalty: f64,
    pub grads: GradientSet,
    pub trace: ActivationTrace,
    pub correct: usize,
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    qkv_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
    ln2: LnCache,
    fc1_in: Matrix,
    h_pre: Matrix,
    fc2_in: Matrix,
    y: Matrix,
    maxima: BlockMaxima,
}

struct SampleCache {
    patches: Matrix,
    embed_max: f64,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    head_in: Matrix,
    logits: Vec<f64>,
}

fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> (Matrix, LnCache) {
    let (rows, d) = x.shape();
    let mut xhat = Matrix::zeros(rows, d);
    let mut out = Matrix::zeros(rows, d);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let xh = xhat.row(r);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xh[j] * gamma[j] + beta[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Normalized rows `(x − mean) / sqrt(var + eps)` before scale and bias.
pub fn normalize_rows(x: &Matrix, eps: f64) -> Matrix {
    let d = x.cols();
    layer_norm(x, &vec![1.0; d], &vec![0.0; d], eps).1.xhat
}

fn ln_backward(
    cache: &LnCache,
    gamma: &[f64],
    dout: &Matrix,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let (rows, d) = dout.shape();
    let mut dx = Matrix::zeros(rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = dout.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            dxhat[j] = g[j] * gamma[j];
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// `x · w + b` for row-major activations.
fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    gemm(x.data(), x.rows(), x.cols(), w.data(), w.cols(), out.data_mut());
    let bias = b.data();
    for r in 0..out.rows() {
        for (o, bb) in out.row_mut(r).iter_mut().zip(bias) {
            *o += bb;
        }
    }
    out
}

/// Accumulate weight/bias gradients of `y = x·w + b` and return `dy · wᵀ`.
fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dw: &mut Matrix, db: &mut Matrix) -> Matrix {
    gemm_tn_acc(x.data(), x.rows(), x.cols(), dy.data(), dy.cols(), dw.data_mut());
    colsum_acc(dy, db);
    let mut dx = Matrix::zeros(dy.rows(), w.rows());
    gemm_nt(dy.data(), dy.rows(), dy.cols(), w.data(), w.rows(), dx.data_mut());
    dx
}

fn colsum_acc(m: &Matrix, out: &mut Matrix) {
    let acc = out.data_mut();
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

fn columns(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn write_columns(dst: &mut Matrix, start: usize, src: &Matrix) {
    let w = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
    }
}

fn check_finite(m: &Matrix, block: Option<usize>, name: &str) -> Result<()> {
    if m.is_finite() {
        return Ok(());
    }
    let location = match block {
        Some(l) => format!("block {l} tensor {name}"),
        None => format!("tensor {name}"),
    };
    Err(Error::NonFinite { location })
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct ChunkResult {
    loss_sum: f64,
    penalty: f64,
    correct: usize,
    grads: Option<GradientSet>,
    logits: Vec<f64>,
    trace: ActivationTrace,
}

impl TransformerModel {
    fn check_batch(&self, batch: &Batch, need_labels: bool) -> Result<()> {
        let cfg = &self.config;
        if batch.channels != cfg.channels || batch.side != cfg.image_side {
            return Err(Error::Invalid(format!(
                "batch images are {}x{}x{}, model expects {}x{}x{}",
                batch.channels, batch.side, batch.side, cfg.channels, cfg.image_side, cfg.image_side
            )));
        }
        if batch.images.len() != batch.len() * cfg.image_len() {
            return Err(Error::Invalid("batch pixel buffer has the wrong length".into()));
        }
        if need_labels {
            if let Some(&l) = batch.labels.iter().find(|&&l| l >= cfg.classes) {
                return Err(Error::Invalid(format!("label {l} out of range for {} classes", cfg.classes)));
            }
        }
        Ok(())
    }

    fn w(&self, l: usize, p: BlockParam) -> &Matrix {
        self.params.get(ParamId::Block(l, p))
    }

    fn extract_patches(&self, image: &[f64]) -> Matrix {
        let cfg = &self.config;
        let (s, p, g) = (cfg.image_side, cfg.patch_side, cfg.grid());
        let mut out = Matrix::zeros(cfg.num_patches(), cfg.patch_dim());
        for py in 0..g {
            for px in 0..g {
                let row = out.row_mut(py * g + px);
                let mut k = 0;
                for c in 0..cfg.channels {
                    for dy in 0..p {
                        let base = c * s * s + (py * p + dy) * s + px * p;
                        row[k..k + p].copy_from_slice(&image[base..base + p]);
                        k += p;
                    }
                }
            }
        }
        out
    }

    fn sample_forward(&self, image: &[f64], tf: Option<&dyn InputTransform>) -> Result<SampleCache> {
        let cfg = &self.config;
        let (d, dh, heads, t) = (cfg.d_model, cfg.d_head(), cfg.heads, cfg.tokens());
        let apply = |point: ObsPoint, m: &mut Matrix| {
            if let Some(tf) = tf {
                tf.transform(point, m);
            }
        };

        let mut patches = self.extract_patches(image);
        apply(ObsPoint::PatchInput, &mut patches);
        let embed = linear(
            &patches,
            self.params.get(ParamId::PatchWeight),
            self.params.get(ParamId::PatchBias),
        );
        check_finite(&embed, None, "patch_embed")?;
        let embed_max = embed.max_abs();

        let pos = self.params.get(ParamId::PosEmbed);
        let cls = self.params.get(ParamId::ClassToken);
        let mut x = Matrix::zeros(t, d);
        for (j, o) in x.row_mut(0).iter_mut().enumerate() {
            *o = cls.data()[j] + pos[(0, j)];
        }
        for r in 1..t {
            let e = embed.row(r - 1);
            for (j, o) in x.row_mut(r).iter_mut().enumerate() {
                *o = e[j] + pos[(r, j)];
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let (mut qkv_in, ln1) = layer_norm(
                &x,
                self.w(l, BlockParam::Ln1Scale).data(),
                self.w(l, BlockParam::Ln1Bias).data(),
                cfg.ln_eps,
            );
            apply(ObsPoint::Qkv(l), &mut qkv_in);
            let q = linear(&qkv_in, self.w(l, BlockParam::Wq), self.w(l, BlockParam::Bq));
            let k = linear(&qkv_in, self.w(l, BlockParam::Wk), self.w(l, BlockParam::Bk));
            let v = linear(&qkv_in, self.w(l, BlockParam::Wv), self.w(l, BlockParam::Bv));
            check_finite(&q, Some(l), "q")?;
            check_finite(&k, Some(l), "k")?;
            check_finite(&v, Some(l), "v")?;

            let mut concat = Matrix::zeros(t, d);
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = columns(&q, h * dh, dh);
                let kh = columns(&k, h * dh, dh);
                let vh = columns(&v, h * dh, dh);
                let mut p = Matrix::zeros(t, t);
                gemm_nt(qh.data(), t, dh, kh.data(), t, p.data_mut());
                for r in 0..t {
                    let row = p.row_mut(r);
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                let mut oh = Matrix::zeros(t, dh);
                gemm(p.data(), t, t, vh.data(), dh, oh.data_mut());
                write_columns(&mut concat, h * dh, &oh);
                probs.push(p);
            }
            apply(ObsPoint::AttnProj(l), &mut concat);
            let attn = linear(&concat, self.w(l, BlockParam::Wo), self.w(l, BlockParam::Bo));
            check_finite(&attn, Some(l), "attn_out")?;
            let x_mid = x.add(&attn)?;
            check_finite(&x_mid, Some(l), "x_mid")?;

            let (mut fc1_in, ln2) = layer_norm(
                &x_mid,
                self.w(l, BlockParam::Ln2Scale).data(),
                self.w(l, BlockParam::Ln2Bias).data(),
                cfg.ln_eps,
            );
            apply(ObsPoint::Fc1(l), &mut fc1_in);
            let h_pre = linear(&fc1_in, self.w(l, BlockParam::Wf1), self.w(l, BlockParam::Bf1));
            check_finite(&h_pre, Some(l), "ffn_hidden")?;
            let mut fc2_in = h_pre.clone();
            let act = cfg.activation;
            fc2_in.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            apply(ObsPoint::Fc2(l), &mut fc2_in);
            let ffn = linear(&fc2_in, self.w(l, BlockParam::Wf2), self.w(l, BlockParam::Bf2));
            check_finite(&ffn, Some(l), "ffn_out")?;
            let y = x_mid.add(&ffn)?;
            check_finite(&y, Some(l), "y")?;

            let maxima = BlockMaxima {
                q: q.max_abs(),
                k: k.max_abs(),
                v: v.max_abs(),
                attn_out: attn.max_abs(),
                ffn_hidden: h_pre.max_abs(),
                ffn_out: ffn.max_abs(),
                x_mid: x_mid.max_abs(),
                y: y.max_abs(),
            };
            x = y.clone();
            blocks.push(BlockCache {
                ln1,
                qkv_in,
                q,
                k,
                v,
                probs,
                concat,
                ln2,
                fc1_in,
                h_pre,
                fc2_in,
                y,
                maxima,
            });
        }

        let cls_row = Matrix::row_vector(x.row(0));
        let (mut head_in, final_ln) = layer_norm(
            &cls_row,
            self.params.get(ParamId::FinalLnScale).data(),
            self.params.get(ParamId::FinalLnBias).data(),
            cfg.ln_eps,
        );
        apply(ObsPoint::Head, &mut head_in);
        let logits = linear(
            &head_in,
            self.params.get(ParamId::HeadWeight),
            self.params.get(ParamId::HeadBias),
        );
        check_finite(&logits, None, "logits")?;
        Ok(SampleCache {
            patches,
            embed_max,
            blocks,
            final_ln,
            head_in,
            logits: logits.into_data(),
        })
    }

    fn sample_backward(
        &self,
        cache: &SampleCache,
        dlogits: &[f64],
        penalty: Option<&dyn ActivationPenalty>,
        g: &mut ParamSet,
    ) -> f64 {
        let cfg = &self.config;
        let (d, dh, heads, t) = (cfg.d_model, cfg.d_head(), cfg.heads, cfg.tokens());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut penalty_sum = 0.0;

        let dl = Matrix::row_vector(dlogits);
        let dfinal = {
            let w = self.params.get(ParamId::HeadWeight);
            let mut dw = std::mem::replace(g.get_mut(ParamId::HeadWeight), Matrix::zeros(0, 0));
            let mut db = std::mem::replace(g.get_mut(ParamId::HeadBias), Matrix::zeros(0, 0));
            let dx = linear_backward(&cache.head_in, w, &dl, &mut dw, &mut db);
            *g.get_mut(ParamId::HeadWeight) = dw;
            *g.get_mut(ParamId::HeadBias) = db;
            dx
        };
        let mut dgamma = std::mem::replace(g.get_mut(ParamId::FinalLnScale), Matrix::zeros(0, 0));
        let mut dbeta = std::mem::replace(g.get_mut(ParamId::FinalLnBias), Matrix::zeros(0, 0));
        let dcls = ln_backward(
            &cache.final_ln,
            self.params.get(ParamId::FinalLnScale).data(),
            &dfinal,
            dgamma.data_mut(),
            dbeta.data_mut(),
        );
        *g.get_mut(ParamId::FinalLnScale) = dgamma;
        *g.get_mut(ParamId::FinalLnBias) = dbeta;

        let mut dx = Matrix::zeros(t, d);
        dx.row_mut(0).copy_from_slice(dcls.row(0));

        for l in (0..cfg.depth).rev() {
            let bc = &cache.blocks[l];
            if let Some(p) = penalty {
                penalty_sum += p.apply(l, &bc.y, &mut dx);
            }
            // Y = X' + FFN(LN2(X'))
            let mut grads = BlockGrads::take(g, l);
            let d_fc2_in = linear_backward(&bc.fc2_in, self.w(l, BlockParam::Wf2), &dx, &mut grads.wf2, &mut grads.bf2);
            let act = cfg.activation;
            let mut dh_pre = d_fc2_in;
            for (gv, &hv) in dh_pre.data_mut().iter_mut().zip(bc.h_pre.data()) {
                *gv *= act.derivative(hv);
            }
            let d_fc1_in = linear_backward(&bc.fc1_in, self.w(l, BlockParam::Wf1), &dh_pre, &mut grads.wf1, &mut grads.bf1);
            let dxm_ln = ln_backward(
                &bc.ln2,
                self.w(l, BlockParam::Ln2Scale).data(),
                &d_fc1_in,
                grads.ln2_scale.data_mut(),
                grads.ln2_bias.data_mut(),
            );
            let mut dx_mid = dx;
            dx_mid.axpy(1.0, &dxm_ln).expect("same shape");

            // X' = X + Attn(LN1(X))
            let d_concat = linear_backward(&bc.concat, self.w(l, BlockParam::Wo), &dx_mid, &mut grads.wo, &mut grads.bo);
            let mut dq = Matrix::zeros(t, d);
            let mut dk = Matrix::zeros(t, d);
            let mut dv = Matrix::zeros(t, d);
            for h in 0..heads {
                let p = &bc.probs[h];
                let qh = columns(&bc.q, h * dh, dh);
                let kh = columns(&bc.k, h * dh, dh);
                let vh = columns(&bc.v, h * dh, dh);
                let doh = columns(&d_concat, h * dh, dh);
                let mut dp = Matrix::zeros(t, t);
                gemm_nt(doh.data(), t, dh, vh.data(), t, dp.data_mut());
                let mut dvh = Matrix::zeros(t, dh);
                gemm_tn_acc(p.data(), t, t, doh.data(), dh, dvh.data_mut());
                // Softmax backward, then the 1/sqrt(d_h) scaling.
                let mut ds = Matrix::zeros(t, t);
                for r in 0..t {
                    let pr = p.row(r);
                    let dpr = dp.row(r);
                    let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for (o, (&pv, &dpv)) in ds.row_mut(r).iter_mut().zip(pr.iter().zip(dpr)) {
                        *o = pv * (dpv - inner) * scale;
                    }
                }
                let mut dqh = Matrix::zeros(t, dh);
                gemm(ds.data(), t, t, kh.data(), dh, dqh.data_mut());
                let mut dkh = Matrix::zeros(t, dh);
                gemm_tn_acc(ds.data(), t, t, qh.data(), dh, dkh.data_mut());
                write_columns(&mut dq, h * dh, &dqh);
                write_columns(&mut dk, h * dh, &dkh);
                write_columns(&mut dv, h * dh, &dvh);
            }
            let mut d_qkv_in = linear_backward(&bc.qkv_in, self.w(l, BlockParam::Wq), &dq, &mut grads.wq, &mut grads.bq);
            d_qkv_in
                .axpy(1.0, &linear_backward(&bc.qkv_in, self.w(l, BlockParam::Wk), &dk, &mut grads.wk, &mut grads.bk))
                .expect("same shape");
            d_qkv_in
                .axpy(1.0, &linear_backward(&bc.qkv_in, self.w(l, BlockParam::Wv), &dv, &mut grads.wv, &mut grads.bv))
                .expect("same shape");
            let dx_ln = ln_backward(
                &bc.ln1,
                self.w(l, BlockParam::Ln1Scale).data(),
                &d_qkv_in,
                grads.ln1_scale.data_mut(),
                grads.ln1_bias.data_mut(),
            );
            grads.put(g, l);
            dx = dx_mid;
            dx.axpy(1.0, &dx_ln).expect("same shape");
        }

        // X0 = [cls; patches·W + b] + pos
        g.get_mut(ParamId::PosEmbed).axpy(1.0, &dx).expect("same shape");
        for (a, v) in g.get_mut(ParamId::ClassToken).data_mut().iter_mut().zip(dx.row(0)) {
            *a += v;
        }
        let mut de = Matrix::zeros(t - 1, d);
        for r in 1..t {
            de.row_mut(r - 1).copy_from_slice(dx.row(r));
        }
        let p = &cache.patches;
        gemm_tn_acc(p.data(), p.rows(), p.cols(), de.data(), d, g.get_mut(ParamId::PatchWeight).data_mut());
        colsum_acc(&de, g.get_mut(ParamId::PatchBias));
        penalty_sum
    }

    fn sample_trace(cache: &SampleCache, mode: TraceMode) -> ActivationTrace {
        let mut trace = ActivationTrace {
            samples: 1,
            ..ActivationTrace::default()
        };
        if mode == TraceMode::Off {
            return trace;
        }
        trace.embed_max = cache.embed_max;
        trace.blocks = cache.blocks.iter().map(|b| b.maxima).collect();
        if mode == TraceMode::Full {
            let r = &mut trace.retained;
            r.insert(ObsPoint::PatchInput, cache.patches.data().to_vec());
            for (l, b) in cache.blocks.iter().enumerate() {
                r.insert(ObsPoint::Qkv(l), b.qkv_in.data().to_vec());
                r.insert(ObsPoint::AttnProj(l), b.concat.data().to_vec());
                r.insert(ObsPoint::Fc1(l), b.fc1_in.data().to_vec());
                r.insert(ObsPoint::Fc2(l), b.fc2_in.data().to_vec());
            }
            r.insert(ObsPoint::Head, cache.head_in.data().to_vec());
            trace.block_outputs = cache.blocks.iter().map(|b| b.y.data().to_vec()).collect();
        }
        trace
    }

    fn run_chunks(
        &self,
        batch: &Batch,
        mode: TraceMode,
        tf: Option<&dyn InputTransform>,
        train: Option<Option<&dyn ActivationPenalty>>,
    ) -> Result<Vec<ChunkResult>> {
        let n = batch.len();
        let classes = self.config.classes;
        let inv_n = 1.0 / n as f64;
        let chunk_starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        chunk_starts
            .par_iter()
            .map(|&start| -> Result<ChunkResult> {
                let end = (start + CHUNK).min(n);
                let mut res = ChunkResult {
                    loss_sum: 0.0,
                    penalty: 0.0,
                    correct: 0,
                    grads: train.map(|_| ParamSet::zeros(&self.config)),
                    logits: Vec::with_capacity((end - start) * classes),
                    trace: ActivationTrace::default(),
                };
                for i in start..end {
                    let cache = self.sample_forward(batch.image(i), tf)?;
                    res.logits.extend_from_slice(&cache.logits);
                    if let Some(penalty) = train {
                        let label = batch.labels[i];
                        let z = &cache.logits;
                        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        res.loss_sum += lse - z[label];
                        if argmax(z) == label {
                            res.correct += 1;
                        }
                        let dlogits: Vec<f64> = z
                            .iter()
                            .enumerate()
                            .map(|(c, v)| {
                                let p = (v - lse).exp();
                                (p - if c == label { 1.0 } else { 0.0 }) * inv_n
                            })
                            .collect();
                        let g = res.grads.as_mut().expect("train chunk has grads");
                        res.penalty += self.sample_backward(&cache, &dlogits, penalty, g);
                    }
                    res.trace.merge(Self::sample_trace(&cache, mode));
                }
                Ok(res)
            })
            .collect()
    }

    /// Logits `(batch, classes)` and an activation trace populated per `mode`.
    pub fn forward(&self, batch: &Batch, mode: TraceMode) -> Result<ForwardOutput> {
        self.forward_with(batch, mode, None)
    }

    /// Forward pass with an optional rewrite of every quantized-linear input.
    pub fn forward_with(
        &self,
        batch: &Batch,
        mode: TraceMode,
        transform: Option<&dyn InputTransform>,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch, false)?;
        let chunks = self.run_chunks(batch, mode, transform, None)?;
        let mut logits = Vec::with_capacity(batch.len() * self.config.classes);
        let mut trace = ActivationTrace::default();
        for c in chunks {
            logits.extend(c.logits);
            trace.merge(c.trace);
        }
        Ok(ForwardOutput {
            logits: Matrix::from_vec(batch.len(), self.config.classes, logits)?,
            trace,
        })
    }

    /// Mean cross-entropy loss and its exact gradient, plus an optional
    /// block-output penalty whose gradient is folded in.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        penalty: Option<&dyn ActivationPenalty>,
        mode: TraceMode,
    ) -> Result<TrainPass> {
        self.check_batch(batch, true)?;
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let chunks = self.run_chunks(batch, mode, None, Some(penalty))?;
        let mut grads = ParamSet::zeros(&self.config);
        let mut trace = ActivationTrace::default();
        let (mut loss, mut pen, mut correct) = (0.0, 0.0, 0);
        for c in chunks {
            loss += c.loss_sum;
            pen += c.penalty;
            correct += c.correct;
            grads.axpy(1.0, c.grads.as_ref().expect("train chunk has grads"));
            trace.merge(c.trace);
        }
        Ok(TrainPass {
            task_loss: loss / batch.len() as f64,
            penalty: pen,
            grads,
            trace,
            correct,
        })
    }

    /// Gradient of the mean cross-entropy over `batch` w.r.t. every parameter.
    pub fn backward(&self, batch: &Batch) -> Result<GradientSet> {
        Ok(self.loss_and_gradients(batch, None, TraceMode::Off)?.grads)
    }

    /// Top-1 accuracy over `dataset`, evaluated in slices to bound memory.
    pub fn accuracy(&self, dataset: &Batch, transform: Option<&dyn InputTransform>) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0;
        for start in (0..dataset.len()).step_by(EVAL_SLICE) {
            let idx: Vec<usize> = (start..(start + EVAL_SLICE).min(dataset.len())).collect();
            let part = dataset.select(&idx);
            let out = self.forward_with(&part, TraceMode::Off, transform)?;
            correct += (0..part.len())
                .filter(|&i| argmax(out.logits.row(i)) == part.labels[i])
                .count();
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch, true)?;
        let out = self.forward(batch, TraceMode::Off)?;
        let mut total = 0.0;
        for (i, &label) in batch.labels.iter().enumerate() {
            let z = out.logits.row(i);
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[label];
        }
        Ok(total / batch.len() as f64)
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Gradient buffers of one block, moved out of the [`ParamSet`] so several
/// can be borrowed mutably at once.
struct BlockGrads {
    ln1_scale: Matrix,
    ln1_bias: Matrix,
    wq: Matrix,
    bq: Matrix,
    wk: Matrix,
    bk: Matrix,
    wv: Matrix,
    bv: Matrix,
    wo: Matrix,
    bo: Matrix,
    ln2_scale: Matrix,
    ln2_bias: Matrix,
    wf1: Matrix,
    bf1: Matrix,
    wf2: Matrix,
    bf2: Matrix,
}

impl BlockGrads {
    fn take(g: &mut ParamSet, l: usize) -> Self {
        let mut t = |p| std::mem::replace(g.get_mut(ParamId::Block(l, p)), Matrix::zeros(0, 0));
        Self {
            ln1_scale: t(BlockParam::Ln1Scale),
            ln1_bias: t(BlockParam::Ln1Bias),
            wq: t(BlockParam::Wq),
            bq: t(BlockParam::Bq),
            wk: t(BlockParam::Wk),
            bk: t(BlockParam::Bk),
            wv: t(BlockParam::Wv),
            bv: t(BlockParam::Bv),
            wo: t(BlockParam::Wo),
            bo: t(BlockParam::Bo),
            ln2_scale: t(BlockParam::Ln2Scale),
            ln2_bias: t(BlockParam::Ln2Bias),
            wf1: t(BlockParam::Wf1),
            bf1: t(BlockParam::Bf1),
            wf2: t(BlockParam::Wf2),
            bf2: t(BlockParam::Bf2),
        }
    }

    fn put(self, g: &mut ParamSet, l: usize) {
        let mut s = |p, m| *g.get_mut(ParamId::Block(l, p)) = m;
        s(BlockParam::Ln1Scale, self.ln1_scale);
        s(BlockParam::Ln1Bias, self.ln1_bias);
        s(BlockParam::Wq, self.wq);
        s(BlockParam::Bq, self.bq);
        s(BlockParam::Wk, self.wk);
        s(BlockParam::Bk, self.bk);
        s(BlockParam::Wv, self.wv);
        s(BlockParam::Bv, self.bv);
        s(BlockParam::Wo, self.wo);
        s(BlockParam::Bo, self.bo);
        s(BlockParam::Ln2Scale, self.ln2_scale);
        s(BlockParam::Ln2Bias, self.ln2_bias);
        s(BlockParam::Wf1, self.wf1);
        s(BlockParam::Bf1, self.bf1);
        s(BlockParam::Wf2, self.wf2);
        s(BlockParam::Bf2, self.bf2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_batch;
    use crate::model::{Activation, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized(cfg: ModelConfig, seed: u64, std: f64) -> TransformerModel {
        let mut m = TransformerModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (id, t) in m.params_mut().iter_mut() {
            let is_scale = matches!(
                id,
                ParamId::FinalLnScale
                    | ParamId::Block(_, BlockParam::Ln1Scale)
                    | ParamId::Block(_, BlockParam::Ln2Scale)
            );
            for v in t.data_mut() {
                let r: f64 = rng.random_range(-1.0..1.0);
                *v = if is_scale { 1.0 + 0.5 * r } else { std * r };
            }
        }
        m
    }

    #[test]
    fn zero_weights_give_head_bias_logits() {
        let mut m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        for (_, t) in m.params_mut().iter_mut() {
            t.fill(0.0);
        }
        let bias = [0.3, -1.0, 2.5];
        m.param_mut(ParamId::HeadBias).data_mut().copy_from_slice(&bias);
        let batch = random_batch(4, 1, 8, 3, 1);
        let out = m.forward(&batch, TraceMode::Off).unwrap();
        for r in 0..4 {
            assert_eq!(out.logits.row(r), &bias);
        }
    }

    #[test]
    fn duplicate_images_give_identical_rows() {
        let m = randomized(ModelConfig::tiny(), 2, 0.5);
        let one = random_batch(1, 1, 8, 3, 7);
        let two = one.concat(&one).unwrap();
        let out = m.forward(&two, TraceMode::Maxima).unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(1));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig {
            seed: 42,
            ..ModelConfig::default()
        };
        let batch = random_batch(20, 1, 16, 10, 3);
        let a = TransformerModel::new(cfg.clone()).unwrap().forward(&batch, TraceMode::Full).unwrap();
        let b = TransformerModel::new(cfg).unwrap().forward(&batch, TraceMode::Full).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn zero_branches_make_blocks_identity() {
        let mut m = randomized(ModelConfig::default(), 4, 0.3);
        for l in 0..2 {
            for p in [BlockParam::Wo, BlockParam::Bo, BlockParam::Wf2, BlockParam::Bf2] {
                m.param_mut(ParamId::Block(l, p)).fill(0.0);
            }
        }
        let batch = random_batch(2, 1, 16, 10, 5);
        let cache = m.sample_forward(batch.image(0), None).unwrap();
        let y0 = &cache.blocks[0].y;
        assert_eq!(&cache.blocks[1].y, y0);
        // X0 reconstructed independently of the block path.
        let emb = linear(&cache.patches, m.param(ParamId::PatchWeight), m.param(ParamId::PatchBias));
        let pos = m.param(ParamId::PosEmbed);
        for j in 0..64 {
            assert_eq!(y0[(0, j)], m.param(ParamId::ClassToken).data()[j] + pos[(0, j)]);
            assert_eq!(y0[(3, j)], emb[(2, j)] + pos[(3, j)]);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = crate::linalg::Matrix::from_vec(
            30,
            64,
            (0..30 * 64).map(|_| rng.random_range(-3.0..5.0)).collect(),
        )
        .unwrap();
        let xh = normalize_rows(&x, ModelConfig::default().ln_eps);
        for r in 0..30 {
            let row = xh.row(r);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn head_bias_gradient_is_mean_softmax_minus_onehot() {
        let m = randomized(ModelConfig::tiny(), 9, 0.4);
        let batch = random_batch(5, 1, 8, 3, 10);
        let g = m.backward(&batch).unwrap();
        let logits = m.forward(&batch, TraceMode::Off).unwrap().logits;
        let mut expect = [0.0; 3];
        for i in 0..5 {
            let z = logits.row(i);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..3 {
                let p = (z[c] - mx).exp() / s;
                expect[c] += (p - if batch.labels[i] == c { 1.0 } else { 0.0 }) / 5.0;
            }
        }
        for c in 0..3 {
            assert!((g.get(ParamId::HeadBias).data()[c] - expect[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_gives_zero_patch_weight_gradient() {
        let mut m = randomized(ModelConfig::tiny(), 11, 0.4);
        m.param_mut(ParamId::PosEmbed).fill(0.0);
        let mut batch = random_batch(3, 1, 8, 3, 12);
        batch.images.iter_mut().for_each(|v| *v = 0.0);
        let g = m.backward(&batch).unwrap();
        assert!(g.get(ParamId::PatchWeight).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_differences_match_every_parameter() {
        for act in [Activation::Gelu, Activation::Identity] {
            let cfg = ModelConfig {
                activation: act,
                ..ModelConfig::tiny()
            };
            let m = randomized(cfg, 21, 0.5);
            let batch = random_batch(3, 1, 8, 3, 22);
            let g = m.backward(&batch).unwrap();
            let h = 1e-5;
            for (id, t) in m.params().iter() {
                let mut num = vec![0.0; t.data().len()];
                for (k, nv) in num.iter_mut().enumerate() {
                    let mut plus = m.clone();
                    plus.param_mut(id).data_mut()[k] += h;
                    let mut minus = m.clone();
                    minus.param_mut(id).data_mut()[k] -= h;
                    *nv = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
                }
                let an = g.get(id).data();
                let diff: f64 = an.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let scale = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
                let rel = diff / scale.max(1e-6);
                assert!(rel < 1e-4, "{id}: relative error {rel}");
            }
        }
    }

    #[test]
    fn non_finite_activation_names_block_and_tensor() {
        let mut m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        m.param_mut(ParamId::Block(0, BlockParam::Wf1)).data_mut()[0] = f64::INFINITY;
        let batch = random_batch(1, 1, 8, 3, 1);
        let err = m.forward(&batch, TraceMode::Off).unwrap_err();
        assert!(err.to_string().contains("block 0 tensor ffn_hidden"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = TransformerModel::new(ModelConfig::tiny()).unwrap();
        let batch = random_batch(1, 1, 16, 3, 1);
        assert!(m.forward(&batch, TraceMode::Off).is_err());
    }

    #[test]
    fn embed_maxima_scale_linearly() {
        let m = TransformerModel::new(ModelConfig::default()).unwrap();
        let batch = random_batch(3, 1, 16, 10, 2);
        let mut doubled = batch.clone();
        doubled.images.iter_mut().for_each(|v| *v *= 2.0);
        let a = m.forward(&batch, TraceMode::Maxima).unwrap().trace.embed_max;
        let b = m.forward(&doubled, TraceMode::Maxima).unwrap().trace.embed_max;
        assert_eq!(2.0 * a, b);
    }

    #[test]
    fn full_trace_retains_every_observation_point() {
        let m = TransformerModel::new(ModelConfig::default()).unwrap();
        let batch = random_batch(3, 1, 16, 10, 2);
        let tr = m.forward(&batch, TraceMode::Full).unwrap().trace;
        assert_eq!(tr.retained.len(), ObsPoint::all(2).len());
        assert_eq!(tr.retained[&ObsPoint::Fc2(1)].len(), 3 * 17 * 256);
        assert_eq!(tr.block_outputs.len(), 2);
        assert_eq!(tr.block_outputs[0].len(), 3 * 17 * 64);
        assert_eq!(tr.samples, 3);
        assert!(tr.blocks.iter().all(|b| b.y >= 0.0 && b.x_mid >= 0.0));
    }
}

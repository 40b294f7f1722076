//! Tiny pre-norm ViT-style classifier with hand-written forward and backward
//! passes.
//!
//! Activations are row vectors and weights are stored `in_features × out_features`
//! (`y = x·W + b`). The pairs module owns the transpose adapter to the
//! column-vector convention used by the regularizer math.

mod checkpoint;
mod forward;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_DTYPE};
pub use forward::{
    ActivationPenalty, ActivationTrace, BlockMaxima, ForwardOutput, InputTransform, ObsPoint,
    TraceMode, TrainPass, normalize_rows,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    /// No nonlinearity. Only useful for diagnostics, where it makes the FFN
    /// surrogate exact.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

fn default_ln_eps() -> f64 {
    1e-12
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub activation: Activation,
    pub seed: u64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            channels: 1,
            d_model: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            classes: 10,
            activation: Activation::Gelu,
            seed: 0,
            ln_eps: default_ln_eps(),
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    /// The d_model=8, depth=1 configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_side: 8,
            patch_side: 4,
            d_model: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            classes: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return bad(format!(
                "image_side {} must be a positive multiple of patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.channels == 0 || self.classes == 0 {
            return bad("channels and classes must be positive".into());
        }
        let d_ff = self.mlp_ratio * self.d_model as f64;
        if !(self.mlp_ratio > 0.0) || d_ff.fract() != 0.0 {
            return bad(format!(
                "mlp_ratio {} times d_model {} must be a positive integer",
                self.mlp_ratio, self.d_model
            ));
        }
        if !(self.ln_eps >= 0.0) || !(self.init_std >= 0.0) {
            return bad("ln_eps and init_std must be nonnegative".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_ff(&self) -> usize {
        (self.mlp_ratio * self.d_model as f64).round() as usize
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_side * self.image_side
    }

    pub fn param_count(&self) -> usize {
        4 + 16 * self.depth + 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockParam {
    Ln1Scale,
    Ln1Bias,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    Ln2Scale,
    Ln2Bias,
    Wf1,
    Bf1,
    Wf2,
    Bf2,
}

impl BlockParam {
    pub const ALL: [BlockParam; 16] = [
        BlockParam::Ln1Scale,
        BlockParam::Ln1Bias,
        BlockParam::Wq,
        BlockParam::Bq,
        BlockParam::Wk,
        BlockParam::Bk,
        BlockParam::Wv,
        BlockParam::Bv,
        BlockParam::Wo,
        BlockParam::Bo,
        BlockParam::Ln2Scale,
        BlockParam::Ln2Bias,
        BlockParam::Wf1,
        BlockParam::Bf1,
        BlockParam::Wf2,
        BlockParam::Bf2,
    ];

    fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Scale => "ln1.scale",
            BlockParam::Ln1Bias => "ln1.bias",
            BlockParam::Wq => "attn.wq",
            BlockParam::Bq => "attn.bq",
            BlockParam::Wk => "attn.wk",
            BlockParam::Bk => "attn.bk",
            BlockParam::Wv => "attn.wv",
            BlockParam::Bv => "attn.bv",
            BlockParam::Wo => "attn.wo",
            BlockParam::Bo => "attn.bo",
            BlockParam::Ln2Scale => "ln2.scale",
            BlockParam::Ln2Bias => "ln2.bias",
            BlockParam::Wf1 => "ffn.w1",
            BlockParam::Bf1 => "ffn.b1",
            BlockParam::Wf2 => "ffn.w2",
            BlockParam::Bf2 => "ffn.b2",
        }
    }

    fn index(self) -> usize {
        BlockParam::ALL.iter().position(|&p| p == self).unwrap()
    }
}

/// Structured identifier for every trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    PatchWeight,
    PatchBias,
    ClassToken,
    PosEmbed,
    Block(usize, BlockParam),
    FinalLnScale,
    FinalLnBias,
    HeadWeight,
    HeadBias,
}

impl ParamId {
    fn index(self, depth: usize) -> usize {
        match self {
            ParamId::PatchWeight => 0,
            ParamId::PatchBias => 1,
            ParamId::ClassToken => 2,
            ParamId::PosEmbed => 3,
            ParamId::Block(l, p) => 4 + 16 * l + p.index(),
            ParamId::FinalLnScale => 4 + 16 * depth,
            ParamId::FinalLnBias => 5 + 16 * depth,
            ParamId::HeadWeight => 6 + 16 * depth,
            ParamId::HeadBias => 7 + 16 * depth,
        }
    }

    fn from_index(i: usize, depth: usize) -> ParamId {
        match i {
            0 => ParamId::PatchWeight,
            1 => ParamId::PatchBias,
            2 => ParamId::ClassToken,
            3 => ParamId::PosEmbed,
            i if i < 4 + 16 * depth => ParamId::Block((i - 4) / 16, BlockParam::ALL[(i - 4) % 16]),
            i => [
                ParamId::FinalLnScale,
                ParamId::FinalLnBias,
                ParamId::HeadWeight,
                ParamId::HeadBias,
            ][i - 4 - 16 * depth],
        }
    }

    /// Whether decoupled weight decay applies: weight matrices only, never
    /// LN parameters, biases, the class token or positional embedding.
    pub fn is_decayed(self) -> bool {
        match self {
            ParamId::PatchWeight | ParamId::HeadWeight => true,
            ParamId::Block(_, p) => matches!(
                p,
                BlockParam::Wq
                    | BlockParam::Wk
                    | BlockParam::Wv
                    | BlockParam::Wo
                    | BlockParam::Wf1
                    | BlockParam::Wf2
            ),
            _ => false,
        }
    }

    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d_model;
        match self {
            ParamId::PatchWeight => (cfg.patch_dim(), d),
            ParamId::PatchBias | ParamId::ClassToken => (1, d),
            ParamId::PosEmbed => (cfg.tokens(), d),
            ParamId::FinalLnScale | ParamId::FinalLnBias => (1, d),
            ParamId::HeadWeight => (d, cfg.classes),
            ParamId::HeadBias => (1, cfg.classes),
            ParamId::Block(_, p) => match p {
                BlockParam::Wq | BlockParam::Wk | BlockParam::Wv | BlockParam::Wo => (d, d),
                BlockParam::Wf1 => (d, cfg.d_ff()),
                BlockParam::Bf1 => (1, cfg.d_ff()),
                BlockParam::Wf2 => (cfg.d_ff(), d),
                _ => (1, d),
            },
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::PatchWeight => write!(f, "patch_embed.weight"),
            ParamId::PatchBias => write!(f, "patch_embed.bias"),
            ParamId::ClassToken => write!(f, "cls_token"),
            ParamId::PosEmbed => write!(f, "pos_embed"),
            ParamId::Block(l, p) => write!(f, "blocks.{l}.{}", p.name()),
            ParamId::FinalLnScale => write!(f, "final_ln.scale"),
            ParamId::FinalLnBias => write!(f, "final_ln.bias"),
            ParamId::HeadWeight => write!(f, "head.weight"),
            ParamId::HeadBias => write!(f, "head.bias"),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fixed = [
            ParamId::PatchWeight,
            ParamId::PatchBias,
            ParamId::ClassToken,
            ParamId::PosEmbed,
            ParamId::FinalLnScale,
            ParamId::FinalLnBias,
            ParamId::HeadWeight,
            ParamId::HeadBias,
        ];
        if let Some(id) = fixed.iter().find(|id| id.to_string() == s) {
            return Ok(*id);
        }
        let bad = || Error::Invalid(format!("unknown parameter name {s:?}"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (idx, tail) = rest.split_once('.').ok_or_else(bad)?;
        let l: usize = idx.parse().map_err(|_| bad())?;
        let p = BlockParam::ALL
            .iter()
            .find(|p| p.name() == tail)
            .ok_or_else(bad)?;
        Ok(ParamId::Block(l, *p))
    }
}

/// One matrix per trainable tensor, laid out in [`ParamId`] order. Used for
/// parameters, gradients and optimizer moments alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    depth: usize,
    tensors: Vec<Matrix>,
}

pub type GradientSet = ParamSet;

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = (0..cfg.param_count())
            .map(|i| {
                let (r, c) = ParamId::from_index(i, cfg.depth).shape(cfg);
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            depth: cfg.depth,
            tensors,
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            depth: other.depth,
            tensors: other
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.index(self.depth)]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        let i = id.index(self.depth);
        &mut self.tensors[i]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(move |i| ParamId::from_index(i, self.depth))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId::from_index(i, self.depth), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        let depth = self.depth;
        self.tensors
            .iter_mut()
            .enumerate()
            .map(move |(i, t)| (ParamId::from_index(i, depth), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `self += k · other`, tensor by tensor in layout order.
    pub fn axpy(&mut self, k: f64, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(k, b).expect("param sets share a layout");
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(Matrix::frobenius_norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LnWhich {
    Ln1,
    Ln2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamSet,
}

impl TransformerModel {
    /// Initialize from `config.seed`: LN scales 1, biases 0, everything else
    /// truncated normal (±2σ) with `config.init_std`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.init_std;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for (id, t) in params.iter_mut() {
            let is_ln_scale = matches!(
                id,
                ParamId::FinalLnScale
                    | ParamId::Block(_, BlockParam::Ln1Scale)
                    | ParamId::Block(_, BlockParam::Ln2Scale)
            );
            let is_random = id.is_decayed() || matches!(id, ParamId::ClassToken | ParamId::PosEmbed);
            if is_ln_scale {
                t.fill(1.0);
            } else if is_random {
                for v in t.data_mut() {
                    let z = loop {
                        let z: f64 = normal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break z;
                        }
                    };
                    *v = z * std;
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = ParamSet::zeros(&config);
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(params.iter())
                .any(|((_, a), (_, b))| a.shape() != b.shape())
        {
            return Err(Error::Invalid("parameter shapes do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    #[inline]
    pub fn param(&self, id: ParamId) -> &Matrix {
        self.params.get(id)
    }

    #[inline]
    pub fn param_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.params.get_mut(id)
    }

    /// Diagonal `D_γ` of a block's LN scale (bias excluded, sign kept).
    pub fn ln_scale_matrix(&self, block: usize, which: LnWhich) -> Result<Matrix> {
        self.check_block(block)?;
        let p = match which {
            LnWhich::Ln1 => BlockParam::Ln1Scale,
            LnWhich::Ln2 => BlockParam::Ln2Scale,
        };
        Ok(Matrix::diag(self.param(ParamId::Block(block, p)).data()))
    }

    /// Linear surrogate of the FFN branch: `x · W_F1 · W_F2`, no biases and no
    /// nonlinearity (the column-form `W_F2 W_F1 x`).
    pub fn ffn_surrogate(&self, block: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_block(block)?;
        self.check_width(x)?;
        let xm = Matrix::row_vector(x);
        let h = xm.matmul(self.param(ParamId::Block(block, BlockParam::Wf1)))?;
        Ok(h.matmul(self.param(ParamId::Block(block, BlockParam::Wf2)))?
            .into_data())
    }

    /// The real FFN branch `φ(x·W_F1 + b₁)·W_F2 + b₂` for one input row.
    pub fn ffn_branch(&self, block: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_block(block)?;
        self.check_width(x)?;
        let act = self.config.activation;
        let mut h = Matrix::row_vector(x).matmul(self.param(ParamId::Block(block, BlockParam::Wf1)))?;
        let b1 = self.param(ParamId::Block(block, BlockParam::Bf1));
        for (v, b) in h.data_mut().iter_mut().zip(b1.data()) {
            *v = act.apply(*v + b);
        }
        let mut out = h.matmul(self.param(ParamId::Block(block, BlockParam::Wf2)))?;
        out.axpy(1.0, self.param(ParamId::Block(block, BlockParam::Bf2)))?;
        Ok(out.into_data())
    }

    fn check_block(&self, block: usize) -> Result<()> {
        if block >= self.config.depth {
            return Err(Error::Invalid(format!(
                "block {block} out of range for depth {}",
                self.config.depth
            )));
        }
        Ok(())
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.d_model {
            return Err(Error::Invalid(format!(
                "input length {} != d_model {}",
                x.len(),
                self.config.d_model
            )));
        }
        Ok(())
    }
}

//! Toy decoder-only transformer: configuration, parameters and initialization.
//!
//! Blocks have no internal layer norms:
//! `X' = X + Attn(X) + MLP(Attn(X) + X)` with `MLP(x) = f(x · FF1) · FF2`.
//! An optional final layer norm sits in front of the decoder `D`.

mod prompt;
mod vocab;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

pub use prompt::{Prompt, Segment};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Gaussian;

/// Standard deviation of the Gaussian weight initialization (GPT-2 scale).
pub const INIT_STD: f64 = 0.02;

/// Epsilon inside the final layer norm.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// Tanh approximation used by GPT-2.
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + libm::tanh(u))
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = libm::tanh(u);
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub d_m: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub activation: Activation,
    pub use_final_ln: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The toy model every experiment runs on: 4 layers, d=16, d_m=4d, V=50.
    fn default() -> Self {
        Self {
            n_layers: 4,
            d: 16,
            d_m: 64,
            vocab_size: 50,
            n_heads: 1,
            max_seq: 16,
            activation: Activation::Gelu,
            use_final_ln: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.n_layers == 0 {
            return bad("n_layers", "must be positive");
        }
        if self.d == 0 {
            return bad("d", "must be positive");
        }
        if self.d_m == 0 {
            return bad("d_m", "must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size", "must be at least 2");
        }
        if self.max_seq == 0 {
            return bad("max_seq", "must be positive");
        }
        if self.n_heads == 0 {
            return bad("n_heads", "must be positive");
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig {
                field: "n_heads",
                reason: format!("d={} is not divisible by n_heads={}", self.d, self.n_heads),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn is_final_layer(&self, layer: usize) -> bool {
        layer + 1 == self.n_layers
    }

    /// Layer index mapped to `[0, 1]` so different depths plot on one axis.
    pub fn normalized_layer(&self, layer: usize) -> f64 {
        if self.n_layers == 1 {
            0.0
        } else {
            layer as f64 / (self.n_layers - 1) as f64
        }
    }

    /// Layer a forward-pass shift edits by default: `round(0.75 · (L − 1))`.
    pub fn default_edit_layer(&self) -> usize {
        libm::round(0.75 * (self.n_layers - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttnMatrix {
    Query,
    Key,
    Value,
    Output,
}

impl AttnMatrix {
    pub const ALL: [AttnMatrix; 4] = [Self::Query, Self::Key, Self::Value, Self::Output];

    fn suffix(self) -> &'static str {
        match self {
            AttnMatrix::Query => "W_Q",
            AttnMatrix::Key => "W_K",
            AttnMatrix::Value => "W_V",
            AttnMatrix::Output => "W_O",
        }
    }
}

/// MLP matrix selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MlpMatrix {
    Ff1,
    Ff2,
}

impl MlpMatrix {
    pub fn name(self) -> &'static str {
        match self {
            MlpMatrix::Ff1 => "FF1",
            MlpMatrix::Ff2 => "FF2",
        }
    }
}

impl fmt::Display for MlpMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies one parameter tensor of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embed,
    Pos,
    Attn(usize, AttnMatrix),
    Mlp(usize, MlpMatrix),
    LnGain,
    LnBias,
    Decoder,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::Embed => "E".to_string(),
            ParamId::Pos => "P".to_string(),
            ParamId::Attn(l, m) => format!("layers.{l}.{}", m.suffix()),
            ParamId::Mlp(l, m) => format!("layers.{l}.{}", m.name()),
            ParamId::LnGain => "ln_f.gain".to_string(),
            ParamId::LnBias => "ln_f.bias".to_string(),
            ParamId::Decoder => "D".to_string(),
        }
    }

    pub fn parse(name: &str) -> Option<ParamId> {
        match name {
            "E" => return Some(ParamId::Embed),
            "P" => return Some(ParamId::Pos),
            "ln_f.gain" => return Some(ParamId::LnGain),
            "ln_f.bias" => return Some(ParamId::LnBias),
            "D" => return Some(ParamId::Decoder),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (idx, which) = rest.split_once('.')?;
        let l: usize = idx.parse().ok()?;
        let id = match which {
            "W_Q" => ParamId::Attn(l, AttnMatrix::Query),
            "W_K" => ParamId::Attn(l, AttnMatrix::Key),
            "W_V" => ParamId::Attn(l, AttnMatrix::Value),
            "W_O" => ParamId::Attn(l, AttnMatrix::Output),
            "FF1" => ParamId::Mlp(l, MlpMatrix::Ff1),
            "FF2" => ParamId::Mlp(l, MlpMatrix::Ff2),
            _ => return None,
        };
        Some(id)
    }

    /// Canonical parameter order: E, P, per-layer W_Q W_K W_V W_O FF1 FF2,
    /// ln_f gain/bias when enabled, D.
    pub fn all(config: &ModelConfig) -> Vec<ParamId> {
        let mut ids = alloc::vec![ParamId::Embed, ParamId::Pos];
        for l in 0..config.n_layers {
            ids.extend(AttnMatrix::ALL.iter().map(|&m| ParamId::Attn(l, m)));
            ids.push(ParamId::Mlp(l, MlpMatrix::Ff1));
            ids.push(ParamId::Mlp(l, MlpMatrix::Ff2));
        }
        if config.use_final_ln {
            ids.push(ParamId::LnGain);
            ids.push(ParamId::LnBias);
        }
        ids.push(ParamId::Decoder);
        ids
    }

    /// `(rows, cols)` of the tensor; vectors report `(1, len)`.
    pub fn shape(&self, config: &ModelConfig) -> (usize, usize) {
        let d = config.d;
        match self {
            ParamId::Embed => (config.vocab_size, d),
            ParamId::Pos => (config.max_seq, d),
            ParamId::Attn(..) => (d, d),
            ParamId::Mlp(_, MlpMatrix::Ff1) => (d, config.d_m),
            ParamId::Mlp(_, MlpMatrix::Ff2) => (config.d_m, d),
            ParamId::LnGain | ParamId::LnBias => (1, d),
            ParamId::Decoder => (d, config.vocab_size),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `d x d_m`; neuron `j` is column `j`.
    pub ff1: Matrix,
    /// `d_m x d`; neuron `j` is row `j`.
    pub ff2: Matrix,
}

impl LayerWeights {
    pub fn attn(&self, m: AttnMatrix) -> &Matrix {
        match m {
            AttnMatrix::Query => &self.w_q,
            AttnMatrix::Key => &self.w_k,
            AttnMatrix::Value => &self.w_v,
            AttnMatrix::Output => &self.w_o,
        }
    }

    fn attn_mut(&mut self, m: AttnMatrix) -> &mut Matrix {
        match m {
            AttnMatrix::Query => &mut self.w_q,
            AttnMatrix::Key => &mut self.w_k,
            AttnMatrix::Value => &mut self.w_v,
            AttnMatrix::Output => &mut self.w_o,
        }
    }

    pub fn mlp(&self, m: MlpMatrix) -> &Matrix {
        match m {
            MlpMatrix::Ff1 => &self.ff1,
            MlpMatrix::Ff2 => &self.ff2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

/// All model parameters. Gradients reuse this layout (see [`Gradients`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// Token embedding, `V x d`.
    pub embed: Matrix,
    /// Learned absolute positions, `max_seq x d`.
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
    /// Present iff `use_final_ln`; gain and bias are `1 x d`.
    pub ln_f: Option<FinalNorm>,
    /// Decoder, `d x V`; column `k` is token `k`'s output embedding.
    pub decoder: Matrix,
}

/// Parameter-shaped gradient container.
pub type Gradients = ModelWeights;

impl ModelWeights {
    /// All-zero parameters with the shapes `config` dictates.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self::build(config, Matrix::zeros)
    }

    fn build(config: &ModelConfig, mut make: impl FnMut(usize, usize) -> Matrix) -> Self {
        let d = config.d;
        let embed = make(config.vocab_size, d);
        let pos = make(config.max_seq, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                w_q: make(d, d),
                w_k: make(d, d),
                w_v: make(d, d),
                w_o: make(d, d),
                ff1: make(d, config.d_m),
                ff2: make(config.d_m, d),
            })
            .collect();
        let ln_f = config.use_final_ln.then(|| FinalNorm {
            gain: Matrix::from_fn(1, d, |_, _| 1.0),
            bias: Matrix::zeros(1, d),
        });
        let decoder = make(d, config.vocab_size);
        Self {
            embed,
            pos,
            layers,
            ln_f,
            decoder,
        }
    }

    /// Gaussian(0, 0.02) weights drawn in canonical parameter order from
    /// `config.seed`; layer-norm gains 1 and biases 0.
    pub fn init_random(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut g = Gaussian::new(config.seed, INIT_STD);
        Ok(Self::build(config, |r, c| Matrix::from_fn(r, c, |_, _| g.sample())))
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        match id {
            ParamId::Embed => Some(&self.embed),
            ParamId::Pos => Some(&self.pos),
            ParamId::Attn(l, m) => self.layers.get(l).map(|lw| lw.attn(m)),
            ParamId::Mlp(l, m) => self.layers.get(l).map(|lw| lw.mlp(m)),
            ParamId::LnGain => self.ln_f.as_ref().map(|n| &n.gain),
            ParamId::LnBias => self.ln_f.as_ref().map(|n| &n.bias),
            ParamId::Decoder => Some(&self.decoder),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        match id {
            ParamId::Embed => Some(&mut self.embed),
            ParamId::Pos => Some(&mut self.pos),
            ParamId::Attn(l, m) => self.layers.get_mut(l).map(|lw| lw.attn_mut(m)),
            ParamId::Mlp(l, MlpMatrix::Ff1) => self.layers.get_mut(l).map(|lw| &mut lw.ff1),
            ParamId::Mlp(l, MlpMatrix::Ff2) => self.layers.get_mut(l).map(|lw| &mut lw.ff2),
            ParamId::LnGain => self.ln_f.as_mut().map(|n| &mut n.gain),
            ParamId::LnBias => self.ln_f.as_mut().map(|n| &mut n.bias),
            ParamId::Decoder => Some(&mut self.decoder),
        }
    }

    /// Checks every tensor against the shapes `config` dictates.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.n_layers {
            return Err(Error::ShapeMismatch {
                what: "layer count",
                expected: (config.n_layers, 1),
                found: (self.layers.len(), 1),
            });
        }
        if self.ln_f.is_some() != config.use_final_ln {
            return Err(Error::InvalidConfig {
                field: "use_final_ln",
                reason: "disagrees with presence of ln_f tensors".to_string(),
            });
        }
        for id in ParamId::all(config) {
            let m = self.param(id).expect("id enumerated from config");
            if m.shape() != id.shape(config) {
                return Err(Error::ShapeMismatch {
                    what: "parameter tensor",
                    expected: id.shape(config),
                    found: m.shape(),
                });
            }
        }
        Ok(())
    }

    /// Output embedding of token `t`: column `t` of `D` (the paper-style `Dᵀ[t]`).
    pub fn decoder_column(&self, t: usize) -> Vec<f64> {
        self.decoder.col(t)
    }
}

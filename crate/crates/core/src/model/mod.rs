//! Decoder-only transformer in two flavors with trace capture and an
//! intervention hook at the MLP up-projection.
//!
//! * [`Arch::Appendix`]: no normalization. Each block computes
//!   `z = x + Wproj·concat(heads)` and then `x' = z + mlp(z)`.
//! * [`Arch::LlamaStyle`]: pre-RMSNorm before both sublayers, standard
//!   residual adds.
//!
//! RoPE rotates queries and keys only. The MLP is
//! `Woutᵀ (silu(Win·x) ⊙ Wgate·x)`.

mod forward;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::numkit::{dot, Matrix, NumError, Rng, Scalar};

pub use forward::{
    attention_head_forward, mlp_forward, mlp_neuron_contribution, rms_norm, rope_rotate, silu,
    AttentionCapture, AttnPattern, AttnRow, ForwardOutput, HeadView, KvCache, LayerFilter,
    LayerTrace, NeuronCapture, ResidualCapture, ResidualRecord, Session, StepOutput, Trace,
    TraceConfig,
};

pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("state error: {0}")]
    State(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Appendix,
    LlamaStyle,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub max_seq: usize,
    pub arch: Arch,
    pub bos_id: Option<TokenId>,
    /// Disables rotary embeddings entirely when false.
    #[serde(default = "default_true")]
    pub rope: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be >= 1")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(ModelError::Config(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(ModelError::Config(format!(
                "head_dim {} must be even for RoPE pairs",
                self.head_dim
            )));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(ModelError::Config("rope_theta must be positive".into()));
        }
        if let Some(b) = self.bos_id {
            if b as usize >= self.vocab_size {
                return Err(ModelError::Config(format!(
                    "bos_id {b} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn rope_theta_opt(&self) -> Option<f64> {
        self.rope.then_some(self.rope_theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    /// Query projection, all heads stacked: `(n_heads·head_dim) × d_model`.
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    /// `d_model × (n_heads·head_dim)`.
    pub wproj: Matrix<T>,
    /// MLP matrices, each `d_ff × d_model` (one row per neuron).
    pub win: Matrix<T>,
    pub wgate: Matrix<T>,
    pub wout: Matrix<T>,
    /// RMSNorm gains (LlamaStyle only).
    pub norm_attn: Option<Vec<T>>,
    pub norm_mlp: Option<Vec<T>>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, hd, ff) = (cfg.d_model, cfg.n_heads * cfg.head_dim, cfg.d_ff);
        let gain = (cfg.arch == Arch::LlamaStyle).then(|| vec![T::one(); d]);
        Self {
            wq: Matrix::zeros(hd, d),
            wk: Matrix::zeros(hd, d),
            wv: Matrix::zeros(hd, d),
            wproj: Matrix::zeros(d, hd),
            win: Matrix::zeros(ff, d),
            wgate: Matrix::zeros(ff, d),
            wout: Matrix::zeros(ff, d),
            norm_attn: gain.clone(),
            norm_mlp: gain,
        }
    }

    pub fn head(&self, h: usize, head_dim: usize) -> HeadView<'_, T> {
        HeadView {
            wq: &self.wq,
            wk: &self.wk,
            wv: &self.wv,
            row0: h * head_dim,
            head_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T> {
    pub embed: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
}

/// Standard deviations used by [`WeightSet::random`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomInit {
    pub embed_std: f64,
    pub weight_std: f64,
}

impl RandomInit {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let inv = 1.0 / (cfg.d_model as f64).sqrt();
        Self {
            embed_std: inv,
            weight_std: 0.5 * inv,
        }
    }
}

impl<T: Scalar> WeightSet<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            embed: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
        }
    }

    /// Gaussian init. Each tensor draws from its own `(seed, name)` stream,
    /// so one tensor's values never depend on another's shape.
    pub fn random(cfg: &ModelConfig, seed: u64, init: RandomInit) -> Self {
        let mut w = Self::zeros(cfg);
        w.embed = draw(&w.embed, seed, "embed", init.embed_std);
        for (l, layer) in w.layers.iter_mut().enumerate() {
            for (name, m) in layer.matrices_mut() {
                *m = draw(m, seed, &format!("layers.{l}.{name}"), init.weight_std);
            }
        }
        w
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = WeightSet::<T>::zeros(cfg);
        check_shape("embed", &self.embed, &expect.embed)?;
        if self.layers.len() != cfg.n_layers {
            return Err(ModelError::Shape(format!(
                "{} layers for a {}-layer config",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (l, (got, want)) in self.layers.iter().zip(&expect.layers).enumerate() {
            for ((name, g), (_, w)) in got.matrices().into_iter().zip(want.matrices()) {
                check_shape(&format!("layers.{l}.{name}"), g, w)?;
            }
            for (name, g, w) in [
                ("norm.attn", &got.norm_attn, &want.norm_attn),
                ("norm.mlp", &got.norm_mlp, &want.norm_mlp),
            ] {
                match (g, w) {
                    (Some(g), Some(w)) if g.len() == w.len() => {
                        if g.iter().any(|x| !x.is_finite()) {
                            return Err(ModelError::Shape(format!(
                                "layers.{l}.{name} has non-finite entries"
                            )));
                        }
                    }
                    (None, None) => {}
                    _ => {
                        return Err(ModelError::Shape(format!(
                            "layers.{l}.{name} does not match the architecture"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        let cv = |v: &Option<Vec<T>>| {
            v.as_ref()
                .map(|v| v.iter().map(|&x| U::lit(x.to_f64_lossy())).collect())
        };
        WeightSet {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wproj: l.wproj.cast(),
                    win: l.win.cast(),
                    wgate: l.wgate.cast(),
                    wout: l.wout.cast(),
                    norm_attn: cv(&l.norm_attn),
                    norm_mlp: cv(&l.norm_mlp),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> LayerWeights<T> {
    pub(crate) fn matrices(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wproj", &self.wproj),
            ("mlp.win", &self.win),
            ("mlp.wgate", &self.wgate),
            ("mlp.wout", &self.wout),
        ]
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wproj", &mut self.wproj),
            ("mlp.win", &mut self.win),
            ("mlp.wgate", &mut self.wgate),
            ("mlp.wout", &mut self.wout),
        ]
    }
}

fn draw<T: Scalar>(shape_of: &Matrix<T>, seed: u64, name: &str, std: f64) -> Matrix<T> {
    let mut rng = Rng::stream(seed, name);
    Matrix::random_normal(shape_of.rows(), shape_of.cols(), std, &mut rng)
}

fn check_shape<T: Scalar>(name: &str, got: &Matrix<T>, want: &Matrix<T>) -> Result<()> {
    if got.shape() != want.shape() {
        return Err(ModelError::Shape(format!(
            "{name}: got {:?}, expected {:?}",
            got.shape(),
            want.shape()
        )));
    }
    if !got.is_finite() {
        return Err(ModelError::Shape(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// Token ids plus the BoS convention flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub has_bos: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, bos_id: Option<TokenId>) -> Self {
        let has_bos = matches!((ids.first(), bos_id), (Some(a), Some(b)) if *a == b);
        Self { ids, has_bos }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ids.is_empty() {
            return Err(ModelError::Argument("empty token sequence".into()));
        }
        if let Some(bad) = self.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::Argument(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.ids.len() > cfg.max_seq {
            return Err(ModelError::Capacity(format!(
                "sequence of {} tokens exceeds max_seq {}",
                self.ids.len(),
                cfg.max_seq
            )));
        }
        Ok(())
    }
}

/// Config plus weights; immutable once built and freely shareable.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    weights: WeightSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, weights: WeightSet<T>) -> Result<Self> {
        cfg.validate()?;
        weights.validate(&cfg)?;
        Ok(Self { cfg, weights })
    }

    pub fn random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = RandomInit::for_config(&cfg);
        let weights = WeightSet::random(&cfg, seed, init);
        Self::new(cfg, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &WeightSet<T> {
        &self.weights
    }

    pub fn into_parts(self) -> (ModelConfig, WeightSet<T>) {
        (self.cfg, self.weights)
    }

    pub fn embedding(&self, token: TokenId) -> &[T] {
        self.weights.embed.row(token as usize)
    }

    pub fn sequence(&self, ids: Vec<TokenId>) -> TokenSequence {
        TokenSequence::new(ids, self.cfg.bos_id)
    }

    /// Tied-embedding readout: one logit per vocabulary entry.
    pub fn readout(&self, state: &[T]) -> Vec<T> {
        (0..self.cfg.vocab_size)
            .map(|t| dot(self.weights.embed.row(t), state))
            .collect()
    }

    /// Input the layer's attention sees for a residual vector.
    pub fn attention_input(&self, layer: usize, x: &[T]) -> Vec<T> {
        match &self.weights.layers[layer].norm_attn {
            Some(g) => rms_norm(x, g),
            None => x.to_vec(),
        }
    }

    /// Input the layer's MLP sees for a post-attention residual vector.
    pub fn mlp_input(&self, layer: usize, x: &[T]) -> Vec<T> {
        match &self.weights.layers[layer].norm_mlp {
            Some(g) => rms_norm(x, g),
            None => x.to_vec(),
        }
    }

    pub fn forward(
        &self,
        tokens: &TokenSequence,
        trace_cfg: &TraceConfig,
        interventions: &[crate::interventions::InterventionSpec],
    ) -> Result<ForwardOutput<T>> {
        let mut session = Session::new(self, interventions.to_vec())?;
        session.prefill(tokens, trace_cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg(arch: Arch) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            d_ff: 6,
            vocab_size: 11,
            rope_theta: 10000.0,
            max_seq: 64,
            arch,
            bos_id: Some(10),
            rope: true,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg(Arch::LlamaStyle);
        assert!(c.validate().is_ok());
        c.head_dim = 3;
        c.d_model = 6;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        let mut c = tiny_cfg(Arch::Appendix);
        c.vocab_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(Arch::Appendix);
        c.d_model = 9;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg(Arch::Appendix);
        c.rope_theta = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn weight_shapes_are_checked() {
        let cfg = tiny_cfg(Arch::LlamaStyle);
        let mut w = WeightSet::<f64>::zeros(&cfg);
        assert!(w.validate(&cfg).is_ok());
        w.layers[1].win = Matrix::zeros(5, 8);
        assert!(matches!(w.validate(&cfg), Err(ModelError::Shape(_))));
        let mut w = WeightSet::<f64>::zeros(&cfg);
        w.layers[0].norm_mlp = None;
        assert!(w.validate(&cfg).is_err());
    }

    #[test]
    fn random_weights_are_stream_split() {
        let cfg = tiny_cfg(Arch::LlamaStyle);
        let a = WeightSet::<f64>::random(&cfg, 42, RandomInit::for_config(&cfg));
        let b = WeightSet::<f64>::random(&cfg, 42, RandomInit::for_config(&cfg));
        assert_eq!(a, b);
        let mut bigger = cfg.clone();
        bigger.vocab_size = 40;
        let c = WeightSet::<f64>::random(&bigger, 42, RandomInit::for_config(&bigger));
        assert_eq!(a.layers[1].wout, c.layers[1].wout);
        assert_eq!(a.embed.row(3), c.embed.row(3));
    }

    #[test]
    fn token_sequence_flags_bos() {
        let cfg = tiny_cfg(Arch::LlamaStyle);
        assert!(TokenSequence::new(vec![10, 1], cfg.bos_id).has_bos);
        assert!(!TokenSequence::new(vec![1, 10], cfg.bos_id).has_bos);
        assert!(!TokenSequence::new(vec![10], None).has_bos);
        assert!(matches!(
            TokenSequence::new(vec![11], cfg.bos_id).validate(&cfg),
            Err(ModelError::Argument(_))
        ));
        assert!(matches!(
            TokenSequence::new(vec![1; 65], cfg.bos_id).validate(&cfg),
            Err(ModelError::Capacity(_))
        ));
    }
}

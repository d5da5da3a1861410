use serde::{Deserialize, Serialize};

use super::{LayerWeights, Model, ModelError, Result, TokenId, TokenSequence, RMS_EPS};
use crate::interventions::{
    apply_sink_patch, apply_zero_ablation, InterventionSpec, PatchState, Phase,
};
use crate::numkit::{axpy, dot, norm, softmax_row, Matrix, Scalar};

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T]) -> Vec<T> {
    let n = T::lit(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

/// Rotates consecutive pairs `(v[2i], v[2i+1])` by `position · theta^(-2i/d)`.
pub fn rope_rotate<T: Scalar>(vec: &[T], position: usize, theta: f64) -> Result<Vec<T>> {
    let d = vec.len();
    if d % 2 != 0 {
        return Err(ModelError::Config(format!("RoPE needs an even dimension, got {d}")));
    }
    let mut out = vec.to_vec();
    rope_in_place(&mut out, position, theta);
    Ok(out)
}

fn rope_in_place<T: Scalar>(v: &mut [T], position: usize, theta: f64) {
    if position == 0 {
        return;
    }
    let d = v.len();
    for i in 0..d / 2 {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let angle = position as f64 * freq;
        let (s, c) = (T::lit(angle.sin()), T::lit(angle.cos()));
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Borrowed view of one head's rows inside the stacked q/k/v matrices.
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a, T> {
    pub wq: &'a Matrix<T>,
    pub wk: &'a Matrix<T>,
    pub wv: &'a Matrix<T>,
    pub row0: usize,
    pub head_dim: usize,
}

impl<T: Scalar> HeadView<'_, T> {
    fn rows(&self, m: &Matrix<T>, x: &[T]) -> Vec<T> {
        (self.row0..self.row0 + self.head_dim)
            .map(|r| dot(m.row(r), x))
            .collect()
    }

    /// Unrotated query.
    pub fn query(&self, x: &[T]) -> Vec<T> {
        self.rows(self.wq, x)
    }

    /// Unrotated key.
    pub fn key(&self, x: &[T]) -> Vec<T> {
        self.rows(self.wk, x)
    }

    pub fn value(&self, x: &[T]) -> Vec<T> {
        self.rows(self.wv, x)
    }
}

/// Single causal attention head over `states`.
///
/// Returns the per-position head output (`n × head_dim`) and the dense score
/// matrix (`n × n`, exact zeros above the diagonal).
pub fn attention_head_forward<T: Scalar>(
    states: &[Vec<T>],
    head: &HeadView<'_, T>,
    positions: &[usize],
    rope_theta: Option<f64>,
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let n = states.len();
    if positions.len() != n {
        return Err(ModelError::Shape(format!(
            "{} positions for {n} states",
            positions.len()
        )));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::Argument("positions must be strictly increasing".into()));
    }
    if let Some(bad) = states.iter().find(|s| s.len() != head.wq.cols()) {
        return Err(ModelError::Shape(format!(
            "state of length {} for d_model {}",
            bad.len(),
            head.wq.cols()
        )));
    }
    let rot = |mut v: Vec<T>, p: usize| {
        if let Some(theta) = rope_theta {
            rope_in_place(&mut v, p, theta);
        }
        v
    };
    let qs: Vec<Vec<T>> = states.iter().zip(positions).map(|(x, &p)| rot(head.query(x), p)).collect();
    let ks: Vec<Vec<T>> = states.iter().zip(positions).map(|(x, &p)| rot(head.key(x), p)).collect();
    let vs: Vec<Vec<T>> = states.iter().map(|x| head.value(x)).collect();
    let scale = T::one() / T::lit(head.head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(n);
    let mut scores = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        let logits: Vec<T> = (0..=i).map(|j| dot(&qs[i], &ks[j]) * scale).collect();
        let probs = softmax_row(&logits)?;
        let mut out = vec![T::zero(); head.head_dim];
        for (j, &p) in probs.iter().enumerate() {
            axpy(&mut out, p, &vs[j]);
            scores[i][j] = p;
        }
        outs.push(out);
    }
    Ok((outs, scores))
}

fn mlp_pre<T: Scalar>(x: &[T], layer: &LayerWeights<T>) -> (Vec<T>, Vec<T>) {
    let up = (0..layer.win.rows()).map(|j| dot(layer.win.row(j), x)).collect();
    let gate = (0..layer.wgate.rows()).map(|j| dot(layer.wgate.row(j), x)).collect();
    (up, gate)
}

fn activations<T: Scalar>(up: &[T], gate: &[T]) -> Vec<T> {
    up.iter().zip(gate).map(|(&u, &g)| silu(u) * g).collect()
}

/// `Woutᵀ (silu(Win·x) ⊙ Wgate·x)` on an already-normalized MLP input.
pub fn mlp_forward<T: Scalar>(x: &[T], layer: &LayerWeights<T>) -> Vec<T> {
    let (up, gate) = mlp_pre(x, layer);
    let acts = activations(&up, &gate);
    let mut out = vec![T::zero(); layer.wout.cols()];
    for (j, &a) in acts.iter().enumerate() {
        axpy(&mut out, a, layer.wout.row(j));
    }
    out
}

/// Contribution of neuron `j` alone to the residual stream.
pub fn mlp_neuron_contribution<T: Scalar>(
    x: &[T],
    j: usize,
    layer: &LayerWeights<T>,
) -> Result<Vec<T>> {
    if j >= layer.win.rows() {
        return Err(ModelError::Argument(format!(
            "neuron {j} outside d_ff {}",
            layer.win.rows()
        )));
    }
    let act = silu(dot(layer.win.row(j), x)) * dot(layer.wgate.row(j), x);
    Ok(layer.wout.row(j).iter().map(|&w| w * act).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionCapture {
    #[default]
    None,
    All,
    /// Only the final row of each forward block.
    LastRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualCapture {
    None,
    #[default]
    Norms,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronCapture {
    #[default]
    None,
    Selected(Vec<usize>),
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerFilter {
    #[default]
    All,
    Only(Vec<usize>),
}

impl LayerFilter {
    pub fn includes(&self, layer: usize) -> bool {
        match self {
            Self::All => true,
            Self::Only(ls) => ls.contains(&layer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceConfig {
    pub capture_attention: AttentionCapture,
    pub capture_residual: ResidualCapture,
    pub capture_neurons: NeuronCapture,
    pub capture_layers: LayerFilter,
}

impl TraceConfig {
    pub fn attention(mut self, a: AttentionCapture) -> Self {
        self.capture_attention = a;
        self
    }

    pub fn residual(mut self, r: ResidualCapture) -> Self {
        self.capture_residual = r;
        self
    }

    pub fn neurons(mut self, n: NeuronCapture) -> Self {
        self.capture_neurons = n;
        self
    }

    pub fn layers(mut self, f: LayerFilter) -> Self {
        self.capture_layers = f;
        self
    }

    /// Captures nothing at all; the cheapest configuration.
    pub fn none() -> Self {
        Self::default().residual(ResidualCapture::None)
    }
}

/// One attention row `i`: probabilities and masked logits over `j ≤ i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnRow<T> {
    pub position: usize,
    pub probs: Vec<T>,
    pub logits: Vec<T>,
}

/// Lower-triangular attention pattern of one head, stored row by row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttnPattern<T> {
    pub rows: Vec<AttnRow<T>>,
}

impl<T: Scalar> AttnPattern<T> {
    /// `α[i][j]`, exactly zero above the diagonal; `None` if row `i` was not captured.
    pub fn score(&self, i: usize, j: usize) -> Option<T> {
        let row = self.rows.iter().find(|r| r.position == i)?;
        Some(row.probs.get(j).copied().unwrap_or_else(T::zero))
    }

    /// Dense `n × n` matrix for fully captured patterns.
    pub fn dense(&self, n: usize) -> Vec<Vec<T>> {
        let mut m = vec![vec![T::zero(); n]; n];
        for r in &self.rows {
            if r.position < n {
                m[r.position][..r.probs.len()].copy_from_slice(&r.probs);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum ResidualRecord<T> {
    #[default]
    None,
    Norms(Vec<T>),
    Full(Vec<Vec<T>>),
}

impl<T: Scalar> ResidualRecord<T> {
    fn capture(mode: ResidualCapture, states: &[Vec<T>]) -> Self {
        match mode {
            ResidualCapture::None => Self::None,
            ResidualCapture::Norms => Self::Norms(states.iter().map(|s| norm(s)).collect()),
            ResidualCapture::Full => Self::Full(states.to_vec()),
        }
    }

    pub fn norms(&self) -> Option<Vec<T>> {
        match self {
            Self::None => None,
            Self::Norms(n) => Some(n.clone()),
            Self::Full(v) => Some(v.iter().map(|s| norm(s)).collect()),
        }
    }

    pub fn vectors(&self) -> Option<&[Vec<T>]> {
        match self {
            Self::Full(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerTrace<T> {
    pub layer: usize,
    /// One pattern per head; empty when attention capture is off.
    pub attention: Vec<AttnPattern<T>>,
    /// Residual stream entering the layer.
    pub resid_in: ResidualRecord<T>,
    /// After the attention residual add (`z` in the single-block model).
    pub resid_mid: ResidualRecord<T>,
    pub resid_out: ResidualRecord<T>,
    /// The MLP's own output, before it is added back.
    pub mlp_out: ResidualRecord<T>,
    pub neuron_ids: Vec<usize>,
    /// Post-gate activations per position, indexed like `neuron_ids`.
    pub mlp_acts: Vec<Vec<T>>,
    /// Up-projection (`Win·x`) values per position, after any sink patch.
    pub up_acts: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace<T> {
    /// Absolute position of the first traced token (non-zero for decode steps).
    pub start_position: usize,
    pub n_positions: usize,
    pub layers: Vec<Option<LayerTrace<T>>>,
}

impl<T> Trace<T> {
    pub fn layer(&self, l: usize) -> Option<&LayerTrace<T>> {
        self.layers.get(l).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub final_states: Vec<Vec<T>>,
    pub trace: Trace<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub state: Vec<T>,
    pub trace: Trace<T>,
}

/// Rotated keys and raw values of every processed position, per layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            head_dim,
            keys: vec![Vec::new(); n_layers * n_heads],
            values: vec![Vec::new(); n_layers * n_heads],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn matches<U: Scalar>(&self, model: &Model<U>) -> bool {
        let c = model.config();
        self.n_layers == c.n_layers && self.n_heads == c.n_heads && self.head_dim == c.head_dim
    }
}

/// One inference stream: a prefill followed by any number of decode steps.
///
/// Owns its KV cache and one [`PatchState`] per sink-patch spec.
#[derive(Debug, Clone)]
pub struct Session<'m, T> {
    model: &'m Model<T>,
    interventions: Vec<InterventionSpec>,
    patch_states: Vec<PatchState<T>>,
    cache: KvCache<T>,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m Model<T>, interventions: Vec<InterventionSpec>) -> Result<Self> {
        let c = model.config();
        Self::with_cache(model, interventions, KvCache::new(c.n_layers, c.n_heads, c.head_dim))
    }

    /// Resumes from an existing cache (patch states start empty).
    pub fn with_cache(
        model: &'m Model<T>,
        interventions: Vec<InterventionSpec>,
        cache: KvCache<T>,
    ) -> Result<Self> {
        if !cache.matches(model) {
            return Err(ModelError::State("KV cache does not match model config".into()));
        }
        for spec in &interventions {
            spec.validate(model.config())?;
        }
        let patch_states = vec![PatchState::default(); interventions.len()];
        Ok(Self {
            model,
            interventions,
            patch_states,
            cache,
        })
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn into_cache(self) -> KvCache<T> {
        self.cache
    }

    /// Stored "no-sink" value of each intervention (`None` for ablations).
    pub fn patch_states(&self) -> &[PatchState<T>] {
        &self.patch_states
    }

    pub fn prefill(&mut self, tokens: &TokenSequence, trace_cfg: &TraceConfig) -> Result<ForwardOutput<T>> {
        if !self.cache.is_empty() {
            return Err(ModelError::State("prefill on a non-empty cache".into()));
        }
        tokens.validate(self.model.config())?;
        let (states, trace) = self.run_block(&tokens.ids, Phase::Prefill, trace_cfg)?;
        Ok(ForwardOutput {
            final_states: states,
            trace,
        })
    }

    pub fn decode_step(&mut self, token: TokenId, trace_cfg: &TraceConfig) -> Result<StepOutput<T>> {
        let cfg = self.model.config();
        if self.cache.is_empty() {
            return Err(ModelError::State("decode before prefill".into()));
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::Argument(format!("token {token} outside vocabulary")));
        }
        if self.cache.len + 1 > cfg.max_seq {
            return Err(ModelError::Capacity(format!("decode past max_seq {}", cfg.max_seq)));
        }
        let (mut states, trace) = self.run_block(&[token], Phase::Decode, trace_cfg)?;
        Ok(StepOutput {
            state: states.pop().expect("one decoded position"),
            trace,
        })
    }

    fn run_block(
        &mut self,
        ids: &[TokenId],
        phase: Phase,
        tc: &TraceConfig,
    ) -> Result<(Vec<Vec<T>>, Trace<T>)> {
        let model = self.model;
        let cfg = model.config();
        let (nh, hd) = (cfg.n_heads, cfg.head_dim);
        let start = self.cache.len;
        let m = ids.len();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let theta = cfg.rope_theta_opt();

        let mut x: Vec<Vec<T>> = ids.iter().map(|&t| model.embedding(t).to_vec()).collect();
        let mut trace = Trace {
            start_position: start,
            n_positions: m,
            layers: Vec::with_capacity(cfg.n_layers),
        };

        for (l, lw) in model.weights().layers.iter().enumerate() {
            let capture = tc.capture_layers.includes(l);
            let mut lt = LayerTrace {
                layer: l,
                ..Default::default()
            };
            if capture {
                lt.resid_in = ResidualRecord::capture(tc.capture_residual, &x);
            }

            let attn_in: Vec<Vec<T>> = x.iter().map(|s| model.attention_input(l, s)).collect();
            let mut concat = vec![vec![T::zero(); nh * hd]; m];
            for h in 0..nh {
                let head = lw.head(h, hd);
                let slot = l * nh + h;
                let mut queries = Vec::with_capacity(m);
                for (i, s) in attn_in.iter().enumerate() {
                    let mut q = head.query(s);
                    let mut k = head.key(s);
                    if let Some(th) = theta {
                        rope_in_place(&mut q, start + i, th);
                        rope_in_place(&mut k, start + i, th);
                    }
                    queries.push(q);
                    self.cache.keys[slot].push(k);
                    self.cache.values[slot].push(head.value(s));
                }
                let keys = &self.cache.keys[slot];
                let values = &self.cache.values[slot];
                let mut pattern = AttnPattern::default();
                for (i, q) in queries.iter().enumerate() {
                    let pos = start + i;
                    let logits: Vec<T> = keys[..=pos].iter().map(|k| dot(q, k) * scale).collect();
                    let probs = softmax_row(&logits)?;
                    let out = &mut concat[i][h * hd..(h + 1) * hd];
                    for (p, v) in probs.iter().zip(values) {
                        axpy(out, *p, v);
                    }
                    let keep = match tc.capture_attention {
                        AttentionCapture::None => false,
                        AttentionCapture::All => true,
                        AttentionCapture::LastRow => i + 1 == m,
                    };
                    if capture && keep {
                        pattern.rows.push(AttnRow {
                            position: pos,
                            probs,
                            logits,
                        });
                    }
                }
                if capture && tc.capture_attention != AttentionCapture::None {
                    lt.attention.push(pattern);
                }
            }

            for (xi, ci) in x.iter_mut().zip(&concat) {
                let attn_out = lw.wproj.matvec(ci)?;
                for (a, b) in xi.iter_mut().zip(attn_out) {
                    *a = *a + b;
                }
            }
            if capture {
                lt.resid_mid = ResidualRecord::capture(tc.capture_residual, &x);
            }

            let mut ups = Vec::with_capacity(m);
            let mut gates = Vec::with_capacity(m);
            for s in &x {
                let (u, g) = mlp_pre(&model.mlp_input(l, s), lw);
                ups.push(u);
                gates.push(g);
            }
            for (spec, state) in self.interventions.iter().zip(self.patch_states.iter_mut()) {
                if spec.layer() == l {
                    apply_sink_patch(spec, phase, &mut ups, state)?;
                }
            }
            let mut acts: Vec<Vec<T>> = ups.iter().zip(&gates).map(|(u, g)| activations(u, g)).collect();
            for spec in &self.interventions {
                if spec.layer() == l {
                    apply_zero_ablation(spec, &mut acts);
                }
            }
            let mlp_out: Vec<Vec<T>> = acts.iter().map(|a| lw.wout.matvec_t(a)).collect::<std::result::Result<_, _>>()?;
            for (xi, o) in x.iter_mut().zip(&mlp_out) {
                for (a, &b) in xi.iter_mut().zip(o) {
                    *a = *a + b;
                }
            }

            if capture {
                lt.mlp_out = ResidualRecord::capture(tc.capture_residual, &mlp_out);
                lt.resid_out = ResidualRecord::capture(tc.capture_residual, &x);
                lt.neuron_ids = match &tc.capture_neurons {
                    NeuronCapture::None => Vec::new(),
                    NeuronCapture::Selected(ids) => {
                        if let Some(bad) = ids.iter().find(|&&j| j >= cfg.d_ff) {
                            return Err(ModelError::Argument(format!(
                                "traced neuron {bad} outside d_ff {}",
                                cfg.d_ff
                            )));
                        }
                        ids.clone()
                    }
                    NeuronCapture::All => (0..cfg.d_ff).collect(),
                };
                if !lt.neuron_ids.is_empty() {
                    let pick = |rows: &[Vec<T>]| -> Vec<Vec<T>> {
                        rows.iter()
                            .map(|r| lt.neuron_ids.iter().map(|&j| r[j]).collect())
                            .collect()
                    };
                    lt.mlp_acts = pick(&acts);
                    lt.up_acts = pick(&ups);
                }
                trace.layers.push(Some(lt));
            } else {
                trace.layers.push(None);
            }
        }
        self.cache.len += m;
        Ok((x, trace))
    }
}

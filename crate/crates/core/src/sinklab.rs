//! Sink-neuron discovery and the synthetic two-stage sink model.
//!
//! The synthetic model marks "first-looking" tokens in layer 0 and lets a
//! single MLP neuron in the sink layer write a large vector wherever the mark
//! is present. Residual layout of the synthetic model:
//!
//! | dim | role |
//! |-----|------|
//! | 0 | constant bias direction |
//! | 1 | marker written by the layer-0 cluster heads |
//! | 2 | sink direction written by the sink neuron |
//! | 3.. | one code per cluster, then "misc", then BoS |
//! | rest | token-specific random part |

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::InterventionSpec;
use crate::model::{
    Arch, LayerFilter, Model, ModelConfig, NeuronCapture, RandomInit, ResidualCapture, TokenId,
    TokenSequence, TraceConfig, WeightSet,
};
use crate::numkit::{cosine, dot, norm, topk_by, Rng, Scalar};

pub const BIAS_DIM: usize = 0;
pub const MARKER_DIM: usize = 1;
pub const SINK_DIM: usize = 2;
const CODE_DIM0: usize = 3;

/// Default rule for "repeats needed": a repeat must exceed this fraction of the BoS norm.
pub const REPEAT_FRACTION_OF_BOS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Cluster `c` is handled by layer-0 head `c`.
    pub clusters: Vec<Vec<TokenId>>,
    pub seed: u64,
    pub sink_layer: usize,
    pub sink_neuron: usize,
    /// Layer-0 gate neuron that reads the marker.
    pub marker_neuron: usize,
    /// BoS norm after the sink layer, as a multiple of the embedding norm.
    pub sink_gain: f64,
    pub noise_std: f64,
    /// Logit a cluster head's query gives to tokens of any other cluster.
    pub other_logit: f64,
    pub bos_logit: f64,
    /// Marker level at which the sink neuron switches on.
    pub sink_threshold: f64,
    pub sink_sharpness: f64,
    pub marker_probe_threshold: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: vec![(0..10).collect(), (10..20).collect()],
            seed: 7,
            sink_layer: 1,
            sink_neuron: 7,
            marker_neuron: 3,
            sink_gain: 50.0,
            noise_std: 0.02,
            other_logit: 1000f64.ln(),
            bos_logit: 8f64.ln(),
            sink_threshold: 0.75,
            sink_sharpness: 9.0,
            marker_probe_threshold: 0.875,
        }
    }
}

/// LlamaStyle config the default spec is built for: 20 clustered tokens plus BoS = 20.
pub fn synthetic_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        head_dim: 16,
        d_ff: 32,
        vocab_size: 21,
        rope_theta: 1.0e6,
        max_seq: 1024,
        arch: Arch::LlamaStyle,
        bos_id: Some(20),
        rope: true,
    }
}

const BIAS: f64 = 1.0;
const CODE: f64 = 1.0;
const RANDOM_PART: f64 = 1.2;
const MARKER_WEIGHT: f64 = 1.0;
const SINK_GATE: f64 = 0.25;

impl SyntheticSpec {
    fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    fn misc_code(&self) -> usize {
        self.n_clusters()
    }

    fn bos_code(&self) -> usize {
        self.n_clusters() + 1
    }

    fn code_dim(&self, code: usize) -> usize {
        CODE_DIM0 + code
    }

    /// Head-dim slot of a code inside each engineered head, taken from the
    /// slowest-rotating RoPE pairs.
    fn channel(&self, code: usize, head_dim: usize) -> usize {
        if code == self.bos_code() {
            head_dim - 1
        } else if code == self.misc_code() {
            head_dim - 2
        } else {
            head_dim - 3 - code
        }
    }

    pub fn cluster_of(&self, t: TokenId) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&t))
    }

    fn code_of(&self, t: TokenId, bos: TokenId) -> usize {
        if t == bos {
            self.bos_code()
        } else {
            self.cluster_of(t).unwrap_or(self.misc_code())
        }
    }

    pub fn clustered_tokens(&self) -> Vec<TokenId> {
        self.clusters.iter().flatten().copied().collect()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bos = cfg
            .bos_id
            .ok_or_else(|| Error::Config("synthetic sink model needs a bos_id".into()))?;
        if cfg.arch != Arch::LlamaStyle {
            return Err(Error::Config("synthetic sink model needs the llama_style arch".into()));
        }
        if cfg.n_layers < 2 {
            return Err(Error::Config("synthetic sink model needs >= 2 layers".into()));
        }
        let k = self.n_clusters();
        if k == 0 || k > cfg.n_heads {
            return Err(Error::Argument(format!("{k} clusters for {} heads", cfg.n_heads)));
        }
        let needed = CODE_DIM0 + k + 2 + 1;
        if cfg.d_model < needed.max(8) {
            return Err(Error::Config(format!("d_model must be >= {}", needed.max(8))));
        }
        if k + 3 > cfg.head_dim {
            return Err(Error::Config(format!("head_dim must be >= {}", k + 3)));
        }
        if self.sink_layer == 0 || self.sink_layer >= cfg.n_layers {
            return Err(Error::Argument(format!("sink_layer {} must be in 1..{}", self.sink_layer, cfg.n_layers)));
        }
        if self.sink_neuron >= cfg.d_ff || self.marker_neuron >= cfg.d_ff {
            return Err(Error::Argument("engineered neuron outside d_ff".into()));
        }
        let mut seen = BTreeSet::new();
        for &t in self.clusters.iter().flatten() {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Argument(format!("cluster token {t} outside vocabulary")));
            }
            if t == bos {
                return Err(Error::Argument("BoS cannot belong to a cluster".into()));
            }
            if !seen.insert(t) {
                return Err(Error::Argument(format!("token {t} appears in two clusters")));
            }
        }
        if self.clusters.iter().any(|c| c.is_empty()) {
            return Err(Error::Argument("empty cluster".into()));
        }
        Ok(())
    }

    /// Embedding norm shared by every token.
    pub fn embedding_norm(&self) -> f64 {
        (BIAS * BIAS + CODE * CODE + RANDOM_PART * RANDOM_PART).sqrt()
    }

    pub fn marker_probe(&self) -> ProbeKind {
        ProbeKind::GateNeuron {
            layer: 0,
            neuron: self.marker_neuron,
        }
    }
}

/// Builds the two-stage sink model for `cfg` (weights are f64).
pub fn build_synthetic_sink_model(cfg: &ModelConfig, spec: &SyntheticSpec) -> Result<WeightSet<f64>> {
    cfg.validate()?;
    spec.validate(cfg)?;
    let bos = cfg.bos_id.expect("validated");
    let (d, hd) = (cfg.d_model, cfg.head_dim);
    let init = RandomInit {
        embed_std: 0.0,
        weight_std: spec.noise_std,
    };
    let mut w = WeightSet::<f64>::random(cfg, spec.seed, init);

    let free0 = CODE_DIM0 + spec.n_clusters() + 2;
    let e_norm = spec.embedding_norm();
    for t in 0..cfg.vocab_size as TokenId {
        let mut rng = Rng::stream(spec.seed, &format!("synthetic.embed.{t}"));
        let mut r: Vec<f64> = (free0..d).map(|_| rng.normal()).collect();
        let rn = norm(&r);
        r.iter_mut().for_each(|v| *v /= rn);
        let row = w.embed.row_mut(t as usize);
        row.fill(0.0);
        row[BIAS_DIM] = BIAS;
        row[spec.code_dim(spec.code_of(t, bos))] = CODE;
        let rho = if t == bos {
            row[MARKER_DIM] = MARKER_WEIGHT;
            (RANDOM_PART * RANDOM_PART - MARKER_WEIGHT * MARKER_WEIGHT).sqrt()
        } else {
            RANDOM_PART
        };
        for (dst, v) in row[free0..].iter_mut().zip(&r) {
            *dst = rho * v;
        }
    }

    // Code component of an RMS-normalized embedding.
    let gamma = (d as f64).sqrt() * CODE / e_norm;
    let has_misc = (0..cfg.vocab_size as TokenId).any(|t| t != bos && spec.cluster_of(t).is_none());
    let l0 = &mut w.layers[0];
    for h in 0..spec.n_clusters() {
        let r0 = h * hd;
        for r in r0..r0 + hd {
            l0.wq.row_mut(r).fill(0.0);
            l0.wk.row_mut(r).fill(0.0);
            l0.wv.row_mut(r).fill(0.0);
        }
        for r in 0..d {
            for c in r0..r0 + hd {
                l0.wproj.set(r, c, 0.0);
            }
        }
        let mut key_codes: Vec<usize> = (0..spec.n_clusters()).collect();
        key_codes.push(spec.bos_code());
        if has_misc {
            key_codes.push(spec.misc_code());
        }
        for &c in &key_codes {
            let ch = r0 + spec.channel(c, hd);
            l0.wk.set(ch, spec.code_dim(c), 1.0 / gamma);
            let logit = if c == h {
                0.0
            } else if c == spec.bos_code() {
                spec.bos_logit
            } else {
                spec.other_logit
            };
            l0.wq.set(ch, spec.code_dim(h), (hd as f64).sqrt() * logit / gamma);
        }
        l0.wv.set(r0, spec.code_dim(h), 1.0 / gamma);
        l0.wproj.set(MARKER_DIM, r0, MARKER_WEIGHT);
    }
    let p = spec.marker_neuron;
    l0.win.row_mut(p).fill(0.0);
    l0.wout.row_mut(p).fill(0.0);
    let gate = l0.wgate.row_mut(p);
    gate.fill(0.0);
    gate[MARKER_DIM] = 1.0;
    gate[BIAS_DIM] = -spec.marker_probe_threshold * MARKER_WEIGHT / BIAS;

    let j = spec.sink_neuron;
    let ls = &mut w.layers[spec.sink_layer];
    let win = ls.win.row_mut(j);
    win.fill(0.0);
    win[MARKER_DIM] = spec.sink_sharpness;
    win[BIAS_DIM] = -spec.sink_sharpness * spec.sink_threshold * MARKER_WEIGHT / BIAS;
    let g = ls.wgate.row_mut(j);
    g.fill(0.0);
    g[BIAS_DIM] = SINK_GATE;
    let out = ls.wout.row_mut(j);
    out.fill(0.0);
    out[SINK_DIM] = 1.0;

    // Scale the write so the BoS norm lands at sink_gain × embedding norm.
    let probe = Model::new(cfg.clone(), w)?;
    let tc = TraceConfig::none()
        .neurons(NeuronCapture::Selected(vec![j]))
        .layers(LayerFilter::Only(vec![spec.sink_layer]));
    let run = probe.forward(&probe.sequence(vec![bos]), &tc, &[])?;
    let act = run.trace.layer(spec.sink_layer).expect("traced").mlp_acts[0][0];
    if act <= 0.0 {
        return Err(Error::Config("sink neuron does not fire on BoS".into()));
    }
    let (_, mut w) = probe.into_parts();
    w.layers[spec.sink_layer].wout.set(j, SINK_DIM, spec.sink_gain * e_norm / act);
    Ok(w)
}

/// Default synthetic model as an f64 [`Model`].
pub fn synthetic_model(spec: &SyntheticSpec) -> Result<Model<f64>> {
    let cfg = synthetic_config();
    let w = build_synthetic_sink_model(&cfg, spec)?;
    Ok(Model::new(cfg, w)?)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Round-robin interleaving of seeded draws from each cluster in turn.
pub fn round_robin_sequence(clusters: &[Vec<TokenId>], length: usize, rng: &mut Rng) -> Vec<TokenId> {
    (0..length)
        .map(|i| {
            let c = &clusters[i % clusters.len()];
            c[rng.below(c.len())]
        })
        .collect()
}

pub fn with_bos(cfg: &ModelConfig, ids: &[TokenId]) -> Result<TokenSequence> {
    let bos = cfg.bos_id.ok_or_else(|| Error::Config("model has no bos_id".into()))?;
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.push(bos);
    v.extend_from_slice(ids);
    Ok(TokenSequence::new(v, Some(bos)))
}

/// Residual norms after `layer` at every position.
pub fn post_layer_norms<T: Scalar>(
    model: &Model<T>,
    tokens: &TokenSequence,
    layer: usize,
    interventions: &[InterventionSpec],
) -> Result<Vec<f64>> {
    if layer >= model.config().n_layers {
        return Err(Error::Argument(format!("layer {layer} outside model")));
    }
    let tc = TraceConfig::default().layers(LayerFilter::Only(vec![layer]));
    let out = model.forward(tokens, &tc, interventions)?;
    let lt = out.trace.layer(layer).expect("traced");
    Ok(lt.resid_out.norms().expect("norms").iter().map(|v| v.to_f64_lossy()).collect())
}

/// Median post-layer norm over positions ≥ 1 of a corpus of ordinary sequences.
pub fn baseline_median<T: Scalar>(model: &Model<T>, layer: usize, corpus: &[TokenSequence]) -> Result<f64> {
    let runs = crate::par::map(corpus, |s| post_layer_norms(model, s, layer, &[]));
    let mut all = Vec::new();
    for r in runs {
        all.extend(r?.into_iter().skip(1));
    }
    Ok(median(&all))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub neuron: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCandidates {
    pub layer: usize,
    /// Descending by norm; neurons with an exactly zero contribution are dropped.
    pub candidates: Vec<Candidate>,
}

/// Top-`k` neurons per layer by the norm of their contribution on `[BoS]`.
pub fn topk_sink_candidates<T: Scalar>(model: &Model<T>, k: usize) -> Result<Vec<LayerCandidates>> {
    let cfg = model.config();
    if k == 0 {
        return Err(Error::Argument("K must be >= 1".into()));
    }
    let bos = cfg
        .bos_id
        .ok_or_else(|| Error::Config("sink candidate search needs a bos_id".into()))?;
    let tc = TraceConfig::default().residual(ResidualCapture::Full);
    let out = model.forward(&model.sequence(vec![bos]), &tc, &[])?;
    let k = k.min(cfg.d_ff);
    let mut res = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in model.weights().layers.iter().enumerate() {
        let mid = &out.trace.layer(l).expect("traced").resid_mid.vectors().expect("full")[0];
        let x = model.mlp_input(l, mid);
        let norms: Vec<f64> = (0..cfg.d_ff)
            .map(|j| {
                crate::model::mlp_neuron_contribution(&x, j, lw).map(|c| norm(&c).to_f64_lossy())
            })
            .collect::<std::result::Result<_, _>>()?;
        let candidates = topk_by(&norms, k)?
            .into_iter()
            .filter(|&(_, n)| n > 0.0)
            .map(|(neuron, norm)| Candidate { neuron, norm })
            .collect();
        res.push(LayerCandidates { layer: l, candidates });
    }
    Ok(res)
}

/// Picks the layer with the strongest top candidate and every neuron in it
/// within `keep_fraction` of that top norm.
pub fn choose_sinks(cands: &[LayerCandidates], keep_fraction: f64) -> Option<(usize, Vec<usize>)> {
    let best = cands
        .iter()
        .filter_map(|lc| lc.candidates.first().map(|c| (lc, c.norm)))
        .fold(None::<(&LayerCandidates, f64)>, |acc, (lc, n)| match acc {
            Some((_, m)) if m >= n => acc,
            _ => Some((lc, n)),
        })?;
    let (lc, top) = best;
    let neurons = lc
        .candidates
        .iter()
        .filter(|c| c.norm >= keep_fraction * top)
        .map(|c| c.neuron)
        .collect();
    Some((lc.layer, neurons))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorms {
    pub layer: usize,
    /// Residual stream after the layer.
    pub residual: Vec<f64>,
    /// The layer's MLP output alone.
    pub mlp_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub tokens: Vec<TokenId>,
    pub has_bos: bool,
    pub layers: Vec<LayerNorms>,
}

pub fn norm_profile<T: Scalar>(
    model: &Model<T>,
    tokens: &TokenSequence,
    layers: &LayerFilter,
    interventions: &[InterventionSpec],
) -> Result<NormProfile> {
    let tc = TraceConfig::default().layers(layers.clone());
    let out = model.forward(tokens, &tc, interventions)?;
    let f = |v: Vec<T>| -> Vec<f64> { v.into_iter().map(|x| x.to_f64_lossy()).collect() };
    let layers = out
        .trace
        .layers
        .iter()
        .flatten()
        .map(|lt| LayerNorms {
            layer: lt.layer,
            residual: f(lt.resid_out.norms().expect("norms")),
            mlp_out: f(lt.mlp_out.norms().expect("norms")),
        })
        .collect();
    Ok(NormProfile {
        tokens: tokens.ids.clone(),
        has_bos: tokens.has_bos,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub layer: usize,
    pub position: usize,
    pub norm_before: f64,
    pub norm_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationExperiment {
    pub name: String,
    pub tokens: Vec<TokenId>,
    pub has_bos: bool,
    pub sink_layer: usize,
    pub ablated: Vec<usize>,
    pub curve: Vec<CurveRow>,
    pub baseline_median: f64,
    /// Position-0 norm after the sink layer over the baseline median (BoS runs only).
    pub bos_ratio_before: Option<f64>,
    pub bos_ratio_after: Option<f64>,
    /// Largest norm after the sink layer over positions ≥ `repeat_start`, over the median.
    pub repeat_ratio_before: Option<f64>,
    pub repeat_ratio_after: Option<f64>,
    /// `max_before / max_after` over the repeat positions.
    pub repeat_reduction: Option<f64>,
}

/// Norm curves with and without zero-ablating `neurons` in `sink_layer`.
pub fn ablation_study<T: Scalar>(
    model: &Model<T>,
    name: &str,
    sink_layer: usize,
    neurons: &[usize],
    tokens: &TokenSequence,
    repeat_start: usize,
    baseline_median: f64,
) -> Result<AblationExperiment> {
    let spec = InterventionSpec::zero_ablate(sink_layer, neurons.iter().copied());
    let before = norm_profile(model, tokens, &LayerFilter::All, &[])?;
    let after = norm_profile(model, tokens, &LayerFilter::All, &[spec])?;
    let mut curve = Vec::new();
    for (b, a) in before.layers.iter().zip(&after.layers) {
        for (p, (nb, na)) in b.residual.iter().zip(&a.residual).enumerate() {
            curve.push(CurveRow {
                layer: b.layer,
                position: p,
                norm_before: *nb,
                norm_after: *na,
            });
        }
    }
    let pick = |prof: &NormProfile| prof.layers[sink_layer].residual.clone();
    let (nb, na) = (pick(&before), pick(&after));
    let ratio = |v: f64| v / baseline_median;
    let max_from = |v: &[f64]| v.iter().skip(repeat_start).cloned().fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    let (mb, ma) = (max_from(&nb), max_from(&na));
    Ok(AblationExperiment {
        name: name.into(),
        tokens: tokens.ids.clone(),
        has_bos: tokens.has_bos,
        sink_layer,
        ablated: neurons.to_vec(),
        curve,
        baseline_median,
        bos_ratio_before: tokens.has_bos.then(|| ratio(nb[0])),
        bos_ratio_after: tokens.has_bos.then(|| ratio(na[0])),
        repeat_ratio_before: mb.map(ratio),
        repeat_ratio_after: ma.map(ratio),
        repeat_reduction: mb.zip(ma).map(|(b, a)| b / a),
    })
}

/// Smallest `n` for which `BoS + t×n` has a repeat position above
/// `fraction × BoS norm` after the sink layer, by binary search up to `max_n`.
pub fn repeats_needed<T: Scalar>(
    model: &Model<T>,
    sink_layer: usize,
    repeat_token: TokenId,
    max_n: usize,
    fraction: f64,
) -> Result<Option<usize>> {
    let cfg = model.config();
    let max_n = max_n.min(cfg.max_seq.saturating_sub(1));
    let fires = |n: usize| -> Result<bool> {
        let ids: Vec<TokenId> = std::iter::repeat(repeat_token).take(n).collect();
        let norms = post_layer_norms(model, &with_bos(cfg, &ids)?, sink_layer, &[])?;
        let top = norms[1..].iter().cloned().fold(0.0, f64::max);
        Ok(top > fraction * norms[0])
    };
    if max_n == 0 || !fires(max_n)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0usize, max_n);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fires(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub model_name: String,
    pub candidates: Vec<LayerCandidates>,
    pub sink_layer: Option<usize>,
    pub sink_neurons: Vec<usize>,
    pub ablation: Vec<AblationExperiment>,
    pub repeats_needed: Option<usize>,
    /// Fraction of the BoS norm a repeat must exceed to count as induced.
    pub repeats_rule_fraction: f64,
}

impl SinkReport {
    /// Report carrying only a published finding (no curves).
    pub fn finding(model_name: &str, repeats: usize, sink_layer: usize, sink_neurons: Vec<usize>) -> Self {
        Self {
            model_name: model_name.into(),
            candidates: Vec::new(),
            sink_layer: Some(sink_layer),
            sink_neurons,
            ablation: Vec::new(),
            repeats_needed: Some(repeats),
            repeats_rule_fraction: REPEAT_FRACTION_OF_BOS,
        }
    }

    pub fn csv_rows(&self) -> Vec<(String, CurveRow)> {
        self.ablation
            .iter()
            .flat_map(|e| e.curve.iter().map(move |r| (e.name.clone(), *r)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    GateNeuron { layer: usize, neuron: usize },
    LinearProbe,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GateNeuron { layer, neuron } => write!(f, "gate-neuron(layer {layer}, {neuron})"),
            Self::LinearProbe => f.write_str("linear-probe"),
        }
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown probe kind {s:?}"));
        if s == "linear-probe" {
            return Ok(Self::LinearProbe);
        }
        let inner = s
            .strip_prefix("gate-neuron(layer ")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let (l, n) = inner.split_once(", ").ok_or_else(bad)?;
        Ok(Self::GateNeuron {
            layer: l.trim().parse().map_err(|_| bad())?,
            neuron: n.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for ProbeKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProbeKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub n_sequences: usize,
    pub n_with_bos: usize,
    pub n_positions: usize,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe_kind: ProbeKind,
    /// Which state was classified.
    pub state: String,
    pub accuracy: f64,
    pub n_first: usize,
    pub n_non_first: usize,
    /// Signed margin per example: positive means correctly classified.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub mean_margin: f64,
    /// Separating direction in residual space, plus its bias.
    pub direction: Vec<f64>,
    pub bias: f64,
    pub corpus: CorpusInfo,
}

pub const PROBE_EPOCHS: usize = 500;
pub const PROBE_STEP: f64 = 0.1;

/// Seeded BoS-prefixed corpus of i.i.d. draws from `tokens`.
pub fn probe_corpus(cfg: &ModelConfig, tokens: &[TokenId], n_sequences: usize, body_len: usize, seed: u64) -> Result<Vec<TokenSequence>> {
    if tokens.is_empty() {
        return Err(Error::Argument("empty token pool".into()));
    }
    let mut rng = Rng::stream(seed, "probe-corpus");
    (0..n_sequences)
        .map(|_| {
            let body: Vec<TokenId> = (0..body_len).map(|_| tokens[rng.below(tokens.len())]).collect();
            with_bos(cfg, &body)
        })
        .collect()
}

/// Classifies post-first-attention states as first / non-first position.
pub fn first_token_probe<T: Scalar>(
    model: &Model<T>,
    corpus: &[TokenSequence],
    kind: ProbeKind,
) -> Result<ProbeReport> {
    if corpus.len() < 2 {
        return Err(Error::Argument("probe corpus needs >= 2 sequences".into()));
    }
    let cfg = model.config();
    let layer = match kind {
        ProbeKind::GateNeuron { layer, neuron } => {
            if layer >= cfg.n_layers || neuron >= cfg.d_ff {
                return Err(Error::Argument(format!("probe {kind} outside model")));
            }
            layer
        }
        ProbeKind::LinearProbe => 0,
    };
    let tc = TraceConfig::default()
        .residual(ResidualCapture::Full)
        .layers(LayerFilter::Only(vec![layer]));
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<bool> = Vec::new();
    let runs = crate::par::map(corpus, |s| model.forward(s, &tc, &[]));
    for run in runs {
        let run = run?;
        let mids = run.trace.layer(layer).expect("traced").resid_mid.vectors().expect("full").to_vec();
        for (p, v) in mids.iter().enumerate() {
            let state = match kind {
                ProbeKind::GateNeuron { .. } => model.mlp_input(layer, v),
                ProbeKind::LinearProbe => v.clone(),
            };
            xs.push(state.iter().map(|x| x.to_f64_lossy()).collect());
            ys.push(p == 0);
        }
    }
    let n_first = ys.iter().filter(|&&y| y).count();
    if n_first == 0 || n_first == ys.len() {
        return Err(Error::DegenerateCorpus("probe corpus has only one class".into()));
    }
    let (direction, bias) = match kind {
        ProbeKind::GateNeuron { layer, neuron } => (
            model.weights().layers[layer].wgate.row(neuron).iter().map(|x| x.to_f64_lossy()).collect(),
            0.0,
        ),
        ProbeKind::LinearProbe => fit_logistic(&xs, &ys),
    };
    let margins: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, &y)| {
            let s = dot(&direction, x) + bias;
            if y { s } else { -s }
        })
        .collect();
    let correct = margins.iter().filter(|&&m| m > 0.0).count();
    Ok(ProbeReport {
        probe_kind: kind,
        state: match kind {
            ProbeKind::GateNeuron { layer, .. } => format!("normalized MLP input of layer {layer}"),
            ProbeKind::LinearProbe => "residual after layer-0 attention".into(),
        },
        accuracy: correct as f64 / margins.len() as f64,
        n_first,
        n_non_first: ys.len() - n_first,
        min_margin: margins.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_margin: margins.iter().sum::<f64>() / margins.len() as f64,
        margins,
        direction,
        bias,
        corpus: CorpusInfo {
            n_sequences: corpus.len(),
            n_with_bos: corpus.iter().filter(|s| s.has_bos).count(),
            n_positions: ys.len(),
            description: "position 0 labeled first, all later positions non-first".into(),
        },
    })
}

/// Full-batch logistic regression from zero init.
fn fit_logistic(xs: &[Vec<f64>], ys: &[bool]) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..PROBE_EPOCHS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let p = 1.0 / (1.0 + (-(dot(&w, x) + b)).exp());
            let err = p - f64::from(u8::from(y));
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_STEP * g / n;
        }
        b -= PROBE_STEP * gb / n;
    }
    (w, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityThresholds {
    pub tau_self: f64,
    pub tau_cross: f64,
}

impl Default for OrthogonalityThresholds {
    fn default() -> Self {
        Self {
            tau_self: 0.1,
            tau_cross: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOrthogonality {
    pub head: usize,
    /// Tokens with a defined self-score (non-zero query and key).
    pub tokens_used: usize,
    pub self_scores: Vec<Option<f64>>,
    pub mean_abs_self: f64,
    pub mean_cross: f64,
    pub min_cross: f64,
    pub max_cross: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub layer: usize,
    pub tokens: Vec<TokenId>,
    pub thresholds: OrthogonalityThresholds,
    pub heads: Vec<HeadOrthogonality>,
}

impl OrthogonalityReport {
    pub fn flagged_heads(&self) -> Vec<usize> {
        self.heads.iter().filter(|h| h.flagged).map(|h| h.head).collect()
    }
}

/// Self and cross cosine scores of unrotated layer-0 queries and keys.
pub fn head_orthogonality_report<T: Scalar>(
    model: &Model<T>,
    tokens: &[TokenId],
    thresholds: OrthogonalityThresholds,
) -> Result<OrthogonalityReport> {
    if tokens.is_empty() {
        return Err(Error::Argument("empty token sample".into()));
    }
    let cfg = model.config();
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Argument(format!("token {t} outside vocabulary")));
    }
    let lw = &model.weights().layers[0];
    let inputs: Vec<Vec<T>> = tokens.iter().map(|&t| model.attention_input(0, model.embedding(t))).collect();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let view = lw.head(h, cfg.head_dim);
        let qs: Vec<Vec<T>> = inputs.iter().map(|x| view.query(x)).collect();
        let ks: Vec<Vec<T>> = inputs.iter().map(|x| view.key(x)).collect();
        let self_scores: Vec<Option<f64>> = qs
            .iter()
            .zip(&ks)
            .map(|(q, k)| cosine(q, k).map(|c| c.to_f64_lossy()))
            .collect();
        let used: Vec<f64> = self_scores.iter().flatten().copied().collect();
        let mut cross = Vec::new();
        for (i, q) in qs.iter().enumerate() {
            if self_scores[i].is_none() {
                continue;
            }
            for (j, k) in ks.iter().enumerate() {
                if i != j {
                    if let Some(c) = cosine(q, k) {
                        cross.push(c.to_f64_lossy());
                    }
                }
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let mean_abs_self = mean(&used.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let mean_cross = mean(&cross);
        heads.push(HeadOrthogonality {
            head: h,
            tokens_used: used.len(),
            self_scores,
            mean_abs_self,
            mean_cross,
            min_cross: cross.iter().cloned().fold(0.0, f64::min),
            max_cross: cross.iter().cloned().fold(0.0, f64::max),
            flagged: !used.is_empty() && mean_abs_self < thresholds.tau_self && mean_cross > thresholds.tau_cross,
        });
    }
    Ok(OrthogonalityReport {
        layer: 0,
        tokens: tokens.to_vec(),
        thresholds,
        heads,
    })
}

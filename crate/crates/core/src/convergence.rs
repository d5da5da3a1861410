//! Repeated-token convergence: distance of the last token of `prefix + t×n`
//! to the singleton `[t]`, its power-law fit, the softmax dispersion bound
//! and the single-layer `2rk·exp(δ)/n` bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Arch, AttentionCapture, ForwardOutput, LayerFilter, Model, ModelConfig, ResidualCapture,
    TokenId, TokenSequence, Trace, TraceConfig,
};
use crate::numkit::{loglog_slope, norm, sub, Scalar};
use crate::par;

/// Distances at or below this are float noise and are not fitted.
pub const FLOAT_FLOOR: f64 = 1e-12;
pub const DISPERSION_SLACK: f64 = 1e-9;
/// Absolute slack on the z-level bound comparison.
pub const LEMMA_SLACK: f64 = 1e-12;
pub const MONOTONE_FROM: usize = 64;
pub const MONOTONE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurePoint {
    /// Residual right after layer `l`'s attention add (the proof's `z`).
    AttnOut(usize),
    /// Residual after the whole of layer `l`.
    BlockOut(usize),
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSpec {
    pub prefix: Vec<TokenId>,
    pub repeat_token: TokenId,
    pub ns: Vec<usize>,
    pub measure: MeasurePoint,
    pub include_bos: bool,
}

/// `[from, 2·from, 4·from, …]` up to and including `to`.
pub fn doubling(from: usize, to: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = from.max(1);
    while n <= to {
        out.push(n);
        n *= 2;
    }
    out
}

impl RepeatSpec {
    /// Two-token prefix, repeat token 3, `n = 16…4096`, measured at the model output.
    pub fn reference_default() -> Self {
        Self {
            prefix: vec![1, 2],
            repeat_token: 3,
            ns: doubling(16, 4096),
            measure: MeasurePoint::Final,
            include_bos: false,
        }
    }

    pub fn k(&self) -> usize {
        self.prefix.len()
    }

    /// Prefix positions plus the BoS slot, i.e. every non-repeat position.
    pub fn k_eff(&self) -> usize {
        self.prefix.len() + usize::from(self.include_bos)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ns.is_empty() || self.ns[0] == 0 || self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("ns must be non-empty, >= 1 and strictly increasing".into()));
        }
        let bad = self
            .prefix
            .iter()
            .chain(std::iter::once(&self.repeat_token))
            .find(|&&t| t as usize >= cfg.vocab_size);
        if let Some(t) = bad {
            return Err(Error::Argument(format!("token {t} outside vocabulary")));
        }
        if self.include_bos && cfg.bos_id.is_none() {
            return Err(Error::Config("include_bos on a model without bos_id".into()));
        }
        let layer = match self.measure {
            MeasurePoint::AttnOut(l) | MeasurePoint::BlockOut(l) => Some(l),
            MeasurePoint::Final => None,
        };
        if let Some(l) = layer.filter(|&l| l >= cfg.n_layers) {
            return Err(Error::Argument(format!("measure layer {l} outside model")));
        }
        Ok(())
    }
}

pub fn build_repeat_sequence(cfg: &ModelConfig, spec: &RepeatSpec, n: usize) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(spec.k_eff() + n);
    if spec.include_bos {
        ids.push(cfg.bos_id.ok_or_else(|| Error::Config("model has no bos_id".into()))?);
    }
    ids.extend_from_slice(&spec.prefix);
    ids.extend(std::iter::repeat(spec.repeat_token).take(n));
    if ids.len() > cfg.max_seq {
        return Err(crate::model::ModelError::Capacity(format!(
            "{} tokens exceed max_seq {}",
            ids.len(),
            cfg.max_seq
        ))
        .into());
    }
    Ok(TokenSequence::new(ids, cfg.bos_id))
}

fn measured_trace_config() -> TraceConfig {
    TraceConfig::default()
        .attention(AttentionCapture::LastRow)
        .residual(ResidualCapture::Full)
        .layers(LayerFilter::All)
}

fn vector_at<T: Scalar>(out: &ForwardOutput<T>, point: MeasurePoint, pos: usize) -> Vec<T> {
    let from = |l: usize, mid: bool| {
        let lt = out.trace.layer(l).expect("all layers traced");
        let rec = if mid { &lt.resid_mid } else { &lt.resid_out };
        rec.vectors().expect("full capture")[pos].clone()
    };
    match point {
        MeasurePoint::AttnOut(l) => from(l, true),
        MeasurePoint::BlockOut(l) => from(l, false),
        MeasurePoint::Final => out.final_states[pos].clone(),
    }
}

fn dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    norm(&sub(a, b)).to_f64_lossy()
}

fn star_run<T: Scalar>(model: &Model<T>, spec: &RepeatSpec) -> Result<ForwardOutput<T>> {
    let star = TokenSequence::new(vec![spec.repeat_token], None);
    Ok(model.forward(&star, &measured_trace_config(), &[])?)
}

/// Last-token distance between `S_n` and the singleton run at `spec.measure`.
pub fn last_token_distance<T: Scalar>(model: &Model<T>, spec: &RepeatSpec, n: usize) -> Result<f64> {
    spec.validate(model.config())?;
    let star = star_run(model, spec)?;
    Ok(measure_point(model, spec, n, &star)?.distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    pub rows_checked: usize,
    pub violations: usize,
    /// `min(bound − α)` over all checked entries; negative means a violation.
    pub worst_margin: f64,
    pub slack: f64,
}

impl Default for DispersionStats {
    fn default() -> Self {
        Self {
            rows_checked: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
            slack: DISPERSION_SLACK,
        }
    }
}

impl DispersionStats {
    pub fn merge(&mut self, other: &Self) {
        self.rows_checked += other.rows_checked;
        self.violations += other.violations;
        self.worst_margin = self.worst_margin.min(other.worst_margin);
    }

    fn check_trace<T: Scalar>(&mut self, trace: &Trace<T>) {
        for lt in trace.layers.iter().flatten() {
            for pattern in &lt.attention {
                for row in &pattern.rows {
                    let margin = dispersion_margin(&row.logits, &row.probs);
                    self.rows_checked += 1;
                    if margin < -self.slack {
                        self.violations += 1;
                    }
                    self.worst_margin = self.worst_margin.min(margin);
                }
            }
        }
    }
}

/// `exp(max − min)/len − max(α)` for one attention row.
pub fn dispersion_margin<T: Scalar>(logits: &[T], probs: &[T]) -> f64 {
    let lo = logits.iter().map(|v| v.to_f64_lossy()).fold(f64::INFINITY, f64::min);
    let hi = logits.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let bound = (hi - lo).exp() / logits.len() as f64;
    let top = probs.iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max);
    bound - top
}

/// Checks `α_ij ≤ exp(δ_row)/(i+1)` on every row of every head and layer.
pub fn dispersion_check<T: Scalar>(model: &Model<T>, tokens: &TokenSequence) -> Result<DispersionStats> {
    let tc = TraceConfig::none().attention(AttentionCapture::All);
    let out = model.forward(tokens, &tc, &[])?;
    let mut stats = DispersionStats::default();
    stats.check_trace(&out.trace);
    Ok(stats)
}

struct PointRun {
    distance: f64,
    z_distance: f64,
    out_distance: f64,
    /// Last-row logit range of each layer-0 head.
    deltas: Vec<f64>,
    dispersion: DispersionStats,
}

fn measure_point<T: Scalar>(
    model: &Model<T>,
    spec: &RepeatSpec,
    n: usize,
    star: &ForwardOutput<T>,
) -> Result<PointRun> {
    let seq = build_repeat_sequence(model.config(), spec, n)?;
    let out = model.forward(&seq, &measured_trace_config(), &[])?;
    let last = seq.len() - 1;
    let deltas = out
        .trace
        .layer(0)
        .expect("layer 0 traced")
        .attention
        .iter()
        .map(|p| {
            let row = p.rows.last().expect("last row captured");
            let v: Vec<f64> = row.logits.iter().map(|x| x.to_f64_lossy()).collect();
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut dispersion = DispersionStats::default();
    dispersion.check_trace(&out.trace);
    Ok(PointRun {
        distance: dist(&vector_at(&out, spec.measure, last), &vector_at(star, spec.measure, 0)),
        z_distance: dist(&vector_at(&out, MeasurePoint::AttnOut(0), last), &vector_at(star, MeasurePoint::AttnOut(0), 0)),
        out_distance: dist(&out.final_states[last], &star.final_states[0]),
        deltas,
        dispersion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaPoint {
    pub n: usize,
    /// `‖z − z*‖` after the attention residual add.
    pub distance_z: f64,
    pub bound: f64,
    pub holds: bool,
    /// Distance after the MLP; not covered by the bound without a Lipschitz factor.
    pub distance_out: f64,
    /// Largest per-head last-row logit range at this `n`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub spec: RepeatSpec,
    pub k: usize,
    pub k_eff: usize,
    /// Per-head `max_j ‖Wproj_h v_j‖` over the tokens in play.
    pub r_per_head: Vec<f64>,
    pub r: f64,
    pub delta: f64,
    pub slack: f64,
    pub points: Vec<LemmaPoint>,
    pub all_hold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCheck {
    pub from_n: usize,
    pub tolerance: f64,
    /// Largest `d(n_{i+1}) / d(n_i)` over the checked range.
    pub worst_ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub spec: RepeatSpec,
    pub curve: Vec<CurvePoint>,
    pub fitted_slope: f64,
    pub fit_points: usize,
    pub float_floor: f64,
    /// `n` values whose distance sat at or under the float floor.
    pub excluded_ns: Vec<usize>,
    pub monotone: MonotoneCheck,
    pub dispersion: DispersionStats,
    /// Present only for single-layer appendix-arch models.
    pub lemma: Option<LemmaReport>,
}

impl ConvergenceReport {
    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.fitted_slope)
    }
}

/// Fits the log-log slope of the points strictly above the float floor.
pub fn fit_curve(curve: &[CurvePoint]) -> Result<(f64, usize, Vec<usize>)> {
    let (kept, dropped): (Vec<&CurvePoint>, Vec<&CurvePoint>) =
        curve.iter().partition(|p| p.distance > FLOAT_FLOOR);
    if kept.len() < 2 {
        return Err(Error::DegenerateCurve(format!(
            "{} of {} distances above the float floor {FLOAT_FLOOR:e}",
            kept.len(),
            curve.len()
        )));
    }
    let pts: Vec<(usize, f64)> = kept.iter().map(|p| (p.n, p.distance)).collect();
    Ok((loglog_slope(&pts)?, kept.len(), dropped.iter().map(|p| p.n).collect()))
}

pub fn monotone_check(curve: &[CurvePoint], from_n: usize, tolerance: f64) -> MonotoneCheck {
    let tail: Vec<&CurvePoint> = curve.iter().filter(|p| p.n >= from_n).collect();
    let worst_ratio = tail
        .windows(2)
        .filter(|w| w[0].distance > FLOAT_FLOOR)
        .map(|w| w[1].distance / w[0].distance)
        .fold(0.0, f64::max);
    MonotoneCheck {
        from_n,
        tolerance,
        worst_ratio,
        holds: worst_ratio <= 1.0 + tolerance,
    }
}

fn lemma_setting(cfg: &ModelConfig) -> bool {
    cfg.n_layers == 1 && cfg.arch == Arch::Appendix
}

/// `r_h = max ‖Wproj_h · v_h(x)‖` over the distinct tokens of the spec.
fn projected_value_norms<T: Scalar>(model: &Model<T>, spec: &RepeatSpec) -> Result<Vec<f64>> {
    let cfg = model.config();
    let lw = &model.weights().layers[0];
    let mut tokens: Vec<TokenId> = spec.prefix.clone();
    tokens.push(spec.repeat_token);
    if spec.include_bos {
        tokens.extend(cfg.bos_id);
    }
    tokens.sort_unstable();
    tokens.dedup();
    let mut r = vec![0.0f64; cfg.n_heads];
    for &t in &tokens {
        let x = model.attention_input(0, model.embedding(t));
        for (h, rh) in r.iter_mut().enumerate() {
            let v = lw.head(h, cfg.head_dim).value(&x);
            let mut padded = vec![T::zero(); cfg.n_heads * cfg.head_dim];
            padded[h * cfg.head_dim..(h + 1) * cfg.head_dim].copy_from_slice(&v);
            let proj = lw.wproj.matvec(&padded).map_err(crate::model::ModelError::from)?;
            *rh = rh.max(norm(&proj).to_f64_lossy());
        }
    }
    Ok(r)
}

fn lemma_report(spec: &RepeatSpec, r_per_head: Vec<f64>, runs: &[(usize, &PointRun)]) -> LemmaReport {
    let k_eff = spec.k_eff();
    let points: Vec<LemmaPoint> = runs
        .iter()
        .map(|&(n, run)| {
            let bound: f64 = r_per_head
                .iter()
                .zip(&run.deltas)
                .map(|(r, d)| 2.0 * r * k_eff as f64 * d.exp() / n as f64)
                .sum();
            LemmaPoint {
                n,
                distance_z: run.z_distance,
                bound,
                holds: run.z_distance <= bound + LEMMA_SLACK,
                distance_out: run.out_distance,
                delta: run.deltas.iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect();
    LemmaReport {
        spec: spec.clone(),
        k: spec.k(),
        k_eff,
        r: r_per_head.iter().cloned().fold(0.0, f64::max),
        r_per_head,
        delta: points.iter().map(|p| p.delta).fold(0.0, f64::max),
        slack: LEMMA_SLACK,
        all_hold: points.iter().all(|p| p.holds),
        points,
    }
}

fn run_all<T: Scalar>(model: &Model<T>, spec: &RepeatSpec) -> Result<Vec<PointRun>> {
    spec.validate(model.config())?;
    let star = star_run(model, spec)?;
    par::map(&spec.ns, |&n| measure_point(model, spec, n, &star))
        .into_iter()
        .collect()
}

/// Single-layer bound at the z level for every `n` of the spec.
pub fn lemma_bound_check<T: Scalar>(model: &Model<T>, spec: &RepeatSpec) -> Result<LemmaReport> {
    if !lemma_setting(model.config()) {
        return Err(Error::Config("the bound applies to 1-layer appendix-arch models only".into()));
    }
    let runs = run_all(model, spec)?;
    let r = projected_value_norms(model, spec)?;
    let pairs: Vec<(usize, &PointRun)> = spec.ns.iter().copied().zip(&runs).collect();
    Ok(lemma_report(spec, r, &pairs))
}

pub fn convergence_curve<T: Scalar>(model: &Model<T>, spec: &RepeatSpec) -> Result<ConvergenceReport> {
    if spec.ns.len() < 3 {
        return Err(Error::Argument("a convergence curve needs at least 3 values of n".into()));
    }
    let runs = run_all(model, spec)?;
    let curve: Vec<CurvePoint> = spec
        .ns
        .iter()
        .zip(&runs)
        .map(|(&n, r)| CurvePoint { n, distance: r.distance })
        .collect();
    let (fitted_slope, fit_points, excluded_ns) = fit_curve(&curve)?;
    let mut dispersion = DispersionStats::default();
    for r in &runs {
        dispersion.merge(&r.dispersion);
    }
    let lemma = if lemma_setting(model.config()) {
        let r = projected_value_norms(model, spec)?;
        let pairs: Vec<(usize, &PointRun)> = spec.ns.iter().copied().zip(&runs).collect();
        Some(lemma_report(spec, r, &pairs))
    } else {
        None
    };
    Ok(ConvergenceReport {
        spec: spec.clone(),
        monotone: monotone_check(&curve, MONOTONE_FROM, MONOTONE_TOLERANCE),
        curve,
        fitted_slope,
        fit_points,
        float_floor: FLOAT_FLOOR,
        excluded_ns,
        dispersion,
        lemma,
    })
}

/// Appendix-architecture config sized for `n` up to 4096 plus a short prefix.
pub fn appendix_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        d_ff: 32,
        vocab_size: 32,
        rope_theta: 10000.0,
        max_seq: 4096 + 16,
        arch: Arch::Appendix,
        bos_id: Some(0),
        rope: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeightSet;
    use crate::numkit::{softmax_row, Rng};
    use proptest::prelude::*;

    fn small_spec(ns: Vec<usize>) -> RepeatSpec {
        RepeatSpec {
            ns,
            ..RepeatSpec::reference_default()
        }
    }

    #[test]
    fn repeat_sequence_examples() {
        let cfg = appendix_config(1);
        let spec = RepeatSpec {
            prefix: vec![],
            repeat_token: 7,
            ns: vec![3],
            measure: MeasurePoint::Final,
            include_bos: false,
        };
        assert_eq!(build_repeat_sequence(&cfg, &spec, 3).unwrap().ids, vec![7, 7, 7]);
        let spec = RepeatSpec { prefix: vec![4, 5], ..spec };
        assert_eq!(build_repeat_sequence(&cfg, &spec, 2).unwrap().ids, vec![4, 5, 7, 7]);
        let with_bos = RepeatSpec { include_bos: true, ..spec.clone() };
        let s = build_repeat_sequence(&cfg, &with_bos, 1).unwrap();
        assert!(s.has_bos && s.ids == vec![0, 4, 5, 7]);
        assert!(build_repeat_sequence(&cfg, &spec, 5000).is_err());
    }

    #[test]
    fn spec_validation() {
        let cfg = appendix_config(1);
        assert!(small_spec(vec![4, 4]).validate(&cfg).is_err());
        assert!(small_spec(vec![0, 4]).validate(&cfg).is_err());
        let mut s = small_spec(vec![1, 2]);
        s.measure = MeasurePoint::AttnOut(1);
        assert!(s.validate(&cfg).is_err());
        let mut c = cfg.clone();
        c.bos_id = None;
        assert!(RepeatSpec { include_bos: true, ..small_spec(vec![1]) }.validate(&c).is_err());
    }

    #[test]
    fn no_prefix_no_bos_distance_is_zero_everywhere() {
        let model = Model::<f64>::random(appendix_config(3), 5).unwrap();
        for measure in [
            MeasurePoint::AttnOut(0),
            MeasurePoint::BlockOut(1),
            MeasurePoint::AttnOut(2),
            MeasurePoint::Final,
        ] {
            let spec = RepeatSpec {
                prefix: vec![],
                repeat_token: 9,
                ns: vec![1, 7, 50],
                measure,
                include_bos: false,
            };
            for &n in &spec.ns {
                assert!(last_token_distance(&model, &spec, n).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn distance_roughly_halves_per_doubling() {
        let model = Model::<f64>::random(appendix_config(1), 42).unwrap();
        let spec = small_spec(vec![64, 128]);
        let a = last_token_distance(&model, &spec, 64).unwrap();
        let b = last_token_distance(&model, &spec, 128).unwrap();
        assert!(a.is_finite() && b.is_finite() && a > 0.0);
        assert!((0.35..=0.65).contains(&(b / a)), "ratio {}", b / a);
    }

    #[test]
    fn fitting_path_recovers_exact_power_law() {
        let curve: Vec<CurvePoint> = doubling(16, 4096)
            .into_iter()
            .map(|n| CurvePoint { n, distance: 1.0 / n as f64 })
            .collect();
        let (slope, used, dropped) = fit_curve(&curve).unwrap();
        assert!((slope + 1.0).abs() < 1e-9);
        assert_eq!((used, dropped.len()), (9, 0));
        let floor: Vec<CurvePoint> = curve.iter().map(|p| CurvePoint { n: p.n, distance: 1e-13 }).collect();
        assert!(matches!(fit_curve(&floor), Err(Error::DegenerateCurve(_))));
    }

    #[test]
    fn single_layer_curve_slope_and_lemma() {
        let model = Model::<f64>::random(appendix_config(1), 42).unwrap();
        let spec = small_spec(doubling(16, 1024));
        let rep = convergence_curve(&model, &spec).unwrap();
        assert!(rep.slope_within(-1.3, -0.7), "slope {}", rep.fitted_slope);
        assert!(rep.monotone.holds);
        assert_eq!(rep.dispersion.violations, 0);
        let lemma = rep.lemma.unwrap();
        assert!(lemma.all_hold);
        assert!(lemma.points.iter().all(|p| p.distance_z <= p.bound));
    }

    #[test]
    fn lemma_k0_control_and_wrong_arch() {
        let model = Model::<f64>::random(appendix_config(1), 42).unwrap();
        let spec = RepeatSpec { prefix: vec![], ..small_spec(vec![16, 64, 256]) };
        let rep = lemma_bound_check(&model, &spec).unwrap();
        for p in &rep.points {
            assert_eq!(p.bound, 0.0);
            assert!(p.distance_z < 1e-9 && p.holds);
        }
        let deep = Model::<f64>::random(appendix_config(2), 42).unwrap();
        assert!(matches!(lemma_bound_check(&deep, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn doubled_prefix_doubles_the_bound() {
        let mut cfg = appendix_config(1);
        cfg.rope = false;
        let model = Model::<f64>::random(cfg, 42).unwrap();
        let base = small_spec(vec![32, 128]);
        let doubled = RepeatSpec { prefix: vec![1, 2, 1, 2], ..base.clone() };
        let a = lemma_bound_check(&model, &base).unwrap();
        let b = lemma_bound_check(&model, &doubled).unwrap();
        assert_eq!(a.r_per_head, b.r_per_head);
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert!((pa.delta - pb.delta).abs() < 1e-12);
            assert!((pb.bound / pa.bound - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_layer_distances_settle() {
        let model = Model::<f64>::random(appendix_config(4), 42).unwrap();
        let rep = convergence_curve(&model, &small_spec(doubling(16, 1024))).unwrap();
        assert!(rep.monotone.holds, "{:?}", rep.monotone);
        assert!(rep.lemma.is_none());
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion_margin(&[0.3; 4], &[0.25; 4]), 0.0);
        let l = [1.0, 0.0, 0.0, 0.0];
        let p = softmax_row(&l).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 3.0)).abs() < 1e-15);
        let m = dispersion_margin(&l, &p);
        assert!((m - (e / 4.0 - e / (e + 3.0))).abs() < 1e-12 && m > 0.0);
    }

    #[test]
    fn dispersion_sweep_over_random_models() {
        let mut rng = Rng::new(99);
        for seed in 0..100u64 {
            let mut cfg = appendix_config(1 + (seed % 3) as usize);
            if seed % 2 == 0 {
                cfg.arch = Arch::LlamaStyle;
            }
            let init = crate::model::RandomInit { embed_std: 1.0, weight_std: 0.3 + rng.uniform() };
            let model = Model::new(cfg.clone(), WeightSet::<f64>::random(&cfg, seed, init)).unwrap();
            let n = 1 + rng.below(40);
            let ids: Vec<u32> = (0..n).map(|_| rng.below(cfg.vocab_size) as u32).collect();
            let stats = dispersion_check(&model, &model.sequence(ids)).unwrap();
            assert_eq!(stats.violations, 0, "seed {seed}: {stats:?}");
        }
    }

    #[test]
    fn relabeling_prefix_tokens_leaves_distance_unchanged() {
        let cfg = appendix_config(2);
        let model = Model::<f64>::random(cfg.clone(), 8).unwrap();
        let (cfg2, mut w) = model.clone().into_parts();
        let (a, b) = (1usize, 17usize);
        let (ra, rb) = (w.embed.row(a).to_vec(), w.embed.row(b).to_vec());
        w.embed.row_mut(a).copy_from_slice(&rb);
        w.embed.row_mut(b).copy_from_slice(&ra);
        let permuted = Model::new(cfg2, w).unwrap();
        let spec = small_spec(vec![40]);
        let relabeled = RepeatSpec { prefix: vec![17, 2], ..spec.clone() };
        assert_eq!(
            last_token_distance(&model, &spec, 40).unwrap(),
            last_token_distance(&permuted, &relabeled, 40).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_distances_nonnegative_finite(seed in 0u64..1000, n in 1usize..200, k in 0usize..4) {
            let model = Model::<f64>::random(appendix_config(2), seed).unwrap();
            let spec = RepeatSpec { prefix: (1..=k as u32).collect(), ..small_spec(vec![n]) };
            let d = last_token_distance(&model, &spec, n).unwrap();
            prop_assert!(d.is_finite() && d >= 0.0);
        }

        #[test]
        fn prop_lemma_holds_on_single_layer_models(seed in 0u64..1000, k in 1usize..5, n in 1usize..300) {
            let model = Model::<f64>::random(appendix_config(1), seed).unwrap();
            let spec = RepeatSpec { prefix: (4..4 + k as u32).collect(), ..small_spec(vec![n]) };
            let rep = lemma_bound_check(&model, &spec).unwrap();
            prop_assert!(rep.all_hold, "{:?}", rep.points);
        }
    }
}

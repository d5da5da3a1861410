use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::*;
use crate::clusterlab::{
    cluster_tokens, generate_cluster_attack, head_projection_analysis, interleave, AttackEvaluator, ClusterTable,
    ProjectionScores,
};
use crate::convergence::{
    appendix_config, convergence_curve, dispersion_check, doubling, lemma_bound_check,
    DispersionStats, MeasurePoint, RepeatSpec,
};
use crate::interventions::InterventionSpec;
use crate::model::{io, LayerFilter, Model, ModelConfig, TokenSequence, TraceConfig, WeightSet};
use crate::numkit::Rng;
use crate::sinklab::{
    self, ablation_study, choose_sinks, first_token_probe, norm_profile, post_layer_norms, probe_corpus, repeats_needed,
    synthetic_config, topk_sink_candidates, with_bos, ProbeKind, SinkReport, SyntheticSpec, REPEAT_FRACTION_OF_BOS,
};

fn to_json<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| Failure::Output(e.to_string()))
}

fn parse_ids(s: &str, what: &str) -> CliResult<Vec<TokenId>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Failure::Usage(format!("bad {what} entry {p:?}"))))
        .collect()
}

fn parse_usizes(s: &str, what: &str) -> CliResult<Vec<usize>> {
    parse_ids(s, what).map(|v| v.into_iter().map(|x| x as usize).collect())
}

fn parse_ns(s: &str) -> CliResult<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let p = |x: &str| x.trim().parse::<usize>().map_err(|_| Failure::Usage(format!("bad ns range {s:?}")));
        let (a, b) = (p(a)?, p(b)?);
        if a == 0 || a > b {
            return Err(Failure::Usage(format!("bad ns range {s:?}")));
        }
        Ok(doubling(a, b))
    } else {
        parse_usizes(s, "ns")
    }
}

fn parse_measure(s: &str) -> CliResult<MeasurePoint> {
    let bad = || Failure::Usage(format!("bad measure point {s:?}"));
    match s.split_once(':') {
        None if s == "final" => Ok(MeasurePoint::Final),
        Some(("attn_out", l)) => Ok(MeasurePoint::AttnOut(l.parse().map_err(|_| bad())?)),
        Some(("block_out", l)) => Ok(MeasurePoint::BlockOut(l.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

struct Built {
    model: Model<f64>,
    name: String,
}

fn model_config(m: &ModelArgs, arch: ArchArg) -> ModelConfig {
    let mut cfg = match arch {
        ArchArg::Appendix => appendix_config(m.layers.unwrap_or(1)),
        ArchArg::LlamaStyle => {
            let mut c = synthetic_config();
            if let Some(l) = m.layers {
                c.n_layers = l;
            }
            c
        }
    };
    if let Some(d) = m.d_model {
        cfg.d_model = d;
        cfg.head_dim = if cfg.n_heads > 0 { d / cfg.n_heads } else { 0 };
    }
    if let Some(f) = m.d_ff {
        cfg.d_ff = f;
    }
    if let Some(v) = m.vocab {
        cfg.vocab_size = v;
        if arch == ArchArg::LlamaStyle {
            cfg.bos_id = v.checked_sub(1).map(|b| b as TokenId);
        } else {
            cfg.bos_id = cfg.bos_id.filter(|&b| (b as usize) < v);
        }
    }
    if let Some(s) = m.max_seq {
        cfg.max_seq = s;
    }
    cfg
}

fn build(m: &ModelArgs, default_arch: ArchArg) -> CliResult<Built> {
    if let Some(path) = &m.model {
        let model = io::load::<f64>(path).map_err(|e| Failure::Usage(format!("loading {}: {e}", path.display())))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        return Ok(Built { model, name });
    }
    let arch = m.arch.unwrap_or(default_arch);
    let synth = m.synth.unwrap_or(match arch {
        ArchArg::Appendix => Synth::Random,
        ArchArg::LlamaStyle => Synth::SyntheticSink,
    });
    let cfg = model_config(m, arch);
    cfg.validate().map_err(Error::from)?;
    let weights = match synth {
        Synth::Random => WeightSet::random(&cfg, m.seed, crate::model::RandomInit::for_config(&cfg)),
        Synth::Zero => WeightSet::zeros(&cfg),
        Synth::SyntheticSink => {
            let spec = SyntheticSpec {
                seed: m.seed,
                ..SyntheticSpec::default()
            };
            sinklab::build_synthetic_sink_model(&cfg, &spec)?
        }
    };
    let name = match synth {
        Synth::Random => "random",
        Synth::Zero => "zero",
        Synth::SyntheticSink => "synthetic-sink",
    };
    Ok(Built {
        model: Model::new(cfg, weights).map_err(Error::from)?,
        name: name.into(),
    })
}

fn non_bos_tokens(cfg: &ModelConfig) -> Vec<TokenId> {
    (0..cfg.vocab_size as TokenId).filter(|&t| Some(t) != cfg.bos_id).collect()
}

/// Seeded BoS-prefixed sequences of i.i.d. non-BoS tokens.
fn ordinary_corpus(cfg: &ModelConfig, b: &BaselineArgs) -> CliResult<Vec<TokenSequence>> {
    if b.baseline_len + 1 > cfg.max_seq {
        return Err(Failure::Usage("baseline_len exceeds max_seq".into()));
    }
    Ok(probe_corpus(cfg, &non_bos_tokens(cfg), b.baseline_sequences, b.baseline_len, b.baseline_seed)?)
}

fn sequence_from(cfg: &ModelConfig, s: &SequenceArgs) -> CliResult<(TokenSequence, usize)> {
    let body = match &s.tokens {
        Some(t) => parse_ids(t, "tokens")?,
        None => {
            let mut v = parse_ids(&s.prefix, "prefix")?;
            v.extend(std::iter::repeat(s.repeat_token).take(s.n_repeats));
            v
        }
    };
    let prefix_len = if s.tokens.is_some() { 0 } else { parse_ids(&s.prefix, "prefix")?.len() };
    let seq = if s.bos { with_bos(cfg, &body)? } else { TokenSequence::new(body, cfg.bos_id) };
    let repeat_start = prefix_len + usize::from(seq.has_bos);
    seq.validate(cfg).map_err(Error::from)?;
    Ok((seq, repeat_start))
}

fn curve_csv(rows: &[sinklab::CurveRow]) -> Csv {
    let mut c = Csv::new(&["layer", "position", "norm_before", "norm_after"]);
    for r in rows {
        c.push(vec![r.layer.to_string(), r.position.to_string(), r.norm_before.to_string(), r.norm_after.to_string()]);
    }
    c
}

fn outcome(summary: String, seed: u64, report: Value, csv: Option<Csv>) -> Outcome {
    Outcome {
        summary,
        seed,
        report,
        csv,
        extra: Vec::new(),
        assertion: None,
    }
}

pub fn execute(command: &Command, out: &Path) -> CliResult<Outcome> {
    match command {
        Command::GenModel(a) => gen_model(a, out),
        Command::DetectSinks(a) => detect_sinks(a),
        Command::NormProfile(a) => norm_profile_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Probe(a) => probe(a),
        Command::Converge(a) => converge(a),
        Command::Dispersion(a) => dispersion(a),
        Command::LemmaBound(a) => lemma(a),
        Command::Cluster(a) => cluster(a),
        Command::Attack(a) => attack(a),
        Command::PatchDemo(a) => patch_demo(a),
    }
}

fn gen_model(a: &GenModelArgs, out: &Path) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::LlamaStyle)?;
    let path = a.output.clone().unwrap_or_else(|| out.join("model.json"));
    let (mp, bp) = io::save(&b.model, &path).map_err(|e| Failure::Output(e.to_string()))?;
    let blob_bytes = std::fs::metadata(&bp).map(|m| m.len()).unwrap_or(0);
    let report = json!({
        "model_name": b.name,
        "config": to_json(b.model.config())?,
        "manifest": mp.file_name().and_then(|s| s.to_str()),
        "blob": bp.file_name().and_then(|s| s.to_str()),
        "blob_bytes": blob_bytes,
    });
    Ok(outcome(format!("gen-model: wrote {} ({blob_bytes} blob bytes)", mp.display()), a.model.seed, report, None))
}

fn detect_sinks(a: &DetectSinksArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::LlamaStyle)?;
    let m = &b.model;
    let candidates = topk_sink_candidates(m, a.k)?;
    let chosen = choose_sinks(&candidates, a.keep_fraction);
    let mut report = SinkReport {
        model_name: b.name.clone(),
        candidates,
        sink_layer: chosen.as_ref().map(|c| c.0),
        sink_neurons: chosen.as_ref().map(|c| c.1.clone()).unwrap_or_default(),
        ablation: Vec::new(),
        repeats_needed: None,
        repeats_rule_fraction: REPEAT_FRACTION_OF_BOS,
    };
    let mut csv = None;
    if let Some((layer, neurons)) = &chosen {
        let needed = repeats_needed(m, *layer, a.repeat_token, a.max_repeats, REPEAT_FRACTION_OF_BOS)?;
        report.repeats_needed = needed;
        let n = needed.map_or(a.max_repeats, |n| 2 * n).min(m.config().max_seq - 1);
        let seq = with_bos(m.config(), &vec![a.repeat_token; n])?;
        let base = sinklab::baseline_median(m, *layer, &ordinary_corpus(m.config(), &a.baseline)?)?;
        let e = ablation_study(m, "repeat", *layer, neurons, &seq, 1, base)?;
        csv = Some(curve_csv(&e.curve));
        report.ablation.push(e);
    }
    let opt = |v: Option<usize>| v.map_or("none".to_string(), |x| x.to_string());
    let summary = format!(
        "detect-sinks: sink layer {}, neurons {:?}, repeats needed {}",
        opt(report.sink_layer),
        report.sink_neurons,
        opt(report.repeats_needed)
    );
    Ok(outcome(summary, a.model.seed, to_json(&report)?, csv))
}

fn norm_profile_cmd(a: &NormProfileArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::LlamaStyle)?;
    let (seq, _) = sequence_from(b.model.config(), &a.sequence)?;
    let filter = if a.layer_filter == "all" {
        LayerFilter::All
    } else {
        LayerFilter::Only(parse_usizes(&a.layer_filter, "layer_filter")?)
    };
    let p = norm_profile(&b.model, &seq, &filter, &[])?;
    let mut csv = Csv::new(&["layer", "position", "residual_norm", "mlp_out_norm"]);
    for l in &p.layers {
        for (i, (r, o)) in l.residual.iter().zip(&l.mlp_out).enumerate() {
            csv.push(vec![l.layer.to_string(), i.to_string(), r.to_string(), o.to_string()]);
        }
    }
    let summary = format!("norm-profile: {} layers x {} positions", p.layers.len(), seq.len());
    Ok(outcome(summary, a.model.seed, to_json(&p)?, Some(csv)))
}

fn ablate(a: &AblateArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::LlamaStyle)?;
    let m = &b.model;
    let (seq, start) = sequence_from(m.config(), &a.sequence)?;
    let neurons = parse_usizes(&a.neurons, "neurons")?;
    let base = sinklab::baseline_median(m, a.layer, &ordinary_corpus(m.config(), &a.baseline)?)?;
    let e = ablation_study(m, "ablate", a.layer, &neurons, &seq, start, base)?;
    let summary = format!(
        "ablate: repeat ratio {:?} -> {:?}, BoS ratio {:?} -> {:?}",
        e.repeat_ratio_before, e.repeat_ratio_after, e.bos_ratio_before, e.bos_ratio_after
    );
    let csv = curve_csv(&e.curve);
    Ok(outcome(summary, a.model.seed, to_json(&e)?, Some(csv)))
}

fn probe_kind(kind: ProbeArg, layer: usize, neuron: usize) -> ProbeKind {
    match kind {
        ProbeArg::Gate => ProbeKind::GateNeuron { layer, neuron },
        ProbeArg::Linear => ProbeKind::LinearProbe,
    }
}

fn probe(a: &ProbeArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::LlamaStyle)?;
    let cfg = b.model.config();
    let corpus = probe_corpus(cfg, &non_bos_tokens(cfg), a.n_sequences, a.body_len, a.corpus_seed)?;
    let r = first_token_probe(&b.model, &corpus, probe_kind(a.kind, a.probe_layer, a.probe_neuron))?;
    let mut o = outcome(
        format!("probe: {} accuracy {:.4} (min margin {:.4})", r.probe_kind, r.accuracy, r.min_margin),
        a.model.seed,
        to_json(&r)?,
        None,
    );
    if let Some(min) = a.min_accuracy {
        if r.accuracy < min {
            o.assertion = Some(format!("accuracy {} below {min}", r.accuracy));
        }
    }
    Ok(o)
}

fn repeat_spec(r: &RepeatArgs) -> CliResult<RepeatSpec> {
    let prefix: Vec<TokenId> = (1..).filter(|&t| t != r.repeat_token).take(r.prefix_len).collect();
    Ok(RepeatSpec {
        prefix,
        repeat_token: r.repeat_token,
        ns: parse_ns(&r.ns)?,
        measure: parse_measure(&r.measure)?,
        include_bos: r.bos,
    })
}

fn converge(a: &ConvergeArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::Appendix)?;
    let spec = repeat_spec(&a.repeat)?;
    let r = convergence_curve(&b.model, &spec)?;
    let mut csv = Csv::new(&["n", "distance"]);
    for p in &r.curve {
        csv.push(vec![p.n.to_string(), p.distance.to_string()]);
    }
    let mut o = outcome(
        format!("converge: slope {:.4} over {} points, monotone {}", r.fitted_slope, r.fit_points, r.monotone.holds),
        a.model.seed,
        to_json(&r)?,
        Some(csv),
    );
    if let Some(range) = &a.expect_slope {
        let (lo, hi) = range
            .split_once(',')
            .and_then(|(l, h)| Some((l.trim().parse::<f64>().ok()?, h.trim().parse::<f64>().ok()?)))
            .ok_or_else(|| Failure::Usage(format!("bad expect_slope {range:?}")))?;
        if !r.slope_within(lo, hi) || !r.monotone.holds {
            o.assertion = Some(format!("slope {} outside [{lo}, {hi}] or curve not monotone", r.fitted_slope));
        }
    }
    Ok(o)
}

fn dispersion(a: &DispersionArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::Appendix)?;
    let cfg = b.model.config();
    if a.seq_len == 0 || a.seq_len > cfg.max_seq {
        return Err(Failure::Usage("seq_len out of range".into()));
    }
    let mut rng = Rng::stream(a.corpus_seed, "dispersion-corpus");
    let seqs: Vec<TokenSequence> = (0..a.n_sequences)
        .map(|_| {
            let ids = (0..a.seq_len).map(|_| rng.below(cfg.vocab_size) as TokenId).collect();
            TokenSequence::new(ids, cfg.bos_id)
        })
        .collect();
    let mut stats = DispersionStats::default();
    for s in &seqs {
        stats.merge(&dispersion_check(&b.model, s)?);
    }
    let mut o = outcome(
        format!("dispersion: {} rows, {} violations", stats.rows_checked, stats.violations),
        a.model.seed,
        to_json(&stats)?,
        None,
    );
    if stats.violations > 0 {
        o.assertion = Some(format!("{} dispersion violations", stats.violations));
    }
    Ok(o)
}

fn lemma(a: &LemmaArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::Appendix)?;
    let spec = repeat_spec(&a.repeat)?;
    let r = lemma_bound_check(&b.model, &spec)?;
    let mut csv = Csv::new(&["n", "distance_z", "bound", "holds"]);
    for p in &r.points {
        csv.push(vec![p.n.to_string(), p.distance_z.to_string(), p.bound.to_string(), p.holds.to_string()]);
    }
    let bad = r.points.iter().filter(|p| !p.holds).count();
    let mut o = outcome(
        format!("lemma-bound: {} points, {bad} violations", r.points.len()),
        a.model.seed,
        to_json(&r)?,
        Some(csv),
    );
    if !r.all_hold {
        o.assertion = Some(format!("{bad} lemma-bound violations"));
    }
    Ok(o)
}

fn probe_direction(m: &Model<f64>, a: &ClusterArgs) -> CliResult<Vec<f64>> {
    let cfg = m.config();
    let kind = probe_kind(a.direction, a.probe_layer, a.probe_neuron);
    if let ProbeKind::GateNeuron { layer, neuron } = kind {
        if layer >= cfg.n_layers || neuron >= cfg.d_ff {
            return Err(Failure::Usage(format!("probe {kind} outside model")));
        }
        return Ok(m.weights().layers[layer].wgate.row(neuron).to_vec());
    }
    let corpus = probe_corpus(cfg, &non_bos_tokens(cfg), 40, 15, a.corpus_seed)?;
    Ok(first_token_probe(m, &corpus, kind)?.direction)
}

fn cluster_table(m: &Model<f64>, a: &ClusterArgs) -> CliResult<(ProjectionScores, ClusterTable)> {
    let tokens = match &a.tokens {
        Some(t) => parse_ids(t, "tokens")?,
        None => non_bos_tokens(m.config()),
    };
    let dir = probe_direction(m, a)?;
    let scores = head_projection_analysis(m, &tokens, Some(&dir), a.context_len)?;
    let table = cluster_tokens(&scores, a.threshold);
    Ok((scores, table))
}

fn cluster(a: &ClusterArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::LlamaStyle)?;
    let (scores, table) = cluster_table(&b.model, a)?;
    let mut csv = Csv::new(&["token", "head", "score"]);
    for (t, row) in scores.tokens.iter().zip(&scores.scores) {
        for (h, s) in row.iter().enumerate() {
            csv.push(vec![t.to_string(), h.to_string(), s.to_string()]);
        }
    }
    let sizes: Vec<String> = table.clusters.iter().map(|(h, v)| format!("{h}:{}", v.len())).collect();
    let mut o = outcome(
        format!("cluster: heads {} ({} unassigned)", sizes.join(" "), table.unassigned.len()),
        a.model.seed,
        json!({ "table": to_json(&table)?, "scores": to_json(&scores)? }),
        Some(csv),
    );
    o.extra.push(("cluster.txt".into(), table.to_text()));
    Ok(o)
}

fn attack(a: &AttackArgs) -> CliResult<Outcome> {
    let b = build(&a.cluster.model, ArchArg::LlamaStyle)?;
    let m = &b.model;
    let (_, table) = cluster_table(m, &a.cluster)?;
    let mut rng = Rng::stream(a.attack_seed, "attack");
    let same = generate_cluster_attack(m.config(), &table, a.head, a.length, &mut rng)?;
    let other = table
        .clusters
        .iter()
        .find(|(h, v)| **h != a.head && !v.is_empty())
        .map(|(h, _)| *h)
        .ok_or_else(|| Failure::Usage("attack needs a second non-empty cluster for the mixed control".into()))?;
    let twin = generate_cluster_attack(m.config(), &table, other, a.length, &mut rng)?;
    let half = a.length / 2;
    let mixed = interleave(&same.ids[..a.length - half], &twin.ids[..half]);
    let mut ev = AttackEvaluator::new(table, a.sink_layer, a.attack_corpus_seed);
    ev.ratio_threshold = a.ratio_threshold;
    let patch: Vec<InterventionSpec> =
        a.patch_neuron.map(|n| InterventionSpec::sink_patch(a.sink_layer, n)).into_iter().collect();
    let same_r = ev.evaluate_both(m, &same.ids, &patch)?;
    let mixed_r = ev.evaluate_both(m, &mixed, &patch)?;
    let mut csv = Csv::new(&["variant", "bos", "position", "norm"]);
    for (name, pair) in [("same_cluster", &same_r), ("mixed", &mixed_r)] {
        for r in [&pair.with_bos, &pair.without_bos] {
            for (i, n) in r.norms.iter().enumerate() {
                csv.push(vec![name.into(), r.has_bos.to_string(), i.to_string(), n.to_string()]);
            }
        }
    }
    let summary = format!(
        "attack: same-cluster ratio {:.2}/{:.2} (BoS/no BoS), mixed {:.2}/{:.2}",
        same_r.with_bos.ratio, same_r.without_bos.ratio, mixed_r.with_bos.ratio, mixed_r.without_bos.ratio
    );
    let report = json!({
        "mixed_partner_head": other,
        "same_cluster": to_json(&same_r)?,
        "mixed": to_json(&mixed_r)?,
        "reference_real_model_norms": to_json(&crate::report::fixtures::reference_constants().cluster_attack_norms)?,
    });
    Ok(outcome(summary, a.cluster.model.seed, report, Some(csv)))
}

#[derive(Serialize)]
struct PatchCase {
    name: String,
    tokens: Vec<TokenId>,
    norms_unpatched: Vec<f64>,
    norms_patched: Vec<f64>,
    max_ratio_unpatched: f64,
    max_ratio_patched: f64,
    bos_ratio_patched: f64,
}

fn patch_demo(a: &PatchDemoArgs) -> CliResult<Outcome> {
    let b = build(&a.model, ArchArg::LlamaStyle)?;
    let m = &b.model;
    let cfg = m.config();
    let patch = vec![InterventionSpec::sink_patch(a.layer, a.neuron)];
    for p in &patch {
        p.validate(cfg).map_err(Error::from)?;
    }
    let base = sinklab::baseline_median(m, a.layer, &ordinary_corpus(cfg, &a.baseline)?)?;

    let cluster_args = ClusterArgs {
        model: a.model.clone(),
        tokens: None,
        direction: ProbeArg::Gate,
        probe_layer: 0,
        probe_neuron: SyntheticSpec::default().marker_neuron.min(cfg.d_ff - 1),
        corpus_seed: 3,
        context_len: crate::clusterlab::DEFAULT_CONTEXT_LEN,
        threshold: crate::clusterlab::DEFAULT_ASSIGNMENT_THRESHOLD,
    };
    let (_, table) = cluster_table(m, &cluster_args)?;
    let mut cases = vec![("repeat".to_string(), with_bos(cfg, &vec![a.repeat_token; a.n_repeats])?)];
    if !table.cluster(a.attack_head).is_empty() {
        let mut rng = Rng::stream(a.attack_seed, "attack");
        let atk = generate_cluster_attack(cfg, &table, a.attack_head, a.attack_length, &mut rng)?;
        cases.push(("cluster_attack".into(), with_bos(cfg, &atk.ids)?));
    }
    let mut out = Vec::new();
    let mut csv = Csv::new(&["case", "position", "norm_unpatched", "norm_patched"]);
    for (name, seq) in &cases {
        let before = post_layer_norms(m, seq, a.layer, &[])?;
        let after = post_layer_norms(m, seq, a.layer, &patch)?;
        for (i, (x, y)) in before.iter().zip(&after).enumerate() {
            csv.push(vec![name.clone(), i.to_string(), x.to_string(), y.to_string()]);
        }
        let top = |v: &[f64]| v.iter().skip(1).cloned().fold(0.0, f64::max) / base;
        out.push(PatchCase {
            name: name.clone(),
            tokens: seq.ids.clone(),
            max_ratio_unpatched: top(&before),
            max_ratio_patched: top(&after),
            bos_ratio_patched: after[0] / base,
            norms_unpatched: before,
            norms_patched: after,
        });
    }
    let single = with_bos(cfg, &[a.single_token])?;
    let tc = TraceConfig::default();
    let plain = m.forward(&single, &tc, &[])?;
    let patched = m.forward(&single, &tc, &patch)?;
    let identical = plain.final_states == patched.final_states;
    let summary = format!(
        "patch-demo: layer {} neuron {}; {}; single-token identical {identical}",
        a.layer,
        a.neuron,
        out.iter()
            .map(|c| format!("{} {:.2} -> {:.2}", c.name, c.max_ratio_unpatched, c.max_ratio_patched))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let report = json!({
        "sink_layer": a.layer,
        "sink_neuron": a.neuron,
        "baseline_median": base,
        "cases": to_json(&out)?,
        "single_token_bit_identical": identical,
    });
    let mut o = outcome(summary, a.model.seed, report, Some(csv));
    if !identical {
        o.assertion = Some("patched BoS + single-token output differs from unpatched".into());
    }
    Ok(o)
}

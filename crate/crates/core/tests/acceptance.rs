//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.

use std::time::Instant;

use sinkscope::clusterlab::{
    cluster_tokens, generate_cluster_attack, head_projection_analysis, interleave, AttackEvaluator, ClusterTable,
    DEFAULT_ASSIGNMENT_THRESHOLD, DEFAULT_CONTEXT_LEN,
};
use sinkscope::convergence::{
    appendix_config, build_repeat_sequence, convergence_curve, dispersion_check, last_token_distance,
    lemma_bound_check, MeasurePoint, RepeatSpec,
};
use sinkscope::interventions::InterventionSpec;
use sinkscope::model::{
    attention_head_forward, io, mlp_forward, mlp_neuron_contribution, AttentionCapture, Model, RandomInit, Session, TokenId, TokenSequence,
    TraceConfig, WeightSet,
};
use sinkscope::numkit::Rng;
use sinkscope::report::canonical_json;
use sinkscope::sinklab::{
    self, ablation_study, baseline_median, first_token_probe, post_layer_norms, probe_corpus, repeats_needed,
    round_robin_sequence, synthetic_config, synthetic_model, topk_sink_candidates, with_bos, SyntheticSpec,
    REPEAT_FRACTION_OF_BOS,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Synth {
    model: Model<f64>,
    spec: SyntheticSpec,
    median: f64,
    table: ClusterTable,
}

fn synth() -> Synth {
    let spec = SyntheticSpec::default();
    let model = synthetic_model(&spec).unwrap();
    let mut rng = Rng::stream(1, "ordinary");
    let corpus: Vec<TokenSequence> = (0..32)
        .map(|_| with_bos(model.config(), &round_robin_sequence(&spec.clusters, 50, &mut rng)).unwrap())
        .collect();
    let median = baseline_median(&model, spec.sink_layer, &corpus).unwrap();
    let dir = model.weights().layers[0].wgate.row(spec.marker_neuron).to_vec();
    let tokens = spec.clustered_tokens();
    let scores = head_projection_analysis(&model, &tokens, Some(&dir), DEFAULT_CONTEXT_LEN).unwrap();
    let table = cluster_tokens(&scores, DEFAULT_ASSIGNMENT_THRESHOLD);
    Synth { model, spec, median, table }
}

fn max_ratio(norms: &[f64], from: usize, median: f64) -> f64 {
    norms[from..].iter().cloned().fold(0.0, f64::max) / median
}

fn c1_repeat_decay() -> Outcome {
    let spec = RepeatSpec::reference_default();
    let mut passing = 0;
    let mut seed42 = (false, 0.0, 0.0);
    let mut slopes = Vec::new();
    for seed in 42..52u64 {
        let t = Instant::now();
        let m = Model::<f64>::random(appendix_config(1), seed).unwrap();
        let r = convergence_curve(&m, &spec).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let ok = r.slope_within(-1.3, -0.7) && r.monotone.holds;
        passing += usize::from(ok);
        slopes.push(format!("{:.3}", r.fitted_slope));
        if seed == 42 {
            seed42 = (ok && secs < 60.0, r.fitted_slope, secs);
        }
    }
    outcome(
        seed42.0 && passing >= 9,
        format!(
            "seed 42 slope {:.3} in {:.1}s; {passing}/10 seeds pass; slopes {}",
            seed42.1,
            seed42.2,
            slopes.join(" ")
        ),
    )
}

fn c2_lemma_bound() -> Outcome {
    let spec = RepeatSpec::reference_default();
    let m = Model::<f64>::random(appendix_config(1), 42).unwrap();
    let r = lemma_bound_check(&m, &spec).unwrap();
    let violations = r.points.iter().filter(|p| !p.holds).count();
    let control = RepeatSpec {
        prefix: vec![],
        ..spec.clone()
    };
    let worst_control = control
        .ns
        .iter()
        .map(|&n| last_token_distance(&m, &control, n).unwrap())
        .fold(0.0, f64::max);
    outcome(
        r.all_hold && violations == 0 && worst_control <= 1e-9,
        format!("{} points, {violations} violations; k=0 control max distance {worst_control:e}", r.points.len()),
    )
}

fn c3_dispersion() -> Outcome {
    let mut rng = Rng::new(2024);
    let (mut rows, mut violations) = (0usize, 0usize);
    let mut worst = f64::INFINITY;
    for i in 0..100u64 {
        let cfg = match i % 3 {
            0 => appendix_config(1),
            1 => appendix_config(2),
            _ => synthetic_config(),
        };
        let m = Model::<f64>::random(cfg.clone(), 1000 + i).unwrap();
        let len = 1 + rng.below(96);
        let ids: Vec<TokenId> = (0..len).map(|_| rng.below(cfg.vocab_size) as TokenId).collect();
        let s = dispersion_check(&m, &TokenSequence::new(ids, cfg.bos_id)).unwrap();
        rows += s.rows_checked;
        violations += s.violations;
        worst = worst.min(s.worst_margin);
    }
    outcome(violations == 0, format!("{rows} rows over 100 pairs, {violations} violations, worst margin {worst:.3e}"))
}

fn c4_decomposition_and_rows() -> Outcome {
    let mut rng = Rng::new(77);
    let mut worst_rel: f64 = 0.0;
    for i in 0..100u64 {
        let cfg = if i % 2 == 0 { appendix_config(1) } else { synthetic_config() };
        let w = WeightSet::<f64>::random(&cfg, 500 + i, RandomInit::for_config(&cfg));
        let layer = &w.layers[0];
        let x: Vec<f64> = (0..cfg.d_model).map(|_| rng.normal()).collect();
        let full = mlp_forward(&x, layer);
        let mut summed = vec![0.0; cfg.d_model];
        let mut naive = vec![0.0; cfg.d_model];
        for j in 0..cfg.d_ff {
            for (s, c) in summed.iter_mut().zip(mlp_neuron_contribution(&x, j, layer).unwrap()) {
                *s += c;
            }
            let u: f64 = layer.win.row(j).iter().zip(&x).map(|(a, b)| a * b).sum();
            let g: f64 = layer.wgate.row(j).iter().zip(&x).map(|(a, b)| a * b).sum();
            let act = u / (1.0 + (-u).exp()) * g;
            for (n, wo) in naive.iter_mut().zip(layer.wout.row(j)) {
                *n += act * wo;
            }
        }
        let scale = full.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for other in [&summed, &naive] {
            let diff = full.iter().zip(other.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst_rel = worst_rel.max(diff / scale);
        }
    }
    let mut worst_row: f64 = 0.0;
    let mut causal_ok = true;
    let mut patterns = 0;
    for i in 0..20u64 {
        let cfg = if i % 2 == 0 { appendix_config(2) } else { synthetic_config() };
        let m = Model::<f64>::random(cfg.clone(), 900 + i).unwrap();
        let n = 2 + rng.below(40);
        let ids: Vec<TokenId> = (0..n).map(|_| rng.below(cfg.vocab_size) as TokenId).collect();
        let out = m
            .forward(&TokenSequence::new(ids, cfg.bos_id), &TraceConfig::default().attention(AttentionCapture::All), &[])
            .unwrap();
        let states: Vec<Vec<f64>> = (0..n).map(|_| (0..cfg.d_model).map(|_| rng.normal()).collect()).collect();
        let positions: Vec<usize> = (0..n).collect();
        let head = m.weights().layers[0].head(0, cfg.head_dim);
        let (_, scores) = attention_head_forward(&states, &head, &positions, cfg.rope_theta_opt()).unwrap();
        for (r, row) in scores.iter().enumerate() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            causal_ok &= row[r + 1..].iter().all(|&v| v == 0.0);
        }
        for lt in out.trace.layers.iter().flatten() {
            for p in &lt.attention {
                patterns += 1;
                causal_ok &= p.rows.iter().all(|r| r.probs.len() == r.position + 1);
                for (r, row) in p.dense(n).iter().enumerate() {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    causal_ok &= row[r + 1..].iter().all(|&v| v == 0.0);
                }
            }
        }
    }
    outcome(
        worst_rel <= 1e-6 && worst_row <= 1e-6 && causal_ok,
        format!("worst relative MLP gap {worst_rel:.2e}; {patterns} patterns, worst row-sum error {worst_row:.2e}, causal zeros exact {causal_ok}"),
    )
}

fn c5_mechanism(s: &Synth) -> Outcome {
    let m = &s.model;
    let l = s.spec.sink_layer;
    let bos_only = post_layer_norms(m, &m.sequence(vec![m.config().bos_id.unwrap()]), l, &[]).unwrap();
    let threshold = repeats_needed(m, l, 4, 1000, REPEAT_FRACTION_OF_BOS).unwrap();
    let Some(needed) = threshold else {
        return outcome(false, "no repetition threshold found up to 1000".into());
    };
    let seq = with_bos(m.config(), &vec![4; 2 * needed]).unwrap();
    let e = ablation_study(m, "repeat", l, &[s.spec.sink_neuron], &seq, 1, s.median).unwrap();
    let cands = topk_sink_candidates(m, 3).unwrap();
    let top_is_engineered = cands[l].candidates.first().map(|c| c.neuron) == Some(s.spec.sink_neuron);
    let (bos_b, bos_a) = (e.bos_ratio_before.unwrap(), e.bos_ratio_after.unwrap());
    let (rep_b, rep_a) = (e.repeat_ratio_before.unwrap(), e.repeat_ratio_after.unwrap());
    let bos_alone = bos_only[0] / s.median;
    outcome(
        bos_b >= 10.0 && bos_alone >= 10.0 && rep_b >= 5.0 && bos_a < 2.0 && rep_a < 2.0 && top_is_engineered,
        format!(
            "threshold n={needed}; BoS {bos_b:.1}x -> {bos_a:.2}x, repeats (n={}) {rep_b:.1}x -> {rep_a:.2}x; top candidate engineered {top_is_engineered}",
            2 * needed
        ),
    )
}

fn attacks(s: &Synth) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let cfg = s.model.config();
    (0..10u64)
        .flat_map(|seed| {
            let mut rng = Rng::stream(seed, "acceptance-attack");
            let a = generate_cluster_attack(cfg, &s.table, 0, 50, &mut rng).unwrap().ids;
            let b = generate_cluster_attack(cfg, &s.table, 1, 50, &mut rng).unwrap().ids;
            let mixed = interleave(&a[..25], &b[..25]);
            [(a, mixed.clone()), (b, mixed)]
        })
        .collect()
}

fn c6_patch(s: &Synth) -> Outcome {
    let m = &s.model;
    let cfg = m.config();
    let l = s.spec.sink_layer;
    let patch = [InterventionSpec::sink_patch(l, s.spec.sink_neuron)];
    let needed = repeats_needed(m, l, 4, 1000, REPEAT_FRACTION_OF_BOS).unwrap().unwrap_or(500);
    let mut seqs = vec![with_bos(cfg, &vec![4; 2 * needed]).unwrap()];
    seqs.extend(attacks(s).into_iter().map(|(a, _)| with_bos(cfg, &a).unwrap()));
    let (mut triggered, mut fixed, mut worst_patched, mut min_bos): (usize, usize, f64, f64) = (0, 0, 0.0, f64::INFINITY);
    for seq in &seqs {
        let before = post_layer_norms(m, seq, l, &[]).unwrap();
        if max_ratio(&before, 1, s.median) < 5.0 {
            continue;
        }
        triggered += 1;
        let after = post_layer_norms(m, seq, l, &patch).unwrap();
        let r = max_ratio(&after, 1, s.median);
        worst_patched = worst_patched.max(r);
        fixed += usize::from(r < 2.0);
        min_bos = min_bos.min(after[0] / s.median);
    }
    let tc = TraceConfig::default().attention(AttentionCapture::All);
    let mut identical = true;
    for t in s.spec.clustered_tokens() {
        let seq = with_bos(cfg, &[t]).unwrap();
        let a = m.forward(&seq, &tc, &[]).unwrap();
        let b = m.forward(&seq, &tc, &patch).unwrap();
        identical &= a.final_states == b.final_states && a.trace == b.trace;
    }
    outcome(
        triggered == seqs.len() && fixed == triggered && identical && min_bos >= 10.0,
        format!(
            "{fixed}/{triggered} triggering sequences neutralized (worst patched {worst_patched:.2}x); BoS kept at >= {min_bos:.1}x; BoS + single token bit-identical {identical}"
        ),
    )
}

fn c7_cluster_attack(s: &Synth) -> Outcome {
    let ev = AttackEvaluator::new(s.table.clone(), s.spec.sink_layer, 11);
    let cfg = s.model.config();
    let all = attacks(s);
    let (mut same_hits, mut mixed_hits) = (0, 0);
    let mut mixed_seen = Vec::new();
    for (a, mixed) in all.iter().step_by(2) {
        same_hits += usize::from(ev.evaluate(&s.model, &with_bos(cfg, a).unwrap(), &[]).unwrap().sink_triggered);
        if !mixed_seen.contains(mixed) {
            mixed_hits += usize::from(ev.evaluate(&s.model, &with_bos(cfg, mixed).unwrap(), &[]).unwrap().sink_triggered);
            mixed_seen.push(mixed.clone());
        }
    }
    let mut other_cluster_hits = 0;
    for (b, _) in all.iter().skip(1).step_by(2) {
        other_cluster_hits += usize::from(ev.evaluate(&s.model, &with_bos(cfg, b).unwrap(), &[]).unwrap().sink_triggered);
    }
    let mut t = s.table.clone();
    t.clusters.insert(9, vec![6]);
    let single = generate_cluster_attack(cfg, &t, 9, 40, &mut Rng::new(3)).unwrap();
    let plain = build_repeat_sequence(
        cfg,
        &RepeatSpec {
            prefix: vec![],
            repeat_token: 6,
            ns: vec![40],
            measure: MeasurePoint::Final,
            include_bos: false,
        },
        40,
    )
    .unwrap();
    let partition_ok = t.cluster(0) == s.spec.clusters[0].as_slice() && t.cluster(1) == s.spec.clusters[1].as_slice();
    outcome(
        same_hits == 10 && other_cluster_hits == 10 && mixed_hits == 0 && single == plain && partition_ok,
        format!(
            "same-cluster {same_hits}/10 (head 0), {other_cluster_hits}/10 (head 1); mixed {mixed_hits}/{}; singleton == repetition {}; recovered partition {partition_ok}",
            mixed_seen.len(),
            single == plain
        ),
    )
}

fn c8_probe(s: &Synth) -> Outcome {
    let corpus = probe_corpus(s.model.config(), &s.spec.clustered_tokens(), 200, 15, 3).unwrap();
    let r = first_token_probe(&s.model, &corpus, s.spec.marker_probe()).unwrap();
    outcome(
        r.accuracy == 1.0 && r.corpus.n_sequences == 200,
        format!("{} accuracy {} over {} states, min margin {:.3}", r.probe_kind, r.accuracy, r.margins.len(), r.min_margin),
    )
}

fn c9_determinism() -> Outcome {
    let spec = SyntheticSpec::default();
    let cfg = synthetic_config();
    let app = appendix_config(2);
    let enc = |c: &sinkscope::model::ModelConfig, w: WeightSet<f64>| io::encode(&Model::new(c.clone(), w).unwrap(), "m.bin").unwrap();
    let a = enc(&cfg, sinklab::build_synthetic_sink_model(&cfg, &spec).unwrap());
    let b = enc(&cfg, sinklab::build_synthetic_sink_model(&cfg, &spec).unwrap());
    let r1 = enc(&app, WeightSet::random(&app, 8, RandomInit::for_config(&app)));
    let r2 = enc(&app, WeightSet::random(&app, 8, RandomInit::for_config(&app)));
    let weights_same = a == b && r1 == r2;
    let m = Model::<f64>::random(appendix_config(1), 42).unwrap();
    let short = RepeatSpec {
        ns: vec![16, 32, 64, 128],
        ..RepeatSpec::reference_default()
    };
    let rep = |m: &Model<f64>| canonical_json(&convergence_curve(m, &short).unwrap()).unwrap();
    let reports_same = rep(&m) == rep(&m);

    let mut rng = Rng::new(99);
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let cfg = if i % 2 == 0 { appendix_config(2) } else { synthetic_config() };
        let m = Model::<f64>::random(cfg.clone(), 3000 + i).unwrap();
        let total = 2 + rng.below(30);
        let split = 1 + rng.below(total - 1);
        let ids: Vec<TokenId> = (0..total).map(|_| rng.below(cfg.vocab_size) as TokenId).collect();
        let full = m.forward(&TokenSequence::new(ids.clone(), cfg.bos_id), &TraceConfig::none(), &[]).unwrap();
        let mut sess = Session::new(&m, vec![]).unwrap();
        let pre = sess
            .prefill(&TokenSequence::new(ids[..split].to_vec(), cfg.bos_id), &TraceConfig::none())
            .unwrap();
        let mut states = pre.final_states;
        for &t in &ids[split..] {
            states.push(sess.decode_step(t, &TraceConfig::none()).unwrap().state);
        }
        for (x, y) in full.final_states.iter().zip(&states) {
            for (a, b) in x.iter().zip(y) {
                worst = worst.max((a - b).abs() / (1.0 + a.abs()));
            }
        }
    }
    outcome(
        weights_same && reports_same && worst <= 1e-6,
        format!("weight bytes identical {weights_same}; reports identical {reports_same}; prefill+decode worst gap {worst:.2e} over 50 cases"),
    )
}

#[test]
fn acceptance() {
    let s = synth();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 repeated-token decay", Box::new(c1_repeat_decay)),
        ("2 lemma bound", Box::new(c2_lemma_bound)),
        ("3 softmax dispersion", Box::new(c3_dispersion)),
        ("4 MLP decomposition and attention rows", Box::new(c4_decomposition_and_rows)),
        ("5 sink mechanism and ablation", Box::new(|| c5_mechanism(&s))),
        ("6 sink patch", Box::new(|| c6_patch(&s))),
        ("7 cluster attack", Box::new(|| c7_cluster_attack(&s))),
        ("8 first-token probe", Box::new(|| c8_probe(&s))),
        ("9 determinism", Box::new(c9_determinism)),
    ];
    let mut failed = Vec::new();
    for (name, f) in &criteria {
        let t = Instant::now();
        let o = f();
        println!(
            "[{}] criterion {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

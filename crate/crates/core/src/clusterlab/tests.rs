use super::*;
use crate::convergence::{build_repeat_sequence, RepeatSpec};
use crate::model::{Arch, WeightSet};
use crate::sinklab::{synthetic_model, SyntheticSpec};

fn model() -> Model<f64> {
    synthetic_model(&SyntheticSpec::default()).unwrap()
}

fn direction(m: &Model<f64>) -> Vec<f64> {
    let spec = SyntheticSpec::default();
    m.weights().layers[0].wgate.row(spec.marker_neuron).to_vec()
}

fn table(m: &Model<f64>) -> ClusterTable {
    let tokens: Vec<TokenId> = (0..20).collect();
    let s = head_projection_analysis(m, &tokens, Some(&direction(m)), DEFAULT_CONTEXT_LEN).unwrap();
    cluster_tokens(&s, DEFAULT_ASSIGNMENT_THRESHOLD)
}

#[test]
fn synthetic_clusters_are_recovered() {
    let m = model();
    let tokens: Vec<TokenId> = (0..20).collect();
    let s = head_projection_analysis(&m, &tokens, Some(&direction(&m)), DEFAULT_CONTEXT_LEN).unwrap();
    for (i, row) in s.scores.iter().enumerate() {
        let own = i / 10;
        assert!(row[own] >= 0.9, "token {i}: {row:?}");
    }
    let t = cluster_tokens(&s, DEFAULT_ASSIGNMENT_THRESHOLD);
    assert_eq!(t.cluster(0), (0..10).collect::<Vec<_>>().as_slice());
    assert_eq!(t.cluster(1), (10..20).collect::<Vec<_>>().as_slice());
    assert!(t.unassigned.is_empty());
    assert_eq!(t.clusters.len(), 2);
}

#[test]
fn missing_direction_is_a_dependency_error() {
    let m = model();
    assert!(matches!(head_projection_analysis(&m, &[1], None, 4), Err(Error::Dependency(_))));
    assert!(matches!(head_projection_analysis(&m, &[1], Some(&[1.0]), 4), Err(Error::Argument(_))));
}

#[test]
fn zero_embedding_scores_zero() {
    let m = model();
    let (cfg, mut w) = m.into_parts();
    w.embed.row_mut(5).fill(0.0);
    let m = Model::new(cfg, w).unwrap();
    let dir = direction(&m);
    let s = head_projection_analysis(&m, &[5], Some(&dir), 4).unwrap();
    assert!(s.scores[0].iter().all(|&v| v == 0.0));
    assert_eq!(cluster_tokens(&s, 0.5).unassigned, vec![5]);
}

#[test]
fn threshold_gate() {
    let s = ProjectionScores {
        tokens: vec![1, 2, 3],
        context_len: 4,
        scores: vec![vec![0.2, 0.3], vec![0.4, 0.4], vec![0.1, 0.0]],
        totals: vec![1.0; 3],
    };
    let none = cluster_tokens(&s, 0.5);
    assert!(none.clusters.is_empty());
    assert_eq!(none.unassigned, vec![1, 2, 3]);
    let all = cluster_tokens(&s, 0.0);
    assert_eq!(all.cluster(0), &[2, 3]);
    assert_eq!(all.cluster(1), &[1]);
}

#[test]
fn text_forms_round_trip() {
    let t = table(&model());
    assert_eq!(ClusterTable::from_text(&t.to_text()).unwrap(), t);
    let labeled = vec![(4, vec!["Sch".to_string(), "Com".into(), "it's".into(), "a\\b".into()]), (30, vec!["</s>".into()])];
    let text = format_labeled(&labeled);
    assert!(text.starts_with("4 ['Sch', 'Com', "));
    assert_eq!(parse_labeled(&text).unwrap(), labeled);
    assert!(parse_labeled("4 ['a'").is_err());
}

#[test]
fn singleton_attack_is_plain_repetition() {
    let m = model();
    let mut t = table(&m);
    t.clusters.insert(3, vec![6]);
    let mut rng = Rng::new(1);
    let a = generate_cluster_attack(m.config(), &t, 3, 5, &mut rng).unwrap();
    assert_eq!(a.ids, vec![6; 5]);
    let spec = RepeatSpec {
        prefix: vec![],
        repeat_token: 6,
        ns: vec![5],
        measure: crate::convergence::MeasurePoint::Final,
        include_bos: false,
    };
    assert_eq!(a, build_repeat_sequence(m.config(), &spec, 5).unwrap());
}

#[test]
fn attack_errors_and_determinism() {
    let m = model();
    let t = table(&m);
    assert!(matches!(generate_cluster_attack(m.config(), &t, 3, 5, &mut Rng::new(1)), Err(Error::Argument(_))));
    assert!(generate_cluster_attack(m.config(), &t, 0, 1, &mut Rng::new(1)).is_err());
    let a = generate_cluster_attack(m.config(), &t, 0, 30, &mut Rng::new(9)).unwrap();
    let b = generate_cluster_attack(m.config(), &t, 0, 30, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.ids.iter().all(|x| t.cluster(0).contains(x)));
}

#[test]
fn same_cluster_triggers_and_mixed_does_not() {
    let m = model();
    let t = table(&m);
    let ev = AttackEvaluator::new(t.clone(), 1, 11);
    for seed in 0..10u64 {
        let mut rng = Rng::stream(seed, "attack");
        let a = generate_cluster_attack(m.config(), &t, 0, 50, &mut rng).unwrap();
        let b = generate_cluster_attack(m.config(), &t, 1, 50, &mut rng).unwrap();
        let mixed = interleave(&a.ids[..25], &b.ids[..25]);
        for attack in [&a.ids, &b.ids] {
            let pair = ev.evaluate_both(&m, attack, &[]).unwrap();
            assert!(pair.with_bos.sink_triggered, "seed {seed}: {}", pair.with_bos.ratio);
            assert!(pair.without_bos.sink_triggered);
            assert!(pair.with_bos.ratio >= 5.0);
            let patched = ev.evaluate_both(&m, attack, &[InterventionSpec::sink_patch(1, 7)]).unwrap();
            assert!(!patched.with_bos.sink_triggered, "patched ratio {}", patched.with_bos.ratio);
        }
        let pair = ev.evaluate_both(&m, &mixed, &[]).unwrap();
        assert!(!pair.with_bos.sink_triggered, "mixed seed {seed}: {}", pair.with_bos.ratio);
        assert!(!pair.without_bos.sink_triggered);
    }
}

#[test]
fn baseline_needs_two_clusters() {
    let cfg = crate::sinklab::synthetic_config();
    let m = Model::new(cfg.clone(), WeightSet::<f64>::zeros(&cfg)).unwrap();
    let mut t = table(&model());
    t.clusters.remove(&1);
    let ev = AttackEvaluator::new(t, 1, 0);
    assert!(ev.evaluate(&m, &TokenSequence::new(vec![1, 2], cfg.bos_id), &[]).is_err());
    assert_eq!(cfg.arch, Arch::LlamaStyle);
}

mod props {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tables_keep_tokens_disjoint(scores in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.5, 3), 1..12), thr in 0.0f64..1.0) {
            let s = ProjectionScores {
                tokens: (0..scores.len() as TokenId).collect(),
                context_len: 4,
                totals: vec![1.0; scores.len()],
                scores: scores.clone(),
            };
            let t = cluster_tokens(&s, thr);
            let mut seen = std::collections::BTreeSet::new();
            for (h, toks) in &t.clusters {
                for &x in toks {
                    prop_assert!(seen.insert(x));
                    prop_assert!(scores[x as usize][*h] >= thr);
                }
            }
            prop_assert_eq!(seen.len() + t.unassigned.len(), scores.len());
            prop_assert_eq!(ClusterTable::from_text(&t.to_text()).unwrap(), t);
        }

        #[test]
        fn trigger_matches_threshold(seed in 0u64..20, len in 4usize..20) {
            let m = model();
            let t = table(&m);
            let ev = AttackEvaluator::new(t.clone(), 1, seed);
            let mut rng = Rng::new(seed);
            let a = generate_cluster_attack(m.config(), &t, (seed % 2) as usize, len, &mut rng).unwrap();
            let r = ev.evaluate(&m, &a, &[]).unwrap();
            prop_assert_eq!(r.sink_triggered, r.max_non_first >= r.ratio_threshold * r.baseline_median);
        }
    }
}

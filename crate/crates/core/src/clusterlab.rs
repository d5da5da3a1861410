//! Cluster attacks: which layer-0 head marks which tokens, and sequences
//! that trigger sinks by drawing from one head's cluster.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::InterventionSpec;
use crate::model::{attention_head_forward, Model, ModelConfig, TokenId, TokenSequence};
use crate::numkit::{dot, Rng, Scalar};
use crate::sinklab::{baseline_median, post_layer_norms, round_robin_sequence};

pub const DEFAULT_ASSIGNMENT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RATIO_THRESHOLD: f64 = 5.0;
pub const DEFAULT_CONTEXT_LEN: usize = 8;
pub const BASELINE_CORPUS_SIZE: usize = 32;
const TOTAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionScores {
    pub tokens: Vec<TokenId>,
    /// Length of the same-token context each token is measured in.
    pub context_len: usize,
    /// `scores[i][h]`: head `h`'s share of the probe-direction component for `tokens[i]`.
    pub scores: Vec<Vec<f64>>,
    /// Component of the full attention output along the probe direction.
    pub totals: Vec<f64>,
}

/// Per-head share of the layer-0 attention output along `probe_direction`,
/// for each token attending over a context made only of itself.
pub fn head_projection_analysis<T: Scalar>(
    model: &Model<T>,
    tokens: &[TokenId],
    probe_direction: Option<&[f64]>,
    context_len: usize,
) -> Result<ProjectionScores> {
    let dir = probe_direction
        .ok_or_else(|| Error::Dependency("head projection needs a first-token probe direction".into()))?;
    let cfg = model.config();
    if dir.len() != cfg.d_model {
        return Err(Error::Argument(format!(
            "probe direction has {} dims, model has {}",
            dir.len(),
            cfg.d_model
        )));
    }
    if context_len == 0 || context_len > cfg.max_seq {
        return Err(Error::Argument(format!("context_len {context_len} out of range")));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Argument(format!("token {t} outside vocabulary")));
    }
    let lw = &model.weights().layers[0];
    let hd = cfg.head_dim;
    let positions: Vec<usize> = (0..context_len).collect();
    let rows = crate::par::map(tokens, |&t| -> Result<(Vec<f64>, f64)> {
        let x = model.attention_input(0, model.embedding(t));
        let states = vec![x; context_len];
        let mut comps = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (outs, _) = attention_head_forward(&states, &lw.head(h, hd), &positions, cfg.rope_theta_opt())?;
            let last = &outs[context_len - 1];
            let mut c = 0.0;
            for (r, d) in dir.iter().enumerate() {
                let proj_row = &lw.wproj.row(r)[h * hd..(h + 1) * hd];
                c += d * dot(proj_row, last).to_f64_lossy();
            }
            comps.push(c);
        }
        let total: f64 = comps.iter().sum();
        let scores = if total.abs() < TOTAL_FLOOR {
            vec![0.0; cfg.n_heads]
        } else {
            comps.iter().map(|c| c / total).collect()
        };
        Ok((scores, total))
    });
    let (mut scores, mut totals) = (Vec::new(), Vec::new());
    for r in rows {
        let (s, t) = r?;
        scores.push(s);
        totals.push(t);
    }
    Ok(ProjectionScores {
        tokens: tokens.to_vec(),
        context_len,
        scores,
        totals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub clusters: BTreeMap<usize, Vec<TokenId>>,
    pub unassigned: Vec<TokenId>,
    pub assignment_threshold: f64,
}

/// Argmax-head assignment, lower head on ties, gated by `threshold`.
pub fn cluster_tokens(scores: &ProjectionScores, threshold: f64) -> ClusterTable {
    let mut clusters: BTreeMap<usize, Vec<TokenId>> = BTreeMap::new();
    let mut unassigned = Vec::new();
    for (&t, row) in scores.tokens.iter().zip(&scores.scores) {
        let best = row
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |acc, (h, &s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((h, s)),
            });
        match best {
            Some((h, s)) if s >= threshold => clusters.entry(h).or_default().push(t),
            _ => unassigned.push(t),
        }
    }
    ClusterTable {
        clusters,
        unassigned,
        assignment_threshold: threshold,
    }
}

impl ClusterTable {
    pub fn cluster(&self, head: usize) -> &[TokenId] {
        self.clusters.get(&head).map_or(&[], Vec::as_slice)
    }

    /// `head [t, t, …]` lines, plus `unassigned [...]` and a threshold comment.
    pub fn to_text(&self) -> String {
        let mut s = format!("# assignment_threshold {}\n", self.assignment_threshold);
        let list = |v: &[TokenId]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ");
        for (h, toks) in &self.clusters {
            let _ = writeln!(s, "{h} [{}]", list(toks));
        }
        if !self.unassigned.is_empty() {
            let _ = writeln!(s, "unassigned [{}]", list(&self.unassigned));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut table = ClusterTable {
            clusters: BTreeMap::new(),
            unassigned: Vec::new(),
            assignment_threshold: DEFAULT_ASSIGNMENT_THRESHOLD,
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(v) = line.strip_prefix("# assignment_threshold ") {
                table.assignment_threshold = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad threshold line {line:?}")))?;
                continue;
            }
            let (key, items) = split_list_line(line)?;
            let ids = items
                .iter()
                .map(|s| s.parse::<TokenId>().map_err(|_| Error::Argument(format!("bad token id {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if key == "unassigned" {
                table.unassigned = ids;
            } else {
                let h = key
                    .parse()
                    .map_err(|_| Error::Argument(format!("bad head id {key:?}")))?;
                table.clusters.insert(h, ids);
            }
        }
        Ok(table)
    }
}

fn split_list_line(line: &str) -> Result<(&str, Vec<&str>)> {
    let bad = || Error::Argument(format!("bad cluster line {line:?}"));
    let (key, rest) = line.split_once(' ').ok_or_else(bad)?;
    let inner = rest.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
    let items = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner.split(',').map(str::trim).collect()
    };
    Ok((key, items))
}

/// Head-keyed token strings in the quoted list form `30 ['</s>', 'a']`.
pub fn format_labeled(clusters: &[(usize, Vec<String>)]) -> String {
    let mut s = String::new();
    for (h, toks) in clusters {
        let items: Vec<String> = toks
            .iter()
            .map(|t| format!("'{}'", t.replace('\\', "\\\\").replace('\'', "\\'")))
            .collect();
        let _ = writeln!(s, "{h} [{}]", items.join(", "));
    }
    s
}

pub fn parse_labeled(text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let bad = || Error::Argument(format!("bad labeled line {line:?}"));
        let (key, rest) = line.split_once(' ').ok_or_else(bad)?;
        let head = key.parse().map_err(|_| bad())?;
        let mut chars = rest.trim().chars().peekable();
        if chars.next() != Some('[') {
            return Err(bad());
        }
        let mut toks = Vec::new();
        loop {
            match chars.next().ok_or_else(bad)? {
                ']' => break,
                ' ' | ',' => {}
                '\'' => {
                    let mut tok = String::new();
                    loop {
                        match chars.next().ok_or_else(bad)? {
                            '\\' => tok.push(chars.next().ok_or_else(bad)?),
                            '\'' => break,
                            c => tok.push(c),
                        }
                    }
                    toks.push(tok);
                }
                _ => return Err(bad()),
            }
        }
        out.push((head, toks));
    }
    Ok(out)
}

/// `length` seeded draws, with replacement, from one head's cluster.
pub fn generate_cluster_attack(
    cfg: &ModelConfig,
    table: &ClusterTable,
    head: usize,
    length: usize,
    rng: &mut Rng,
) -> Result<TokenSequence> {
    let cluster = table.cluster(head);
    if cluster.is_empty() {
        return Err(Error::Argument(format!("cluster of head {head} is empty")));
    }
    if length < 2 {
        return Err(Error::Argument("attack length must be >= 2".into()));
    }
    let ids = (0..length).map(|_| cluster[rng.below(cluster.len())]).collect();
    Ok(TokenSequence::new(ids, cfg.bos_id))
}

/// Alternates `a[0], b[0], a[1], b[1], …`; the longer tail follows.
pub fn interleave(a: &[TokenId], b: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.len().max(b.len()) {
        out.extend(a.get(i));
        out.extend(b.get(i));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub sequence: Vec<TokenId>,
    pub has_bos: bool,
    pub sink_layer: usize,
    /// Residual norms after the sink layer, per position.
    pub norms: Vec<f64>,
    /// Largest norm over positions ≥ 1.
    pub max_non_first: f64,
    pub baseline_median: f64,
    pub ratio: f64,
    pub ratio_threshold: f64,
    pub sink_triggered: bool,
    pub corpus_seed: u64,
    pub corpus_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEvaluator {
    pub table: ClusterTable,
    pub sink_layer: usize,
    pub corpus_seed: u64,
    pub ratio_threshold: f64,
}

impl AttackEvaluator {
    pub fn new(table: ClusterTable, sink_layer: usize, corpus_seed: u64) -> Self {
        Self {
            table,
            sink_layer,
            corpus_seed,
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
        }
    }

    /// Seeded round-robin sequences over every non-empty cluster.
    pub fn baseline_corpus(&self, cfg: &ModelConfig, length: usize, bos: bool) -> Result<Vec<TokenSequence>> {
        let clusters: Vec<Vec<TokenId>> = self.table.clusters.values().filter(|c| !c.is_empty()).cloned().collect();
        if clusters.len() < 2 {
            return Err(Error::Argument("mixed baseline needs >= 2 non-empty clusters".into()));
        }
        let mut rng = Rng::stream(self.corpus_seed, "attack-baseline");
        (0..BASELINE_CORPUS_SIZE)
            .map(|_| {
                let body = round_robin_sequence(&clusters, length, &mut rng);
                if bos {
                    crate::sinklab::with_bos(cfg, &body)
                } else {
                    Ok(TokenSequence::new(body, cfg.bos_id))
                }
            })
            .collect()
    }

    pub fn evaluate<T: Scalar>(
        &self,
        model: &Model<T>,
        sequence: &TokenSequence,
        interventions: &[InterventionSpec],
    ) -> Result<AttackResult> {
        let cfg = model.config();
        let body_len = sequence.len() - usize::from(sequence.has_bos);
        let corpus = self.baseline_corpus(cfg, body_len, sequence.has_bos)?;
        let base = if interventions.is_empty() {
            baseline_median(model, self.sink_layer, &corpus)?
        } else {
            let runs = crate::par::map(&corpus, |s| post_layer_norms(model, s, self.sink_layer, interventions));
            let mut all = Vec::new();
            for r in runs {
                all.extend(r?.into_iter().skip(1));
            }
            crate::sinklab::median(&all)
        };
        let norms = post_layer_norms(model, sequence, self.sink_layer, interventions)?;
        let max_non_first = norms.iter().skip(1).cloned().fold(0.0, f64::max);
        let ratio = max_non_first / base;
        Ok(AttackResult {
            sequence: sequence.ids.clone(),
            has_bos: sequence.has_bos,
            sink_layer: self.sink_layer,
            norms,
            max_non_first,
            baseline_median: base,
            ratio,
            ratio_threshold: self.ratio_threshold,
            sink_triggered: max_non_first >= self.ratio_threshold * base,
            corpus_seed: self.corpus_seed,
            corpus_size: corpus.len(),
        })
    }

    /// Evaluates `body` as given and with a BoS prefix.
    pub fn evaluate_both<T: Scalar>(
        &self,
        model: &Model<T>,
        body: &[TokenId],
        interventions: &[InterventionSpec],
    ) -> Result<AttackPair> {
        let cfg = model.config();
        Ok(AttackPair {
            with_bos: self.evaluate(model, &crate::sinklab::with_bos(cfg, body)?, interventions)?,
            without_bos: self.evaluate(model, &TokenSequence::new(body.to_vec(), cfg.bos_id), interventions)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPair {
    pub with_bos: AttackResult,
    pub without_bos: AttackResult,
}

#[cfg(test)]
mod tests;

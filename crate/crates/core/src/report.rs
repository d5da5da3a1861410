//! Report envelopes, canonical JSON, CSV export and bundled data fixtures.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clusterlab::ClusterTable;
use crate::error::Result;
use crate::model::TokenId;
use crate::sinklab::SinkReport;

pub const SCHEMA_VERSION: &str = "sinkscope/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<R> {
    pub schema: String,
    pub command: String,
    pub seed: u64,
    /// The exact merged config that produced the report.
    pub config: serde_json::Value,
    pub report: R,
}

impl<R: Serialize> Envelope<R> {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, report: R) -> Self {
        Self {
            schema: SCHEMA_VERSION.into(),
            command: command.into(),
            seed,
            config,
            report,
        }
    }
}

/// Pretty JSON with object keys sorted, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let line = |cells: &[String]| {
            cells
                .iter()
                .map(|c| {
                    if c.contains([',', '"', '\n']) {
                        format!("\"{}\"", c.replace('"', "\"\""))
                    } else {
                        c.clone()
                    }
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = line(&self.header);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&line(r));
            s.push('\n');
        }
        s
    }
}

/// Writes `<command>.json` and, when given, `<command>.csv` into `out_dir`.
pub fn emit_report<R: Serialize>(envelope: &Envelope<R>, csv: Option<&Csv>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let json_path = out_dir.join(format!("{}.json", envelope.command));
    fs::write(&json_path, canonical_json(envelope)?)?;
    let mut paths = vec![json_path];
    if let Some(csv) = csv {
        let p = out_dir.join(format!("{}.csv", envelope.command));
        fs::write(&p, csv.render())?;
        paths.push(p);
    }
    Ok(paths)
}

pub mod fixtures {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SinkFinding {
        pub model: String,
        pub repeats: usize,
        pub sink_layer: usize,
        pub sink_neurons: Vec<usize>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SinkFindings {
        pub rows: Vec<SinkFinding>,
    }

    impl SinkFindings {
        pub fn reports(&self) -> Vec<SinkReport> {
            self.rows
                .iter()
                .map(|r| SinkReport::finding(&r.model, r.repeats, r.sink_layer, r.sink_neurons.clone()))
                .collect()
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LabeledToken {
        pub id: TokenId,
        pub text: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LabeledCluster {
        pub head: usize,
        pub tokens: Vec<LabeledToken>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct HeadClusters {
        pub note: String,
        pub clusters: Vec<LabeledCluster>,
    }

    impl HeadClusters {
        pub fn table(&self) -> ClusterTable {
            ClusterTable {
                clusters: self
                    .clusters
                    .iter()
                    .map(|c| (c.head, c.tokens.iter().map(|t| t.id).collect()))
                    .collect(),
                unassigned: Vec::new(),
                assignment_threshold: crate::clusterlab::DEFAULT_ASSIGNMENT_THRESHOLD,
            }
        }

        pub fn labeled(&self) -> Vec<(usize, Vec<String>)> {
            self.clusters
                .iter()
                .map(|c| (c.head, c.tokens.iter().map(|t| t.text.clone()).collect()))
                .collect()
        }

        pub fn id_of(&self, head: usize, text: &str) -> Option<TokenId> {
            self.clusters
                .iter()
                .find(|c| c.head == head)?
                .tokens
                .iter()
                .find(|t| t.text == text)
                .map(|t| t.id)
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct LayerNeuron {
        pub layer: usize,
        pub neuron: usize,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct PatchDefaults {
        pub sink_layer: usize,
        pub sink_neuron: usize,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ClusterAttackNorms {
        pub input: Vec<String>,
        pub head: usize,
        pub norms: Vec<f64>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct RepeatPhrase {
        pub phrase: Vec<String>,
        pub repeats: usize,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ConvergenceInput {
        pub bos: bool,
        pub prefix: Vec<String>,
        pub repeat_tokens: Vec<String>,
        pub repeats: usize,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ReferenceConstants {
        pub patch_defaults: PatchDefaults,
        pub gate_probe: LayerNeuron,
        /// Real-model norms, kept as documentation only.
        pub cluster_attack_norms: Vec<ClusterAttackNorms>,
        pub ablation_repeat_input: RepeatPhrase,
        pub convergence_input: ConvergenceInput,
    }

    pub const SINK_FINDINGS_JSON: &str = include_str!("../fixtures/sink_findings.json");
    pub const HEAD_CLUSTERS_JSON: &str = include_str!("../fixtures/head_clusters.json");
    pub const REFERENCE_CONSTANTS_JSON: &str = include_str!("../fixtures/reference_constants.json");

    pub fn sink_findings() -> SinkFindings {
        serde_json::from_str(SINK_FINDINGS_JSON).expect("bundled fixture")
    }

    pub fn head_clusters() -> HeadClusters {
        serde_json::from_str(HEAD_CLUSTERS_JSON).expect("bundled fixture")
    }

    pub fn reference_constants() -> ReferenceConstants {
        serde_json::from_str(REFERENCE_CONSTANTS_JSON).expect("bundled fixture")
    }
}

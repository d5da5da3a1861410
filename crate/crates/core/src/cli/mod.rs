//! Command-line front end.
//!
//! Parameters come from command defaults, then an optional `--config` JSON
//! file, then explicitly given flags. The merged result is embedded in every
//! report.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Error;
use crate::model::TokenId;
use crate::report::Csv;

mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sinkscope", version, about = "Attention-sink and repeated-token lab")]
pub struct Cli {
    /// Output directory for reports.
    #[arg(long, global = true, env = "SINKSCOPE_OUT", default_value = "sinkscope-out")]
    pub out: PathBuf,
    /// JSON file with command parameters; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write a weight manifest and blob.
    GenModel(GenModelArgs),
    /// Rank sink-neuron candidates and ablate the chosen ones.
    DetectSinks(DetectSinksArgs),
    /// Per-layer residual and MLP output norms for one sequence.
    NormProfile(NormProfileArgs),
    /// Zero chosen neurons and compare norms before and after.
    Ablate(AblateArgs),
    /// First-token vs non-first separability.
    Probe(ProbeArgs),
    /// Distance to the repeated-token limit over growing n.
    Converge(ConvergeArgs),
    /// Check every attention row against exp(delta)/n.
    Dispersion(DispersionArgs),
    /// Check the single-layer distance bound at every n.
    LemmaBound(LemmaArgs),
    /// Assign tokens to the layer-0 head that marks them.
    Cluster(ClusterArgs),
    /// Build a cluster attack and test whether it triggers the sink.
    Attack(AttackArgs),
    /// Compare sink norms with and without the sink patch.
    PatchDemo(PatchDemoArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenModel(_) => "gen-model",
            Self::DetectSinks(_) => "detect-sinks",
            Self::NormProfile(_) => "norm-profile",
            Self::Ablate(_) => "ablate",
            Self::Probe(_) => "probe",
            Self::Converge(_) => "converge",
            Self::Dispersion(_) => "dispersion",
            Self::LemmaBound(_) => "lemma-bound",
            Self::Cluster(_) => "cluster",
            Self::Attack(_) => "attack",
            Self::PatchDemo(_) => "patch-demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synth {
    Random,
    SyntheticSink,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchArg {
    Appendix,
    LlamaStyle,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Weight manifest to load instead of synthesizing.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Defaults to synthetic-sink for llama-style and random for appendix.
    #[arg(long, value_enum)]
    pub synth: Option<Synth>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenModelArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Manifest path; defaults to `<out>/model.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DetectSinksArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Neurons within this fraction of the layer's top norm are kept.
    #[arg(long, default_value_t = 0.5)]
    pub keep_fraction: f64,
    #[arg(long, default_value_t = 4)]
    pub repeat_token: TokenId,
    #[arg(long, default_value_t = 1000)]
    pub max_repeats: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[arg(long, default_value_t = 16)]
    pub baseline_sequences: usize,
    #[arg(long, default_value_t = 32)]
    pub baseline_len: usize,
    #[arg(long, default_value_t = 1)]
    pub baseline_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SequenceArgs {
    /// Comma-separated ids; overrides the repeat sequence.
    #[arg(long)]
    pub tokens: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub repeat_token: TokenId,
    #[arg(long, default_value_t = 200)]
    pub n_repeats: usize,
    /// Comma-separated ids placed before the repeats.
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub bos: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct NormProfileArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sequence: SequenceArgs,
    /// `all` or comma-separated layer ids.
    #[arg(long, default_value = "all")]
    pub layer_filter: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sequence: SequenceArgs,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, default_value = "7")]
    pub neurons: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeArg {
    Gate,
    Linear,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "gate")]
    pub kind: ProbeArg,
    #[arg(long, default_value_t = 0)]
    pub probe_layer: usize,
    #[arg(long, default_value_t = 3)]
    pub probe_neuron: usize,
    #[arg(long, default_value_t = 200)]
    pub n_sequences: usize,
    #[arg(long, default_value_t = 15)]
    pub body_len: usize,
    #[arg(long, default_value_t = 3)]
    pub corpus_seed: u64,
    /// Exit 1 when accuracy falls below this.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RepeatArgs {
    #[arg(long, default_value_t = 2)]
    pub prefix_len: usize,
    #[arg(long, default_value_t = 3)]
    pub repeat_token: TokenId,
    /// `a..b` for doubling steps, or a comma-separated list.
    #[arg(long, default_value = "16..4096")]
    pub ns: String,
    /// `final`, `attn_out:L` or `block_out:L`.
    #[arg(long, default_value = "final")]
    pub measure: String,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub bos: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ConvergeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub repeat: RepeatArgs,
    /// `lo,hi`: exit 1 unless the slope lies inside and the curve is monotone.
    #[arg(long, allow_hyphen_values = true)]
    pub expect_slope: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DispersionArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    pub n_sequences: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1)]
    pub corpus_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LemmaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub repeat: RepeatArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ClusterArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Comma-separated ids; defaults to every non-BoS token.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Where the probe direction comes from.
    #[arg(long, value_enum, default_value = "gate")]
    pub direction: ProbeArg,
    #[arg(long, default_value_t = 0)]
    pub probe_layer: usize,
    #[arg(long, default_value_t = 3)]
    pub probe_neuron: usize,
    #[arg(long, default_value_t = 3)]
    pub corpus_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub context_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub cluster: ClusterArgs,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long, default_value_t = 50)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub attack_seed: u64,
    #[arg(long, default_value_t = 11)]
    pub attack_corpus_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub sink_layer: usize,
    #[arg(long, default_value_t = 5.0)]
    pub ratio_threshold: f64,
    /// Apply the sink patch to this neuron of the sink layer.
    #[arg(long)]
    pub patch_neuron: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PatchDemoArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, default_value_t = 7890)]
    pub neuron: usize,
    #[arg(long, default_value_t = 4)]
    pub repeat_token: TokenId,
    #[arg(long, default_value_t = 200)]
    pub n_repeats: usize,
    #[arg(long, default_value_t = 5)]
    pub single_token: TokenId,
    #[arg(long, default_value_t = 0)]
    pub attack_head: usize,
    #[arg(long, default_value_t = 50)]
    pub attack_length: usize,
    #[arg(long, default_value_t = 0)]
    pub attack_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub baseline: BaselineArgs,
}

/// How a command ended.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Assertion(String),
    Output(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Assertion(_) | Self::Output(_) => EXIT_ASSERTION,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<crate::model::ModelError> for Failure {
    fn from(e: crate::model::ModelError) -> Self {
        Self::Usage(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Result of one command before anything is written.
pub struct Outcome {
    pub summary: String,
    pub seed: u64,
    pub report: Value,
    pub csv: Option<Csv>,
    /// Extra files as (name inside the out dir, contents).
    pub extra: Vec<(String, String)>,
    /// Scientific check that failed, if any.
    pub assertion: Option<String>,
}

fn overlay(base: &mut Value, top: &Value) {
    if let (Value::Object(b), Value::Object(t)) = (base, top) {
        for (k, v) in t {
            b.insert(k.clone(), v.clone());
        }
    }
}

fn explicit_flags(sub: &ArgMatches, parsed: &Value) -> Value {
    let mut out = serde_json::Map::new();
    if let Value::Object(m) = parsed {
        for (k, v) in m {
            let from_cli = sub
                .try_get_raw(k)
                .ok()
                .flatten()
                .is_some()
                && matches!(sub.value_source(k), Some(ValueSource::CommandLine | ValueSource::EnvVariable));
            if from_cli {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    Value::Object(out)
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve(cli: &Cli, sub: &ArgMatches) -> CliResult<Command> {
    let name = cli.command.name();
    let defaults = Cli::try_parse_from(["sinkscope", name]).map_err(|e| Failure::Usage(e.to_string()))?;
    let to_value = |c: &Command| serde_json::to_value(c).map_err(|e| Failure::Usage(e.to_string()));
    let mut merged = to_value(&defaults.command)?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(fields) = &file else {
            return Err(Failure::Usage("config file must hold a JSON object".into()));
        };
        if let Some(c) = fields.get("command") {
            if c != name {
                return Err(Failure::Usage(format!("config is for command {c}, not {name}")));
            }
        }
        let known = merged.as_object().expect("object").clone();
        if let Some(k) = fields.keys().find(|k| !known.contains_key(*k)) {
            return Err(Failure::Usage(format!("unknown config field {k:?} for {name}")));
        }
        overlay(&mut merged, &file);
    }
    overlay(&mut merged, &explicit_flags(sub, &to_value(&cli.command)?));
    serde_json::from_value(merged).map_err(|e| Failure::Usage(format!("invalid config: {e}")))
}

fn write_outputs(out: &Path, command: &Command, outcome: &Outcome) -> CliResult<()> {
    let config = serde_json::to_value(command).map_err(|e| Failure::Output(e.to_string()))?;
    let envelope = crate::report::Envelope::new(command.name(), outcome.seed, config, &outcome.report);
    crate::report::emit_report(&envelope, outcome.csv.as_ref(), out)
        .map_err(|e| Failure::Output(format!("writing reports to {}: {e}", out.display())))?;
    for (name, body) in &outcome.extra {
        std::fs::write(out.join(name), body).map_err(|e| Failure::Output(format!("writing {name}: {e}")))?;
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = Cli::from_arg_matches(&matches)
        .map_err(|e| Failure::Usage(e.to_string()))
        .and_then(|cli| {
            let (_, sub) = matches.subcommand().expect("subcommand is required");
            let command = resolve(&cli, sub)?;
            let outcome = commands::execute(&command, &cli.out)?;
            write_outputs(&cli.out, &command, &outcome)?;
            Ok(outcome)
        });
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            match outcome.assertion {
                Some(msg) => {
                    eprintln!("assertion failed: {msg}");
                    EXIT_ASSERTION
                }
                None => EXIT_OK,
            }
        }
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) => format!("error: {m}"),
                Failure::Assertion(m) => format!("assertion failed: {m}"),
                Failure::Output(m) => format!("output error: {m}"),
            };
            eprintln!("{msg}");
            f.code()
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `nxl` command line.
//!
//! Subcommands: `gen-model`, `gen-data`, `attribute`, `faithfulness`,
//! `align`. Every output file records the tool version, a hash of the
//! resolved run settings (including input file hashes) and the seed, and is
//! byte-identical across reruns with the same flags. `NXL_THREADS` caps the
//! worker pool.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 numeric, 5 fixture.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, GradientObjective, IgBaseline, Method, MethodParams, RankOrder, DEFAULT_IG_STEPS};
use crate::error::{NxlError, Result};
use crate::evaluation::report::{alignment_csv, faithfulness_csv, to_json};
use crate::evaluation::{
    average_precision, default_ratios, dot_alignment, faithfulness, per_layer_alignment, AlignmentReport, AlignmentRow,
    AlignmentVariant, EvidenceVector, FaithfulnessReport, LabeledDataset, MethodConfig, PerturbationMode,
    PerturbationSpec,
};
use crate::fixtures::{planted_model, synthetic_dataset, PlantedOptions, SyntheticSpec, MASK_TOKEN};
use crate::model::{HeadSelection, InitOptions, ModelConfig, ModelSnapshot, Provenance, Task};

#[derive(Debug, Parser)]
#[command(name = "nxl", version, about = "Token attribution and faithfulness evaluation for a micro-transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random (or planted-token trained) model file.
    GenModel(GenModelArgs),
    /// Write a synthetic JSONL dataset with evidence annotations.
    GenData(GenDataArgs),
    /// Per-token attributions for every instance of a dataset.
    Attribute(AttributeArgs),
    /// AOPC and accuracy under perturbation, per method and ratio.
    Faithfulness(FaithfulnessArgs),
    /// Per-layer evidence alignment (dot product, average precision).
    Align(AlignArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelShape {
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 32)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
}

impl ModelShape {
    fn config(&self) -> Result<ModelConfig> {
        ModelConfig::new(
            self.layers,
            self.heads,
            self.d_model,
            self.d_ff,
            self.vocab,
            self.max_len,
            self.classes,
        )
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenModelArgs {
    #[command(flatten)]
    pub shape: ModelShape,
    /// Train on the planted-token task until the label is fitted.
    #[arg(long)]
    pub planted: bool,
    /// Head to attach (and train, with --planted); all heads if omitted.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long, default_value_t = InitOptions::default().std)]
    pub init_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Take vocabulary, class count and lengths from this model file.
    #[arg(long)]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ModelShape,
    #[arg(long, default_value_t = Task::Classification)]
    pub task: Task,
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MethodArgs {
    /// Comma-separated methods, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "normxlogit")]
    pub method: Vec<String>,
    /// LogAt layer (0..=L); defaults to the last layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Explained class / vocabulary id; defaults to the prediction.
    #[arg(long)]
    pub target_label: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_IG_STEPS)]
    pub ig_steps: usize,
    /// `token-zero` or `all-zero`.
    #[arg(long, default_value = "token-zero")]
    pub ig_baseline: IgBaseline,
    /// Scalar the gradient methods differentiate: `logit` or `probability`.
    #[arg(long, default_value = "logit")]
    pub objective: GradientObjective,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl MethodArgs {
    fn methods(&self) -> Result<Vec<Method>> {
        if self.method.iter().any(|m| m == "all") {
            return Ok(Method::ALL.to_vec());
        }
        let methods = self.method.iter().map(|m| m.parse()).collect::<Result<Vec<Method>>>()?;
        if methods.is_empty() {
            return Err(NxlError::Config("no method requested".into()));
        }
        Ok(methods)
    }

    fn configs(&self, rank_order: RankOrder) -> Result<Vec<MethodConfig>> {
        if self.ig_steps == 0 {
            return Err(NxlError::Config("--ig-steps must be at least 1".into()));
        }
        let params = MethodParams {
            ig_steps: self.ig_steps,
            ig_baseline: self.ig_baseline,
            objective: self.objective,
        };
        Ok(self
            .methods()?
            .into_iter()
            .map(|method| MethodConfig {
                params,
                layer: self.layer,
                target_label: self.target_label,
                rank_order,
                ..MethodConfig::new(method, self.seed)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Inputs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub data: PathBuf,
    /// Task override; inferred from the dataset records otherwise.
    #[arg(long)]
    pub task: Option<Task>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// JSONL output.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FaithfulnessArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Percentages of eligible tokens to perturb.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// `mask` or `delete`.
    #[arg(long, default_value = "mask")]
    pub perturbation: PerturbationMode,
    #[arg(long, default_value_t = MASK_TOKEN)]
    pub mask_token: usize,
    /// Rank by absolute score instead of signed score.
    #[arg(long)]
    pub rank_abs: bool,
    /// JSON report.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// CSV curve data.
    #[arg(long)]
    #[serde(skip)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub data: Option<PathBuf>,
    /// Comma-separated variants: logat_target, logat_foil, logat_token_<id>,
    /// normxlogit, l2norm.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<AlignmentVariant>>,
    /// Debug: score vector to align directly, bypassing model and data.
    #[arg(long, value_delimiter = ',', requires = "debug_evidence")]
    pub debug_scores: Option<Vec<f64>>,
    /// Debug: 0/1 evidence vector paired with --debug-scores.
    #[arg(long, value_delimiter = ',', requires = "debug_scores")]
    pub debug_evidence: Option<Vec<u8>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub csv: Option<PathBuf>,
}

/// One line of `attribute` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub method: Method,
    pub params: MethodParams,
    pub seed: u64,
    pub sequence_id: String,
    pub target_label: Option<usize>,
    pub layer: Option<usize>,
    pub scores: Vec<f64>,
    pub signed: bool,
}

/// Written in place of a record when a method fails on an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionFailure {
    pub method: Method,
    pub sequence_id: String,
    pub error: String,
}

/// JSON file written by `faithfulness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRun {
    pub provenance: Provenance,
    pub reports: Vec<FaithfulnessReport>,
}

#[derive(Serialize)]
struct MetaLine<'a> {
    meta: &'a Provenance,
}

#[derive(Serialize)]
struct Settings<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    inputs: Vec<String>,
}

fn provenance<A: Serialize>(command: &str, args: &A, inputs: Vec<String>, seed: u64) -> Provenance {
    Provenance::current(
        crate::hash_json(&Settings {
            command,
            args,
            inputs,
        }),
        seed,
    )
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| NxlError::io(path, e))
}

/// Loads model and dataset. `strict` checks the dataset against the model
/// up front; otherwise mismatches surface per instance.
fn load_inputs(inputs: &Inputs, strict: bool) -> Result<(ModelSnapshot, LabeledDataset)> {
    let model = ModelSnapshot::load(&inputs.model)?;
    let data = LabeledDataset::load(&inputs.data, inputs.task)?;
    if strict {
        data.validate_for(&model)?;
    }
    Ok((model, data))
}

fn gen_model(args: &GenModelArgs) -> Result<()> {
    let config = args.shape.config()?;
    let mut snapshot = if args.planted {
        let task = args.task.unwrap_or(Task::Classification);
        let options = PlantedOptions {
            init_std: args.init_std,
            ..PlantedOptions::default()
        };
        let planted = planted_model(config, task, args.seed, &options)?;
        eprintln!(
            "planted fixture: fit {:.4} after {} steps",
            planted.fit, planted.summary.steps
        );
        planted.snapshot
    } else {
        let heads = args.task.map_or(HeadSelection::all(), HeadSelection::only);
        let init = InitOptions {
            std: args.init_std,
            ..InitOptions::default()
        };
        ModelSnapshot::random(config, heads, args.seed, init)?
    };
    snapshot.provenance = Some(provenance("gen-model", args, vec![], args.seed));
    snapshot.save(&args.out)
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let (config, inputs) = match &args.model {
        Some(path) => {
            let model = ModelSnapshot::load(path)?;
            let hash = model.content_hash();
            (model.config, vec![hash])
        }
        None => (args.shape.config()?, vec![]),
    };
    let spec = SyntheticSpec::for_config(args.task, args.instances, &config);
    let data = synthetic_dataset(&spec, args.seed)?;
    let p = provenance("gen-data", args, inputs, args.seed);
    data.save(&args.out, Some(&p))
}

fn run_attribute(args: &AttributeArgs) -> Result<()> {
    let (model, data) = load_inputs(&args.inputs, false)?;
    let configs = args.method.configs(RankOrder::default())?;
    let p = provenance(
        "attribute",
        args,
        vec![model.content_hash(), data.content_hash()],
        args.method.seed,
    );
    let lines: Vec<(Vec<u8>, Vec<String>)> = data
        .instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            let mut out = Vec::new();
            let mut failures = Vec::new();
            for cfg in &configs {
                let request = cfg.request(data.task, index);
                match attribute(&model, &inst.sequence, &request) {
                    Ok(r) => serde_json::to_writer(
                        &mut out,
                        &AttributionRecord {
                            method: r.method,
                            params: cfg.params,
                            seed: r.seed.unwrap_or(cfg.seed),
                            sequence_id: inst.id.clone(),
                            target_label: r.target_label,
                            layer: r.layer,
                            scores: r.scores,
                            signed: r.signed,
                        },
                    ),
                    Err(e) => {
                        failures.push(format!("instance {}, method {}: {e}", inst.id, cfg.method));
                        serde_json::to_writer(
                            &mut out,
                            &AttributionFailure {
                                method: cfg.method,
                                sequence_id: inst.id.clone(),
                                error: e.to_string(),
                            },
                        )
                    }
                }
                .expect("record serializes");
                out.push(b'\n');
            }
            (out, failures)
        })
        .collect();
    let mut bytes = serde_json::to_vec(&MetaLine { meta: &p }).expect("meta serializes");
    bytes.push(b'\n');
    let mut failures = Vec::new();
    for (chunk, f) in lines {
        bytes.extend_from_slice(&chunk);
        failures.extend(f);
    }
    if let Some(first) = failures.first() {
        eprintln!("{} attribution(s) failed and were recorded as errors; first: {first}", failures.len());
    }
    write(&args.out, &bytes)
}

fn run_faithfulness(args: &FaithfulnessArgs) -> Result<()> {
    let (model, data) = load_inputs(&args.inputs, true)?;
    let rank_order = if args.rank_abs {
        RankOrder::Absolute
    } else {
        RankOrder::Signed
    };
    let configs = args.method.configs(rank_order)?;
    let ratios = args.ratios.clone().unwrap_or_else(default_ratios);
    let spec = match args.perturbation {
        PerturbationMode::Mask => PerturbationSpec::mask(args.mask_token, ratios)?,
        PerturbationMode::Delete => PerturbationSpec::delete(ratios)?,
    };
    let p = provenance(
        "faithfulness",
        args,
        vec![model.content_hash(), data.content_hash()],
        args.method.seed,
    );
    let reports = configs
        .iter()
        .map(|cfg| faithfulness(&model, &data, cfg, &spec, p.clone()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(csv) = &args.csv {
        write(csv, faithfulness_csv(&p, &reports).as_bytes())?;
    }
    write(&args.out, &to_json(&FaithfulnessRun { provenance: p, reports }))
}

fn debug_alignment(args: &AlignArgs, scores: &[f64], evidence: &[u8]) -> Result<AlignmentReport> {
    if scores.len() != evidence.len() {
        return Err(NxlError::Config("--debug-scores and --debug-evidence differ in length".into()));
    }
    if evidence.iter().any(|&b| b > 1) {
        return Err(NxlError::Config("--debug-evidence entries must be 0 or 1".into()));
    }
    let e = EvidenceVector::new(evidence.iter().map(|&b| b == 1).collect());
    Ok(AlignmentReport {
        provenance: provenance("align", args, vec![], args.seed),
        variants: vec![],
        instances: 1,
        rows: vec![AlignmentRow {
            variant: "injected".into(),
            layer: 0,
            mean_dot: dot_alignment(&e, scores)?,
            mean_ap: average_precision(&e, scores)?,
            instances: 1,
        }],
    })
}

fn run_align(args: &AlignArgs) -> Result<()> {
    let report = match (&args.debug_scores, &args.debug_evidence) {
        (Some(s), Some(e)) => debug_alignment(args, s, e)?,
        _ => {
            let (Some(model), Some(data)) = (&args.model, &args.data) else {
                return Err(NxlError::Config("align needs --model and --data".into()));
            };
            let inputs = Inputs {
                model: model.clone(),
                data: data.clone(),
                task: Some(Task::MaskedLm),
            };
            let (model, data) = load_inputs(&inputs, true)?;
            let variants = args.variants.clone().unwrap_or_else(AlignmentVariant::default_set);
            let p = provenance("align", args, vec![model.content_hash(), data.content_hash()], args.seed);
            per_layer_alignment(&model, &data, &variants, p)?
        }
    };
    if let Some(csv) = &args.csv {
        write(csv, alignment_csv(&report).as_bytes())?;
    }
    write(&args.out, &to_json(&report))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("NXL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| NxlError::Config(format!("NXL_THREADS={v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| NxlError::Config(format!("thread pool: {e}")))
}

/// Runs a parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    thread_pool()?.install(|| match &cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::GenData(a) => gen_data(a),
        Command::Attribute(a) => run_attribute(a),
        Command::Faithfulness(a) => run_faithfulness(a),
        Command::Align(a) => run_align(a),
    })
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| NxlError::Config(e.to_string()))?;
    run(&cli)
}

/// Entry point of the `nxl` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nxl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

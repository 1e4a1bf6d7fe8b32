mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dsbert_core::baselines::{hmm_baseline, kmeans_baseline};
use dsbert_core::corpus::{
    generate_synthetic, gold_sequences, load_corpus, save_corpus, structure_by_name, Dialogue, GroundTruthStructure,
};
use dsbert_core::eval::{
    estimate_transition, evaluate, export_dot, extract_structure, read_state_sequences, write_state_sequences,
    StateSequence, SCE_EPSILON,
};
use dsbert_core::model::{Checkpoint, DsbertModel, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use dsbert_core::trainer::{predict_states, train, write_log, TrainConfig};
use dsbert_core::RngState;

use manifest::{manifest_path_for, unix_now, RunManifest, MANIFEST_FORMAT, MANIFEST_VERSION};

/// Learn dialogue state structure without labels and compare it with the truth.
#[derive(Parser)]
#[command(name = "dsbert")]
struct Cli {
    /// JSON file pre-filling flags: an object keyed by command name, or a
    /// run manifest. Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labeled synthetic corpus from a ground-truth structure.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint, epoch log and predictions.
    Train(TrainArgs),
    /// Score predicted states (checkpoint or states file) against gold labels.
    Eval(EvalArgs),
    /// Run the K-Means or HMM baseline and write a states file.
    Baseline(BaselineArgs),
    /// Turn a transition matrix into a Graphviz DOT graph.
    Extract(ExtractArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
struct GenerateArgs {
    /// Built-in name (bus, weather, chain-<k>) or a structure JSON file.
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    min_turns: Option<usize>,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = ["balance_kl", "greedy", "top", "none"])]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_state: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Base trainer settings; only settable from a config file.
    #[arg(skip)]
    trainer: Option<TrainConfig>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct EvalArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Model checkpoint or states file.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Number of true states; defaults to the largest gold label + 1.
    #[arg(long)]
    n_true: Option<usize>,
    /// Number of predicted states for a states file; defaults to the largest label + 1.
    #[arg(long)]
    n_pred: Option<usize>,
    /// Include all matrices in the report.
    #[arg(long)]
    matrices: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct BaselineArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = ["kmeans", "hmm"])]
    method: Option<String>,
    /// Cluster count for kmeans; symbol count for hmm.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
struct ExtractArgs {
    /// States file or model checkpoint (the latter needs --corpus).
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Use the true transitions of a structure (name or file) instead of --pred.
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    n_states: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    dot_out: Option<PathBuf>,
}

/// A bad or missing flag; reported with exit code 2 like clap's own errors.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| Usage(format!("missing required flag --{flag}")).into())
}

/// Overlay explicitly given flags on the config-file section for `command`.
fn resolve<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Value>, command: &str) -> Result<T> {
    let Some(config) = config else { return Ok(flags) };
    let section = if config.get("format").and_then(Value::as_str) == Some(MANIFEST_FORMAT) {
        if config.get("command").and_then(Value::as_str) != Some(command) {
            bail!(Usage(format!("config manifest is for another command, not {command}")));
        }
        config.get("args")
    } else {
        config.get(command)
    };
    let mut merged = section.cloned().unwrap_or_else(|| Value::Object(Default::default()));
    let Value::Object(base) = &mut merged else {
        bail!(Usage(format!("config section {command:?} must be an object")));
    };
    if let Value::Object(given) = serde_json::to_value(&flags)? {
        for (k, v) in given {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Usage(format!("config section {command:?}: {e}")).into())
}

fn load_structure(spec: &str) -> Result<GroundTruthStructure> {
    if Path::new(spec).is_file() {
        return Ok(GroundTruthStructure::load(spec)?);
    }
    structure_by_name(spec).map_err(|e| Usage(e.to_string()).into())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let started = unix_now();
    let structure = load_structure(&required(&args.structure, "structure")?)?;
    let out = required(&args.out, "out")?;
    let seed = args.seed.unwrap_or(0);
    let resolved = GenerateArgs {
        structure: args.structure.clone(),
        n: Some(args.n.unwrap_or(500)),
        min_turns: Some(args.min_turns.unwrap_or(6)),
        max_turns: Some(args.max_turns.unwrap_or(13)),
        seed: Some(seed),
        out: Some(out.clone()),
    };
    let (n, lo, hi) = (resolved.n.unwrap(), resolved.min_turns.unwrap(), resolved.max_turns.unwrap());
    let corpus = generate_synthetic(&structure, n, lo, hi, &mut RngState::new(seed))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_corpus(&corpus, &out)?;
    let inputs: Vec<&Path> = args.structure.iter().map(Path::new).filter(|p| p.is_file()).collect();
    RunManifest::new("generate", &resolved, Some(seed), started)?.finish(&inputs, &[&out], &manifest_path_for(&out))?;
    eprintln!("wrote {} dialogues to {}", corpus.len(), out.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = args.trainer.clone().unwrap_or_default();
    if let Some(loss) = &args.loss {
        cfg.loss.kind = loss.parse().map_err(|e: dsbert_core::Error| Usage(e.to_string()))?;
    }
    if let Some(v) = args.lambda {
        cfg.loss.lambda = v;
    }
    if args.n_state.is_some() {
        cfg.n_state = args.n_state;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = args.n_layers {
        cfg.n_layers = v;
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn collect_states(model: &DsbertModel, corpus: &[Dialogue]) -> Result<Vec<StateSequence>> {
    predict_states(model, corpus)
        .into_iter()
        .zip(corpus)
        .map(|(r, d)| r.with_context(|| format!("dialogue {}", d.id)))
        .collect()
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let started = unix_now();
    let corpus_path = required(&args.corpus, "corpus")?;
    let out_dir = required(&args.out_dir, "out-dir")?;
    let cfg = train_config(args)?;
    let corpus = load_corpus(&corpus_path)?;
    let outcome = train(&corpus, &cfg)?;
    for rec in &outcome.log {
        let metrics = match (rec.sed, rec.sce) {
            (Some(sed), Some(sce)) => format!(" sed {sed:.4} sce {sce:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>3} {:<10} tau {:.3} mlm {:.4} balance {:.4}{metrics}",
            rec.epoch,
            rec.loss_kind.name(),
            rec.tau,
            rec.mlm,
            rec.balance
        );
    }
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let model_path = out_dir.join("model.json");
    let best_path = out_dir.join("best_model.json");
    let log_path = out_dir.join("log.jsonl");
    let states_path = out_dir.join("states.jsonl");
    outcome.model.save(&model_path)?;
    outcome.best_model.save(&best_path)?;
    write_file(&log_path, &write_log(&outcome.log))?;
    write_file(&states_path, &write_state_sequences(&collect_states(&outcome.model, &corpus)?))?;
    // Record the fully resolved trainer settings so the manifest replays exactly.
    let resolved = TrainArgs { trainer: Some(cfg.clone()), ..TrainArgs::default() };
    let resolved = TrainArgs { corpus: Some(corpus_path.clone()), out_dir: Some(out_dir.clone()), ..resolved };
    RunManifest::new("train", &resolved, Some(cfg.seed), started)?.finish(
        &[&corpus_path],
        &[&model_path, &best_path, &log_path, &states_path],
        &out_dir.join("manifest.json"),
    )?;
    if let Some(best) = outcome.best_epoch {
        eprintln!("best epoch {best}; outputs in {}", out_dir.display());
    }
    Ok(())
}

/// Predicted sequences and their declared state count, from either a
/// checkpoint (run on `corpus`) or a states file.
fn load_predictions(pred: &Path, corpus: Option<&[Dialogue]>) -> Result<(Vec<StateSequence>, Option<usize>)> {
    let text = std::fs::read_to_string(pred).with_context(|| format!("reading {}", pred.display()))?;
    let looks_like_checkpoint = serde_json::from_str::<Value>(&text)
        .ok()
        .and_then(|v| v.get("format").and_then(Value::as_str).map(|f| f == CHECKPOINT_FORMAT))
        .unwrap_or(false);
    if looks_like_checkpoint {
        let ck: Checkpoint = serde_json::from_str(&text).context("parsing checkpoint")?;
        let model = DsbertModel::from_checkpoint(ck)?;
        let corpus = corpus.ok_or_else(|| Usage("a checkpoint prediction needs --corpus".into()))?;
        let n = model.config().n_state;
        Ok((collect_states(&model, corpus)?, Some(n)))
    } else {
        Ok((read_state_sequences(&text)?, None))
    }
}

fn max_label(seqs: &[Vec<usize>]) -> usize {
    seqs.iter().flatten().max().map_or(1, |m| m + 1)
}

/// Reorder predictions to corpus order, matching on dialogue id.
fn align(corpus: &[Dialogue], pred: Vec<StateSequence>) -> Result<Vec<Vec<usize>>> {
    let mut by_id: std::collections::HashMap<String, Vec<usize>> =
        pred.into_iter().map(|s| (s.dialogue_id, s.states)).collect();
    corpus
        .iter()
        .map(|d| {
            let states = by_id.remove(&d.id).ok_or_else(|| anyhow!("no prediction for dialogue {}", d.id))?;
            if states.len() != d.len() {
                bail!("dialogue {}: {} predicted states for {} pairs", d.id, states.len(), d.len());
            }
            Ok(states)
        })
        .collect()
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let started = unix_now();
    let corpus_path = required(&args.corpus, "corpus")?;
    let pred_path = required(&args.pred, "pred")?;
    let out = required(&args.out, "out")?;
    let corpus = load_corpus(&corpus_path)?;
    let gold = gold_sequences(&corpus).ok_or_else(|| anyhow!("{} has unlabeled pairs", corpus_path.display()))?;
    let (pred, n_from_model) = load_predictions(&pred_path, Some(&corpus))?;
    let pred = align(&corpus, pred)?;
    let n_true = args.n_true.unwrap_or_else(|| max_label(&gold));
    let n_pred = args.n_pred.or(n_from_model).unwrap_or_else(|| max_label(&pred));
    let ev = evaluate(&gold, &pred, n_true, n_pred, SCE_EPSILON)?;
    let report = ev.report(args.matrices.unwrap_or(false));
    write_file(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    RunManifest::new("eval", args, None, started)?.finish(&[&corpus_path, &pred_path], &[&out], &manifest_path_for(&out))?;
    if ev.clamped {
        eprintln!("note: sce clamped a zero projected probability");
    }
    eprintln!("sed {:.6} sce {:.6}", ev.sed, ev.sce);
    Ok(())
}

fn run_baseline(args: &BaselineArgs) -> Result<()> {
    let started = unix_now();
    let corpus_path = required(&args.corpus, "corpus")?;
    let method = required(&args.method, "method")?;
    let out = required(&args.out, "out")?;
    let seed = args.seed.unwrap_or(0);
    let corpus = load_corpus(&corpus_path)?;
    let states = match method.as_str() {
        "kmeans" => kmeans_baseline(&corpus, required(&args.k, "k")?, seed)?,
        "hmm" => {
            let n_hidden = required(&args.n_hidden, "n-hidden")?;
            hmm_baseline(&corpus, n_hidden, args.k.unwrap_or(n_hidden), seed)?
        }
        other => bail!(Usage(format!("unknown method {other:?}; expected kmeans or hmm"))),
    };
    write_file(&out, &write_state_sequences(&states))?;
    RunManifest::new("baseline", args, Some(seed), started)?.finish(&[&corpus_path], &[&out], &manifest_path_for(&out))?;
    eprintln!("wrote {method} states for {} dialogues to {}", states.len(), out.display());
    Ok(())
}

fn run_extract(args: &ExtractArgs) -> Result<()> {
    let started = unix_now();
    let dot_out = required(&args.dot_out, "dot-out")?;
    let threshold = args.threshold.unwrap_or(0.15);
    let mut inputs: Vec<PathBuf> = Vec::new();
    let graph = match (&args.structure, &args.pred) {
        (Some(spec), None) => {
            if Path::new(spec).is_file() {
                inputs.push(spec.into());
            }
            let s = load_structure(spec)?;
            let t = dsbert_core::eval::TransitionMatrix::from_probs(s.trans.clone())?;
            extract_structure(&t, Some(&s.states), threshold)?
        }
        (None, Some(pred)) => {
            inputs.push(pred.clone());
            let corpus = match &args.corpus {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_corpus(p)?)
                }
                None => None,
            };
            let (seqs, n_model) = load_predictions(pred, corpus.as_deref())?;
            let seqs: Vec<Vec<usize>> = seqs.into_iter().map(|s| s.states).collect();
            let n = args.n_states.or(n_model).unwrap_or_else(|| max_label(&seqs));
            extract_structure(&estimate_transition(&seqs, n, 0.0)?, None, threshold)?
        }
        _ => bail!(Usage("give exactly one of --pred or --structure".into())),
    };
    write_file(&dot_out, &export_dot(&graph))?;
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    RunManifest::new("extract", args, None, started)?.finish(&inputs, &[&dot_out], &manifest_path_for(&dot_out))?;
    eprintln!("wrote {} edges to {}", graph.edges.len(), dot_out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config: Option<Value> = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let config = config.as_ref();
    match cli.command {
        Command::Generate(a) => run_generate(&resolve(a, config, "generate")?),
        Command::Train(a) => run_train(&resolve(a, config, "train")?),
        Command::Eval(a) => run_eval(&resolve(a, config, "eval")?),
        Command::Baseline(a) => run_baseline(&resolve(a, config, "baseline")?),
        Command::Extract(a) => run_extract(&resolve(a, config, "extract")?),
    }
}

fn version_text() -> &'static str {
    let text = format!(
        "{} (checkpoint {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, manifest {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
        env!("CARGO_PKG_VERSION")
    );
    Box::leak(text.into_boxed_str())
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version_text()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

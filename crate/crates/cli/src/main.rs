//! `dysfl`: command-line front end for the streaming recognition and
//! disfluency-detection toolkit. All stages exchange JSONL so each
//! subcommand is independently testable; all randomness funnels
//! through the config seed.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dysfl_core::corpus::{generate_corpus, read_corpus, write_corpus, LabeledUtterance};
use dysfl_core::eval::{render_table, score, token_latency, LabeledTranscript, LatencyRecord};
use dysfl_core::lm::CausalLM;
use dysfl_core::search::{LatencyMode, PrefixScorer};
use dysfl_core::tagging::{align, project_annotations, EditOp};
use dysfl_core::training::{
    experiment_matrix, hypothesis_transcript, render_matrix, run_jobs, teacher_forced_records,
    train_from_config, SystemKind,
};
use dysfl_core::{beam_search, greedy_search, JointModel, RunConfig};

#[derive(Parser)]
#[command(
    name = "dysfl",
    version,
    about = "Streaming speech recognition with joint disfluency detection",
    propagate_version = true
)]
struct Cli {
    /// Print progress detail to stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled corpus directory.
    Synth(SynthArgs),
    /// Align hypothesis transcripts to annotated references and
    /// project the disfluency labels onto the hypothesis tokens.
    Align(AlignArgs),
    /// Train a model and write the best-dev checkpoint.
    Train(TrainArgs),
    /// Decode a corpus split (or directory) with a trained model.
    Decode(DecodeArgs),
    /// Score hypothesis JSONL against reference JSONL.
    Eval(EvalArgs),
    /// Token-level label latency: p50/p90 over emission and boundary
    /// streams (teacher-forced generation or precomputed JSONL).
    Latency(LatencyArgs),
    /// Train/decode/score the full system comparison matrix.
    Matrix(MatrixArgs),
}

/// Configuration shared by every model-touching subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set search.beam_width=8`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Corpus and training seed in one flag.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-utterance work (1 = bit-deterministic).
    #[arg(long)]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)
                .with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("corpus.seed={seed}"));
            overrides.push(format!("training.seed={seed}"));
        }
        if let Some(jobs) = self.jobs {
            overrides.push(format!("training.jobs={jobs}"));
        }
        Ok(base.with_overrides(&overrides)?)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output corpus directory (manifest.jsonl + feats/).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Which split's seed and size to generate.
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Override the number of utterances.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct AlignArgs {
    /// Annotated reference transcripts (JSONL: id, tokens, labels).
    #[arg(long, value_name = "FILE")]
    refs: PathBuf,
    /// Hypothesis transcripts (JSONL with id and tokens).
    #[arg(long, value_name = "FILE")]
    hyps: PathBuf,
    /// Output JSONL (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for best.ckpt and train_log.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Decode a corpus directory instead of a regenerated split.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Split to regenerate when --corpus is absent.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    /// Language-model checkpoint for shallow fusion
    /// (weighted by search.lm_weight).
    #[arg(long, value_name = "FILE")]
    lm: Option<PathBuf>,
    /// Output JSONL (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference transcripts (JSONL: id, tokens, labels).
    #[arg(long, value_name = "FILE")]
    refs: PathBuf,
    /// Hypothesis transcripts or decode output (JSONL).
    #[arg(long, value_name = "FILE")]
    hyps: PathBuf,
    /// Latency records (JSONL: id, label_ms, boundary_ms).
    #[arg(long, value_name = "FILE")]
    latency: Option<PathBuf>,
    /// Row label in the printed table.
    #[arg(long, default_value = "system")]
    name: String,
    /// Write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatencyArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Emission times JSONL (id, label_ms). Requires --boundaries.
    #[arg(long, value_name = "FILE", requires = "boundaries")]
    emissions: Option<PathBuf>,
    /// Boundary times JSONL (id, boundary_ms).
    #[arg(long, value_name = "FILE", requires = "emissions")]
    boundaries: Option<PathBuf>,
    /// Teacher-forced schedule to simulate when no files are given.
    #[arg(long, value_enum, default_value = "multi-task")]
    mode: LatencyModeArg,
    /// Split to simulate on.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Write the simulated emissions as JSONL.
    #[arg(long, value_name = "FILE")]
    emissions_out: Option<PathBuf>,
    /// Write the gold boundaries as JSONL.
    #[arg(long, value_name = "FILE")]
    boundaries_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LatencyModeArg {
    MultiTask,
    Enriched,
    Pipeline,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated subset of systems (default: all).
    #[arg(long, value_delimiter = ',')]
    systems: Vec<String>,
    /// Write all score reports as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

// ---- JSONL row shapes ------------------------------------------------

#[derive(Serialize)]
struct DecodeRow {
    id: String,
    tokens: Vec<String>,
    labels: Vec<u8>,
    score: f64,
    token_logp: f64,
    disfl_logp: f64,
    lm_logp: f64,
    emission: Vec<EmissionCell>,
    end_ms: f64,
    ended_with_eos: bool,
}

#[derive(Serialize)]
struct EmissionCell {
    token_ms: f64,
    label_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct EmissionRow {
    id: String,
    label_ms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoundaryRow {
    id: String,
    boundary_ms: Vec<f64>,
}

#[derive(Serialize)]
struct AlignRow<'a> {
    id: &'a str,
    tokens: &'a [String],
    labels: Vec<u8>,
    ops: Vec<String>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, cli.verbose),
        Cmd::Align(a) => cmd_align(a),
        Cmd::Train(a) => cmd_train(a, cli.verbose),
        Cmd::Decode(a) => cmd_decode(a, cli.verbose),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Latency(a) => cmd_latency(a),
        Cmd::Matrix(a) => cmd_matrix(a, cli.verbose),
    }
}

/// The utterances of one split under the config's seed schedule
/// (train = seed, dev = seed+1, test = seed+2).
fn split_utterances(
    cfg: &RunConfig,
    split: SplitArg,
    count: Option<usize>,
) -> Result<Vec<LabeledUtterance>> {
    let mut spec = cfg.synthesis_spec();
    let (offset, default_n) = match split {
        SplitArg::Train => (0, cfg.corpus.train_utterances),
        SplitArg::Dev => (1, cfg.corpus.dev_utterances),
        SplitArg::Test => (2, cfg.corpus.test_utterances),
    };
    spec.seed = cfg.corpus.seed.wrapping_add(offset);
    Ok(generate_corpus(&spec, count.unwrap_or(default_n))?)
}

fn cmd_synth(a: SynthArgs, verbose: u8) -> Result<()> {
    let cfg = a.cfg.load()?;
    let utts = split_utterances(&cfg, a.split, a.count)?;
    write_corpus(&utts, &a.out)?;
    if verbose > 0 {
        let disfl: usize = utts
            .iter()
            .map(|u| u.labels.iter().filter(|&&l| l == 1).count())
            .sum();
        let total: usize = utts.iter().map(|u| u.labels.len()).sum();
        eprintln!("disfluent tokens: {disfl}/{total}");
    }
    println!("wrote {} utterances to {}", utts.len(), a.out.display());
    Ok(())
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let refs: Vec<LabeledTranscript> = read_jsonl(&a.refs)?;
    let hyps: Vec<LabeledTranscript> = read_jsonl(&a.hyps)?;
    let by_id: std::collections::BTreeMap<&str, &LabeledTranscript> =
        refs.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut out = out_writer(a.out.as_deref())?;
    for hyp in &hyps {
        let r = by_id
            .get(hyp.id.as_str())
            .with_context(|| format!("hypothesis {} has no reference", hyp.id))?;
        let labels = project_annotations(&r.tokens, &r.labels, &hyp.tokens)?;
        let path = align(&r.tokens, &hyp.tokens);
        let ops = path
            .ops
            .iter()
            .map(|op| match op {
                EditOp::Match { .. } => "match".to_string(),
                EditOp::Substitute { .. } => "sub".to_string(),
                EditOp::Insert { .. } => "ins".to_string(),
                EditOp::Delete { .. } => "del".to_string(),
            })
            .collect();
        write_row(
            &mut out,
            &AlignRow {
                id: &hyp.id,
                tokens: &hyp.tokens,
                labels,
                ops,
            },
        )?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, verbose: u8) -> Result<()> {
    let cfg = a.cfg.load()?;
    let outcome = train_from_config(&cfg)?;
    for e in &outcome.log.epochs {
        println!(
            "epoch {}: train_loss {:.4} dev_loss {:.4} dev_dr_wer {:.4}",
            e.epoch, e.train_loss, e.dev_loss, e.dev_dr_wer
        );
        if verbose > 0 {
            eprintln!(
                "  token_nll {:.4} disfl_nll {:.4} ctc {:.4} (ctc skipped {})",
                e.token_nll, e.disfl_nll, e.ctc, e.ctc_skipped
            );
        }
    }
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("best.ckpt");
    outcome.model.save(&ckpt)?;
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(a.out.join("train_log.json"))?),
        &outcome.log,
    )?;
    println!(
        "best epoch {}; checkpoint {}",
        outcome.log.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn cmd_decode(a: DecodeArgs, verbose: u8) -> Result<()> {
    let cfg = a.cfg.load()?;
    let model = JointModel::load(&a.model)?;
    let lm = match &a.lm {
        Some(p) => Some(CausalLM::load(p)?),
        None => None,
    };
    let lm_ref: Option<&dyn PrefixScorer> = lm.as_ref().map(|m| m as &dyn PrefixScorer);
    let utts = match &a.corpus {
        Some(dir) => read_corpus(dir)?,
        None => split_utterances(&cfg, a.split, None)?,
    };
    let plan = cfg.block_plan()?;
    let search = cfg.search_config();

    // Shallow fusion shares one immutable scorer, so parallel decode
    // only applies without an LM.
    let jobs = if lm.is_some() { 1 } else { cfg.training.jobs };
    let rows: Vec<DecodeRow> = run_jobs(jobs, &utts, |utt| {
        let hyp = if a.greedy {
            greedy_search(&model, &plan, &utt.features, lm_ref, &search)?
        } else {
            beam_search(&model, &plan, &utt.features, lm_ref, &search)?
                .nbest
                .into_iter()
                .next()
                .expect("beam search returns at least one hypothesis")
        };
        let t = hypothesis_transcript(&model, &utt.id, &hyp.tokens, &hyp.labels);
        Ok(DecodeRow {
            id: utt.id.clone(),
            tokens: t.tokens,
            labels: t.labels,
            score: hyp.score,
            token_logp: hyp.token_logp_sum,
            disfl_logp: hyp.disfl_logp_sum,
            lm_logp: hyp.lm_logp_sum,
            emission: hyp
                .emission
                .iter()
                .map(|e| EmissionCell {
                    token_ms: e.token_ms,
                    label_ms: e.label_ms,
                })
                .collect(),
            end_ms: hyp.end_ms,
            ended_with_eos: hyp.ended_with_eos,
        })
    })?;
    let mut out = out_writer(a.out.as_deref())?;
    for (i, row) in rows.iter().enumerate() {
        write_row(&mut out, row)?;
        if verbose > 0 && (i + 1) % 50 == 0 {
            eprintln!("decoded {}/{}", i + 1, utts.len());
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let refs: Vec<LabeledTranscript> = read_jsonl(&a.refs)?;
    let hyps: Vec<LabeledTranscript> = read_jsonl(&a.hyps)?;
    let latency: Option<Vec<LatencyRecord>> = match &a.latency {
        Some(p) => Some(read_jsonl(p)?),
        None => None,
    };
    let report = score(&hyps, &refs, latency.as_deref())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", render_table(&[(a.name.clone(), report.clone())]));
    if let Some(p) = &a.out {
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &report)?;
    }
    Ok(())
}

fn cmd_latency(a: LatencyArgs) -> Result<()> {
    let records: Vec<LatencyRecord> = match (&a.emissions, &a.boundaries) {
        (Some(e), Some(b)) => {
            let emissions: Vec<EmissionRow> = read_jsonl(e)?;
            let boundaries: Vec<BoundaryRow> = read_jsonl(b)?;
            let by_id: std::collections::BTreeMap<&str, &BoundaryRow> =
                boundaries.iter().map(|r| (r.id.as_str(), r)).collect();
            emissions
                .iter()
                .map(|em| {
                    let b = by_id
                        .get(em.id.as_str())
                        .with_context(|| format!("no boundaries for {}", em.id))?;
                    Ok(LatencyRecord {
                        id: em.id.clone(),
                        label_ms: em.label_ms.clone(),
                        boundary_ms: b.boundary_ms.clone(),
                    })
                })
                .collect::<Result<_>>()?
        }
        _ => {
            let cfg = a.cfg.load()?;
            let utts = split_utterances(&cfg, a.split, None)?;
            let plan = cfg.block_plan()?;
            let mode = match a.mode {
                LatencyModeArg::MultiTask => LatencyMode::MultiTask,
                LatencyModeArg::Enriched => LatencyMode::Enriched,
                LatencyModeArg::Pipeline => LatencyMode::Pipeline {
                    lookahead: cfg.search.lookahead,
                },
            };
            teacher_forced_records(&utts, &plan, mode, &cfg.search_config())?
        }
    };
    if let Some(p) = &a.emissions_out {
        let mut w = out_writer(Some(p))?;
        for r in &records {
            write_row(
                &mut w,
                &EmissionRow {
                    id: r.id.clone(),
                    label_ms: r.label_ms.clone(),
                },
            )?;
        }
    }
    if let Some(p) = &a.boundaries_out {
        let mut w = out_writer(Some(p))?;
        for r in &records {
            write_row(
                &mut w,
                &BoundaryRow {
                    id: r.id.clone(),
                    boundary_ms: r.boundary_ms.clone(),
                },
            )?;
        }
    }
    let (p50, p90, all) = token_latency(&records)?;
    println!("tokens {}  p50 {:.1} ms  p90 {:.1} ms", all.len(), p50, p90);
    Ok(())
}

fn cmd_matrix(a: MatrixArgs, verbose: u8) -> Result<()> {
    let cfg = a.cfg.load()?;
    let systems = if a.systems.is_empty() {
        SystemKind::all()
    } else {
        a.systems
            .iter()
            .map(|s| Ok(SystemKind::parse(s)?))
            .collect::<Result<Vec<_>>>()?
    };
    if verbose > 0 {
        eprintln!(
            "running {} systems: {}",
            systems.len(),
            systems.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
        );
    }
    let rows = experiment_matrix(&cfg, &systems)?;
    print!("{}", render_matrix(&rows));
    if let Some(p) = &a.out {
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &rows)?;
    }
    Ok(())
}

// ---- JSONL helpers ---------------------------------------------------

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?,
        );
    }
    Ok(out)
}

fn out_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_row<T: Serialize>(w: &mut Box<dyn Write>, row: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, row)?;
    w.write_all(b"\n")?;
    Ok(())
}

//! Training loop and experiment driver: batched Adam with inverse-
//! sqrt warmup, per-epoch dev scoring by greedy decode, best-dev
//! checkpoint selection, and the multi-system comparison matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::config::{RunConfig, TrainingSection};
use crate::corpus::{generate_corpus, LabeledUtterance, Vocabulary};
use crate::encoder::BlockPlan;
use crate::error::{Error, Result};
use crate::eval::{dr_wer, score, LabeledTranscript, LatencyRecord, ScoreReport};
use crate::model::{JointModel, LossBreakdown, ObjectiveMode};
use crate::nn::params::{noam_lr, Adam, Gradients};
use crate::nn::tape::Tape;
use crate::search::{
    beam_search, greedy_search, teacher_forced_timing, LatencyMode, SearchConfig,
};
use crate::tagger::{pipeline_decode, tagger_training_data, train_tagger, TaggerConfig,
    TaggerTrainConfig};

/// Loss/score trace of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub token_nll: f64,
    pub disfl_nll: f64,
    pub ctc: f64,
    pub ctc_skipped: usize,
    pub dev_loss: f64,
    pub dev_dr_wer: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

pub struct TrainOutcome {
    pub model: JointModel,
    pub log: TrainLog,
}

/// Deterministic train/dev/test splits: same vocabulary and acoustic
/// templates, disjoint generator seeds.
pub fn corpus_splits(
    cfg: &RunConfig,
) -> Result<(Vec<LabeledUtterance>, Vec<LabeledUtterance>, Vec<LabeledUtterance>)> {
    let mut spec = cfg.synthesis_spec();
    let train = generate_corpus(&spec, cfg.corpus.train_utterances)?;
    spec.seed = cfg.corpus.seed.wrapping_add(1);
    let dev = generate_corpus(&spec, cfg.corpus.dev_utterances)?;
    spec.seed = cfg.corpus.seed.wrapping_add(2);
    let test = generate_corpus(&spec, cfg.corpus.test_utterances)?;
    Ok((train, dev, test))
}

/// Reference side of an evaluation pair.
pub fn reference_transcript(utt: &LabeledUtterance) -> LabeledTranscript {
    LabeledTranscript {
        id: utt.id.clone(),
        tokens: utt.tokens.clone(),
        labels: utt.labels.clone(),
    }
}

/// Hypothesis side: decoded ids mapped back to strings under the
/// model's vocabulary (enriched ids map to their base spelling).
/// Systems that emit no labels (ASR-only, end-to-end removal) get
/// all-fluent labels so the transcript still evaluates.
pub fn hypothesis_transcript(
    model: &JointModel,
    id: &str,
    tokens: &[usize],
    labels: &[u8],
) -> LabeledTranscript {
    let labels = if labels.len() == tokens.len() {
        labels.to_vec()
    } else {
        vec![0; tokens.len()]
    };
    LabeledTranscript {
        id: id.to_string(),
        tokens: tokens.iter().map(|&t| model.vocab.token(t).to_string()).collect(),
        labels,
    }
}

/// Greedy-decode a set of utterances into evaluation transcripts.
pub fn greedy_transcripts(
    model: &JointModel,
    plan: &BlockPlan,
    utts: &[LabeledUtterance],
    cfg: &SearchConfig,
    jobs: usize,
) -> Result<Vec<LabeledTranscript>> {
    run_jobs(jobs, utts, |utt| {
        let hyp = greedy_search(model, plan, &utt.features, None, cfg)?;
        Ok(hypothesis_transcript(model, &utt.id, &hyp.tokens, &hyp.labels))
    })
}

/// Run a fallible per-utterance map either sequentially (`jobs` ≤ 1,
/// bit-deterministic) or on a scoped thread pool; output order always
/// follows input order.
pub fn run_jobs<T: Sync, U: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    if jobs <= 1 {
        items.iter().map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Training(format!("thread pool: {e}")))?;
        pool.install(|| items.par_iter().map(f).collect())
    }
}

/// Train `model` in place; returns the log. The best-dev-DR-WER
/// parameters (earliest epoch on ties) are left in the model at exit.
pub fn train_model(
    model: &mut JointModel,
    plan: &BlockPlan,
    train_utts: &[LabeledUtterance],
    dev_utts: &[LabeledUtterance],
    tcfg: &TrainingSection,
    dev_search: &SearchConfig,
) -> Result<TrainLog> {
    if train_utts.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let mut opt = Adam::transformer_default();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, crate::nn::params::ParameterStore)> = None;

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train_utts.len()).collect();
        let mut rng = StdRng::seed_from_u64(tcfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);

        let mut sums = LossBreakdown::default();
        let mut skipped = 0usize;
        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let per_utt: Vec<(f64, LossBreakdown, Gradients)> =
                run_jobs(tcfg.jobs, batch, |&i| {
                    let utt = &train_utts[i];
                    let mut tape = Tape::new();
                    let (loss, bk) = model.loss_on_tape(&mut tape, plan, utt)?;
                    let grads = tape.backward(loss)?;
                    Ok((tape.value(loss)[0], bk, grads))
                })?;

            let mut total = Gradients::default();
            for (k, (loss_v, bk, g)) in per_utt.into_iter().enumerate() {
                if !loss_v.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss in epoch {epoch} batch {batch_idx} (utterance {})",
                        train_utts[batch[k]].id
                    )));
                }
                sums.total += bk.total;
                sums.token_nll += bk.token_nll;
                sums.disfl_nll += bk.disfl_nll;
                sums.ctc += bk.ctc;
                skipped += usize::from(bk.ctc_skipped);
                total.add_assign(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            model.store.zero_grad();
            model.store.accumulate(&total);
            let lr = tcfg.lr_scale
                * noam_lr(opt.steps_taken() + 1, model.cfg.model_dim, tcfg.warmup_steps, 1.0);
            opt.step(&mut model.store, lr)?;
        }

        let n = train_utts.len() as f64;
        let (dev_loss, dev_dr) = evaluate_dev(model, plan, dev_utts, tcfg.jobs, dev_search)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: sums.total / n,
            token_nll: sums.token_nll / n,
            disfl_nll: sums.disfl_nll / n,
            ctc: sums.ctc / n,
            ctc_skipped: skipped,
            dev_loss,
            dev_dr_wer: dev_dr,
        });
        if best.as_ref().map_or(true, |(b, _)| dev_dr < *b) {
            best = Some((dev_dr, model.store.clone()));
            log.best_epoch = epoch;
        }
    }

    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(log)
}

/// Mean dev loss and greedy-decode dev DR-WER.
fn evaluate_dev(
    model: &JointModel,
    plan: &BlockPlan,
    dev_utts: &[LabeledUtterance],
    jobs: usize,
    search: &SearchConfig,
) -> Result<(f64, f64)> {
    if dev_utts.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let losses: Vec<f64> = run_jobs(jobs, dev_utts, |utt| {
        let mut tape = Tape::new();
        let (loss, _) = model.loss_on_tape(&mut tape, plan, utt)?;
        Ok(tape.value(loss)[0])
    })?;
    let dev_loss = losses.iter().sum::<f64>() / dev_utts.len() as f64;
    let hyps = greedy_transcripts(model, plan, dev_utts, search, jobs)?;
    let refs: Vec<LabeledTranscript> = dev_utts.iter().map(reference_transcript).collect();
    Ok((dev_loss, dr_wer(&hyps, &refs)?))
}

/// Dev loss of the current parameters (the checkpoint round-trip
/// probe).
pub fn dev_loss(
    model: &JointModel,
    plan: &BlockPlan,
    dev_utts: &[LabeledUtterance],
) -> Result<f64> {
    let mut sum = 0.0;
    for utt in dev_utts {
        let mut tape = Tape::new();
        let (loss, _) = model.loss_on_tape(&mut tape, plan, utt)?;
        sum += tape.value(loss)[0];
    }
    Ok(sum / dev_utts.len().max(1) as f64)
}

/// Build corpus + model from the config and train to the best-dev
/// checkpoint.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, dev, _) = corpus_splits(cfg)?;
    let vocab = cfg.synthesis_spec().vocabulary()?;
    let plan = cfg.block_plan()?;
    let mut model = JointModel::new(cfg.model_config(), &vocab, cfg.training.seed)?;
    let log = train_model(
        &mut model,
        &plan,
        &train,
        &dev,
        &cfg.training,
        &cfg.search_config(),
    )?;
    Ok(TrainOutcome { model, log })
}

// ---- experiment matrix ----------------------------------------------

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    AsrOnly,
    Pipeline,
    MultiTask,
    NoTokenDependency,
    NoInputDisfluency,
    DisfluencyDependency,
    TranscriptEnriched,
    EndToEndRemoval,
}

impl SystemKind {
    pub fn all() -> Vec<SystemKind> {
        use SystemKind::*;
        vec![
            AsrOnly,
            Pipeline,
            MultiTask,
            NoTokenDependency,
            NoInputDisfluency,
            DisfluencyDependency,
            TranscriptEnriched,
            EndToEndRemoval,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::AsrOnly => "asr_only",
            SystemKind::Pipeline => "pipeline",
            SystemKind::MultiTask => "multi_task",
            SystemKind::NoTokenDependency => "no_token_dependency",
            SystemKind::NoInputDisfluency => "no_input_disfluency",
            SystemKind::DisfluencyDependency => "disfluency_dependency",
            SystemKind::TranscriptEnriched => "transcript_enriched",
            SystemKind::EndToEndRemoval => "end_to_end_removal",
        }
    }

    pub fn parse(s: &str) -> Result<SystemKind> {
        SystemKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown system `{s}`; expected one of {}",
                    SystemKind::all()
                        .iter()
                        .map(|k| k.name())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }

    /// The run configuration this system trains under. `asr_only` is
    /// the multi-task graph with α=0 and all dependency inputs off;
    /// `pipeline` decodes with the asr_only model.
    pub fn run_config(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        match self {
            SystemKind::AsrOnly | SystemKind::Pipeline => {
                m.mode = ObjectiveMode::MultiTask;
                m.alpha = 0.0;
                m.token_dependency = false;
                m.input_disfluency = false;
                m.disfluency_dependency = false;
            }
            SystemKind::MultiTask => {
                m.mode = ObjectiveMode::MultiTask;
            }
            SystemKind::NoTokenDependency => {
                m.mode = ObjectiveMode::MultiTask;
                m.token_dependency = false;
            }
            SystemKind::NoInputDisfluency => {
                m.mode = ObjectiveMode::MultiTask;
                m.input_disfluency = false;
            }
            SystemKind::DisfluencyDependency => {
                m.mode = ObjectiveMode::MultiTask;
                m.token_dependency = false;
                m.disfluency_dependency = true;
            }
            SystemKind::TranscriptEnriched => {
                m.mode = ObjectiveMode::TranscriptEnriched;
                m.token_dependency = true;
                m.input_disfluency = true;
                m.disfluency_dependency = false;
            }
            SystemKind::EndToEndRemoval => {
                m.mode = ObjectiveMode::EndToEndRemoval;
                m.token_dependency = true;
                m.input_disfluency = true;
                m.disfluency_dependency = false;
            }
        }
        cfg
    }

    /// Teacher-forced latency schedule of the system, if it emits
    /// labels at all.
    fn latency_mode(&self, lookahead: usize) -> Option<LatencyMode> {
        match self {
            SystemKind::AsrOnly | SystemKind::EndToEndRemoval => None,
            SystemKind::Pipeline => Some(LatencyMode::Pipeline { lookahead }),
            SystemKind::TranscriptEnriched => Some(LatencyMode::Enriched),
            _ => Some(LatencyMode::MultiTask),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRow {
    pub system: String,
    pub report: ScoreReport,
}

/// Train, decode and evaluate every requested system on one shared
/// corpus and seed.
pub fn experiment_matrix(base: &RunConfig, systems: &[SystemKind]) -> Result<Vec<MatrixRow>> {
    base.validate()?;
    let (train, _, test) = corpus_splits(base)?;
    let plan = base.block_plan()?;
    let refs: Vec<LabeledTranscript> = test.iter().map(reference_transcript).collect();
    let jobs = base.training.jobs;

    // The pipeline baseline reuses the asr_only acoustic model.
    let mut asr_model: Option<JointModel> = None;
    let ensure_asr = |cache: &mut Option<JointModel>| -> Result<()> {
        if cache.is_none() {
            let outcome = train_from_config(&SystemKind::AsrOnly.run_config(base))?;
            *cache = Some(outcome.model);
        }
        Ok(())
    };

    let mut rows = Vec::with_capacity(systems.len());
    for sys in systems {
        let search = base.search_config();
        let hyps: Vec<LabeledTranscript> = match sys {
            SystemKind::AsrOnly | SystemKind::Pipeline => {
                ensure_asr(&mut asr_model)?;
                let model = asr_model.as_ref().unwrap();
                let decoded = run_jobs(jobs, &test, |utt| {
                    let out = beam_search(model, &plan, &utt.features, None, &search)?;
                    let best = out.nbest.into_iter().next().expect("nonempty n-best");
                    Ok((utt.id.clone(), best))
                })?;
                if *sys == SystemKind::AsrOnly {
                    decoded
                        .iter()
                        .map(|(id, h)| hypothesis_transcript(model, id, &h.tokens, &h.labels))
                        .collect()
                } else {
                    let tagger = train_pipeline_tagger(base, &train)?;
                    let k = base.search.lookahead;
                    decoded
                        .iter()
                        .map(|(id, h)| {
                            let times: Vec<f64> =
                                h.emission.iter().map(|e| e.token_ms).collect();
                            let (labels, _) = pipeline_decode(
                                &tagger,
                                &h.tokens,
                                &times,
                                h.end_ms,
                                k,
                                base.search.tagger_cost_ms,
                            )?;
                            Ok(hypothesis_transcript(model, id, &h.tokens, &labels))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            }
            _ => {
                let outcome = train_from_config(&sys.run_config(base))?;
                let model = outcome.model;
                run_jobs(jobs, &test, |utt| {
                    let out = beam_search(&model, &plan, &utt.features, None, &search)?;
                    let best = out.best();
                    Ok(hypothesis_transcript(&model, &utt.id, &best.tokens, &best.labels))
                })?
            }
        };

        let latency = match sys.latency_mode(base.search.lookahead) {
            Some(mode) => Some(teacher_forced_records(&test, &plan, mode, &search)?),
            None => None,
        };
        let report = score(&hyps, &refs, latency.as_deref())?;
        rows.push(MatrixRow {
            system: sys.name().to_string(),
            report,
        });
    }
    Ok(rows)
}

/// Teacher-forced latency records for a whole split.
pub fn teacher_forced_records(
    utts: &[LabeledUtterance],
    plan: &BlockPlan,
    mode: LatencyMode,
    cfg: &SearchConfig,
) -> Result<Vec<LatencyRecord>> {
    utts.iter()
        .map(|utt| {
            let timing = teacher_forced_timing(plan, utt, mode, cfg)?;
            Ok(LatencyRecord {
                id: utt.id.clone(),
                label_ms: timing.iter().map(|t| t.label_ms).collect(),
                boundary_ms: timing.iter().map(|t| t.boundary_ms).collect(),
            })
        })
        .collect()
}

/// The incremental tagger of the pipeline baseline, trained on all
/// prefixes of the shared training split.
pub fn train_pipeline_tagger(
    base: &RunConfig,
    train: &[LabeledUtterance],
) -> Result<crate::tagger::PrefixTagger> {
    let vocab: Vocabulary = base.synthesis_spec().vocabulary()?;
    let data = tagger_training_data(train, &vocab);
    let tcfg = TaggerConfig {
        model_dim: base.model.model_dim.min(32),
        n_heads: base.model.n_heads.min(2),
        ff_dim: base.model.ff_dim.min(64),
        layers: 1,
    };
    let tt = TaggerTrainConfig {
        epochs: 2,
        batch_size: 32,
        warmup: 200,
        lr_scale: base.training.lr_scale,
        seed: base.training.seed.wrapping_add(100),
    };
    train_tagger(&data, &vocab, &tcfg, &tt)
}

/// Text table over matrix rows.
pub fn render_matrix(rows: &[MatrixRow]) -> String {
    let named: Vec<(String, ScoreReport)> = rows
        .iter()
        .map(|r| (r.system.clone(), r.report.clone()))
        .collect();
    crate::eval::render_table(&named)
}

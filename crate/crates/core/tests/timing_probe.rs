//! Manual probe for sizing the full training run; run with
//! `cargo test --test timing_probe -- --ignored --nocapture`.

use std::time::Instant;

use dysfl_core::eval::{aligned_f1, dr_wer};
use dysfl_core::training::{
    corpus_splits, greedy_transcripts, hypothesis_transcript, reference_transcript, run_jobs,
    train_from_config, train_model, SystemKind,
};
use dysfl_core::{beam_search, greedy_search, JointModel, LabeledTranscript, RunConfig};

#[test]
#[ignore]
fn probe_epoch_cost() {
    let cfg = RunConfig::default()
        .with_overrides(&[
            "corpus.train_utterances=100".into(),
            "corpus.dev_utterances=20".into(),
            "corpus.test_utterances=5".into(),
            "training.epochs=1".into(),
        ])
        .unwrap();
    let t0 = Instant::now();
    let (train, dev, _) = corpus_splits(&cfg).unwrap();
    println!("corpus: {:?}", t0.elapsed());

    let vocab = cfg.synthesis_spec().vocabulary().unwrap();
    let plan = cfg.block_plan().unwrap();
    let mut model = JointModel::new(cfg.model_config(), &vocab, cfg.training.seed).unwrap();

    let t1 = Instant::now();
    let log = train_model(
        &mut model,
        &plan,
        &train,
        &dev,
        &cfg.training,
        &cfg.search_config(),
    )
    .unwrap();
    let train_time = t1.elapsed();
    println!(
        "1 epoch over {} utts + dev({}) eval: {:?}  -> per train utt ~{:.1} ms",
        train.len(),
        dev.len(),
        train_time,
        train_time.as_secs_f64() * 1000.0 / train.len() as f64
    );
    println!("epoch log: {:?}", log.epochs[0]);

    let t2 = Instant::now();
    let _ = greedy_transcripts(&model, &plan, &dev, &cfg.search_config(), 1).unwrap();
    println!(
        "greedy decode {} dev utts: {:?} (~{:.1} ms/utt)",
        dev.len(),
        t2.elapsed(),
        t2.elapsed().as_secs_f64() * 1000.0 / dev.len() as f64
    );
}

#[test]
#[ignore]
fn probe_cost_breakdown() {
    use dysfl_core::nn::params::{Adam, Gradients};
    use dysfl_core::nn::tape::Tape;

    let cfg = RunConfig::default()
        .with_overrides(&[
            "corpus.train_utterances=100".into(),
            "corpus.dev_utterances=2".into(),
            "corpus.test_utterances=2".into(),
        ])
        .unwrap();
    let (train, _, _) = corpus_splits(&cfg).unwrap();
    let vocab = cfg.synthesis_spec().vocabulary().unwrap();
    let plan = cfg.block_plan().unwrap();
    let mut model = JointModel::new(cfg.model_config(), &vocab, cfg.training.seed).unwrap();

    let (mut t_fwd, mut t_bwd, mut t_merge, mut t_opt) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut opt = Adam::transformer_default();
    let mut frames = 0usize;
    for batch in train.chunks(8) {
        let mut total = Gradients::default();
        for utt in batch {
            frames += utt.features.t_frames;
            let mut tape = Tape::new();
            let t0 = Instant::now();
            let (loss, _) = model.loss_on_tape(&mut tape, &plan, utt).unwrap();
            t_fwd += t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let g = tape.backward(loss).unwrap();
            t_bwd += t1.elapsed().as_secs_f64();
            let t2 = Instant::now();
            total.add_assign(&g);
            t_merge += t2.elapsed().as_secs_f64();
        }
        let t3 = Instant::now();
        total.scale(1.0 / batch.len() as f64);
        model.store.zero_grad();
        model.store.accumulate(&total);
        opt.step(&mut model.store, 1e-4).unwrap();
        t_opt += t3.elapsed().as_secs_f64();
    }
    let n = train.len() as f64;
    println!(
        "per-utt ms over {} utts (avg {:.0} frames): fwd {:.2}  bwd {:.2}  merge {:.2}  opt {:.2}  total {:.2}",
        train.len(),
        frames as f64 / n,
        1e3 * t_fwd / n,
        1e3 * t_bwd / n,
        1e3 * t_merge / n,
        1e3 * t_opt / n,
        1e3 * (t_fwd + t_bwd + t_merge + t_opt) / n
    );
}

fn env_or(name: &str, default: &str) -> String {
    std::env::var(name).unwrap_or_else(|_| default.to_string())
}

#[test]
#[ignore]
fn probe_schedule() {
    let base = RunConfig::default()
        .with_overrides(&[
            format!("training.epochs={}", env_or("PROBE_EPOCHS", "10")),
            format!("training.batch_size={}", env_or("PROBE_BATCH", "8")),
            format!("training.warmup_steps={}", env_or("PROBE_WARMUP", "150")),
            format!("training.lr_scale={}", env_or("PROBE_SCALE", "1.0")),
        ])
        .unwrap();
    let plan = base.block_plan().unwrap();
    let (_, _, test) = corpus_splits(&base).unwrap();
    let refs: Vec<LabeledTranscript> = test.iter().map(reference_transcript).collect();
    let search = base.search_config();
    let sys = SystemKind::parse(&env_or("PROBE_SYSTEM", "multi_task")).unwrap();

    let cfg = sys.run_config(&base);
    let t0 = Instant::now();
    let outcome = train_from_config(&cfg).unwrap();
    println!("== {} trained in {:?}", sys.name(), t0.elapsed());
    for e in &outcome.log.epochs {
        println!(
            "   epoch {}: train {:.3} dev {:.3} dev_dr_wer {:.4}",
            e.epoch, e.train_loss, e.dev_loss, e.dev_dr_wer
        );
    }
    for greedy in [true, false] {
        let t1 = Instant::now();
        let hyps = run_jobs(1, &test, |utt| {
            let b = if greedy {
                greedy_search(&outcome.model, &plan, &utt.features, None, &search)?
            } else {
                beam_search(&outcome.model, &plan, &utt.features, None, &search)?
                    .nbest
                    .remove(0)
            };
            Ok(hypothesis_transcript(&outcome.model, &utt.id, &b.tokens, &b.labels))
        })
        .unwrap();
        let (f1, p, r) = aligned_f1(&hyps, &refs).unwrap();
        println!(
            "   {} decode {:?}; DR-WER {:.4}  F1 {:.4} (P {:.4} R {:.4})",
            if greedy { "greedy" } else { "beam" },
            t1.elapsed(),
            dr_wer(&hyps, &refs).unwrap(),
            f1,
            p,
            r
        );
    }
}

#[test]
#[ignore]
fn probe_reference_learning() {
    let base = RunConfig::default();
    let plan = base.block_plan().unwrap();
    let (_, _, test) = corpus_splits(&base).unwrap();
    let refs: Vec<LabeledTranscript> = test.iter().map(reference_transcript).collect();
    let search = base.search_config();

    let mut decoded: Vec<(SystemKind, Vec<LabeledTranscript>)> = Vec::new();
    for sys in [SystemKind::MultiTask, SystemKind::AsrOnly, SystemKind::NoTokenDependency] {
        let cfg = sys.run_config(&base);
        let t0 = Instant::now();
        let outcome = train_from_config(&cfg).unwrap();
        println!("== {} trained in {:?}", sys.name(), t0.elapsed());
        for e in &outcome.log.epochs {
            println!(
                "   epoch {}: train {:.3} dev {:.3} dev_dr_wer {:.4}",
                e.epoch, e.train_loss, e.dev_loss, e.dev_dr_wer
            );
        }
        let t1 = Instant::now();
        let hyps = run_jobs(1, &test, |utt| {
            let out = beam_search(&outcome.model, &plan, &utt.features, None, &search)?;
            let b = out.best();
            Ok(hypothesis_transcript(&outcome.model, &utt.id, &b.tokens, &b.labels))
        })
        .unwrap();
        let (f1, p, r) = aligned_f1(&hyps, &refs).unwrap();
        println!(
            "   test beam decode {:?}; DR-WER {:.4}  F1 {:.4} (P {:.4} R {:.4})",
            t1.elapsed(),
            dr_wer(&hyps, &refs).unwrap(),
            f1,
            p,
            r
        );
        decoded.push((sys, hyps));
    }
}

//! Hot-path benchmarks: blockwise encoding, CTC loss, one training
//! step, beam decode, and transcript alignment.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dysfl_core::corpus::generate_corpus;
use dysfl_core::ctc::ctc_loss_on_tape;
use dysfl_core::nn::tape::Tape;
use dysfl_core::tagging::align;
use dysfl_core::training::corpus_splits;
use dysfl_core::{beam_search, JointModel, RunConfig};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Small-but-realistic setup shared by the benches: reference model
/// dims on short utterances.
fn bench_setup() -> (RunConfig, JointModel, Vec<dysfl_core::LabeledUtterance>) {
    let cfg = RunConfig::default()
        .with_overrides(&[
            "corpus.train_utterances=8".into(),
            "corpus.dev_utterances=2".into(),
            "corpus.test_utterances=2".into(),
            "search.max_tokens=64".into(),
        ])
        .unwrap();
    let (train, _, _) = corpus_splits(&cfg).unwrap();
    let vocab = cfg.synthesis_spec().vocabulary().unwrap();
    let model = JointModel::new(cfg.model_config(), &vocab, 1).unwrap();
    (cfg, model, train)
}

fn bench_encoder_block(c: &mut Criterion) {
    let (cfg, model, utts) = bench_setup();
    let plan = cfg.block_plan().unwrap();
    let utt = &utts[0];
    c.bench_function("encode_utterance_blockwise", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            black_box(
                model
                    .encode(&mut tape, &plan, black_box(&utt.features))
                    .unwrap(),
            );
        })
    });
}

fn bench_ctc_loss(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(3);
    let (t_rows, v, y_len) = (40, 20, 12);
    let logits: Vec<f64> = (0..t_rows * v).map(|_| rng.random_range(-2.0..2.0)).collect();
    let targets: Vec<usize> = (0..y_len).map(|_| rng.random_range(1..v)).collect();
    c.bench_function("ctc_loss_40x20", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(t_rows, v, logits.clone());
            let lp = tape.log_softmax(x);
            black_box(ctc_loss_on_tape(&mut tape, lp, black_box(&targets), 0).unwrap());
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (cfg, model, utts) = bench_setup();
    let plan = cfg.block_plan().unwrap();
    let utt = &utts[0];
    c.bench_function("loss_forward_backward_one_utt", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (loss, _) = model.loss_on_tape(&mut tape, &plan, black_box(utt)).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn bench_beam_decode(c: &mut Criterion) {
    let (cfg, model, utts) = bench_setup();
    let plan = cfg.block_plan().unwrap();
    let search = cfg.search_config();
    let utt = &utts[0];
    c.bench_function("beam5_decode_one_utt", |b| {
        b.iter(|| {
            black_box(
                beam_search(&model, &plan, black_box(&utt.features), None, &search).unwrap(),
            )
        })
    });
}

fn bench_align(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mut spec = cfg.synthesis_spec();
    spec.seed = 9;
    let utts = generate_corpus(&spec, 50).unwrap();
    let pairs: Vec<(Vec<String>, Vec<String>)> = utts
        .windows(2)
        .map(|w| (w[0].tokens.clone(), w[1].tokens.clone()))
        .collect();
    c.bench_function("align_50_transcript_pairs", |b| {
        b.iter(|| {
            for (a, t) in &pairs {
                black_box(align(black_box(a), black_box(t)));
            }
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_encoder_block, bench_ctc_loss, bench_train_step, bench_beam_decode, bench_align
}
criterion_main!(benches);

//! Pipeline-baseline incremental tagger: a token-only encoder with a
//! per-position binary head, trained on every prefix of the training
//! utterances. Causality holds by construction — the model is only
//! ever shown the prefix — while labels for earlier positions may
//! revise as the prefix grows, matching incremental-tagger behavior.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledUtterance, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::layers::{
    add_positional, apply_layer_norm, apply_linear, apply_self_attn_layer,
    register_encoder_layer, register_layer_norm, register_linear,
};
use crate::nn::params::{noam_lr, Adam, ParameterStore};
use crate::nn::tape::{Tape, TensorId};
use crate::search::pipeline_label_times;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            model_dim: 32,
            n_heads: 2,
            ff_dim: 64,
            layers: 2,
        }
    }
}

impl TaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("tagger dimensions must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

pub struct PrefixTagger {
    pub cfg: TaggerConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore,
}

impl PrefixTagger {
    pub fn new(cfg: TaggerConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.model_dim;
        store.add_embedding("tag.embed", vocab.size(), d, &mut rng);
        for l in 0..cfg.layers {
            register_encoder_layer(&mut store, &format!("tag.l{l}"), d, cfg.ff_dim, &mut rng);
        }
        register_layer_norm(&mut store, "tag.ln_f", d);
        register_linear(&mut store, "tag.out", d, 2, &mut rng);
        Ok(PrefixTagger {
            cfg,
            vocab: vocab.clone(),
            store,
        })
    }

    /// Binary logits, one row per prefix token. Attention is unmasked
    /// within the prefix (the prefix boundary is the causal cut).
    pub fn prefix_logits(&self, tape: &mut Tape, prefix: &[usize]) -> Result<TensorId> {
        if prefix.is_empty() {
            return Err(Error::Argument("cannot tag an empty prefix".into()));
        }
        let v = self.vocab.size();
        if let Some(&bad) = prefix.iter().find(|&&t| t >= v) {
            return Err(Error::Argument(format!(
                "token id {bad} outside tagger vocabulary of {v}"
            )));
        }
        let emb = tape.param(&self.store, "tag.embed");
        let x = tape.embed(emb, prefix);
        let x = tape.scale(x, (self.cfg.model_dim as f64).sqrt());
        let mut h = add_positional(tape, x, 0);
        for l in 0..self.cfg.layers {
            h = apply_self_attn_layer(
                tape,
                &self.store,
                &format!("tag.l{l}"),
                h,
                self.cfg.n_heads,
                None,
            );
        }
        let s = apply_layer_norm(tape, &self.store, "tag.ln_f", h);
        Ok(apply_linear(tape, &self.store, "tag.out", s))
    }

    /// One label per prefix token (argmax; ties toward fluent).
    pub fn tag_prefix(&self, prefix: &[usize]) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let logits = self.prefix_logits(&mut tape, prefix)?;
        let v = tape.value(logits);
        Ok((0..prefix.len())
            .map(|i| u8::from(v[i * 2 + 1] > v[i * 2]))
            .collect())
    }

    /// Summed NLL of gold labels over all covered positions.
    pub fn prefix_nll(&self, tape: &mut Tape, prefix: &[usize], labels: &[u8]) -> Result<TensorId> {
        if prefix.len() != labels.len() {
            return Err(Error::Argument(format!(
                "prefix of {} tokens with {} labels",
                prefix.len(),
                labels.len()
            )));
        }
        let logits = self.prefix_logits(tape, prefix)?;
        let lp = tape.log_softmax(logits);
        let mut acc: Option<TensorId> = None;
        for (j, &d) in labels.iter().enumerate() {
            let p = tape.pick(lp, j, d as usize);
            acc = Some(match acc {
                Some(a) => tape.add(a, p),
                None => p,
            });
        }
        Ok(tape.scale(acc.expect("nll of empty prefix"), -1.0))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "prefix_tagger",
            "config": self.cfg,
            "vocab": {
                "tokens": (0..self.vocab.size()).map(|i| self.vocab.token(i)).collect::<Vec<_>>(),
                "enriched": self.vocab.is_enriched(),
            },
        });
        save_checkpoint(path, &meta, &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, store) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("prefix_tagger") {
            return Err(Error::format_anon("checkpoint is not a prefix tagger"));
        }
        let cfg: TaggerConfig = serde_json::from_value(
            meta.get("config")
                .ok_or_else(|| Error::format_anon("tagger checkpoint missing config"))?
                .clone(),
        )?;
        cfg.validate()?;
        let vmeta = meta
            .get("vocab")
            .ok_or_else(|| Error::format_anon("tagger checkpoint missing vocab"))?;
        let tokens: Vec<String> = serde_json::from_value(
            vmeta
                .get("tokens")
                .ok_or_else(|| Error::format_anon("tagger checkpoint missing vocab tokens"))?
                .clone(),
        )?;
        let enriched = vmeta.get("enriched").and_then(|e| e.as_bool()).unwrap_or(false);
        let vocab = Vocabulary::from_token_list(tokens, enriched)?;
        Ok(PrefixTagger { cfg, vocab, store })
    }
}

/// Map a labeled corpus to tagger training pairs (token ids, labels)
/// under the shared ASR tokenization.
pub fn tagger_training_data(
    utts: &[LabeledUtterance],
    vocab: &Vocabulary,
) -> Vec<(Vec<usize>, Vec<u8>)> {
    utts.iter()
        .map(|u| (u.token_ids(vocab), u.labels.clone()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TaggerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub seed: u64,
}

impl Default for TaggerTrainConfig {
    fn default() -> Self {
        TaggerTrainConfig {
            epochs: 5,
            batch_size: 32,
            warmup: 200,
            lr_scale: 1.0,
            seed: 13,
        }
    }
}

/// Train on every prefix (length 1..=L) of every utterance, with gold
/// labels for the covered positions.
pub fn train_tagger(
    data: &[(Vec<usize>, Vec<u8>)],
    vocab: &Vocabulary,
    cfg: &TaggerConfig,
    tc: &TaggerTrainConfig,
) -> Result<PrefixTagger> {
    if data.is_empty() {
        return Err(Error::Training("tagger training needs at least one utterance".into()));
    }
    let mut tagger = PrefixTagger::new(cfg.clone(), vocab, tc.seed)?;
    // Materialize the prefix sample index (utterance, prefix length).
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (u, (toks, labels)) in data.iter().enumerate() {
        if toks.len() != labels.len() {
            return Err(Error::Training(format!(
                "utterance {u}: {} tokens vs {} labels",
                toks.len(),
                labels.len()
            )));
        }
        for l in 1..=toks.len() {
            samples.push((u, l));
        }
    }
    let mut opt = Adam::transformer_default();
    for _epoch in 0..tc.epochs {
        for batch in samples.chunks(tc.batch_size.max(1)) {
            tagger.store.zero_grad();
            for &(u, l) in batch {
                let (toks, labels) = &data[u];
                let mut tape = Tape::new();
                let nll = tagger.prefix_nll(&mut tape, &toks[..l], &labels[..l])?;
                let grads = tape.backward(nll)?;
                tagger.store.accumulate(&grads);
            }
            let lr = tc.lr_scale * noam_lr(opt.steps_taken() + 1, cfg.model_dim, tc.warmup, 1.0);
            opt.step(&mut tagger.store, lr)?;
        }
    }
    Ok(tagger)
}

/// Fixed-lookahead pipeline labeling of an ASR token stream: token i is
/// labeled from the prefix `y_≤i+k` once token i+k exists (the final k
/// tokens resolve on the full stream at utterance end). Returns labels
/// and their simulated emission times.
pub fn pipeline_decode(
    tagger: &PrefixTagger,
    tokens: &[usize],
    token_times_ms: &[f64],
    end_ms: f64,
    lookahead: usize,
    tagger_cost_ms: f64,
) -> Result<(Vec<u8>, Vec<f64>)> {
    if tokens.len() != token_times_ms.len() {
        return Err(Error::Argument(format!(
            "{} tokens with {} emission times",
            tokens.len(),
            token_times_ms.len()
        )));
    }
    if tokens.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let n = tokens.len();
    let mut labels = vec![0u8; n];
    // One forward per distinct prefix actually consulted.
    let mut cache: Vec<Option<Vec<u8>>> = vec![None; n];
    for i in 0..n {
        let j = (i + lookahead).min(n - 1);
        if cache[j].is_none() {
            cache[j] = Some(tagger.tag_prefix(&tokens[..=j])?);
        }
        labels[i] = cache[j].as_ref().unwrap()[i];
    }
    let times = pipeline_label_times(token_times_ms, end_ms, lookahead, tagger_cost_ms);
    Ok((labels, times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Corpus with a planted separable rule: the filler token is always
    /// disfluent, every other token always fluent.
    fn planted(seed: u64, n: usize) -> (Vocabulary, Vec<(Vec<usize>, Vec<u8>)>) {
        let vocab = Vocabulary::base(["a", "b", "c", "uh"].map(String::from)).unwrap();
        let filler = vocab.id("uh").unwrap();
        let others: Vec<usize> = vocab.regular_ids().filter(|&t| t != filler).collect();
        let mut rng = StdRng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| {
                let len = rng.random_range(3..9);
                let mut toks = Vec::with_capacity(len);
                let mut labels = Vec::with_capacity(len);
                for _ in 0..len {
                    if rng.random_range(0..4) == 0 {
                        toks.push(filler);
                        labels.push(1);
                    } else {
                        toks.push(others[rng.random_range(0..others.len())]);
                        labels.push(0);
                    }
                }
                (toks, labels)
            })
            .collect();
        (vocab, data)
    }

    #[test]
    fn empty_prefix_rejected() {
        let (vocab, _) = planted(1, 1);
        let tagger = PrefixTagger::new(TaggerConfig::default(), &vocab, 2).unwrap();
        assert!(matches!(tagger.tag_prefix(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn planted_rule_learned_perfectly() {
        let (vocab, train) = planted(3, 40);
        let cfg = TaggerConfig {
            model_dim: 16,
            n_heads: 2,
            ff_dim: 32,
            layers: 1,
        };
        let tc = TaggerTrainConfig {
            epochs: 3,
            batch_size: 32,
            warmup: 30,
            lr_scale: 1.0,
            seed: 4,
        };
        let tagger = train_tagger(&train, &vocab, &cfg, &tc).unwrap();
        let (_, held_out) = planted(99, 10);
        let mut wrong = 0;
        let mut total = 0;
        for (toks, labels) in &held_out {
            let pred = tagger.tag_prefix(toks).unwrap();
            wrong += pred.iter().zip(labels).filter(|(p, g)| p != g).count();
            total += labels.len();
        }
        assert_eq!(wrong, 0, "{wrong}/{total} planted-rule labels missed");
    }

    #[test]
    fn full_prefix_equals_unbounded_lookahead() {
        let (vocab, data) = planted(7, 3);
        let tagger = PrefixTagger::new(TaggerConfig::default(), &vocab, 8).unwrap();
        let (toks, _) = &data[0];
        let times: Vec<f64> = (0..toks.len()).map(|i| 100.0 * (i + 1) as f64).collect();
        let end = 100.0 * (toks.len() + 1) as f64;
        let (labels, _) =
            pipeline_decode(&tagger, toks, &times, end, toks.len() + 5, 0.0).unwrap();
        assert_eq!(labels, tagger.tag_prefix(toks).unwrap());
    }

    #[test]
    fn labels_depend_only_on_the_consulted_prefix() {
        let (vocab, data) = planted(11, 2);
        let tagger = PrefixTagger::new(TaggerConfig::default(), &vocab, 8).unwrap();
        let (a, _) = &data[0];
        // Same first 4 tokens, divergent tail.
        let mut b = a[..4.min(a.len())].to_vec();
        b.extend_from_slice(&[4, 4, 4]);
        let shared = 4.min(a.len());
        let k = 1;
        let times_a: Vec<f64> = (0..a.len()).map(|i| 10.0 * i as f64).collect();
        let times_b: Vec<f64> = (0..b.len()).map(|i| 10.0 * i as f64).collect();
        let (la, _) = pipeline_decode(&tagger, a, &times_a, 1e4, k, 0.0).unwrap();
        let (lb, _) = pipeline_decode(&tagger, &b, &times_b, 1e4, k, 0.0).unwrap();
        // Token i consults prefix ≤ i+k, so agreement is guaranteed
        // wherever i+k lies inside the shared prefix for both streams.
        for i in 0..shared.saturating_sub(k) {
            assert_eq!(la[i], lb[i], "token {i} saw only the shared prefix");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tagger.ckpt");
        let (vocab, data) = planted(5, 2);
        let tagger = PrefixTagger::new(TaggerConfig::default(), &vocab, 6).unwrap();
        tagger.save(&path).unwrap();
        let back = PrefixTagger::load(&path).unwrap();
        let (toks, _) = &data[0];
        assert_eq!(tagger.tag_prefix(toks).unwrap(), back.tag_prefix(toks).unwrap());
    }
}

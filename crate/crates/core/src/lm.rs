//! Shallow-fusion language models: a tiny decoder-only Transformer
//! over the base vocabulary V (standard) or the tag-extended V′
//! (transcript-enriched). The enriched variant is what makes fusion
//! with the enriched joint model vocabulary-compatible; mixing the two
//! vocabularies is rejected at configuration time by the search.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledUtterance, Vocabulary, EOS, SOS};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::layers::{
    add_positional, apply_layer_norm, apply_linear, apply_self_attn_layer, causal_mask,
    register_encoder_layer, register_layer_norm, register_linear,
};
use crate::nn::params::{noam_lr, Adam, ParameterStore};
use crate::nn::tape::{Tape, TensorId};
use crate::search::PrefixScorer;
use crate::tagging::{enrich, Enriched};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            model_dim: 32,
            n_heads: 2,
            ff_dim: 64,
            layers: 2,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
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

/// Decoder-only causal LM over the vocabulary it was built with.
pub struct CausalLM {
    pub cfg: LmConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore,
}

impl CausalLM {
    pub fn new(cfg: LmConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let v = vocab.size();
        let d = cfg.model_dim;
        store.add_embedding("lm.embed", v, d, &mut rng);
        for l in 0..cfg.layers {
            register_encoder_layer(&mut store, &format!("lm.l{l}"), d, cfg.ff_dim, &mut rng);
        }
        register_layer_norm(&mut store, "lm.ln_f", d);
        register_linear(&mut store, "lm.out", d, v, &mut rng);
        Ok(CausalLM {
            cfg,
            vocab: vocab.clone(),
            store,
        })
    }

    /// Hidden states for a `<sos>`-prefixed history; row j predicts
    /// position j of the sequence.
    fn states(&self, tape: &mut Tape, ids_with_sos: &[usize]) -> Result<TensorId> {
        let v = self.vocab.size();
        if ids_with_sos.is_empty() || ids_with_sos[0] != SOS {
            return Err(Error::Argument("LM history must begin with <sos>".into()));
        }
        if let Some(&bad) = ids_with_sos.iter().find(|&&t| t >= v) {
            return Err(Error::Argument(format!(
                "token id {bad} outside LM vocabulary of {v}"
            )));
        }
        let n = ids_with_sos.len();
        let emb = tape.param(&self.store, "lm.embed");
        let x = tape.embed(emb, ids_with_sos);
        let x = tape.scale(x, (self.cfg.model_dim as f64).sqrt());
        let mut h = add_positional(tape, x, 0);
        let mask = causal_mask(tape, n);
        for l in 0..self.cfg.layers {
            h = apply_self_attn_layer(
                tape,
                &self.store,
                &format!("lm.l{l}"),
                h,
                self.cfg.n_heads,
                Some(mask),
            );
        }
        Ok(apply_layer_norm(tape, &self.store, "lm.ln_f", h))
    }

    /// Log-probability rows for every position of the history.
    pub fn log_prob_rows(&self, tape: &mut Tape, ids_with_sos: &[usize]) -> Result<TensorId> {
        let s = self.states(tape, ids_with_sos)?;
        let logits = apply_linear(tape, &self.store, "lm.out", s);
        Ok(tape.log_softmax(logits))
    }

    /// Summed negative log-likelihood of `seq` (`<eos>`-terminated)
    /// on the tape, plus the number of predicted positions.
    pub fn sequence_nll(&self, tape: &mut Tape, seq: &[usize]) -> Result<(TensorId, usize)> {
        let mut hist = vec![SOS];
        hist.extend(seq);
        let lp = self.log_prob_rows(tape, &hist)?;
        let mut acc: Option<TensorId> = None;
        for (j, &t) in seq.iter().chain(std::iter::once(&EOS)).enumerate() {
            let p = tape.pick(lp, j, t);
            acc = Some(match acc {
                Some(a) => tape.add(a, p),
                None => p,
            });
        }
        let nll = tape.scale(acc.expect("nll of empty history"), -1.0);
        Ok((nll, seq.len() + 1))
    }

    /// Greedy continuation of a prefix (ids), stopping at `<eos>` or
    /// `max_new` symbols — the memorization probe.
    pub fn greedy_continue(&self, prefix: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut seq = prefix.to_vec();
        for _ in 0..max_new {
            let lp = self.next_log_probs(&seq);
            let mut best = 0;
            for (i, &p) in lp.iter().enumerate() {
                if p > lp[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            seq.push(best);
        }
        Ok(seq[prefix.len()..].to_vec())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "causal_lm",
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
        if meta.get("kind").and_then(|k| k.as_str()) != Some("causal_lm") {
            return Err(Error::format_anon("checkpoint is not a causal LM"));
        }
        let cfg: LmConfig = serde_json::from_value(
            meta.get("config")
                .ok_or_else(|| Error::format_anon("LM checkpoint missing config"))?
                .clone(),
        )?;
        cfg.validate()?;
        let vmeta = meta
            .get("vocab")
            .ok_or_else(|| Error::format_anon("LM checkpoint missing vocab"))?;
        let tokens: Vec<String> = serde_json::from_value(
            vmeta
                .get("tokens")
                .ok_or_else(|| Error::format_anon("LM checkpoint missing vocab tokens"))?
                .clone(),
        )?;
        let enriched = vmeta.get("enriched").and_then(|e| e.as_bool()).unwrap_or(false);
        let vocab = Vocabulary::from_token_list(tokens, enriched)?;
        Ok(CausalLM { cfg, vocab, store })
    }
}

impl PrefixScorer for CausalLM {
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut hist = vec![SOS];
        hist.extend(prefix);
        let lp = self
            .log_prob_rows(&mut tape, &hist)
            .expect("prefix scoring on ids the search validated");
        let n = hist.len();
        let v = self.vocab.size();
        tape.value(lp)[(n - 1) * v..n * v].to_vec()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }
}

/// Map a labeled corpus to LM training id-sequences in `vocab`:
/// plain transcripts for a base vocabulary, tag-wrapped transcripts
/// ("disfluency tags added in") for an enriched one.
pub fn lm_training_sequences(
    utts: &[LabeledUtterance],
    vocab: &Vocabulary,
) -> Result<Vec<Vec<usize>>> {
    utts.iter()
        .map(|u| {
            if vocab.is_enriched() {
                let seq = enrich(&u.tokens, &u.labels)?;
                let open = vocab.open_tag().expect("enriched vocab has tags");
                let close = vocab.close_tag().expect("enriched vocab has tags");
                Ok(seq
                    .iter()
                    .map(|e| match e {
                        Enriched::Open => open,
                        Enriched::Close => close,
                        Enriched::Token(t) => vocab.id_or_unk(t),
                    })
                    .collect())
            } else {
                Ok(u.tokens.iter().map(|t| vocab.id_or_unk(t)).collect())
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 10,
            batch_size: 16,
            warmup: 200,
            lr_scale: 1.0,
            seed: 11,
        }
    }
}

/// Train a causal LM on id-sequences; returns the model and its final
/// training perplexity.
pub fn train_lm(
    sequences: &[Vec<usize>],
    vocab: &Vocabulary,
    cfg: &LmConfig,
    tc: &LmTrainConfig,
) -> Result<(CausalLM, f64)> {
    if sequences.is_empty() {
        return Err(Error::Training("LM training needs at least one sequence".into()));
    }
    let mut lm = CausalLM::new(cfg.clone(), vocab, tc.seed)?;
    let mut opt = Adam::transformer_default();
    let mut ppl = f64::INFINITY;
    for _epoch in 0..tc.epochs {
        let mut nll_sum = 0.0;
        let mut count = 0usize;
        for batch in sequences.chunks(tc.batch_size.max(1)) {
            lm.store.zero_grad();
            let mut batch_loss = 0.0;
            for seq in batch {
                let mut tape = Tape::new();
                let (nll, n) = lm.sequence_nll(&mut tape, seq)?;
                let grads = tape.backward(nll)?;
                lm.store.accumulate(&grads);
                batch_loss += tape.value(nll)[0];
                count += n;
            }
            nll_sum += batch_loss;
            let lr = tc.lr_scale * noam_lr(opt.steps_taken() + 1, cfg.model_dim, tc.warmup, 1.0);
            opt.step(&mut lm.store, lr)?;
        }
        ppl = (nll_sum / count as f64).exp();
    }
    Ok((lm, ppl))
}

/// Per-token perplexity of held-out id-sequences.
pub fn perplexity(lm: &CausalLM, sequences: &[Vec<usize>]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Eval("perplexity of an empty set".into()));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        let mut tape = Tape::new();
        let (t, n) = lm.sequence_nll(&mut tape, seq)?;
        nll += tape.value(t)[0];
        count += n;
    }
    Ok((nll / count as f64).exp())
}

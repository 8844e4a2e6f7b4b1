//! Joint recognition/disfluency model: Transformer decoder over the
//! blockwise encoder, with summed token+disfluency input embeddings,
//! a token head, a disfluency head with the token-dependency
//! mechanism, an auxiliary CTC head, and the three training
//! objectives.
//!
//! Output conventions (0-based target position `j`, targets = tokens
//! plus `<eos>`): decoder input `j` is `<sos>` for `j=0` else token
//! `j−1`; state row `j` predicts target `j`. The disfluency head reads
//! the state that produced the token distribution together with the
//! embedding of the token it predicted (Eq.-(3)-style coupling, shared
//! embedding table).

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledUtterance, Vocabulary, BLANK, EOS, SOS};
use crate::ctc::{ctc_loss_on_tape, CtcOutcome};
use crate::encoder::{encode_full, register_encoder, BlockPlan, EncodedFull, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::layers::{
    add_positional, apply_decoder_layer, apply_layer_norm, apply_linear, causal_mask,
    register_decoder_layer, register_layer_norm, register_linear,
};
use crate::nn::params::ParameterStore;
use crate::nn::tape::{Tape, TensorId};
use crate::tagging::{enrich, remove_disfluencies, Enriched};

/// Row of the disfluency input table used at the `<sos>` position,
/// where no label has been emitted yet.
pub const D_NONE_YET: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Token head + binary disfluency head (Eq. 2).
    MultiTask,
    /// Single head over the extended vocabulary V′ with span tags (Eq. 1).
    TranscriptEnriched,
    /// Single head trained directly on disfluency-removed transcripts.
    EndToEndRemoval,
}

impl ObjectiveMode {
    pub fn tag(&self) -> &'static str {
        match self {
            ObjectiveMode::MultiTask => "multi_task",
            ObjectiveMode::TranscriptEnriched => "transcript_enriched",
            ObjectiveMode::EndToEndRemoval => "end_to_end_removal",
        }
    }
}

/// Mechanism toggles mirroring the ablation rows of the paper's
/// comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Disfluency head sees E(y_i) next to s.
    pub token_dependency: bool,
    /// Input embeddings sum a label embedding over the history.
    pub input_disfluency: bool,
    /// Token head sees the label embedding of the current position
    /// (predict d first, then y | d). Mutually exclusive with
    /// `token_dependency`.
    pub disfluency_dependency: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            token_dependency: true,
            input_disfluency: true,
            disfluency_dependency: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ObjectiveMode,
    /// Weight α of the disfluency term in Eq. (2).
    pub alpha: f64,
    /// Interpolation λ: total = (1−λ)·attention + λ·ctc.
    pub ctc_weight: f64,
    pub ablations: Ablations,
    pub feat_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ObjectiveMode::MultiTask,
            alpha: 1.0,
            ctc_weight: 0.3,
            ablations: Ablations::default(),
            feat_dim: 16,
            model_dim: 64,
            n_heads: 4,
            ff_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be ≥ 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!(
                "ctc_weight {} outside [0,1]",
                self.ctc_weight
            )));
        }
        if self.ablations.disfluency_dependency && self.ablations.token_dependency {
            return Err(Error::Config(
                "disfluency_dependency excludes token_dependency".into(),
            ));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.n_heads
            )));
        }
        if self.mode != ObjectiveMode::MultiTask
            && (self.ablations.disfluency_dependency
                || !self.ablations.input_disfluency
                || !self.ablations.token_dependency)
        {
            return Err(Error::Config(
                "ablation flags only apply to the multi_task objective".into(),
            ));
        }
        Ok(())
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            feat_dim: self.feat_dim,
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            layers: self.enc_layers,
        }
    }

    fn uses_d_input_table(&self) -> bool {
        self.mode == ObjectiveMode::MultiTask
            && (self.ablations.input_disfluency || self.ablations.disfluency_dependency)
    }

    fn has_disfluency_head(&self) -> bool {
        self.mode == ObjectiveMode::MultiTask && self.alpha > 0.0
    }
}

/// A configured model: parameters plus the vocabulary its heads are
/// defined over (V, or V′ in enriched mode).
pub struct JointModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore,
}

/// Decoder forward over a full prefix.
pub struct DecoderStates {
    /// (positions × model_dim); row j produced the distribution for
    /// target position j.
    pub states: TensorId,
    /// Cross-attention probabilities of the last decoder layer, one
    /// (positions × enc_rows) tensor per head.
    pub cross_attn: Vec<TensorId>,
}

/// Scalar components of one utterance loss. `total` satisfies
/// `(1−λ)·(token_nll + α·disfl_nll) + λ·ctc` exactly (when CTC ran).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub token_nll: f64,
    pub disfl_nll: f64,
    pub ctc: f64,
    pub ctc_skipped: bool,
}

impl JointModel {
    /// Build a fresh model. `base_vocab` must be a base (untagged)
    /// vocabulary; enriched mode derives V′ from it internally.
    pub fn new(cfg: ModelConfig, base_vocab: &Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if base_vocab.is_enriched() {
            return Err(Error::Argument(
                "pass the base vocabulary; V′ is derived for enriched mode".into(),
            ));
        }
        let vocab = match cfg.mode {
            ObjectiveMode::TranscriptEnriched => base_vocab.enriched_version(),
            _ => base_vocab.clone(),
        };
        let mut store = ParameterStore::new();
        let mut rng = StdRng::seed_from_u64(seed);
        register_encoder(&mut store, &cfg.encoder_config(), &mut rng);
        if cfg.ctc_weight > 0.0 {
            register_linear(&mut store, "ctc.out", cfg.model_dim, vocab.size(), &mut rng);
        }
        store.add_embedding("dec.embed", vocab.size(), cfg.model_dim, &mut rng);
        if cfg.uses_d_input_table() {
            store.add_embedding("dec.dembed", 3, cfg.model_dim, &mut rng);
        }
        for l in 0..cfg.dec_layers {
            register_decoder_layer(&mut store, &format!("dec.l{l}"), cfg.model_dim, cfg.ff_dim, &mut rng);
        }
        register_layer_norm(&mut store, "dec.ln_f", cfg.model_dim);
        let out_in = if cfg.ablations.disfluency_dependency {
            2 * cfg.model_dim
        } else {
            cfg.model_dim
        };
        register_linear(&mut store, "dec.out", out_in, vocab.size(), &mut rng);
        if cfg.has_disfluency_head() {
            let dhead_in = if cfg.ablations.token_dependency {
                2 * cfg.model_dim
            } else {
                cfg.model_dim
            };
            register_linear(&mut store, "dec.dhead", dhead_in, 2, &mut rng);
        }
        Ok(JointModel { cfg, vocab, store })
    }

    pub fn encode(&self, tape: &mut Tape, plan: &BlockPlan, feats: &crate::corpus::AcousticFeatures) -> Result<EncodedFull> {
        encode_full(tape, &self.store, &self.cfg.encoder_config(), plan, feats)
    }

    /// Log-probabilities of the CTC head over encoder rows.
    pub fn ctc_log_probs(&self, tape: &mut Tape, enc_out: TensorId) -> Result<TensorId> {
        if self.cfg.ctc_weight <= 0.0 {
            return Err(Error::Argument("ctc head disabled (ctc_weight=0)".into()));
        }
        let logits = apply_linear(tape, &self.store, "ctc.out", enc_out);
        Ok(tape.log_softmax(logits))
    }

    /// Decoder stack over history `[<sos>, y_1 … y_n]`. `d_hist`, when
    /// the model uses disfluency inputs, aligns with the tokens
    /// (`d_hist[0]` belongs to `<sos>` and is replaced by the
    /// "none-yet" embedding row internally).
    pub fn decode_states(
        &self,
        tape: &mut Tape,
        enc_out: TensorId,
        tokens_with_sos: &[usize],
        d_hist: Option<&[u8]>,
    ) -> Result<DecoderStates> {
        let v = self.vocab.size();
        if tokens_with_sos.is_empty() || tokens_with_sos[0] != SOS {
            return Err(Error::Argument("decoder history must begin with <sos>".into()));
        }
        if let Some(&bad) = tokens_with_sos.iter().find(|&&t| t >= v) {
            return Err(Error::Argument(format!("token id {bad} outside vocabulary of {v}")));
        }
        let n = tokens_with_sos.len();
        let emb = tape.param(&self.store, "dec.embed");
        let x = tape.embed(emb, tokens_with_sos);
        let mut x = tape.scale(x, (self.cfg.model_dim as f64).sqrt());
        if self.cfg.uses_d_input_table() && self.cfg.ablations.input_disfluency {
            let d_hist = d_hist.ok_or_else(|| {
                Error::Argument("multi_task decoding requires the disfluency history".into())
            })?;
            if d_hist.len() != n {
                return Err(Error::Argument(format!(
                    "disfluency history {} != token history {n}",
                    d_hist.len()
                )));
            }
            let rows: Vec<usize> = std::iter::once(D_NONE_YET)
                .chain(d_hist[1..].iter().map(|&l| l as usize))
                .collect();
            let dt = tape.param(&self.store, "dec.dembed");
            let demb = tape.embed(dt, &rows);
            x = tape.add(x, demb);
        }
        let mut h = add_positional(tape, x, 0);
        let mask = causal_mask(tape, n);
        let mut cross_attn = Vec::new();
        for l in 0..self.cfg.dec_layers {
            let (out, attn) = apply_decoder_layer(
                tape,
                &self.store,
                &format!("dec.l{l}"),
                h,
                enc_out,
                self.cfg.n_heads,
                mask,
            );
            h = out;
            cross_attn = attn;
        }
        let states = apply_layer_norm(tape, &self.store, "dec.ln_f", h);
        Ok(DecoderStates { states, cross_attn })
    }

    /// Token logits for every state row. In the disfluency-dependency
    /// variant the current position's label embedding is concatenated
    /// in front of the state (`d_current[j]` = label at position j).
    pub fn token_logits(
        &self,
        tape: &mut Tape,
        states: TensorId,
        d_current: Option<&[u8]>,
    ) -> Result<TensorId> {
        let input = if self.cfg.ablations.disfluency_dependency {
            let d = d_current.ok_or_else(|| {
                Error::Argument("disfluency_dependency needs current labels".into())
            })?;
            if d.len() != tape.shape(states).0 {
                return Err(Error::Argument("d_current length mismatch".into()));
            }
            let rows: Vec<usize> = d.iter().map(|&l| l as usize).collect();
            let dt = tape.param(&self.store, "dec.dembed");
            let demb = tape.embed(dt, &rows);
            tape.concat_cols(&[demb, states])
        } else {
            states
        };
        Ok(apply_linear(tape, &self.store, "dec.out", input))
    }

    /// Disfluency logits for every state row, given the token each row
    /// predicted. Usage error outside multi-task mode.
    pub fn disfl_logits(
        &self,
        tape: &mut Tape,
        states: TensorId,
        predicted_tokens: &[usize],
    ) -> Result<TensorId> {
        if !self.cfg.has_disfluency_head() {
            return Err(Error::Argument(
                "disfluency head absent (mode is not multi_task or α=0)".into(),
            ));
        }
        let input = if self.cfg.ablations.token_dependency {
            if predicted_tokens.len() != tape.shape(states).0 {
                return Err(Error::Argument("predicted_tokens length mismatch".into()));
            }
            let emb = tape.param(&self.store, "dec.embed");
            let e = tape.embed(emb, predicted_tokens);
            tape.concat_cols(&[e, states])
        } else {
            states
        };
        Ok(apply_linear(tape, &self.store, "dec.dhead", input))
    }

    /// One-step decoder API: distribution for the next token and the
    /// state that produced it, for the last history position.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        enc_out: TensorId,
        tokens_with_sos: &[usize],
        d_hist: Option<&[u8]>,
    ) -> Result<(Vec<f64>, TensorId)> {
        let ds = self.decode_states(tape, enc_out, tokens_with_sos, d_hist)?;
        let n = tokens_with_sos.len();
        let logits = self.token_logits(tape, ds.states, None)?;
        let probs = tape.softmax(logits);
        let last = tape.slice_rows(probs, n - 1, n);
        let s = tape.slice_rows(ds.states, n - 1, n);
        Ok((tape.value(last).to_vec(), s))
    }

    /// Eq.-(3) step: distribution over {0,1} for the token that state
    /// `s` just produced.
    pub fn disfluency_step(
        &self,
        tape: &mut Tape,
        s: TensorId,
        predicted_token: usize,
    ) -> Result<Vec<f64>> {
        let logits = self.disfl_logits(tape, s, &[predicted_token])?;
        let probs = tape.softmax(logits);
        Ok(tape.value(probs).to_vec())
    }

    // ---- target assembly --------------------------------------------

    /// Base-vocabulary token ids of an utterance (multi-task and
    /// end-to-end modes).
    pub fn base_token_ids(&self, utt: &LabeledUtterance) -> Vec<usize> {
        utt.tokens.iter().map(|t| self.vocab.id_or_unk(t)).collect()
    }

    /// Enriched-vocabulary target ids: tags wrapped around disfluent
    /// runs.
    pub fn enriched_target_ids(&self, utt: &LabeledUtterance) -> Result<Vec<usize>> {
        let seq = enrich(&utt.tokens, &utt.labels)?;
        let open = self.vocab.open_tag().ok_or_else(|| {
            Error::Argument("enriched targets need an enriched vocabulary".into())
        })?;
        let close = self.vocab.close_tag().expect("enriched vocab has both tags");
        Ok(seq
            .iter()
            .map(|e| match e {
                Enriched::Open => open,
                Enriched::Close => close,
                Enriched::Token(t) => self.vocab.id_or_unk(t),
            })
            .collect())
    }

    /// Attention+CTC loss for one utterance under the configured
    /// objective. Returns the loss node (for backward) and the scalar
    /// breakdown.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        plan: &BlockPlan,
        utt: &LabeledUtterance,
    ) -> Result<(TensorId, LossBreakdown)> {
        utt.validate()?;
        let enc = self.encode(tape, plan, &utt.features)?;
        match self.cfg.mode {
            ObjectiveMode::MultiTask => self.multi_task_loss(tape, &enc, utt),
            ObjectiveMode::TranscriptEnriched => {
                let targets = self.enriched_target_ids(utt)?;
                self.sequence_loss(tape, &enc, &targets)
            }
            ObjectiveMode::EndToEndRemoval => {
                let kept = remove_disfluencies(&utt.tokens, &utt.labels)?;
                let targets: Vec<usize> = kept.iter().map(|t| self.vocab.id_or_unk(t)).collect();
                self.sequence_loss(tape, &enc, &targets)
            }
        }
    }

    /// Eq. (2): token term + α·label term, plus λ-weighted CTC.
    fn multi_task_loss(
        &self,
        tape: &mut Tape,
        enc: &EncodedFull,
        utt: &LabeledUtterance,
    ) -> Result<(TensorId, LossBreakdown)> {
        let y = self.base_token_ids(utt);
        let mut input = vec![SOS];
        input.extend(&y);
        let mut d_hist = vec![0u8];
        d_hist.extend(&utt.labels);
        let mut targets = y.clone();
        targets.push(EOS);
        let mut d_targets = utt.labels.clone();
        d_targets.push(0); // <eos> carries label 0

        let ds = self.decode_states(tape, enc.out, &input, Some(&d_hist))?;
        let tl = self.token_logits(
            tape,
            ds.states,
            self.cfg.ablations.disfluency_dependency.then_some(&d_targets[..]),
        )?;
        let token_nll = nll_over_rows(tape, tl, &targets);

        let (disfl_nll, disfl_value) = if self.cfg.has_disfluency_head() {
            let dl = self.disfl_logits(tape, ds.states, &targets)?;
            let d_idx: Vec<usize> = d_targets.iter().map(|&l| l as usize).collect();
            let nll = nll_over_rows(tape, dl, &d_idx);
            let v = tape.scalar(nll);
            (Some(nll), v)
        } else {
            (None, 0.0)
        };

        let att = match disfl_nll {
            Some(d) => {
                let scaled = tape.scale(d, self.cfg.alpha);
                tape.add(token_nll, scaled)
            }
            None => token_nll,
        };
        let token_value = tape.scalar(token_nll);
        self.finish_with_ctc(tape, enc, att, &y, token_value, disfl_value)
    }

    /// Plain sequence NLL over `targets` (+`<eos>`), plus λ-weighted
    /// CTC on `targets` — the enriched and end-to-end objectives.
    fn sequence_loss(
        &self,
        tape: &mut Tape,
        enc: &EncodedFull,
        targets_no_eos: &[usize],
    ) -> Result<(TensorId, LossBreakdown)> {
        let mut input = vec![SOS];
        input.extend(targets_no_eos);
        let mut targets = targets_no_eos.to_vec();
        targets.push(EOS);
        let ds = self.decode_states(tape, enc.out, &input, None)?;
        let tl = self.token_logits(tape, ds.states, None)?;
        let token_nll = nll_over_rows(tape, tl, &targets);
        let tv = tape.scalar(token_nll);
        self.finish_with_ctc(tape, enc, token_nll, targets_no_eos, tv, 0.0)
    }

    fn finish_with_ctc(
        &self,
        tape: &mut Tape,
        enc: &EncodedFull,
        att: TensorId,
        ctc_target: &[usize],
        token_value: f64,
        disfl_value: f64,
    ) -> Result<(TensorId, LossBreakdown)> {
        let lambda = self.cfg.ctc_weight;
        let (total, ctc_value, skipped) = if lambda > 0.0 {
            let lp = self.ctc_log_probs(tape, enc.out)?;
            match ctc_loss_on_tape(tape, lp, ctc_target, BLANK)? {
                CtcOutcome::Loss(ctc) => {
                    let a = tape.scale(att, 1.0 - lambda);
                    let c = tape.scale(ctc, lambda);
                    (tape.add(a, c), tape.scalar(ctc), false)
                }
                CtcOutcome::Infeasible { .. } => (tape.scale(att, 1.0 - lambda), 0.0, true),
            }
        } else {
            (att, 0.0, false)
        };
        Ok((
            total,
            LossBreakdown {
                total: tape.scalar(total),
                token_nll: token_value,
                disfl_nll: disfl_value,
                ctc: ctc_value,
                ctc_skipped: skipped,
            },
        ))
    }

    // ---- persistence ------------------------------------------------

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": self.cfg.mode.tag(),
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
        let cfg: ModelConfig = serde_json::from_value(
            meta.get("config")
                .ok_or_else(|| Error::format_anon("checkpoint missing config"))?
                .clone(),
        )?;
        cfg.validate()?;
        let vocab_meta = meta
            .get("vocab")
            .ok_or_else(|| Error::format_anon("checkpoint missing vocab"))?;
        let tokens: Vec<String> = serde_json::from_value(
            vocab_meta
                .get("tokens")
                .ok_or_else(|| Error::format_anon("checkpoint missing vocab.tokens"))?
                .clone(),
        )?;
        let enriched: bool = serde_json::from_value(
            vocab_meta
                .get("enriched")
                .ok_or_else(|| Error::format_anon("checkpoint missing vocab.enriched"))?
                .clone(),
        )?;
        let vocab = Vocabulary::from_token_list(tokens, enriched)?;
        if enriched != (cfg.mode == ObjectiveMode::TranscriptEnriched) {
            return Err(Error::format_anon(
                "checkpoint vocabulary enrichment does not match objective mode",
            ));
        }
        Ok(JointModel { cfg, vocab, store })
    }
}

/// −Σ_j log softmax(logits)[j, targets[j]] as a tape scalar.
fn nll_over_rows(tape: &mut Tape, logits: TensorId, targets: &[usize]) -> TensorId {
    debug_assert_eq!(tape.shape(logits).0, targets.len());
    let lp = tape.log_softmax(logits);
    let mut acc: Option<TensorId> = None;
    for (j, &t) in targets.iter().enumerate() {
        let p = tape.pick(lp, j, t);
        acc = Some(match acc {
            Some(a) => tape.add(a, p),
            None => p,
        });
    }
    let sum = acc.expect("nll over empty target");
    tape.scale(sum, -1.0)
}

//! Blockwise synchronous decoding: disfluency-integrated beam search
//! (Eq. 4), constrained transcript-enriched search, greedy decoding,
//! attention-based endpoint detection, and the simulated emission
//! clock shared with the latency harness.
//!
//! A hypothesis decodes against the encoder rows of the blocks
//! available so far. Within a block it keeps emitting until `<eos>`
//! tops the distribution or the cross-attention argmax jumps backward
//! by more than `jump_frames` rows; it then waits for the next block.
//! Emission time of a symbol is `max(previous emission, block
//! availability) + step_cost_ms`, which reduces to the block
//! availability itself under the default zero step cost.

use crate::corpus::{AcousticFeatures, LabeledUtterance, EOS, SOS, UNK};
use crate::encoder::BlockPlan;
use crate::error::{Error, Result};
use crate::model::{JointModel, ObjectiveMode};
use crate::nn::tape::{Tape, TensorId};
use crate::tagging::{parse_enriched, Enriched};

/// External scorer for shallow fusion: log p(next symbol | prefix)
/// over the model vocabulary. The prefix excludes `<sos>`.
pub trait PrefixScorer: Send + Sync {
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64>;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub beam_width: usize,
    /// Weight β on the disfluency term of Eq. (4).
    pub beta: f64,
    /// Shallow-fusion weight λ_lm ∈ [0, 0.5].
    pub lm_weight: f64,
    /// Hard cap on emitted symbols; exceeding it truncates.
    pub max_tokens: usize,
    pub max_tokens_per_block: usize,
    /// Endpoint rule: backward jump of the cross-attention argmax
    /// (in downsampled rows) that ends a hypothesis's work on a block.
    pub jump_frames: usize,
    pub step_cost_ms: f64,
    pub tagger_cost_ms: f64,
    /// Off-by-default: retract the last committed symbol of a block
    /// when the endpoint fires (the "conservative" block commit).
    pub conservative_block_commit: bool,
    /// Optional length normalization of final scores (off: raw sums).
    pub length_normalize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_width: 5,
            beta: 1.0,
            lm_weight: 0.0,
            max_tokens: 128,
            max_tokens_per_block: 24,
            jump_frames: 4,
            step_cost_ms: 0.0,
            tagger_cost_ms: 0.0,
            conservative_block_commit: false,
            length_normalize: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be ≥ 1".into()));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be ≥ 0", self.beta)));
        }
        if !(0.0..=0.5).contains(&self.lm_weight) {
            return Err(Error::Config(format!(
                "lm_weight {} outside [0, 0.5]",
                self.lm_weight
            )));
        }
        if self.max_tokens < 1 || self.max_tokens_per_block < 1 {
            return Err(Error::Config("token limits must be ≥ 1".into()));
        }
        if self.step_cost_ms < 0.0 || self.tagger_cost_ms < 0.0 {
            return Err(Error::Config("simulated costs must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Per-real-token emission record (simulated ms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenEmission {
    pub token_ms: f64,
    pub label_ms: f64,
}

/// A finished (or truncated) hypothesis in model-vocabulary ids.
#[derive(Debug, Clone)]
pub struct ScoredHypothesis {
    /// Emitted symbols (includes tags in enriched mode, never
    /// `<sos>`/`<eos>`).
    pub symbols: Vec<usize>,
    /// Real tokens (tags stripped).
    pub tokens: Vec<usize>,
    /// Per-real-token binary labels.
    pub labels: Vec<u8>,
    /// Encoder block each symbol was committed in — the visibility
    /// schedule its scores were computed under.
    pub symbol_blocks: Vec<usize>,
    pub token_logp_sum: f64,
    pub disfl_logp_sum: f64,
    pub lm_logp_sum: f64,
    pub emission: Vec<TokenEmission>,
    /// Clock value when the hypothesis finished.
    pub end_ms: f64,
    pub ended_with_eos: bool,
    pub truncated: bool,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    /// Best-first; length ≤ beam_width.
    pub nbest: Vec<ScoredHypothesis>,
    /// Times two surviving hypotheses shared a token history while
    /// disagreeing on labels (multi-task beam introspection).
    pub label_coexistence: usize,
}

impl DecodeOutcome {
    pub fn best(&self) -> &ScoredHypothesis {
        &self.nbest[0]
    }
}

// ---- encoder context -------------------------------------------------

/// Value-level snapshot of the full encoder output plus the block
/// ownership metadata needed for prefix slicing. Slicing the full
/// output is bit-identical to streaming thanks to encoder causality.
struct EncContext {
    values: Vec<f64>,
    dim: usize,
    row_block: Vec<usize>,
    avail_ms: Vec<f64>,
}

impl EncContext {
    fn build(model: &JointModel, plan: &BlockPlan, feats: &AcousticFeatures) -> Result<Self> {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, plan, feats)?;
        let (_, dim) = tape.shape(enc.out);
        Ok(EncContext {
            values: tape.value(enc.out).to_vec(),
            dim,
            row_block: enc.row_block.clone(),
            avail_ms: enc.block_avail_ms.clone(),
        })
    }

    fn num_blocks(&self) -> usize {
        self.avail_ms.len()
    }

    /// Rows owned by blocks ≤ b.
    fn visible_rows(&self, b: usize) -> usize {
        self.row_block.partition_point(|&o| o <= b)
    }

    fn constant_prefix(&self, tape: &mut Tape, b: usize) -> TensorId {
        let r = self.visible_rows(b);
        tape.constant(r, self.dim, self.values[..r * self.dim].to_vec())
    }
}

// ---- hypothesis ------------------------------------------------------

/// Exact undo record for one committed symbol, enabling score-exact
/// retraction (conservative block commit, incomplete-span cleanup).
#[derive(Debug, Clone)]
struct Undo {
    clock_before: f64,
    token_lp: f64,
    disfl_lp: f64,
    lm_lp: f64,
    prev_argmax_before: Option<usize>,
    span_start_before: Option<usize>,
    just_closed_before: bool,
    pushed_emission: bool,
    had_label: bool,
    /// Emission indices whose label time this step resolved.
    resolved: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Hyp {
    symbols: Vec<usize>,
    /// Multi-task: one label per symbol. Enriched/plain: empty.
    labels: Vec<u8>,
    /// Block each symbol was committed in.
    blocks: Vec<usize>,
    token_lp: f64,
    disfl_lp: f64,
    lm_lp: f64,
    /// (token_ms, resolved label_ms) per real token.
    emissions: Vec<(f64, Option<f64>)>,
    trail: Vec<Undo>,
    clock_ms: f64,
    /// Cross-attention argmax row of the previously committed symbol.
    prev_argmax: Option<usize>,
    /// Enriched: emission index where the open span started.
    span_start: Option<usize>,
    just_closed: bool,
    blocked: bool,
    ended: bool,
    ended_with_eos: bool,
    truncated: bool,
    steps_in_block: usize,
    committed_in_block: usize,
}

impl Hyp {
    fn root() -> Self {
        Hyp {
            symbols: Vec::new(),
            labels: Vec::new(),
            blocks: Vec::new(),
            token_lp: 0.0,
            disfl_lp: 0.0,
            lm_lp: 0.0,
            emissions: Vec::new(),
            trail: Vec::new(),
            clock_ms: 0.0,
            prev_argmax: None,
            span_start: None,
            just_closed: false,
            blocked: false,
            ended: false,
            ended_with_eos: false,
            truncated: false,
            steps_in_block: 0,
            committed_in_block: 0,
        }
    }

    fn in_span(&self) -> bool {
        self.span_start.is_some()
    }

    fn span_is_empty(&self) -> bool {
        self.span_start == Some(self.emissions.len())
    }

    fn score(&self, cfg: &SearchConfig) -> f64 {
        let raw = self.token_lp + cfg.beta * self.disfl_lp + cfg.lm_weight * self.lm_lp;
        if cfg.length_normalize {
            raw / (self.symbols.len() + 1) as f64
        } else {
            raw
        }
    }
}

fn sort_pool(pool: &mut [Hyp], cfg: &SearchConfig) {
    pool.sort_by(|a, b| {
        b.score(cfg)
            .total_cmp(&a.score(cfg))
            .then_with(|| a.symbols.cmp(&b.symbols))
            .then_with(|| a.labels.cmp(&b.labels))
    });
}

fn count_label_coexistence(pool: &[Hyp]) -> usize {
    let mut n = 0;
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            if pool[i].symbols == pool[j].symbols && pool[i].labels != pool[j].labels {
                n += 1;
            }
        }
    }
    n
}

// ---- one decoding step ----------------------------------------------

/// Forward pass for the next position of a hypothesis. Keeps its tape
/// alive so the disfluency head can run later on the same state.
struct StepView {
    tape: Tape,
    s_last: TensorId,
    /// log p over V; in the disfluency-dependency variant this is the
    /// d=0 conditional.
    token_lp: Vec<f64>,
    /// d=1 conditional (disfluency-dependency variant only).
    token_lp_d1: Option<Vec<f64>>,
    attn_argmax: usize,
}

impl StepView {
    /// Token log-probability used for ranking candidates: the better
    /// conditional in the disfluency-dependency variant, otherwise the
    /// plain head.
    fn rank_lp(&self, tok: usize) -> f64 {
        match &self.token_lp_d1 {
            Some(lp1) => self.token_lp[tok].max(lp1[tok]),
            None => self.token_lp[tok],
        }
    }

    /// (log p(d=0), log p(d=1)) for the state, given the candidate
    /// token the state just produced.
    fn disfl_pair(&mut self, model: &JointModel, tok: usize) -> Result<[f64; 2]> {
        let predicted = [tok];
        let args: &[usize] = if model.cfg.ablations.token_dependency {
            &predicted
        } else {
            &[]
        };
        let dl = model.disfl_logits(&mut self.tape, self.s_last, args)?;
        let lp = self.tape.log_softmax(dl);
        let v = self.tape.value(lp);
        Ok([v[0], v[1]])
    }
}

fn step_view(
    model: &JointModel,
    enc: &EncContext,
    block: usize,
    hyp: &Hyp,
) -> Result<StepView> {
    let mut tape = Tape::new();
    let enc_id = enc.constant_prefix(&mut tape, block);
    let mut hist = vec![SOS];
    hist.extend(&hyp.symbols);
    let d_hist: Vec<u8>;
    let d_opt = if model.cfg.mode == ObjectiveMode::MultiTask {
        d_hist = std::iter::once(0).chain(hyp.labels.iter().copied()).collect();
        Some(&d_hist[..])
    } else {
        None
    };
    let ds = model.decode_states(&mut tape, enc_id, &hist, d_opt)?;
    let n = hist.len();
    let s_last = tape.slice_rows(ds.states, n - 1, n);

    // Cross-attention argmax (last layer, mean over heads) at the
    // predicting position; first index wins ties.
    let r = tape.shape(ds.cross_attn[0]).1;
    let mut mass = vec![0.0; r];
    for &head in &ds.cross_attn {
        let v = tape.value(head);
        for c in 0..r {
            mass[c] += v[(n - 1) * r + c];
        }
    }
    let mut attn_argmax = 0;
    for (c, &m) in mass.iter().enumerate() {
        if m > mass[attn_argmax] {
            attn_argmax = c;
        }
    }

    let dd = model.cfg.ablations.disfluency_dependency;
    let (token_lp, token_lp_d1) = if dd {
        let l0 = model.token_logits(&mut tape, s_last, Some(&[0]))?;
        let lp0 = tape.log_softmax(l0);
        let lp0v = tape.value(lp0).to_vec();
        let l1 = model.token_logits(&mut tape, s_last, Some(&[1]))?;
        let lp1 = tape.log_softmax(l1);
        let lp1v = tape.value(lp1).to_vec();
        (lp0v, Some(lp1v))
    } else {
        let l = model.token_logits(&mut tape, s_last, None)?;
        let lp = tape.log_softmax(l);
        (tape.value(lp).to_vec(), None)
    };
    Ok(StepView {
        tape,
        s_last,
        token_lp,
        token_lp_d1,
        attn_argmax,
    })
}

/// Legal non-eos successor symbols, ascending.
fn legal_symbols(model: &JointModel, hyp: &Hyp) -> Vec<usize> {
    let vocab = &model.vocab;
    let mut out: Vec<usize> = Vec::with_capacity(vocab.size());
    out.push(UNK);
    out.extend(vocab.regular_ids());
    if vocab.is_enriched() {
        if hyp.in_span() {
            // Inside a span: real tokens, or — once non-empty — the
            // closing tag.
            if !hyp.span_is_empty() {
                out.push(vocab.close_tag().unwrap());
            }
        } else if !hyp.just_closed {
            // A fresh span may not open flush against the previous one.
            out.push(vocab.open_tag().unwrap());
        }
    }
    out.sort_unstable();
    out
}

/// `<eos>` may end the hypothesis only outside an open span.
fn eos_legal(hyp: &Hyp) -> bool {
    !hyp.in_span()
}

/// Append a symbol: scores, clock, span state machine, label-time
/// resolution, and the undo record.
#[allow(clippy::too_many_arguments)]
fn commit_symbol(
    model: &JointModel,
    h: &mut Hyp,
    tok: usize,
    label: Option<u8>,
    token_lp: f64,
    disfl_lp: f64,
    lm_lp: f64,
    block: usize,
    block_avail_ms: f64,
    cfg: &SearchConfig,
) {
    let mut undo = Undo {
        clock_before: h.clock_ms,
        token_lp,
        disfl_lp,
        lm_lp,
        prev_argmax_before: h.prev_argmax,
        span_start_before: h.span_start,
        just_closed_before: h.just_closed,
        pushed_emission: false,
        had_label: label.is_some(),
        resolved: Vec::new(),
    };
    h.clock_ms = h.clock_ms.max(block_avail_ms) + cfg.step_cost_ms;
    h.steps_in_block += 1;
    h.committed_in_block += 1;
    h.token_lp += token_lp;
    h.lm_lp += lm_lp;
    h.symbols.push(tok);
    h.blocks.push(block);
    let vocab = &model.vocab;
    match label {
        Some(d) => {
            // Multi-task: the label is decided in the same step as the
            // token, so both emission times coincide.
            h.labels.push(d);
            h.disfl_lp += disfl_lp;
            h.emissions.push((h.clock_ms, Some(h.clock_ms)));
            undo.pushed_emission = true;
        }
        None => {
            if Some(tok) == vocab.open_tag() {
                h.span_start = Some(h.emissions.len());
                h.just_closed = false;
            } else if Some(tok) == vocab.close_tag() {
                // Span closes: its tokens learn their label now.
                let start = h.span_start.take().expect("close tag only legal in a span");
                for i in start..h.emissions.len() {
                    if h.emissions[i].1.is_none() {
                        h.emissions[i].1 = Some(h.clock_ms);
                        undo.resolved.push(i);
                    }
                }
                h.just_closed = true;
            } else {
                // Real token: all pending tokens before the current
                // span (i.e. provably outside any span) are now known
                // fluent; in-span tokens keep waiting for the close.
                let floor = h.span_start.unwrap_or(h.emissions.len());
                for i in 0..floor {
                    if h.emissions[i].1.is_none() {
                        h.emissions[i].1 = Some(h.clock_ms);
                        undo.resolved.push(i);
                    }
                }
                h.emissions.push((h.clock_ms, None));
                undo.pushed_emission = true;
                h.just_closed = false;
            }
        }
    }
    h.trail.push(undo);
}

/// Exact inverse of `commit_symbol`.
fn undo_symbol(h: &mut Hyp) {
    let undo = h.trail.pop().expect("undo without a committed symbol");
    h.symbols.pop();
    h.blocks.pop();
    if undo.had_label {
        h.labels.pop();
    }
    if undo.pushed_emission {
        h.emissions.pop();
    }
    for &i in &undo.resolved {
        h.emissions[i].1 = None;
    }
    h.token_lp -= undo.token_lp;
    h.disfl_lp -= undo.disfl_lp;
    h.lm_lp -= undo.lm_lp;
    h.clock_ms = undo.clock_before;
    h.prev_argmax = undo.prev_argmax_before;
    h.span_start = undo.span_start_before;
    h.just_closed = undo.just_closed_before;
    h.steps_in_block = h.steps_in_block.saturating_sub(1);
    h.committed_in_block = h.committed_in_block.saturating_sub(1);
}

/// Mark a hypothesis finished. An incomplete enriched span is unwound
/// first (score-exactly) so every final sequence parses.
fn end_hypothesis(
    h: &mut Hyp,
    with_eos: bool,
    eos_lp: f64,
    lm_eos: Option<f64>,
    cfg: &SearchConfig,
) {
    while h.in_span() {
        undo_symbol(h);
    }
    h.clock_ms += cfg.step_cost_ms;
    h.ended = true;
    h.ended_with_eos = with_eos;
    if with_eos {
        h.token_lp += eos_lp;
        if let Some(l) = lm_eos {
            h.lm_lp += l;
        }
    }
    for e in h.emissions.iter_mut() {
        if e.1.is_none() {
            e.1 = Some(h.clock_ms);
        }
    }
}

// ---- beam search -----------------------------------------------------

/// Decode one utterance under the model's own objective mode:
/// disfluency-integrated beam over (token, label) pairs in multi-task
/// mode, tag-constrained beam over V′ in enriched mode, plain beam
/// otherwise.
pub fn beam_search(
    model: &JointModel,
    plan: &BlockPlan,
    feats: &AcousticFeatures,
    lm: Option<&dyn PrefixScorer>,
    cfg: &SearchConfig,
) -> Result<DecodeOutcome> {
    cfg.validate()?;
    check_lm(model, lm, cfg)?;
    let enc = EncContext::build(model, plan, feats)?;
    let multi_task = model.cfg.mode == ObjectiveMode::MultiTask;
    let lm = if cfg.lm_weight > 0.0 { lm } else { None };

    let mut pool = vec![Hyp::root()];
    let mut label_coexistence = 0;
    let last_block = enc.num_blocks() - 1;

    for block in 0..enc.num_blocks() {
        for h in pool.iter_mut() {
            h.blocked = false;
            h.steps_in_block = 0;
            h.committed_in_block = 0;
        }
        loop {
            let expandable: Vec<usize> = (0..pool.len())
                .filter(|&i| {
                    let h = &pool[i];
                    !h.ended
                        && !h.blocked
                        && h.steps_in_block < cfg.max_tokens_per_block
                        && h.symbols.len() < cfg.max_tokens
                })
                .collect();
            if expandable.is_empty() {
                break;
            }
            let mut next: Vec<Hyp> = (0..pool.len())
                .filter(|i| !expandable.contains(i))
                .map(|i| pool[i].clone())
                .collect();
            for &i in &expandable {
                next.extend(expand_one(
                    model, &enc, block, last_block, &pool[i], lm, cfg, multi_task,
                )?);
            }
            sort_pool(&mut next, cfg);
            next.truncate(cfg.beam_width);
            if multi_task {
                label_coexistence += count_label_coexistence(&next);
            }
            pool = next;
        }
    }

    // Final drain: all audio is in; run to <eos> or the length cap.
    loop {
        let expandable: Vec<usize> = (0..pool.len()).filter(|&i| !pool[i].ended).collect();
        if expandable.is_empty() {
            break;
        }
        let mut next: Vec<Hyp> = (0..pool.len())
            .filter(|i| !expandable.contains(i))
            .map(|i| pool[i].clone())
            .collect();
        for &i in &expandable {
            if pool[i].symbols.len() >= cfg.max_tokens {
                let mut h = pool[i].clone();
                end_hypothesis(&mut h, false, 0.0, None, cfg);
                h.truncated = true;
                next.push(h);
                continue;
            }
            next.extend(expand_one(
                model, &enc, last_block, last_block, &pool[i], lm, cfg, multi_task,
            )?);
        }
        sort_pool(&mut next, cfg);
        next.truncate(cfg.beam_width);
        if multi_task {
            label_coexistence += count_label_coexistence(&next);
        }
        pool = next;
    }

    sort_pool(&mut pool, cfg);
    let nbest = pool
        .iter()
        .map(|h| finalize(model, h, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodeOutcome {
        nbest,
        label_coexistence,
    })
}

fn check_lm(model: &JointModel, lm: Option<&dyn PrefixScorer>, cfg: &SearchConfig) -> Result<()> {
    if let Some(lm) = lm {
        if cfg.lm_weight > 0.0 && lm.vocab_size() != model.vocab.size() {
            return Err(Error::Config(format!(
                "fusion LM vocabulary {} does not match model vocabulary {}",
                lm.vocab_size(),
                model.vocab.size()
            )));
        }
    }
    Ok(())
}

/// Expand one hypothesis by one step within `block`; may instead mark
/// it blocked (waiting for the next block) or ended.
#[allow(clippy::too_many_arguments)]
fn expand_one(
    model: &JointModel,
    enc: &EncContext,
    block: usize,
    last_block: usize,
    hyp: &Hyp,
    lm: Option<&dyn PrefixScorer>,
    cfg: &SearchConfig,
    multi_task: bool,
) -> Result<Vec<Hyp>> {
    let mut view = step_view(model, enc, block, hyp)?;

    // Endpoint: the attention argmax moved backward by more than
    // jump_frames relative to the previous committed symbol. The
    // candidate is not committed; the hypothesis waits (or, at the
    // final block, ends — there is nothing left to wait for).
    let endpoint_fired = match hyp.prev_argmax {
        Some(prev) => prev > view.attn_argmax + cfg.jump_frames,
        None => false,
    };
    if endpoint_fired {
        let mut h = hyp.clone();
        if cfg.conservative_block_commit && h.committed_in_block > 0 {
            undo_symbol(&mut h);
        }
        if block == last_block {
            end_hypothesis(&mut h, false, 0.0, None, cfg);
        } else {
            h.blocked = true;
        }
        return Ok(vec![h]);
    }

    let legal = legal_symbols(model, hyp);
    let mut ranked = legal;
    ranked.sort_by(|&a, &b| {
        view.rank_lp(b)
            .partial_cmp(&view.rank_lp(a))
            .unwrap()
            .then(a.cmp(&b))
    });
    let best_legal = ranked[0];

    // Stop rule (a): <eos> tops the candidates (ties keep decoding).
    if eos_legal(hyp) && view.token_lp[EOS] > view.rank_lp(best_legal) {
        let mut h = hyp.clone();
        if block == last_block {
            let lm_eos = lm.map(|l| l.next_log_probs(&h.symbols)[EOS]);
            end_hypothesis(&mut h, true, view.token_lp[EOS], lm_eos, cfg);
        } else {
            h.blocked = true;
        }
        return Ok(vec![h]);
    }

    let k = cfg.beam_width.min(ranked.len());
    let shortlist = &ranked[..k];
    let lm_row = lm.map(|l| l.next_log_probs(&hyp.symbols));
    let with_disfl = multi_task && model.cfg.alpha > 0.0;
    let dd = model.cfg.ablations.disfluency_dependency;
    let avail = enc.avail_ms[block];

    let mut children = Vec::with_capacity(2 * k);
    for &tok in shortlist {
        let lm_tok = lm_row.as_ref().map(|r| r[tok]).unwrap_or(0.0);
        if with_disfl {
            let pair = view.disfl_pair(model, tok)?;
            for d in 0..2u8 {
                let tok_lp = if dd && d == 1 {
                    view.token_lp_d1.as_ref().unwrap()[tok]
                } else {
                    view.token_lp[tok]
                };
                let mut h = hyp.clone();
                commit_symbol(
                    model, &mut h, tok, Some(d), tok_lp, pair[d as usize], lm_tok, block, avail,
                    cfg,
                );
                h.prev_argmax = Some(view.attn_argmax);
                children.push(h);
            }
        } else {
            let mut h = hyp.clone();
            commit_symbol(
                model, &mut h, tok, None, view.token_lp[tok], 0.0, lm_tok, block, avail, cfg,
            );
            h.prev_argmax = Some(view.attn_argmax);
            children.push(h);
        }
    }
    Ok(children)
}

fn finalize(model: &JointModel, h: &Hyp, cfg: &SearchConfig) -> Result<ScoredHypothesis> {
    let vocab = &model.vocab;
    let (tokens, labels) = if vocab.is_enriched() {
        let seq: Vec<Enriched<usize>> = h
            .symbols
            .iter()
            .map(|&s| {
                if Some(s) == vocab.open_tag() {
                    Enriched::Open
                } else if Some(s) == vocab.close_tag() {
                    Enriched::Close
                } else {
                    Enriched::Token(s)
                }
            })
            .collect();
        parse_enriched(&seq)?
    } else if model.cfg.mode == ObjectiveMode::MultiTask {
        (h.symbols.clone(), h.labels.clone())
    } else {
        (h.symbols.clone(), vec![0; h.symbols.len()])
    };
    let emission: Vec<TokenEmission> = h
        .emissions
        .iter()
        .map(|&(t, l)| TokenEmission {
            token_ms: t,
            label_ms: l.unwrap_or(h.clock_ms),
        })
        .collect();
    debug_assert_eq!(emission.len(), tokens.len());
    Ok(ScoredHypothesis {
        symbols: h.symbols.clone(),
        tokens,
        labels,
        symbol_blocks: h.blocks.clone(),
        token_logp_sum: h.token_lp,
        disfl_logp_sum: h.disfl_lp,
        lm_logp_sum: h.lm_lp,
        emission,
        end_ms: h.clock_ms,
        ended_with_eos: h.ended_with_eos,
        truncated: h.truncated,
        score: h.score(cfg),
    })
}

// ---- greedy ----------------------------------------------------------

/// Argmax-by-argmax decoding with the same block walking, endpoint and
/// stop rules as the beam: top legal token first, then the label
/// maximizing β·log p(d) (ties toward 0). Coincides with width-1 beam
/// search by construction of the tie-breaks — asserted in tests rather
/// than by sharing the beam's control flow.
pub fn greedy_search(
    model: &JointModel,
    plan: &BlockPlan,
    feats: &AcousticFeatures,
    lm: Option<&dyn PrefixScorer>,
    cfg: &SearchConfig,
) -> Result<ScoredHypothesis> {
    cfg.validate()?;
    check_lm(model, lm, cfg)?;
    let enc = EncContext::build(model, plan, feats)?;
    let multi_task = model.cfg.mode == ObjectiveMode::MultiTask;
    let with_disfl = multi_task && model.cfg.alpha > 0.0;
    let dd = model.cfg.ablations.disfluency_dependency;
    let lm = if cfg.lm_weight > 0.0 { lm } else { None };
    let last_block = enc.num_blocks() - 1;

    let mut h = Hyp::root();
    let mut block = 0;
    while !h.ended {
        if block < last_block && (h.blocked || h.steps_in_block >= cfg.max_tokens_per_block) {
            block += 1;
            h.blocked = false;
            h.steps_in_block = 0;
            h.committed_in_block = 0;
            continue;
        }
        if h.symbols.len() >= cfg.max_tokens {
            end_hypothesis(&mut h, false, 0.0, None, cfg);
            h.truncated = true;
            break;
        }
        let mut view = step_view(model, &enc, block, &h)?;
        let endpoint_fired = match h.prev_argmax {
            Some(prev) => prev > view.attn_argmax + cfg.jump_frames,
            None => false,
        };
        if endpoint_fired {
            if cfg.conservative_block_commit && h.committed_in_block > 0 {
                undo_symbol(&mut h);
            }
            if block == last_block {
                end_hypothesis(&mut h, false, 0.0, None, cfg);
            } else {
                h.blocked = true;
            }
            continue;
        }
        let legal = legal_symbols(model, &h);
        let mut best = legal[0];
        for &tok in &legal[1..] {
            if view.rank_lp(tok) > view.rank_lp(best) {
                best = tok;
            }
        }
        if eos_legal(&h) && view.token_lp[EOS] > view.rank_lp(best) {
            if block == last_block {
                let lm_eos = lm.map(|l| l.next_log_probs(&h.symbols)[EOS]);
                end_hypothesis(&mut h, true, view.token_lp[EOS], lm_eos, cfg);
            } else {
                h.blocked = true;
            }
            continue;
        }
        let lm_tok = lm
            .map(|l| l.next_log_probs(&h.symbols)[best])
            .unwrap_or(0.0);
        let avail = enc.avail_ms[block];
        if with_disfl {
            let pair = view.disfl_pair(model, best)?;
            // Label argmax over the β-weighted score, exactly the
            // quantity that separates the two beam children; ties → 0.
            let lp = |d: usize| {
                let t = if dd && d == 1 {
                    view.token_lp_d1.as_ref().unwrap()[best]
                } else {
                    view.token_lp[best]
                };
                t + cfg.beta * pair[d]
            };
            let d: u8 = if lp(1) > lp(0) { 1 } else { 0 };
            let tok_lp = if dd && d == 1 {
                view.token_lp_d1.as_ref().unwrap()[best]
            } else {
                view.token_lp[best]
            };
            commit_symbol(
                model,
                &mut h,
                best,
                Some(d),
                tok_lp,
                pair[d as usize],
                lm_tok,
                block,
                avail,
                cfg,
            );
        } else {
            commit_symbol(
                model,
                &mut h,
                best,
                None,
                view.token_lp[best],
                0.0,
                lm_tok,
                block,
                avail,
                cfg,
            );
        }
        h.prev_argmax = Some(view.attn_argmax);
    }
    finalize(model, &h, cfg)
}

/// Recompute the Eq. (4) components of a hypothesis by teacher-forcing
/// its own symbols through the model, replaying the block-visibility
/// schedule recorded at decode time — the bookkeeping oracle for the
/// search sums.
pub fn recompute_components(
    model: &JointModel,
    plan: &BlockPlan,
    feats: &AcousticFeatures,
    hyp: &ScoredHypothesis,
    lm: Option<&dyn PrefixScorer>,
) -> Result<(f64, f64, f64)> {
    let enc = EncContext::build(model, plan, feats)?;
    let mut tape = Tape::new();
    let mut token_lp = 0.0;
    let mut disfl_lp = 0.0;
    let mut lm_lp = 0.0;
    let n = hyp.symbols.len();
    let multi_task = model.cfg.mode == ObjectiveMode::MultiTask;
    let dd = model.cfg.ablations.disfluency_dependency;
    for i in 0..=n {
        if i == n && !hyp.ended_with_eos {
            break;
        }
        let target = if i == n { EOS } else { hyp.symbols[i] };
        // The search scored symbol i against the rows visible in its
        // commit block; <eos> is only ever scored at the final block.
        let block = if i == n {
            enc.num_blocks() - 1
        } else {
            hyp.symbol_blocks[i]
        };
        let enc_id = enc.constant_prefix(&mut tape, block);
        let mut hist = vec![SOS];
        hist.extend(&hyp.symbols[..i]);
        let d_hist: Vec<u8>;
        let d_opt = if multi_task {
            d_hist = std::iter::once(0)
                .chain(hyp.labels[..i].iter().copied())
                .collect();
            Some(&d_hist[..])
        } else {
            None
        };
        let ds = model.decode_states(&mut tape, enc_id, &hist, d_opt)?;
        let s_last = tape.slice_rows(ds.states, i, i + 1);
        let d_cur: [u8; 1] = [if i == n { 0 } else { *hyp.labels.get(i).unwrap_or(&0) }];
        let logits = model.token_logits(&mut tape, s_last, dd.then_some(&d_cur[..]))?;
        let lp = tape.log_softmax(logits);
        token_lp += tape.value(lp)[target];
        if multi_task && model.cfg.alpha > 0.0 && i < n {
            let predicted = [target];
            let args: &[usize] = if model.cfg.ablations.token_dependency {
                &predicted
            } else {
                &[]
            };
            let dl = model.disfl_logits(&mut tape, s_last, args)?;
            let dlp = tape.log_softmax(dl);
            disfl_lp += tape.value(dlp)[hyp.labels[i] as usize];
        }
        if let Some(l) = lm {
            lm_lp += l.next_log_probs(&hyp.symbols[..i])[target];
        }
    }
    Ok((token_lp, disfl_lp, lm_lp))
}

// ---- teacher-forced latency schedule ---------------------------------

/// Which pipeline the simulated clock models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyMode {
    MultiTask,
    Enriched,
    Pipeline { lookahead: usize },
}

/// Per-token result of the teacher-forced schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenTiming {
    /// Acoustic end of the token (gold boundary).
    pub boundary_ms: f64,
    pub token_ms: f64,
    pub label_ms: f64,
}

impl TokenTiming {
    pub fn label_latency_ms(&self) -> f64 {
        self.label_ms - self.boundary_ms
    }
}

/// Gold-history emission schedule: each token becomes emittable in the
/// first block whose window covers its gold boundary; span tags ride
/// with the adjacent real token (`<dysfl>` with the next, `</dysfl>`
/// with the previous); `<eos>` waits for the final block. Pure clock
/// arithmetic — no model inference — so latency comparisons across
/// modes are exact.
pub fn teacher_forced_timing(
    plan: &BlockPlan,
    utt: &LabeledUtterance,
    mode: LatencyMode,
    cfg: &SearchConfig,
) -> Result<Vec<TokenTiming>> {
    cfg.validate()?;
    utt.validate()?;
    let boundaries = utt
        .boundary_frames
        .as_ref()
        .ok_or_else(|| Error::Argument(format!("utterance {} has no gold boundaries", utt.id)))?;
    let l = utt.tokens.len();
    let t = utt.features.t_frames;
    let period = utt.features.frame_period_ms;
    let nb = plan.num_blocks(t);
    let block_of = |frame: usize| plan.owner_block(frame).min(nb - 1);

    #[derive(Clone, Copy, PartialEq)]
    enum Sym {
        Real(usize),
        Open,
        Close,
        Eos,
    }
    let token_block: Vec<usize> = boundaries.iter().map(|&f| block_of(f)).collect();
    let mut stream: Vec<(usize, Sym)> = Vec::new();
    for i in 0..l {
        if mode == LatencyMode::Enriched && utt.labels[i] == 1 && (i == 0 || utt.labels[i - 1] == 0)
        {
            stream.push((token_block[i], Sym::Open));
        }
        stream.push((token_block[i], Sym::Real(i)));
        if mode == LatencyMode::Enriched && utt.labels[i] == 1 && (i + 1 == l || utt.labels[i + 1] == 0)
        {
            stream.push((token_block[i], Sym::Close));
        }
    }
    stream.push((nb - 1, Sym::Eos));

    // Simulated clock along the stream.
    let mut clock = 0.0f64;
    let mut token_ms = vec![0.0; l];
    let mut close_after = vec![0.0; l];
    let mut next_real_ms = vec![f64::NAN; l];
    let mut eos_ms = 0.0;
    let mut last_real: Option<usize> = None;
    for &(b, sym) in &stream {
        clock = clock.max(plan.availability_ms(b, period)) + cfg.step_cost_ms;
        match sym {
            Sym::Real(i) => {
                token_ms[i] = clock;
                if let Some(p) = last_real {
                    for j in (0..=p).rev() {
                        if next_real_ms[j].is_nan() {
                            next_real_ms[j] = clock;
                        } else {
                            break;
                        }
                    }
                }
                last_real = Some(i);
            }
            Sym::Close => {
                let mut j = last_real.expect("close tag follows its span tokens");
                loop {
                    close_after[j] = clock;
                    if j == 0 || utt.labels[j - 1] == 0 {
                        break;
                    }
                    j -= 1;
                }
            }
            Sym::Open => {}
            Sym::Eos => {
                eos_ms = clock;
                for j in 0..l {
                    if next_real_ms[j].is_nan() {
                        next_real_ms[j] = clock;
                    }
                }
            }
        }
    }

    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let boundary_ms = (boundaries[i] + 1) as f64 * period;
        let label_ms = match mode {
            LatencyMode::MultiTask => token_ms[i],
            LatencyMode::Enriched => {
                if utt.labels[i] == 1 {
                    close_after[i]
                } else {
                    next_real_ms[i]
                }
            }
            LatencyMode::Pipeline { lookahead } => {
                let base = if i + lookahead < l {
                    token_ms[i + lookahead]
                } else {
                    eos_ms
                };
                base + cfg.tagger_cost_ms
            }
        };
        out.push(TokenTiming {
            boundary_ms,
            token_ms: token_ms[i],
            label_ms,
        });
    }
    Ok(out)
}

/// Clock rule of the pipeline detector on top of an arbitrary ASR
/// token stream: token i's label arrives with token i+k (or at
/// utterance end) plus the tagger cost.
pub fn pipeline_label_times(
    token_times_ms: &[f64],
    end_ms: f64,
    lookahead: usize,
    tagger_cost_ms: f64,
) -> Vec<f64> {
    (0..token_times_ms.len())
        .map(|i| {
            let base = if i + lookahead < token_times_ms.len() {
                token_times_ms[i + lookahead]
            } else {
                end_ms
            };
            base + tagger_cost_ms
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, SynthesisSpec};
    use crate::model::ModelConfig;

    fn spec() -> SynthesisSpec {
        SynthesisSpec {
            vocab_size: 16,
            feat_dim: 4,
            disfluency_rate: 0.2,
            seed: 77,
            ..Default::default()
        }
    }

    fn tiny_cfg(mode: ObjectiveMode) -> ModelConfig {
        ModelConfig {
            mode,
            feat_dim: 4,
            model_dim: 16,
            n_heads: 2,
            ff_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            ..Default::default()
        }
    }

    fn fixture(mode: ObjectiveMode) -> (JointModel, BlockPlan, Vec<LabeledUtterance>) {
        let spec = spec();
        let utts = generate_corpus(&spec, 6).unwrap();
        let vocab = spec.vocabulary().unwrap();
        let model = JointModel::new(tiny_cfg(mode), &vocab, 5).unwrap();
        (model, BlockPlan::new(32, 16).unwrap(), utts)
    }

    fn search_cfg() -> SearchConfig {
        SearchConfig {
            max_tokens: 40,
            max_tokens_per_block: 8,
            ..Default::default()
        }
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for mode in [
            ObjectiveMode::MultiTask,
            ObjectiveMode::TranscriptEnriched,
            ObjectiveMode::EndToEndRemoval,
        ] {
            let (model, plan, utts) = fixture(mode);
            for utt in &utts[..3] {
                let mut cfg = search_cfg();
                cfg.beam_width = 1;
                let beam = beam_search(&model, &plan, &utt.features, None, &cfg).unwrap();
                let greedy =
                    greedy_search(&model, &plan, &utt.features, None, &search_cfg()).unwrap();
                assert_eq!(beam.best().symbols, greedy.symbols, "{mode:?} {}", utt.id);
                assert_eq!(beam.best().labels, greedy.labels);
                assert_eq!(beam.best().score, greedy.score);
                assert_eq!(beam.best().emission, greedy.emission);
            }
        }
    }

    #[test]
    fn score_components_recompute_exactly() {
        let (model, plan, utts) = fixture(ObjectiveMode::MultiTask);
        let cfg = search_cfg();
        for utt in &utts[..3] {
            let out = beam_search(&model, &plan, &utt.features, None, &cfg).unwrap();
            for hyp in &out.nbest {
                let (t, d, l) =
                    recompute_components(&model, &plan, &utt.features, hyp, None).unwrap();
                assert!(
                    (t - hyp.token_logp_sum).abs() < 1e-9,
                    "{t} vs {}",
                    hyp.token_logp_sum
                );
                assert!((d - hyp.disfl_logp_sum).abs() < 1e-9);
                assert_eq!(l, 0.0);
                let score = hyp.token_logp_sum + cfg.beta * hyp.disfl_logp_sum;
                assert!((score - hyp.score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enriched_outputs_always_parse() {
        let (model, plan, utts) = fixture(ObjectiveMode::TranscriptEnriched);
        let cfg = search_cfg();
        for utt in &utts {
            // finalize() runs parse_enriched internally; reaching here
            // at all means every final was well-formed.
            let out = beam_search(&model, &plan, &utt.features, None, &cfg).unwrap();
            for hyp in &out.nbest {
                assert_eq!(hyp.tokens.len(), hyp.labels.len());
                assert_eq!(hyp.emission.len(), hyp.tokens.len());
            }
        }
    }

    #[test]
    fn multitask_beam_holds_label_variants_of_one_history() {
        // Untrained model → uncertain labels → the beam routinely keeps
        // both labelings of a shared token history.
        let (model, plan, utts) = fixture(ObjectiveMode::MultiTask);
        let cfg = search_cfg();
        let mut seen = 0;
        for utt in &utts {
            let out = beam_search(&model, &plan, &utt.features, None, &cfg).unwrap();
            seen += out.label_coexistence;
        }
        assert!(seen > 0, "no shared-history label pair ever survived pruning");
    }

    #[test]
    fn emission_times_non_decreasing_and_blockwise() {
        for mode in [ObjectiveMode::MultiTask, ObjectiveMode::TranscriptEnriched] {
            let (model, plan, utts) = fixture(mode);
            let cfg = search_cfg();
            let out = beam_search(&model, &plan, &utts[0].features, None, &cfg).unwrap();
            for hyp in &out.nbest {
                let first_avail = plan.availability_ms(0, utts[0].features.frame_period_ms);
                let mut prev = 0.0;
                for e in &hyp.emission {
                    assert!(e.token_ms >= first_avail);
                    assert!(e.token_ms >= prev);
                    assert!(e.label_ms >= e.token_ms);
                    prev = e.token_ms;
                }
            }
        }
    }

    #[test]
    fn truncation_flag_on_tiny_cap() {
        let (model, plan, utts) = fixture(ObjectiveMode::MultiTask);
        let mut cfg = search_cfg();
        cfg.max_tokens = 2;
        let out = beam_search(&model, &plan, &utts[0].features, None, &cfg).unwrap();
        assert!(out.nbest.iter().all(|h| h.symbols.len() <= 2));
        assert!(out.best().truncated || out.best().ended_with_eos);
    }

    #[test]
    fn conservative_commit_still_produces_valid_output() {
        for mode in [ObjectiveMode::MultiTask, ObjectiveMode::TranscriptEnriched] {
            let (model, plan, utts) = fixture(mode);
            let mut cfg = search_cfg();
            cfg.conservative_block_commit = true;
            let out = beam_search(&model, &plan, &utts[0].features, None, &cfg).unwrap();
            let hyp = out.best();
            let (t, d, _) = recompute_components(&model, &plan, &utts[0].features, hyp, None).unwrap();
            assert!((t - hyp.token_logp_sum).abs() < 1e-9);
            assert!((d - hyp.disfl_logp_sum).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_lm_weight_is_bit_identical_to_no_lm() {
        struct Uniform(usize);
        impl PrefixScorer for Uniform {
            fn next_log_probs(&self, _prefix: &[usize]) -> Vec<f64> {
                vec![-(self.0 as f64).ln(); self.0]
            }
            fn vocab_size(&self) -> usize {
                self.0
            }
        }
        let (model, plan, utts) = fixture(ObjectiveMode::MultiTask);
        let lm = Uniform(model.vocab.size());
        let cfg = search_cfg(); // lm_weight = 0
        for utt in &utts[..2] {
            let a = beam_search(&model, &plan, &utt.features, None, &cfg).unwrap();
            let b = beam_search(&model, &plan, &utt.features, Some(&lm), &cfg).unwrap();
            assert_eq!(a.best().symbols, b.best().symbols);
            assert_eq!(a.best().score, b.best().score);
            assert_eq!(b.best().lm_logp_sum, 0.0);
        }
    }

    #[test]
    fn lm_vocab_mismatch_rejected() {
        struct Uniform(usize);
        impl PrefixScorer for Uniform {
            fn next_log_probs(&self, _p: &[usize]) -> Vec<f64> {
                vec![0.0; self.0]
            }
            fn vocab_size(&self) -> usize {
                self.0
            }
        }
        let (model, plan, utts) = fixture(ObjectiveMode::TranscriptEnriched);
        let lm = Uniform(model.vocab.size() - 2); // base-sized LM vs enriched model
        let mut cfg = search_cfg();
        cfg.lm_weight = 0.2;
        let err = beam_search(&model, &plan, &utts[0].features, Some(&lm), &cfg);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    // ---- teacher-forced schedule ------------------------------------

    fn timed_utt() -> (BlockPlan, LabeledUtterance) {
        let spec = spec();
        let utts = generate_corpus(&spec, 12).unwrap();
        let plan = BlockPlan::new(32, 16).unwrap();
        let utt = utts
            .into_iter()
            .find(|u| u.labels.iter().any(|&d| d == 1))
            .expect("corpus contains a disfluent utterance");
        (plan, utt)
    }

    #[test]
    fn teacher_forced_multitask_label_equals_token_time() {
        let (plan, utt) = timed_utt();
        let cfg = search_cfg();
        let t = teacher_forced_timing(&plan, &utt, LatencyMode::MultiTask, &cfg).unwrap();
        assert_eq!(t.len(), utt.tokens.len());
        let mut prev = 0.0;
        for x in &t {
            assert_eq!(x.token_ms, x.label_ms);
            assert!(x.token_ms >= prev);
            prev = x.token_ms;
        }
    }

    #[test]
    fn teacher_forced_enriched_strictly_later_for_disfluent() {
        let (plan, utt) = timed_utt();
        let mut cfg = search_cfg();
        cfg.step_cost_ms = 1.0; // make step ordering visible in the clock
        let t = teacher_forced_timing(&plan, &utt, LatencyMode::Enriched, &cfg).unwrap();
        for (i, x) in t.iter().enumerate() {
            assert!(x.label_ms >= x.token_ms);
            if utt.labels[i] == 1 {
                assert!(
                    x.label_ms > x.token_ms,
                    "disfluent token {i} label not strictly later"
                );
            }
        }
    }

    #[test]
    fn latency_ordering_multitask_enriched_pipeline() {
        let spec = spec();
        let utts = generate_corpus(&spec, 20).unwrap();
        let plan = BlockPlan::new(32, 16).unwrap();
        for (sc, tc) in [(0.0, 0.0), (0.0, 50.0), (1.0, 50.0)] {
            let mut cfg = search_cfg();
            cfg.step_cost_ms = sc;
            cfg.tagger_cost_ms = tc;
            for utt in utts.iter().filter(|u| u.labels.contains(&1)) {
                let mt = teacher_forced_timing(&plan, utt, LatencyMode::MultiTask, &cfg).unwrap();
                let en = teacher_forced_timing(&plan, utt, LatencyMode::Enriched, &cfg).unwrap();
                let pl =
                    teacher_forced_timing(&plan, utt, LatencyMode::Pipeline { lookahead: 2 }, &cfg)
                        .unwrap();
                for i in 0..utt.tokens.len() {
                    assert!(
                        mt[i].label_ms <= en[i].label_ms,
                        "{} token {i}: mt {} > enriched {} (sc={sc},tc={tc})",
                        utt.id,
                        mt[i].label_ms,
                        en[i].label_ms
                    );
                    if sc == 0.0 {
                        assert!(
                            en[i].label_ms <= pl[i].label_ms,
                            "{} token {i}: enriched {} > pipeline {} (tc={tc})",
                            utt.id,
                            en[i].label_ms,
                            pl[i].label_ms
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pipeline_lookahead_clock_rules() {
        let times = vec![100.0, 200.0, 300.0, 400.0];
        let end = 500.0;
        // k=0: label time = token time + tagger cost.
        let k0 = pipeline_label_times(&times, end, 0, 30.0);
        assert_eq!(k0, vec![130.0, 230.0, 330.0, 430.0]);
        // larger k strictly increases every non-final label time.
        let k1 = pipeline_label_times(&times, end, 1, 30.0);
        let k2 = pipeline_label_times(&times, end, 2, 30.0);
        for i in 0..times.len() {
            assert!(k1[i] > k0[i] || i + 1 >= times.len());
            assert!(k2[i] >= k1[i]);
        }
        // final k tokens resolve at utterance end.
        assert_eq!(k2[2], end + 30.0);
        assert_eq!(k2[3], end + 30.0);
    }
}

//! Metrics: WER, DR-WER (WER on only fluent words), aligned F1 with
//! precision/recall, token-level latency percentiles, and the
//! report/table rendering used by the CLI.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagging::{align, remove_disfluencies, EditOp};

/// One side of an evaluation pair: transcript tokens with per-token
/// binary disfluency labels. For label-free systems use all zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTranscript {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: Vec<u8>,
}

impl LabeledTranscript {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.labels.len() {
            return Err(Error::Eval(format!(
                "{}: {} tokens with {} labels",
                self.id,
                self.tokens.len(),
                self.labels.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Eval(format!("{}: non-binary label {bad}", self.id)));
        }
        Ok(())
    }
}

/// Pair hypotheses to references by id, sorted by id. Every reference
/// must have exactly one hypothesis and vice versa.
pub fn pair_by_id<'a>(
    hyps: &'a [LabeledTranscript],
    refs: &'a [LabeledTranscript],
) -> Result<Vec<(&'a LabeledTranscript, &'a LabeledTranscript)>> {
    let mut hyp_map: BTreeMap<&str, &LabeledTranscript> = BTreeMap::new();
    for h in hyps {
        if hyp_map.insert(&h.id, h).is_some() {
            return Err(Error::Eval(format!("duplicate hypothesis id {}", h.id)));
        }
    }
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(refs.len());
    let mut refs_sorted: Vec<&LabeledTranscript> = refs.iter().collect();
    refs_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for r in refs_sorted {
        match hyp_map.remove(r.id.as_str()) {
            Some(h) => pairs.push((h, r)),
            None => missing.push(r.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Eval(format!(
            "references without hypotheses: {}",
            missing.join(", ")
        )));
    }
    if !hyp_map.is_empty() {
        let extra: Vec<&str> = hyp_map.keys().copied().collect();
        return Err(Error::Eval(format!(
            "hypotheses without references: {}",
            extra.join(", ")
        )));
    }
    Ok(pairs)
}

/// Error counts of one utterance pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub n_ref: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }
}

fn count_edits(hyp: &[String], reference: &[String]) -> EditCounts {
    let path = align(reference, hyp);
    let (sub, ins, del) = path.error_counts();
    EditCounts {
        sub,
        ins,
        del,
        n_ref: reference.len(),
    }
}

/// Corpus word error rate (S+I+D)/N_ref over id-paired transcripts.
/// An empty reference side with any hypothesis tokens is degenerate;
/// the ratio is +∞ and a warning is recorded.
pub fn wer(hyps: &[LabeledTranscript], refs: &[LabeledTranscript]) -> Result<f64> {
    let (w, _, _) = wer_detail(hyps, refs)?;
    Ok(w)
}

fn ratio(errors: usize, n_ref: usize) -> f64 {
    if n_ref == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        errors as f64 / n_ref as f64
    }
}

fn wer_detail(
    hyps: &[LabeledTranscript],
    refs: &[LabeledTranscript],
) -> Result<(f64, Vec<(String, EditCounts)>, Vec<String>)> {
    let pairs = pair_by_id(hyps, refs)?;
    let mut per_utt = Vec::with_capacity(pairs.len());
    let mut errors = 0;
    let mut n_ref = 0;
    let mut warnings = Vec::new();
    for (h, r) in pairs {
        h.validate()?;
        r.validate()?;
        let c = count_edits(&h.tokens, &r.tokens);
        errors += c.errors();
        n_ref += c.n_ref;
        per_utt.push((r.id.clone(), c));
    }
    if n_ref == 0 && errors > 0 {
        warnings.push(format!(
            "empty reference side with {errors} hypothesis errors: WER reported as +inf"
        ));
    }
    Ok((ratio(errors, n_ref), per_utt, warnings))
}

/// Disfluency-removed WER: strip label-1 tokens from both sides, then
/// WER against the fluent reference. A hypothesis that removes nothing
/// pays for every transcribed reference disfluency as an insertion.
pub fn dr_wer(hyps: &[LabeledTranscript], refs: &[LabeledTranscript]) -> Result<f64> {
    let (w, _, _) = dr_wer_detail(hyps, refs)?;
    Ok(w)
}

fn removed(t: &LabeledTranscript) -> Result<LabeledTranscript> {
    t.validate()?;
    let kept = remove_disfluencies(&t.tokens, &t.labels)?;
    let labels = vec![0u8; kept.len()];
    Ok(LabeledTranscript {
        id: t.id.clone(),
        tokens: kept,
        labels,
    })
}

fn dr_wer_detail(
    hyps: &[LabeledTranscript],
    refs: &[LabeledTranscript],
) -> Result<(f64, Vec<(String, EditCounts)>, Vec<String>)> {
    let hyps: Vec<LabeledTranscript> = hyps.iter().map(removed).collect::<Result<_>>()?;
    let refs: Vec<LabeledTranscript> = refs.iter().map(removed).collect::<Result<_>>()?;
    wer_detail(&hyps, &refs)
}

/// Aligned disfluency detection scores. Hypothesis tokens are aligned
/// to reference tokens; only Match and Substitute positions contribute
/// label decisions, insertions and deletions are excluded entirely.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LabelConfusion {
    pub fn add(&mut self, other: &LabelConfusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Zero-denominator conventions: precision 1 with no predicted
    /// positives, recall 1 with no reference positives; F1 0 when one
    /// side is empty and the other is not.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let predicted_empty = self.tp + self.fp == 0;
        let reference_empty = self.tp + self.fn_ == 0;
        if predicted_empty && reference_empty {
            return 1.0;
        }
        if predicted_empty != reference_empty {
            return 0.0;
        }
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn confusion_one(h: &LabeledTranscript, r: &LabeledTranscript) -> Result<LabelConfusion> {
    h.validate()?;
    r.validate()?;
    let path = align(&r.tokens, &h.tokens);
    let mut c = LabelConfusion::default();
    for op in &path.ops {
        if let EditOp::Match { src, tgt } | EditOp::Substitute { src, tgt } = *op {
            match (h.labels[tgt], r.labels[src]) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(c)
}

/// Corpus-level (f1, precision, recall) over id-paired transcripts.
pub fn aligned_f1(
    hyps: &[LabeledTranscript],
    refs: &[LabeledTranscript],
) -> Result<(f64, f64, f64)> {
    let pairs = pair_by_id(hyps, refs)?;
    let mut total = LabelConfusion::default();
    for (h, r) in pairs {
        total.add(&confusion_one(h, r)?);
    }
    Ok((total.f1(), total.precision(), total.recall()))
}

/// Nearest-rank percentile of an unsorted sample: the ⌈p/100·N⌉-th
/// smallest value.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Eval("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Eval(format!("percentile {p} outside [0,100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Per-utterance latency input: one label emission time and one
/// acoustic boundary per reference token (milliseconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub id: String,
    pub label_ms: Vec<f64>,
    pub boundary_ms: Vec<f64>,
}

/// Token-level label latency: label_ms − boundary_ms per token, pooled
/// over the whole set; negative values (label decided before the
/// acoustic boundary) are retained. Returns (p50, p90, all latencies).
pub fn token_latency(records: &[LatencyRecord]) -> Result<(f64, f64, Vec<f64>)> {
    let mut all = Vec::new();
    for rec in records {
        if rec.label_ms.len() != rec.boundary_ms.len() {
            return Err(Error::Eval(format!(
                "{}: {} label times vs {} boundaries",
                rec.id,
                rec.label_ms.len(),
                rec.boundary_ms.len()
            )));
        }
        for (l, b) in rec.label_ms.iter().zip(&rec.boundary_ms) {
            all.push(l - b);
        }
    }
    let p50 = nearest_rank_percentile(&all, 50.0)?;
    let p90 = nearest_rank_percentile(&all, 90.0)?;
    Ok((p50, p90, all))
}

/// Per-utterance breakdown row of a ScoreReport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub wer: EditCounts,
    pub dr_wer: EditCounts,
    pub labels: LabelConfusion,
}

/// Full evaluation of one system against references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub wer: f64,
    pub dr_wer: f64,
    pub aligned_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub latency_p50_ms: Option<f64>,
    pub latency_p90_ms: Option<f64>,
    pub per_utterance: Vec<UtteranceScore>,
    pub warnings: Vec<String>,
}

/// Score a system. Latency records are optional (label-free or
/// offline decodes carry no emission clock).
pub fn score(
    hyps: &[LabeledTranscript],
    refs: &[LabeledTranscript],
    latency: Option<&[LatencyRecord]>,
) -> Result<ScoreReport> {
    let (wer_ratio, wer_utts, mut warnings) = wer_detail(hyps, refs)?;
    let (dr_ratio, dr_utts, dr_warnings) = dr_wer_detail(hyps, refs)?;
    warnings.extend(dr_warnings);
    let pairs = pair_by_id(hyps, refs)?;
    let mut total = LabelConfusion::default();
    let mut per_utterance = Vec::with_capacity(pairs.len());
    for (k, (h, r)) in pairs.iter().enumerate() {
        let c = confusion_one(h, r)?;
        total.add(&c);
        debug_assert_eq!(wer_utts[k].0, r.id);
        per_utterance.push(UtteranceScore {
            id: r.id.clone(),
            wer: wer_utts[k].1,
            dr_wer: dr_utts[k].1,
            labels: c,
        });
    }
    let (p50, p90) = match latency {
        Some(records) => {
            let (p50, p90, _) = token_latency(records)?;
            (Some(p50), Some(p90))
        }
        None => (None, None),
    };
    Ok(ScoreReport {
        wer: wer_ratio,
        dr_wer: dr_ratio,
        aligned_f1: total.f1(),
        precision: total.precision(),
        recall: total.recall(),
        latency_p50_ms: p50,
        latency_p90_ms: p90,
        per_utterance,
        warnings,
    })
}

/// Plain-text results table, one row per system.
pub fn render_table(rows: &[(String, ScoreReport)]) -> String {
    let mut out = String::new();
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(6)
        .max("System".len());
    out.push_str(&format!(
        "{:<name_w$}  {:>7}  {:>7}  {:>20}  {:>18}\n",
        "System", "WER", "DR-WER", "Aligned F1 / P / R", "TL-Latency 50/90"
    ));
    for (name, r) in rows {
        let latency = match (r.latency_p50_ms, r.latency_p90_ms) {
            (Some(a), Some(b)) => format!("{:.0} / {:.0} ms", a, b),
            _ => "—".to_string(),
        };
        out.push_str(&format!(
            "{:<name_w$}  {:>7.3}  {:>7.3}  {:>20}  {:>18}\n",
            name,
            r.wer,
            r.dr_wer,
            format!("{:.3} / {:.3} / {:.3}", r.aligned_f1, r.precision, r.recall),
            latency
        ));
    }
    out
}

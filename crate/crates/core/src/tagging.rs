//! Disfluency tag grammar, disfluency removal, and edit-distance
//! projection of annotations between transcript versions.
//!
//! Enriched sequences wrap each maximal run of disfluent tokens in a
//! single open/close tag pair. The tag symbols are kept abstract here
//! ([`Enriched`]); vocabulary-level id mapping lives in [`crate::corpus`].

use crate::error::{Error, Result};

/// One symbol of an enriched sequence: a span tag or a plain token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Enriched<T> {
    Open,
    Close,
    Token(T),
}

/// Wrap each maximal run of disfluent tokens in one tag pair.
///
/// Output length is `tokens.len() + 2 * (number of maximal runs)`.
pub fn enrich<T: Clone>(tokens: &[T], labels: &[u8]) -> Result<Vec<Enriched<T>>> {
    if tokens.len() != labels.len() {
        return Err(Error::Argument(format!(
            "enrich: {} tokens but {} labels",
            tokens.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(tokens.len() + 4);
    let mut in_span = false;
    for (tok, &lab) in tokens.iter().zip(labels) {
        if lab != 0 && !in_span {
            out.push(Enriched::Open);
            in_span = true;
        } else if lab == 0 && in_span {
            out.push(Enriched::Close);
            in_span = false;
        }
        out.push(Enriched::Token(tok.clone()));
    }
    if in_span {
        out.push(Enriched::Close);
    }
    Ok(out)
}

/// Invert [`enrich`]: recover `(tokens, labels)` from a well-formed
/// enriched sequence.
///
/// Malformed input (nesting, empty span, stray close, adjacent spans)
/// is a [`Error::TagParse`] with the offending position. A trailing
/// unclosed span on a partial stream is [`Error::TagIncomplete`].
pub fn parse_enriched<T: Clone>(seq: &[Enriched<T>]) -> Result<(Vec<T>, Vec<u8>)> {
    let mut tokens = Vec::with_capacity(seq.len());
    let mut labels = Vec::with_capacity(seq.len());
    let mut open_at: Option<usize> = None;
    let mut span_tokens = 0usize;
    let mut prev_close = false;
    for (pos, sym) in seq.iter().enumerate() {
        match sym {
            Enriched::Open => {
                if open_at.is_some() {
                    return Err(Error::TagParse {
                        pos,
                        msg: "nested <dysfl>".into(),
                    });
                }
                if prev_close {
                    return Err(Error::TagParse {
                        pos,
                        msg: "adjacent disfluent spans (runs must be maximal)".into(),
                    });
                }
                open_at = Some(pos);
                span_tokens = 0;
            }
            Enriched::Close => {
                if open_at.is_none() {
                    return Err(Error::TagParse {
                        pos,
                        msg: "</dysfl> before <dysfl>".into(),
                    });
                }
                if span_tokens == 0 {
                    return Err(Error::TagParse {
                        pos,
                        msg: "empty disfluent span".into(),
                    });
                }
                open_at = None;
                prev_close = true;
                continue;
            }
            Enriched::Token(tok) => {
                tokens.push(tok.clone());
                labels.push(if open_at.is_some() { 1 } else { 0 });
                span_tokens += 1;
            }
        }
        prev_close = false;
    }
    if let Some(pos) = open_at {
        return Err(Error::TagIncomplete { pos });
    }
    Ok((tokens, labels))
}

/// Keep only the tokens labeled fluent, preserving order.
pub fn remove_disfluencies<T: Clone>(tokens: &[T], labels: &[u8]) -> Result<Vec<T>> {
    if tokens.len() != labels.len() {
        return Err(Error::Argument(format!(
            "remove_disfluencies: {} tokens but {} labels",
            tokens.len(),
            labels.len()
        )));
    }
    Ok(tokens
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(t, _)| t.clone())
        .collect())
}

/// One step of an alignment between a source and a target sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { src: usize, tgt: usize },
    Substitute { src: usize, tgt: usize },
    /// Token present only in the target.
    Insert { tgt: usize },
    /// Token present only in the source.
    Delete { src: usize },
}

/// A minimum-edit-distance alignment path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub ops: Vec<EditOp>,
    pub cost: usize,
}

impl AlignmentPath {
    /// Substitution / insertion / deletion counts along the path.
    pub fn error_counts(&self) -> (usize, usize, usize) {
        let (mut s, mut i, mut d) = (0, 0, 0);
        for op in &self.ops {
            match op {
                EditOp::Substitute { .. } => s += 1,
                EditOp::Insert { .. } => i += 1,
                EditOp::Delete { .. } => d += 1,
                EditOp::Match { .. } => {}
            }
        }
        (s, i, d)
    }
}

/// Levenshtein alignment with unit costs.
///
/// Ties during backtracking are broken deterministically, preferring
/// Match > Substitute > Delete > Insert.
pub fn align<T: PartialEq>(source: &[T], target: &[T]) -> AlignmentPath {
    let m = source.len();
    let n = target.len();
    let mut dp = vec![0usize; (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 0..=m {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=n {
        dp[idx(0, j)] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub_cost = if source[i - 1] == target[j - 1] { 0 } else { 1 };
            let best = (dp[idx(i - 1, j - 1)] + sub_cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
            dp[idx(i, j)] = best;
        }
    }

    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let cur = dp[idx(i, j)];
        if i > 0 && j > 0 && source[i - 1] == target[j - 1] && cur == dp[idx(i - 1, j - 1)] {
            ops.push(EditOp::Match {
                src: i - 1,
                tgt: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && cur == dp[idx(i - 1, j - 1)] + 1 {
            ops.push(EditOp::Substitute {
                src: i - 1,
                tgt: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && cur == dp[idx(i - 1, j)] + 1 {
            ops.push(EditOp::Delete { src: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { tgt: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    AlignmentPath {
        ops,
        cost: dp[idx(m, n)],
    }
}

/// Project disfluency labels from an annotated transcript onto a
/// corrected transcript of the same utterance.
///
/// Match/Substitute copy the source label, insertions are labeled
/// fluent, deleted source labels are dropped. Output length always
/// equals `corrected.len()`.
pub fn project_annotations<T: PartialEq>(
    annotated_tokens: &[T],
    annotated_labels: &[u8],
    corrected: &[T],
) -> Result<Vec<u8>> {
    if annotated_tokens.len() != annotated_labels.len() {
        return Err(Error::Argument(format!(
            "project_annotations: {} tokens but {} labels",
            annotated_tokens.len(),
            annotated_labels.len()
        )));
    }
    let path = align(annotated_tokens, corrected);
    let mut out = vec![0u8; corrected.len()];
    for op in &path.ops {
        match *op {
            EditOp::Match { src, tgt } | EditOp::Substitute { src, tgt } => {
                out[tgt] = annotated_labels[src];
            }
            EditOp::Insert { tgt } => out[tgt] = 0,
            EditOp::Delete { .. } => {}
        }
    }
    Ok(out)
}

/// Number of maximal runs of nonzero labels.
pub fn run_count(labels: &[u8]) -> usize {
    let mut runs = 0;
    let mut in_run = false;
    for &l in labels {
        if l != 0 && !in_run {
            runs += 1;
            in_run = true;
        } else if l == 0 {
            in_run = false;
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    /// The flight example: reparandum "from boston" + interregnum
    /// "uh i mean", repair "to denver".
    fn flight() -> (Vec<String>, Vec<u8>) {
        (
            toks(&["flights", "from", "boston", "uh", "i", "mean", "to", "denver"]),
            vec![0, 1, 1, 1, 1, 1, 0, 0],
        )
    }

    #[test]
    fn enrich_flight_example() {
        let (y, d) = flight();
        let enriched = enrich(&y, &d).unwrap();
        let expected: Vec<Enriched<String>> = vec![
            Enriched::Token("flights".into()),
            Enriched::Open,
            Enriched::Token("from".into()),
            Enriched::Token("boston".into()),
            Enriched::Token("uh".into()),
            Enriched::Token("i".into()),
            Enriched::Token("mean".into()),
            Enriched::Close,
            Enriched::Token("to".into()),
            Enriched::Token("denver".into()),
        ];
        assert_eq!(enriched, expected);
        assert_eq!(parse_enriched(&enriched).unwrap(), (y, d));
    }

    #[test]
    fn enrich_no_disfluencies_is_identity() {
        let y = toks(&["a", "b", "c"]);
        let enriched = enrich(&y, &[0, 0, 0]).unwrap();
        assert_eq!(
            enriched,
            y.iter().cloned().map(Enriched::Token).collect::<Vec<_>>()
        );
    }

    #[test]
    fn enrich_two_runs_length() {
        // [a,b,a] with labels [1,0,1]: L' = 3 + 2*2 = 7
        let y = toks(&["a", "b", "a"]);
        let enriched = enrich(&y, &[1, 0, 1]).unwrap();
        assert_eq!(enriched.len(), 7);
        assert_eq!(
            enriched,
            vec![
                Enriched::Open,
                Enriched::Token("a".into()),
                Enriched::Close,
                Enriched::Token("b".into()),
                Enriched::Open,
                Enriched::Token("a".into()),
                Enriched::Close,
            ]
        );
    }

    #[test]
    fn enrich_length_mismatch() {
        assert!(matches!(
            enrich(&toks(&["a"]), &[0, 1]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn parse_rejects_empty_span() {
        let seq: Vec<Enriched<String>> = vec![Enriched::Open, Enriched::Close];
        assert!(matches!(
            parse_enriched(&seq),
            Err(Error::TagParse { pos: 1, .. })
        ));
    }

    #[test]
    fn parse_rejects_nesting_and_stray_close() {
        let nested: Vec<Enriched<u32>> =
            vec![Enriched::Open, Enriched::Token(1), Enriched::Open];
        assert!(matches!(
            parse_enriched(&nested),
            Err(Error::TagParse { pos: 2, .. })
        ));
        let stray: Vec<Enriched<u32>> = vec![Enriched::Token(1), Enriched::Close];
        assert!(matches!(
            parse_enriched(&stray),
            Err(Error::TagParse { pos: 1, .. })
        ));
    }

    #[test]
    fn parse_rejects_adjacent_spans() {
        let seq: Vec<Enriched<u32>> = vec![
            Enriched::Open,
            Enriched::Token(1),
            Enriched::Close,
            Enriched::Open,
            Enriched::Token(2),
            Enriched::Close,
        ];
        assert!(matches!(
            parse_enriched(&seq),
            Err(Error::TagParse { pos: 3, .. })
        ));
    }

    #[test]
    fn parse_unclosed_span_is_incomplete() {
        let seq: Vec<Enriched<u32>> = vec![Enriched::Token(0), Enriched::Open, Enriched::Token(1)];
        assert!(matches!(
            parse_enriched(&seq),
            Err(Error::TagIncomplete { pos: 1 })
        ));
    }

    #[test]
    fn remove_disfluencies_flight() {
        let (y, d) = flight();
        assert_eq!(
            remove_disfluencies(&y, &d).unwrap(),
            toks(&["flights", "to", "denver"])
        );
        assert_eq!(remove_disfluencies(&y, &[0; 8]).unwrap(), y);
        assert_eq!(remove_disfluencies(&y, &[1; 8]).unwrap(), Vec::<String>::new());
    }

    #[test]
    fn remove_equals_parse_then_filter_of_enrich() {
        // Two-path equivalence on a handful of random label patterns.
        use rand::prelude::*;
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(0..10usize);
            let y: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let d: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let direct = remove_disfluencies(&y, &d).unwrap();
            let enriched = enrich(&y, &d).unwrap();
            let (py, pd) = parse_enriched(&enriched).unwrap();
            let via_tags = remove_disfluencies(&py, &pd).unwrap();
            assert_eq!(direct, via_tags);
        }
    }

    #[test]
    fn align_identity() {
        let s = toks(&["a", "b", "c"]);
        let path = align(&s, &s);
        assert_eq!(path.cost, 0);
        assert!(path.ops.iter().all(|op| matches!(op, EditOp::Match { .. })));
    }

    #[test]
    fn align_single_delete() {
        let path = align(&toks(&["a", "b", "c"]), &toks(&["a", "c"]));
        assert_eq!(path.cost, 1);
        assert_eq!(
            path.ops,
            vec![
                EditOp::Match { src: 0, tgt: 0 },
                EditOp::Delete { src: 1 },
                EditOp::Match { src: 2, tgt: 1 },
            ]
        );
    }

    #[test]
    fn align_empty_source() {
        let path = align(&Vec::<String>::new(), &toks(&["x"]));
        assert_eq!(path.cost, 1);
        assert_eq!(path.ops, vec![EditOp::Insert { tgt: 0 }]);
    }

    /// Brute-force recursive edit distance, independent of the DP table.
    fn brute_cost<T: PartialEq>(s: &[T], t: &[T]) -> usize {
        if s.is_empty() {
            return t.len();
        }
        if t.is_empty() {
            return s.len();
        }
        let sub = brute_cost(&s[1..], &t[1..]) + usize::from(s[0] != t[0]);
        let del = brute_cost(&s[1..], t) + 1;
        let ins = brute_cost(s, &t[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn align_cost_matches_recursive_oracle() {
        use rand::prelude::*;
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..300 {
            let m = rng.random_range(0..=7usize);
            let n = rng.random_range(0..=7usize);
            let s: Vec<u8> = (0..m).map(|_| rng.random_range(0..4)).collect();
            let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let path = align(&s, &t);
            assert_eq!(path.cost, brute_cost(&s, &t), "s={s:?} t={t:?}");
            let (sub, ins, del) = path.error_counts();
            assert_eq!(sub + ins + del, path.cost);
        }
    }

    #[test]
    fn project_identity() {
        let y = toks(&["a", "b", "c"]);
        let d = vec![0, 1, 0];
        assert_eq!(project_annotations(&y, &d, &y).unwrap(), d);
    }

    #[test]
    fn project_insert_gets_fluent_label() {
        let labels =
            project_annotations(&toks(&["a", "b"]), &[0, 1], &toks(&["a", "x", "b"])).unwrap();
        assert_eq!(labels, vec![0, 0, 1]);
    }

    #[test]
    fn project_delete_drops_label() {
        let labels = project_annotations(&toks(&["a", "b"]), &[0, 1], &toks(&["a"])).unwrap();
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn run_count_basic() {
        assert_eq!(run_count(&[]), 0);
        assert_eq!(run_count(&[0, 0]), 0);
        assert_eq!(run_count(&[1, 1, 0, 1]), 2);
        assert_eq!(run_count(&[1]), 1);
    }
}

//! CTC loss and segmentation over encoder frames.
//!
//! The forward algorithm runs in log space directly on the autodiff
//! tape — every DP cell is a scalar node built from `pick`, `add`, and
//! `logaddexp` — so gradients are exact by construction. The
//! brute-force all-alignments oracle and the Viterbi segmenter are
//! plain functions over values.

use crate::encoder::DOWNSAMPLE;
use crate::error::{Error, Result};
use crate::nn::tape::{Tape, TensorId};

/// Minimal number of frames a CTC alignment needs: one per label plus
/// one separating blank per adjacent duplicate pair.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of building a CTC loss term.
pub enum CtcOutcome {
    Loss(TensorId),
    /// Target needs more frames than are available; the alignment
    /// probability is 0 (loss +∞), reported instead of recorded.
    Infeasible { required: usize, available: usize },
}

/// −log Σ_alignments Π p over the blank-expanded state graph.
///
/// `log_probs` must be row-wise log-probabilities (T×V); `target` must
/// not contain `blank`.
pub fn ctc_loss_on_tape(
    tape: &mut Tape,
    log_probs: TensorId,
    target: &[usize],
    blank: usize,
) -> Result<CtcOutcome> {
    let (t_frames, vocab) = tape.shape(log_probs);
    if target.iter().any(|&y| y >= vocab) {
        return Err(Error::Argument("ctc: target id outside vocabulary".into()));
    }
    if target.contains(&blank) {
        return Err(Error::Argument("ctc: target contains blank".into()));
    }
    let required = ctc_required_frames(target);
    if required > t_frames {
        return Ok(CtcOutcome::Infeasible {
            required,
            available: t_frames,
        });
    }

    // Expanded states: blank, y1, blank, y2, …, blank (S = 2L+1).
    let s_len = 2 * target.len() + 1;
    let state_label = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };

    // α recurrence with unreachable cells as None — no −∞ constants on
    // the tape.
    let mut prev: Vec<Option<TensorId>> = vec![None; s_len];
    prev[0] = Some(tape.pick(log_probs, 0, state_label(0)));
    if s_len > 1 {
        prev[1] = Some(tape.pick(log_probs, 0, state_label(1)));
    }
    for t in 1..t_frames {
        let mut cur: Vec<Option<TensorId>> = vec![None; s_len];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_opt_add(tape, acc, prev[s - 1]);
            }
            // Skip transition: token state with a different token two
            // states back.
            if s >= 2 && s % 2 == 1 && state_label(s) != state_label(s - 2) {
                acc = log_opt_add(tape, acc, prev[s - 2]);
            }
            if let Some(a) = acc {
                let lp = tape.pick(log_probs, t, state_label(s));
                cur[s] = Some(tape.add(a, lp));
            }
        }
        prev = cur;
    }

    let tail = log_opt_add(
        tape,
        prev[s_len - 1],
        if s_len >= 2 { prev[s_len - 2] } else { None },
    )
    .ok_or_else(|| Error::Argument("ctc: no reachable final state".into()))?;
    Ok(CtcOutcome::Loss(tape.scale(tail, -1.0)))
}

fn log_opt_add(tape: &mut Tape, a: Option<TensorId>, b: Option<TensorId>) -> Option<TensorId> {
    match (a, b) {
        (Some(x), Some(y)) => Some(tape.logaddexp(x, y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Value-only convenience wrapper; +∞ when the target is infeasible.
pub fn ctc_loss_value(log_probs: &[f64], t_frames: usize, vocab: usize, target: &[usize], blank: usize) -> f64 {
    let mut tape = Tape::new();
    let lp = tape.constant(t_frames, vocab, log_probs.to_vec());
    match ctc_loss_on_tape(&mut tape, lp, target, blank) {
        Ok(CtcOutcome::Loss(id)) => tape.scalar(id),
        Ok(CtcOutcome::Infeasible { .. }) => f64::INFINITY,
        Err(_) => f64::NAN,
    }
}

/// Exhaustive oracle: sum over every length-T frame labeling whose
/// collapse (merge repeats, drop blanks) equals `target`. Exponential
/// in T — verification only.
pub fn ctc_brute_force(
    log_probs: &[f64],
    t_frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> f64 {
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_frames];
    loop {
        // Collapse this path.
        let mut collapsed = Vec::with_capacity(t_frames);
        let mut prev = usize::MAX;
        for &p in &path {
            if p != prev && p != blank {
                collapsed.push(p);
            }
            prev = p;
        }
        if collapsed == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &p)| log_probs[t * vocab + p])
                .sum();
            total = logaddexp(total, lp);
        }
        // Next path in odometer order.
        let mut t = 0;
        loop {
            if t == t_frames {
                return -total;
            }
            path[t] += 1;
            if path[t] < vocab {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Viterbi (max-product) CTC alignment. Returns the last frame index
/// assigned to each target token's state; non-decreasing by
/// construction of the monotone state graph.
pub fn ctc_segment(
    log_probs: &[f64],
    t_frames: usize,
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<Vec<usize>> {
    if target.is_empty() {
        return Ok(Vec::new());
    }
    let required = ctc_required_frames(target);
    if required > t_frames {
        return Err(Error::Segmentation(format!(
            "target needs {required} frames, only {t_frames} available"
        )));
    }
    let s_len = 2 * target.len() + 1;
    let state_label = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };
    let lp = |t: usize, s: usize| log_probs[t * vocab + state_label(s)];

    let neg = f64::NEG_INFINITY;
    let mut score = vec![neg; t_frames * s_len];
    let mut back: Vec<u8> = vec![0; t_frames * s_len]; // 0=stay,1=prev,2=skip
    score[0] = lp(0, 0);
    if s_len > 1 {
        score[1] = lp(0, 1);
    }
    for t in 1..t_frames {
        for s in 0..s_len {
            let mut best = score[(t - 1) * s_len + s];
            let mut arg = 0u8;
            if s >= 1 && score[(t - 1) * s_len + s - 1] > best {
                best = score[(t - 1) * s_len + s - 1];
                arg = 1;
            }
            if s >= 2 && s % 2 == 1 && state_label(s) != state_label(s - 2) {
                let cand = score[(t - 1) * s_len + s - 2];
                if cand > best {
                    best = cand;
                    arg = 2;
                }
            }
            if best > neg {
                score[t * s_len + s] = best + lp(t, s);
                back[t * s_len + s] = arg;
            }
        }
    }

    let last = t_frames - 1;
    let (mut state, final_score) = if s_len >= 2 && score[last * s_len + s_len - 2] > score[last * s_len + s_len - 1] {
        (s_len - 2, score[last * s_len + s_len - 2])
    } else {
        (s_len - 1, score[last * s_len + s_len - 1])
    };
    if final_score == neg {
        return Err(Error::Segmentation("no feasible alignment".into()));
    }

    let mut boundaries = vec![0usize; target.len()];
    for t in (0..t_frames).rev() {
        if state % 2 == 1 {
            let k = state / 2;
            // Walking backwards, the first time we see token k's state
            // is its last frame; `max` keeps that first sighting.
            boundaries[k] = boundaries[k].max(t);
        }
        if t > 0 {
            state -= back[t * s_len + state] as usize;
        }
    }
    Ok(boundaries)
}

/// End-of-token clock time for a downsampled frame index: the frame
/// covers raw frames `[4f, 4f+4)`, so it ends at `(f+1)·4` raw frames.
pub fn segment_boundary_ms(ds_frame: usize, frame_period_ms: f64) -> f64 {
    ((ds_frame + 1) * DOWNSAMPLE) as f64 * frame_period_ms
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    /// Random row-wise log-softmax matrix.
    fn random_log_probs(t: usize, v: usize, rng: &mut StdRng) -> Vec<f64> {
        let mut out = vec![0.0; t * v];
        for row in out.chunks_mut(v) {
            for x in row.iter_mut() {
                *x = rng.random_range(-3.0..3.0);
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        out
    }

    #[test]
    fn single_frame_single_token() {
        let mut rng = StdRng::seed_from_u64(1);
        let lp = random_log_probs(1, 4, &mut rng);
        // blank=0, target=[2]: only path is [2].
        let loss = ctc_loss_value(&lp, 1, 4, &[2], 0);
        assert!((loss - (-lp[2])).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = StdRng::seed_from_u64(2);
        let lp = random_log_probs(5, 3, &mut rng);
        let loss = ctc_loss_value(&lp, 5, 3, &[], 0);
        let expected: f64 = -(0..5).map(|t| lp[t * 3]).sum::<f64>();
        assert!((loss - expected).abs() < 1e-10);
    }

    #[test]
    fn infeasible_target_is_infinite() {
        let mut rng = StdRng::seed_from_u64(3);
        let lp = random_log_probs(2, 3, &mut rng);
        // [1,1] needs 3 frames (separating blank).
        assert_eq!(ctc_required_frames(&[1, 1]), 3);
        assert!(ctc_loss_value(&lp, 2, 3, &[1, 1], 0).is_infinite());
        assert!(ctc_segment(&lp, 2, 3, &[1, 1], 0).is_err());
    }

    #[test]
    fn matches_brute_force_small() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..60 {
            let t = rng.random_range(1..=5usize);
            let v = rng.random_range(2..=4usize);
            let l = rng.random_range(0..=3usize).min(t);
            let target: Vec<usize> = (0..l).map(|_| rng.random_range(1..v)).collect();
            let lp = random_log_probs(t, v, &mut rng);
            let fast = ctc_loss_value(&lp, t, v, &target, 0);
            let brute = ctc_brute_force(&lp, t, v, &target, 0);
            if fast.is_infinite() {
                assert!(brute.is_infinite(), "t={t} target={target:?}");
            } else {
                assert!((fast - brute).abs() < 1e-6, "t={t} target={target:?}: {fast} vs {brute}");
            }
        }
    }

    #[test]
    fn gradient_matches_central_difference() {
        use crate::nn::gradcheck::grad_check;
        use crate::nn::params::ParameterStore;

        let (t, v) = (6, 4);
        let mut rng = StdRng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let logits: Vec<f64> = (0..t * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.insert_raw("logits", (t, v), logits);
        let target = [1, 2, 1];

        let forward = |s: &ParameterStore, tape: &mut Tape| -> TensorId {
            let x = tape.param(s, "logits");
            let lp = tape.log_softmax(x);
            match ctc_loss_on_tape(tape, lp, &target, 0).unwrap() {
                CtcOutcome::Loss(id) => id,
                CtcOutcome::Infeasible { .. } => unreachable!(),
            }
        };
        let grads = {
            let mut tape = Tape::new();
            let loss = forward(&store, &mut tape);
            tape.backward(loss).unwrap()
        };
        let report = grad_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let loss = forward(s, &mut tape);
                tape.scalar(loss)
            },
            &grads,
            1e-4,
            1e-5,
            50,
            0,
        );
        assert!(report.passed(), "{:?}", report.failures.first());
    }

    #[test]
    fn segment_single_dominant_token() {
        // T=3, token 1 dominant everywhere → best path stays in the
        // token state; boundary = frame 2.
        let mut lp = vec![-5.0; 3 * 3];
        for t in 0..3 {
            lp[t * 3 + 1] = -0.01;
        }
        let b = ctc_segment(&lp, 3, 3, &[1], 0).unwrap();
        assert_eq!(b, vec![2]);
    }

    #[test]
    fn segment_recovers_planted_boundaries() {
        // Construct log-probs from a known alignment: token 1 on
        // frames 0..3, blank on 3..5, token 2 on 5..8.
        let v = 4;
        let t = 8;
        let plan: [usize; 8] = [1, 1, 1, 0, 0, 2, 2, 2];
        let mut lp = vec![-8.0; t * v];
        for (fr, &lab) in plan.iter().enumerate() {
            lp[fr * v + lab] = -0.001;
        }
        let b = ctc_segment(&lp, t, v, &[1, 2], 0).unwrap();
        assert_eq!(b, vec![2, 7]);
    }

    #[test]
    fn segment_monotone_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut tested = 0;
        while tested < 300 {
            let t = rng.random_range(4..=12usize);
            let v = rng.random_range(2..=5usize);
            let l = rng.random_range(1..=4usize);
            let target: Vec<usize> = (0..l).map(|_| rng.random_range(1..v)).collect();
            if ctc_required_frames(&target) > t {
                continue;
            }
            let lp = random_log_probs(t, v, &mut rng);
            let b = ctc_segment(&lp, t, v, &target, 0).unwrap();
            assert_eq!(b.len(), target.len());
            assert!(b.windows(2).all(|w| w[0] <= w[1]), "{b:?}");
            assert!(*b.last().unwrap() < t);
            tested += 1;
        }
    }

    #[test]
    fn boundary_ms_uses_downsampling() {
        assert_eq!(segment_boundary_ms(0, 10.0), 40.0);
        assert_eq!(segment_boundary_ms(9, 10.0), 400.0);
    }
}

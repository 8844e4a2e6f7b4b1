//! Data model, file formats, and the synthetic disfluent-speech
//! corpus generator.
//!
//! The generator plants three learnable cues for disfluency at desk
//! scale: filler words that only ever occur inside disfluent runs, a
//! low-energy pause after every disfluent run (the interruption-point
//! cue), and repetition-style runs that echo the upcoming fluent token
//! (a lexical cue that needs token identity to exploit).

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const BLANK: usize = 2;
pub const UNK: usize = 3;
/// First regular id in a base vocabulary.
pub const BASE_REGULAR_START: usize = 4;
/// `<dysfl>` in an enriched vocabulary.
pub const OPEN_TAG: usize = 4;
/// `</dysfl>` in an enriched vocabulary.
pub const CLOSE_TAG: usize = 5;
/// First regular id in an enriched vocabulary.
pub const ENRICHED_REGULAR_START: usize = 6;

pub const FEAT_MAGIC: &[u8; 8] = b"DSFEAT01";

const SPECIALS: [&str; 4] = ["<sos>", "<eos>", "<blank>", "<unk>"];
const TAG_OPEN: &str = "<dysfl>";
const TAG_CLOSE: &str = "</dysfl>";

// ---- vocabulary ------------------------------------------------------

/// Ordered token inventory. Base layout: `<sos> <eos> <blank> <unk>`
/// then sorted regular tokens. The enriched layout V′ additionally
/// holds `<dysfl>` and `</dysfl>` at ids 4 and 5, shifting regular ids
/// up by two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    enriched: bool,
}

impl Vocabulary {
    /// Build a base vocabulary from regular token strings (deduplicated
    /// and sorted).
    pub fn base(regular: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut reg: Vec<String> = regular.into_iter().collect();
        reg.sort();
        reg.dedup();
        for t in &reg {
            if t.is_empty() || t.contains('<') || t.contains('>') {
                return Err(Error::Argument(format!(
                    "regular token `{t}` is empty or uses reserved angle brackets"
                )));
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(reg);
        Ok(Self::from_tokens(tokens, false))
    }

    /// Union of all token strings appearing in `utts`.
    pub fn from_corpus(utts: &[LabeledUtterance]) -> Result<Self> {
        Vocabulary::base(utts.iter().flat_map(|u| u.tokens.iter().cloned()))
    }

    fn from_tokens(tokens: Vec<String>, enriched: bool) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            enriched,
        }
    }

    /// Rebuild a vocabulary from an explicit ordered token list (e.g.
    /// out of a checkpoint), validating the special-token layout.
    pub fn from_token_list(tokens: Vec<String>, enriched: bool) -> Result<Self> {
        let regular_start = if enriched {
            ENRICHED_REGULAR_START
        } else {
            BASE_REGULAR_START
        };
        if tokens.len() < regular_start {
            return Err(Error::Argument(format!(
                "vocabulary of {} tokens is missing its specials",
                tokens.len()
            )));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Argument(format!(
                    "vocabulary slot {i} holds `{}`, expected `{want}`",
                    tokens[i]
                )));
            }
        }
        if enriched && (tokens[OPEN_TAG] != TAG_OPEN || tokens[CLOSE_TAG] != TAG_CLOSE) {
            return Err(Error::Argument(
                "enriched vocabulary must hold the span tags at ids 4 and 5".into(),
            ));
        }
        let regular = &tokens[regular_start..];
        for t in regular {
            if t.is_empty() || t.contains('<') || t.contains('>') {
                return Err(Error::Argument(format!(
                    "regular token `{t}` is empty or uses reserved angle brackets"
                )));
            }
        }
        if regular.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(
                "regular tokens must be strictly sorted".into(),
            ));
        }
        Ok(Self::from_tokens(tokens, enriched))
    }

    /// The extended vocabulary V′ with span tags inserted at ids 4/5.
    pub fn enriched_version(&self) -> Vocabulary {
        assert!(!self.enriched, "already enriched");
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.push(TAG_OPEN.to_string());
        tokens.push(TAG_CLOSE.to_string());
        tokens.extend(self.tokens[BASE_REGULAR_START..].iter().cloned());
        Self::from_tokens(tokens, true)
    }

    pub fn is_enriched(&self) -> bool {
        self.enriched
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id for a token string, falling back to `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn regular_start(&self) -> usize {
        if self.enriched {
            ENRICHED_REGULAR_START
        } else {
            BASE_REGULAR_START
        }
    }

    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        self.regular_start()..self.size()
    }

    pub fn open_tag(&self) -> Option<usize> {
        self.enriched.then_some(OPEN_TAG)
    }

    pub fn close_tag(&self) -> Option<usize> {
        self.enriched.then_some(CLOSE_TAG)
    }

    /// Map a base-vocabulary id into the enriched id space.
    pub fn base_to_enriched_id(id: usize) -> usize {
        if id < BASE_REGULAR_START {
            id
        } else {
            id + 2
        }
    }

    /// Map an enriched id back to base space; `None` for the tags.
    pub fn enriched_to_base_id(id: usize) -> Option<usize> {
        match id {
            OPEN_TAG | CLOSE_TAG => None,
            i if i < BASE_REGULAR_START => Some(i),
            i => Some(i - 2),
        }
    }
}

// ---- feature matrices ------------------------------------------------

/// A T×D matrix of acoustic features, stored row-major as f32 to match
/// the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    pub t_frames: usize,
    pub feat_dim: usize,
    pub data: Vec<f32>,
    pub frame_period_ms: f64,
}

impl AcousticFeatures {
    pub fn new(t_frames: usize, feat_dim: usize, data: Vec<f32>, frame_period_ms: f64) -> Result<Self> {
        if t_frames == 0 {
            return Err(Error::format_anon("features with T_frames=0"));
        }
        if data.len() != t_frames * feat_dim {
            return Err(Error::format_anon(format!(
                "feature buffer {} != {t_frames}×{feat_dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format_anon("non-finite feature value"));
        }
        Ok(AcousticFeatures {
            t_frames,
            feat_dim,
            data,
            frame_period_ms,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.feat_dim..(t + 1) * self.feat_dim]
    }

    /// Duration of the whole utterance on the simulated clock.
    pub fn duration_ms(&self) -> f64 {
        self.t_frames as f64 * self.frame_period_ms
    }
}

// ---- utterances ------------------------------------------------------

/// One annotated utterance. Tokens are strings (the corpus format is
/// self-contained); integer ids exist only relative to a [`Vocabulary`]
/// at the model boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub id: String,
    pub features: AcousticFeatures,
    pub tokens: Vec<String>,
    pub labels: Vec<u8>,
    /// Per-token end frame (exclusive), including any trailing pause —
    /// oracle boundaries from the generator.
    pub boundary_frames: Option<Vec<usize>>,
}

impl LabeledUtterance {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.labels.len() {
            return Err(Error::format(
                &self.id,
                format!("{} tokens but {} labels", self.tokens.len(), self.labels.len()),
            ));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::format(&self.id, format!("label {bad} not in {{0,1}}")));
        }
        if let Some(b) = &self.boundary_frames {
            if b.len() != self.tokens.len() {
                return Err(Error::format(&self.id, "boundary_frames length mismatch"));
            }
            if b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::format(&self.id, "boundary_frames not strictly increasing"));
            }
            if b.last().is_some_and(|&last| last > self.features.t_frames) {
                return Err(Error::format(&self.id, "boundary beyond T_frames"));
            }
        }
        Ok(())
    }

    /// Token ids under `vocab` (unknown strings map to `<unk>`).
    pub fn token_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.tokens.iter().map(|t| vocab.id_or_unk(t)).collect()
    }
}

// ---- synthesis -------------------------------------------------------

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisSpec {
    /// Total vocabulary size including the four specials.
    pub vocab_size: usize,
    /// Target fraction of disfluent tokens.
    pub disfluency_rate: f64,
    pub feat_dim: usize,
    /// Inclusive range of rendered frames per token.
    pub frames_per_token: (usize, usize),
    /// Low-energy frames appended after each disfluent run.
    pub pause_frames_after_reparandum: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        SynthesisSpec {
            vocab_size: 50,
            disfluency_rate: 0.15,
            feat_dim: 16,
            frames_per_token: (4, 8),
            pause_frames_after_reparandum: 8,
            noise_std: 0.3,
            seed: 42,
        }
    }
}

/// Fluent tokens per utterance (internal; not part of the spec type).
const UTT_FLUENT_TOKENS: (usize, usize) = (10, 24);
/// Maximal disfluent-run length; mean run length is 2 under the
/// uniform {1,2,3} draw.
const MAX_RUN: usize = 3;
const MEAN_RUN: f64 = 2.0;
/// Probability a disfluent run copies the upcoming fluent token
/// (repetition-repair structure).
const REPEAT_PROB: f64 = 0.5;
/// Seed base for per-token feature templates; constant so that
/// separately generated splits share acoustic identities.
const TEMPLATE_SEED: u64 = 0x5df1_7e4d_0000_0000;
const FILLERS: [&str; 8] = ["uh", "um", "erm", "mhm", "hmm", "uhh", "ah", "eh"];
const SYLLABLES: [&str; 10] = ["ba", "de", "ki", "mo", "nu", "pa", "re", "si", "tu", "wo"];

impl SynthesisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} cannot reserve the 4 special tokens",
                self.vocab_size
            )));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config(
                "vocab_size must leave at least 2 regular tokens".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.disfluency_rate) {
            return Err(Error::Config(format!(
                "disfluency_rate {} outside [0,1]",
                self.disfluency_rate
            )));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".into()));
        }
        let (lo, hi) = self.frames_per_token;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "frames_per_token range ({lo},{hi}) invalid"
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Regular word strings: a filler block (~10% of the pool, drawn
    /// from a fixed list) plus deterministic pseudo-words.
    pub fn word_list(&self) -> (Vec<String>, Vec<String>) {
        let n_regular = self.vocab_size - 4;
        let n_fillers = (n_regular / 10).clamp(1, FILLERS.len()).min(n_regular - 1);
        let fillers: Vec<String> = FILLERS[..n_fillers].iter().map(|s| s.to_string()).collect();
        let mut words = Vec::with_capacity(n_regular - n_fillers);
        for i in 0..n_regular - n_fillers {
            let mut w = String::new();
            let mut v = i;
            loop {
                w.insert_str(0, SYLLABLES[v % 10]);
                v /= 10;
                if v == 0 {
                    break;
                }
            }
            words.push(w);
        }
        (fillers, words)
    }

    /// The base vocabulary this spec generates under.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let (fillers, words) = self.word_list();
        Vocabulary::base(fillers.into_iter().chain(words))
    }

    /// Per-token acoustic template: a fixed random unit vector keyed by
    /// the token string (split-independent).
    pub fn template(&self, token: &str) -> Vec<f64> {
        let mut h: u64 = 1469598103934665603; // FNV-1a over the token
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        let mut rng = StdRng::seed_from_u64(TEMPLATE_SEED ^ h);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut v: Vec<f64> = (0..self.feat_dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Generate `n_utts` utterances. Deterministic given `spec.seed`.
pub fn generate_corpus(spec: &SynthesisSpec, n_utts: usize) -> Result<Vec<LabeledUtterance>> {
    spec.validate()?;
    let (fillers, words) = spec.word_list();
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).unwrap();
    // Run-start probability q: each fluent token is preceded by a run
    // with probability q of expected length MEAN_RUN, so the disfluent
    // fraction is q·MEAN_RUN/(1+q·MEAN_RUN); solve for the target rate.
    let rho = spec.disfluency_rate;
    let q = if rho >= 1.0 {
        1.0
    } else {
        (rho / (MEAN_RUN * (1.0 - rho))).min(1.0)
    };

    let mut out = Vec::with_capacity(n_utts);
    for utt_idx in 0..n_utts {
        let n_fluent = rng.random_range(UTT_FLUENT_TOKENS.0..=UTT_FLUENT_TOKENS.1);
        let fluent: Vec<&String> =
            (0..n_fluent).map(|_| &words[rng.random_range(0..words.len())]).collect();

        // Token plan: (string, label, pause_after)
        let mut plan: Vec<(&str, u8, bool)> = Vec::new();
        for w in &fluent {
            if q > 0.0 && rng.random_bool(q) {
                let run_len = rng.random_range(1..=MAX_RUN);
                for k in 0..run_len {
                    let tok: &str = if rng.random_bool(REPEAT_PROB) {
                        // Echo the upcoming repair token (k==run_len−1
                        // puts the echo right before it), else a filler.
                        if k + 1 == run_len {
                            w
                        } else {
                            &fillers[rng.random_range(0..fillers.len())]
                        }
                    } else {
                        &fillers[rng.random_range(0..fillers.len())]
                    };
                    let last = k + 1 == run_len;
                    plan.push((tok, 1, last));
                }
            }
            plan.push((w, 0, false));
        }

        let mut data: Vec<f32> = Vec::new();
        let mut tokens = Vec::with_capacity(plan.len());
        let mut labels = Vec::with_capacity(plan.len());
        let mut boundaries = Vec::with_capacity(plan.len());
        for (tok, label, pause_after) in plan {
            let template = spec.template(tok);
            let dur = rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            for _ in 0..dur {
                for d in 0..spec.feat_dim {
                    data.push((template[d] + noise.sample(&mut rng)) as f32);
                }
            }
            if pause_after {
                // Interruption-point cue: near-silent frames with a
                // tenth of the usual noise.
                for _ in 0..spec.pause_frames_after_reparandum {
                    for _ in 0..spec.feat_dim {
                        data.push((0.1 * noise.sample(&mut rng)) as f32);
                    }
                }
            }
            tokens.push(tok.to_string());
            labels.push(label);
            boundaries.push(data.len() / spec.feat_dim);
        }

        let t_frames = data.len() / spec.feat_dim;
        let utt = LabeledUtterance {
            id: format!("utt_{utt_idx:05}"),
            features: AcousticFeatures::new(t_frames, spec.feat_dim, data, 10.0)?,
            tokens,
            labels,
            boundary_frames: Some(boundaries),
        };
        debug_assert!(utt.validate().is_ok());
        out.push(utt);
    }
    Ok(out)
}

// ---- on-disk format --------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    tokens: Vec<String>,
    labels: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boundary_frames: Option<Vec<usize>>,
    feature_file: String,
    frame_period_ms: f64,
}

/// Write `manifest.jsonl` + `feats/<id>.dsf` under `dir`.
pub fn write_corpus(utts: &[LabeledUtterance], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("feats"))?;
    let mut manifest = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
    for u in utts {
        u.validate()?;
        let feature_file = format!("feats/{}.dsf", u.id);
        let line = ManifestLine {
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            labels: u.labels.clone(),
            boundary_frames: u.boundary_frames.clone(),
            feature_file: feature_file.clone(),
            frame_period_ms: u.features.frame_period_ms,
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n")?;

        let mut w = BufWriter::new(File::create(dir.join(&feature_file))?);
        w.write_all(FEAT_MAGIC)?;
        w.write_all(&(u.features.t_frames as u32).to_le_bytes())?;
        w.write_all(&(u.features.feat_dim as u32).to_le_bytes())?;
        for v in &u.features.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    manifest.flush()?;
    Ok(())
}

/// Read a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<LabeledUtterance>> {
    let manifest = File::open(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(manifest).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| {
            Error::format_anon(format!("manifest line {}: {e}", lineno + 1))
        })?;
        let features = read_features(&dir.join(&m.feature_file), &m.id, m.frame_period_ms)?;
        let utt = LabeledUtterance {
            id: m.id,
            features,
            tokens: m.tokens,
            labels: m.labels,
            boundary_frames: m.boundary_frames,
        };
        utt.validate()?;
        out.push(utt);
    }
    Ok(out)
}

fn read_features(path: &Path, id: &str, frame_period_ms: f64) -> Result<AcousticFeatures> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::format(id, format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(id, format!("truncated feature header: {e}")))?;
    if &magic != FEAT_MAGIC {
        return Err(Error::format(id, format!("bad feature magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|e| Error::format(id, format!("truncated dims: {e}")))?;
    let t_frames = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)
        .map_err(|e| Error::format(id, format!("truncated dims: {e}")))?;
    let feat_dim = u32::from_le_bytes(u32buf) as usize;
    if t_frames == 0 {
        return Err(Error::format(id, "feature file with T_frames=0"));
    }
    let mut data = Vec::with_capacity(t_frames * feat_dim);
    let mut f32buf = [0u8; 4];
    for _ in 0..t_frames * feat_dim {
        r.read_exact(&mut f32buf)
            .map_err(|e| Error::format(id, format!("truncated feature data: {e}")))?;
        data.push(f32::from_le_bytes(f32buf));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::format(id, "trailing bytes in feature file"));
    }
    AcousticFeatures::new(t_frames, feat_dim, data, frame_period_ms)
        .map_err(|e| Error::format(id, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_layout_base_and_enriched() {
        let v = Vocabulary::base(["zeta".into(), "alpha".into(), "uh".into()]).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.token(SOS), "<sos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(BLANK), "<blank>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.token(4), "alpha"); // sorted regular block
        assert_eq!(v.token(5), "uh");
        assert_eq!(v.token(6), "zeta");
        assert!(v.open_tag().is_none());

        let e = v.enriched_version();
        assert_eq!(e.size(), 9);
        assert_eq!(e.token(OPEN_TAG), "<dysfl>");
        assert_eq!(e.token(CLOSE_TAG), "</dysfl>");
        assert_eq!(e.token(6), "alpha");
        assert!(e.is_enriched());
        // Id maps agree with the string views.
        for id in v.regular_ids() {
            let eid = Vocabulary::base_to_enriched_id(id);
            assert_eq!(v.token(id), e.token(eid));
            assert_eq!(Vocabulary::enriched_to_base_id(eid), Some(id));
        }
        assert_eq!(Vocabulary::enriched_to_base_id(OPEN_TAG), None);
        assert_eq!(Vocabulary::enriched_to_base_id(CLOSE_TAG), None);
    }

    #[test]
    fn vocab_rejects_angle_brackets() {
        assert!(Vocabulary::base(["<weird>".into()]).is_err());
    }

    #[test]
    fn rate_zero_means_all_fluent() {
        let spec = SynthesisSpec {
            disfluency_rate: 0.0,
            ..Default::default()
        };
        let utts = generate_corpus(&spec, 20).unwrap();
        assert!(utts.iter().all(|u| u.labels.iter().all(|&l| l == 0)));
        // No pause segments either: boundaries advance by token length.
        assert!(utts.iter().all(|u| u.validate().is_ok()));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthesisSpec {
            seed: 42,
            ..Default::default()
        };
        let a = generate_corpus(&spec, 2).unwrap();
        let b = generate_corpus(&spec, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn realized_rate_near_target() {
        let spec = SynthesisSpec {
            vocab_size: 50,
            disfluency_rate: 0.15,
            ..Default::default()
        };
        let utts = generate_corpus(&spec, 1000).unwrap();
        let total: usize = utts.iter().map(|u| u.labels.len()).sum();
        let disfl: usize = utts
            .iter()
            .map(|u| u.labels.iter().filter(|&&l| l == 1).count())
            .sum();
        let rate = disfl as f64 / total as f64;
        assert!(
            (0.12..=0.18).contains(&rate),
            "realized rate {rate} outside ±0.03 of 0.15"
        );
    }

    #[test]
    fn fillers_only_inside_disfluent_runs() {
        let spec = SynthesisSpec::default();
        let (fillers, _) = spec.word_list();
        let utts = generate_corpus(&spec, 50).unwrap();
        for u in &utts {
            for (tok, &lab) in u.tokens.iter().zip(&u.labels) {
                if fillers.contains(tok) {
                    assert_eq!(lab, 1, "filler `{tok}` labeled fluent in {}", u.id);
                }
            }
        }
    }

    #[test]
    fn runs_are_bounded_and_followed_by_pause() {
        let spec = SynthesisSpec::default();
        let utts = generate_corpus(&spec, 100).unwrap();
        let mut saw_run = false;
        for u in &utts {
            let b = u.boundary_frames.as_ref().unwrap();
            let mut run = 0;
            for i in 0..u.labels.len() {
                if u.labels[i] == 1 {
                    run += 1;
                    assert!(run <= MAX_RUN, "run longer than {MAX_RUN} in {}", u.id);
                    let last_of_run = i + 1 == u.labels.len() || u.labels[i + 1] == 0;
                    if last_of_run {
                        saw_run = true;
                        // Trailing pause is inside this token's span,
                        // so the span is at least pause + 1 frame long.
                        let start = if i == 0 { 0 } else { b[i - 1] };
                        assert!(
                            b[i] - start
                                >= spec.pause_frames_after_reparandum + spec.frames_per_token.0
                        );
                    }
                } else {
                    run = 0;
                }
            }
        }
        assert!(saw_run);
    }

    #[test]
    fn templates_are_split_independent_unit_vectors() {
        let a = SynthesisSpec {
            seed: 1,
            ..Default::default()
        };
        let b = SynthesisSpec {
            seed: 999,
            ..Default::default()
        };
        let ta = a.template("mo");
        let tb = b.template("mo");
        assert_eq!(ta, tb, "template depends on corpus seed");
        let norm: f64 = ta.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_ne!(a.template("mo"), a.template("nu"));
    }

    #[test]
    fn round_trip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthesisSpec::default();
        let utts = generate_corpus(&spec, 5).unwrap();
        write_corpus(&utts, dir.path()).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(utts.len(), back.len());
        for (a, b) in utts.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.boundary_frames, b.boundary_frames);
            assert_eq!(a.features.t_frames, b.features.t_frames);
            assert_eq!(a.features.feat_dim, b.features.feat_dim);
            assert_eq!(a.features.frame_period_ms, b.features.frame_period_ms);
            for (x, y) in a.features.data.iter().zip(&b.features.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_manifest_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.jsonl"), "").unwrap();
        assert!(read_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn zero_frame_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("feats")).unwrap();
        std::fs::write(
            dir.path().join("manifest.jsonl"),
            r#"{"id":"x","tokens":["ba"],"labels":[0],"feature_file":"feats/x.dsf","frame_period_ms":10.0}"#,
        )
        .unwrap();
        let mut bytes = FEAT_MAGIC.to_vec();
        bytes.extend(0u32.to_le_bytes());
        bytes.extend(4u32.to_le_bytes());
        std::fs::write(dir.path().join("feats/x.dsf"), bytes).unwrap();
        let err = read_corpus(dir.path()).unwrap_err();
        assert!(err.to_string().contains("x"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected_with_id() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("feats")).unwrap();
        std::fs::write(
            dir.path().join("manifest.jsonl"),
            r#"{"id":"y","tokens":["ba"],"labels":[0],"feature_file":"feats/y.dsf","frame_period_ms":10.0}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("feats/y.dsf"), b"WRONGMAG\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        let err = read_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { id: Some(ref i), .. } if i == "y"), "{err}");
    }

    #[test]
    fn label_token_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthesisSpec::default();
        let mut utts = generate_corpus(&spec, 1).unwrap();
        utts[0].labels.pop();
        assert!(write_corpus(&utts, dir.path()).is_err());
    }

    #[test]
    fn boundaries_match_generator_bookkeeping() {
        let spec = SynthesisSpec::default();
        let utts = generate_corpus(&spec, 50).unwrap();
        for u in &utts {
            let b = u.boundary_frames.as_ref().unwrap();
            assert_eq!(*b.last().unwrap(), u.features.t_frames);
            assert!(b.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

//! Blockwise streaming Transformer encoder with contextual carry-over.
//!
//! Feature frames arrive in fixed windows of `block_frames`, advancing
//! by `shift_frames`. Each block is downsampled ×4 by two stride-2
//! linear projections, gets global sinusoidal positions, and attends
//! freely within the block plus a single context vector summarizing
//! all earlier blocks — so no output ever depends on frames beyond its
//! own block window. Overlapping output rows are owned by the earliest
//! block that computed them, which makes the output length a function
//! of `T_frames` alone.

use rand::rngs::StdRng;

use crate::corpus::AcousticFeatures;
use crate::error::{Error, Result};
use crate::nn::layers::{
    add_positional, apply_encoder_layer, apply_layer_norm, apply_linear, register_encoder_layer,
    register_layer_norm, register_linear,
};
use crate::nn::params::ParameterStore;
use crate::nn::tape::{Tape, TensorId};

/// Temporal downsampling factor of the two stride-2 projections.
pub const DOWNSAMPLE: usize = 4;

/// Block geometry in raw frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    pub block_frames: usize,
    pub shift_frames: usize,
}

impl BlockPlan {
    pub fn new(block_frames: usize, shift_frames: usize) -> Result<Self> {
        if block_frames == 0 || shift_frames == 0 {
            return Err(Error::Config("block/shift frames must be positive".into()));
        }
        if shift_frames > block_frames {
            return Err(Error::Config(format!(
                "shift {shift_frames} exceeds block {block_frames}"
            )));
        }
        if block_frames % DOWNSAMPLE != 0 || shift_frames % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "block {block_frames} and shift {shift_frames} must be multiples of {DOWNSAMPLE} \
                 so block boundaries align with the downsampled grid"
            )));
        }
        Ok(BlockPlan {
            block_frames,
            shift_frames,
        })
    }

    /// Plan from wall-clock sizes; frames must divide exactly.
    pub fn from_ms(block_ms: f64, shift_ms: f64, frame_period_ms: f64) -> Result<Self> {
        let to_frames = |ms: f64, what: &str| -> Result<usize> {
            let f = ms / frame_period_ms;
            if f <= 0.0 || (f - f.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{what} {ms} ms is not a whole number of {frame_period_ms} ms frames"
                )));
            }
            Ok(f.round() as usize)
        };
        BlockPlan::new(
            to_frames(block_ms, "block_ms")?,
            to_frames(shift_ms, "shift_ms")?,
        )
    }

    /// Number of blocks needed to cover `t_frames`.
    pub fn num_blocks(&self, t_frames: usize) -> usize {
        if t_frames <= self.block_frames {
            1
        } else {
            1 + (t_frames - self.block_frames).div_ceil(self.shift_frames)
        }
    }

    /// Raw-frame window `[start, end)` of block `b`.
    pub fn window(&self, b: usize, t_frames: usize) -> (usize, usize) {
        let start = b * self.shift_frames;
        (start, (start + self.block_frames).min(t_frames))
    }

    /// Clock time at which block `b`'s full window has arrived.
    pub fn availability_ms(&self, b: usize, frame_period_ms: f64) -> f64 {
        (b * self.shift_frames + self.block_frames) as f64 * frame_period_ms
    }

    /// Earliest block whose window contains raw frame `f`.
    pub fn owner_block(&self, f: usize) -> usize {
        if f < self.block_frames {
            0
        } else {
            (f + 1 - self.block_frames).div_ceil(self.shift_frames)
        }
    }
}

/// Encoder dimensions.
#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub feat_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
}

pub fn register_encoder(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut StdRng) {
    register_linear(store, "enc.ds1", 2 * cfg.feat_dim, cfg.model_dim, rng);
    register_linear(store, "enc.ds2", 2 * cfg.model_dim, cfg.model_dim, rng);
    for l in 0..cfg.layers {
        register_encoder_layer(store, &format!("enc.l{l}"), cfg.model_dim, cfg.ff_dim, rng);
    }
    register_layer_norm(store, "enc.ln_f", cfg.model_dim);
}

/// One block forward on an existing tape. `window` is the raw feature
/// window (w×feat_dim, w ≥ 1), `ctx` the carried context vector (1×d),
/// `global_ds_start` the downsampled index of the window's first row
/// (for absolute positions). Returns the window's downsampled outputs
/// (⌈w/4⌉×d) and the next context vector.
pub fn encode_window_on_tape(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    ctx: TensorId,
    window: &[f64],
    global_ds_start: usize,
) -> Result<(TensorId, TensorId)> {
    if window.is_empty() {
        return Err(Error::Argument("empty encoder block".into()));
    }
    let w = window.len() / cfg.feat_dim;
    let x = tape.constant(w, cfg.feat_dim, window.to_vec());
    let x = tape.pair_rows(x);
    let x = apply_linear(tape, store, "enc.ds1", x);
    let x = tape.gelu(x);
    let x = tape.pair_rows(x);
    let x = apply_linear(tape, store, "enc.ds2", x);
    let x = tape.gelu(x);
    let x = add_positional(tape, x, global_ds_start);

    let mut h = tape.concat_rows(&[ctx, x]);
    for l in 0..cfg.layers {
        h = apply_encoder_layer(tape, store, &format!("enc.l{l}"), h, cfg.n_heads);
    }
    let h = apply_layer_norm(tape, store, "enc.ln_f", h);
    let rows = tape.shape(h).0;
    let out = tape.slice_rows(h, 1, rows);
    let new_ctx = tape.mean_rows(out);
    Ok((out, new_ctx))
}

/// Fully encoded utterance (training view): one tensor holding every
/// owned output row, plus the block each row came from and per-block
/// availability on the simulated clock.
pub struct EncodedFull {
    pub out: TensorId,
    pub rows: usize,
    /// Owning block of each output row.
    pub row_block: Vec<usize>,
    /// `availability_ms` per block actually used.
    pub block_avail_ms: Vec<f64>,
}

/// Encode a whole utterance as the exact composition of its blocks.
pub fn encode_full(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &EncoderConfig,
    plan: &BlockPlan,
    feats: &AcousticFeatures,
) -> Result<EncodedFull> {
    if feats.feat_dim != cfg.feat_dim {
        return Err(Error::Argument(format!(
            "feature dim {} != encoder feat_dim {}",
            feats.feat_dim, cfg.feat_dim
        )));
    }
    let t = feats.t_frames;
    let nb = plan.num_blocks(t);
    let mut ctx = tape.constant(1, cfg.model_dim, vec![0.0; cfg.model_dim]);
    let mut owned = Vec::with_capacity(nb);
    let mut row_block = Vec::new();
    let mut block_avail_ms = Vec::with_capacity(nb);
    let mut covered_ds = 0usize; // downsampled rows owned so far
    for b in 0..nb {
        let (s, e) = plan.window(b, t);
        let window: Vec<f64> = feats.data[s * feats.feat_dim..e * feats.feat_dim]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (out, new_ctx) = encode_window_on_tape(tape, store, cfg, ctx, &window, s / DOWNSAMPLE)?;
        ctx = new_ctx;
        let win_rows = tape.shape(out).0;
        let end_ds = e.div_ceil(DOWNSAMPLE);
        debug_assert_eq!(s / DOWNSAMPLE + win_rows, end_ds);
        let local_from = covered_ds - s / DOWNSAMPLE;
        owned.push(tape.slice_rows(out, local_from, win_rows));
        row_block.extend(std::iter::repeat(b).take(end_ds - covered_ds));
        block_avail_ms.push(plan.availability_ms(b, feats.frame_period_ms));
        covered_ds = end_ds;
    }
    let out = if owned.len() == 1 {
        owned[0]
    } else {
        tape.concat_rows(&owned)
    };
    debug_assert_eq!(covered_ds, t.div_ceil(DOWNSAMPLE));
    Ok(EncodedFull {
        out,
        rows: covered_ds,
        row_block,
        block_avail_ms,
    })
}

/// Streaming wrapper: feed blocks one at a time, get owned output rows
/// back as plain values. Bit-identical to [`encode_full`] because both
/// run the same ops in the same order.
pub struct StreamEncoder<'a> {
    store: &'a ParameterStore,
    cfg: EncoderConfig,
    plan: BlockPlan,
    context: Vec<f64>,
    next_block: usize,
    covered_ds: usize,
}

impl<'a> StreamEncoder<'a> {
    pub fn new(store: &'a ParameterStore, cfg: EncoderConfig, plan: BlockPlan) -> Self {
        StreamEncoder {
            store,
            context: vec![0.0; cfg.model_dim],
            cfg,
            plan,
            next_block: 0,
            covered_ds: 0,
        }
    }

    pub fn blocks_fed(&self) -> usize {
        self.next_block
    }

    /// Feed the next block's raw window (as produced by
    /// [`BlockPlan::window`]); returns this block's owned output rows.
    pub fn feed_window(&mut self, window: &[f64], window_start: usize) -> Result<Vec<f64>> {
        debug_assert_eq!(window_start, self.next_block * self.plan.shift_frames);
        let mut tape = Tape::new();
        let ctx = tape.constant(1, self.cfg.model_dim, self.context.clone());
        let (out, new_ctx) = encode_window_on_tape(
            &mut tape,
            self.store,
            &self.cfg,
            ctx,
            window,
            window_start / DOWNSAMPLE,
        )?;
        self.context = tape.value(new_ctx).to_vec();
        self.next_block += 1;
        let win_rows = tape.shape(out).0;
        let start_ds = window_start / DOWNSAMPLE;
        let local_from = self.covered_ds - start_ds;
        self.covered_ds = start_ds + win_rows;
        let d = self.cfg.model_dim;
        Ok(tape.value(out)[local_from * d..win_rows * d].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn test_cfg() -> EncoderConfig {
        EncoderConfig {
            feat_dim: 4,
            model_dim: 8,
            n_heads: 2,
            ff_dim: 16,
            layers: 2,
        }
    }

    fn random_feats(t: usize, dim: usize, rng: &mut StdRng) -> AcousticFeatures {
        let data: Vec<f32> = (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        AcousticFeatures::new(t, dim, data, 10.0).unwrap()
    }

    #[test]
    fn plan_boundaries_200_frames() {
        let plan = BlockPlan::new(160, 64).unwrap();
        assert_eq!(plan.num_blocks(200), 2);
        assert_eq!(plan.window(0, 200), (0, 160));
        assert_eq!(plan.window(1, 200), (64, 200));
        assert_eq!(plan.num_blocks(100), 1);
        assert_eq!(plan.window(0, 100), (0, 100));
    }

    #[test]
    fn plan_availability_matches_clock() {
        let plan = BlockPlan::new(160, 64).unwrap();
        assert_eq!(plan.availability_ms(0, 10.0), 1600.0);
        assert_eq!(plan.availability_ms(1, 10.0), 2240.0);
    }

    #[test]
    fn plan_rejects_bad_geometry() {
        assert!(BlockPlan::new(0, 4).is_err());
        assert!(BlockPlan::new(8, 12).is_err());
        assert!(BlockPlan::new(10, 4).is_err()); // block not ×4
        assert!(BlockPlan::from_ms(1600.0, 640.0, 10.0).is_ok());
        assert!(BlockPlan::from_ms(1601.0, 640.0, 10.0).is_err());
    }

    #[test]
    fn owner_block_is_earliest_cover() {
        let plan = BlockPlan::new(160, 64).unwrap();
        assert_eq!(plan.owner_block(0), 0);
        assert_eq!(plan.owner_block(159), 0);
        assert_eq!(plan.owner_block(160), 1);
        assert_eq!(plan.owner_block(223), 1);
        assert_eq!(plan.owner_block(224), 2);
    }

    #[test]
    fn output_length_is_ceil_t_over_4() {
        let cfg = test_cfg();
        let mut rng = StdRng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &cfg, &mut rng);
        let plan = BlockPlan::new(16, 8).unwrap();
        for t in [1, 3, 4, 15, 16, 17, 33, 50] {
            let feats = random_feats(t, cfg.feat_dim, &mut rng);
            let mut tape = Tape::new();
            let enc = encode_full(&mut tape, &store, &cfg, &plan, &feats).unwrap();
            assert_eq!(enc.rows, t.div_ceil(4), "T={t}");
            assert_eq!(enc.row_block.len(), enc.rows);
        }
    }

    #[test]
    fn streaming_prefix_is_bit_exact() {
        // Feeding [B0,B1] and separately [B0,B1,B2] must give
        // bit-identical outputs for B0 and B1.
        let cfg = test_cfg();
        let mut rng = StdRng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &cfg, &mut rng);
        let plan = BlockPlan::new(16, 8).unwrap();
        let feats = random_feats(32, cfg.feat_dim, &mut rng); // 3 blocks
        assert_eq!(plan.num_blocks(32), 3);

        let run = |n_blocks: usize| -> Vec<f64> {
            let mut enc = StreamEncoder::new(&store, cfg, plan);
            let mut all = Vec::new();
            for b in 0..n_blocks {
                let (s, e) = plan.window(b, feats.t_frames);
                let window: Vec<f64> = feats.data[s * cfg.feat_dim..e * cfg.feat_dim]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                all.extend(enc.feed_window(&window, s).unwrap());
            }
            all
        };
        let two = run(2);
        let three = run(3);
        assert_eq!(two.len(), 6 * cfg.model_dim); // ceil(24/4) owned rows
        assert_eq!(&three[..two.len()], &two[..]);
    }

    #[test]
    fn stream_equals_full_encode() {
        let cfg = test_cfg();
        let mut rng = StdRng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &cfg, &mut rng);
        let plan = BlockPlan::new(16, 8).unwrap();
        for t in [7, 16, 23, 40, 51] {
            let feats = random_feats(t, cfg.feat_dim, &mut rng);
            let mut tape = Tape::new();
            let full = encode_full(&mut tape, &store, &cfg, &plan, &feats).unwrap();
            let full_vals = tape.value(full.out).to_vec();

            let mut senc = StreamEncoder::new(&store, cfg, plan);
            let mut streamed = Vec::new();
            for b in 0..plan.num_blocks(t) {
                let (s, e) = plan.window(b, t);
                let window: Vec<f64> = feats.data[s * cfg.feat_dim..e * cfg.feat_dim]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                streamed.extend(senc.feed_window(&window, s).unwrap());
            }
            assert_eq!(full_vals, streamed, "T={t}");
        }
    }

    #[test]
    fn future_frames_do_not_change_past_blocks() {
        let cfg = test_cfg();
        let mut rng = StdRng::seed_from_u64(4);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &cfg, &mut rng);
        let plan = BlockPlan::new(16, 8).unwrap();
        let base = random_feats(40, cfg.feat_dim, &mut rng);
        // Frames ≥ 16 belong to blocks ≥ 1 only (block 0 window is
        // [0,16)); perturbing them must leave block 0's rows bit-exact.
        let mut altered = base.clone();
        for v in altered.data[16 * cfg.feat_dim..].iter_mut() {
            *v += 0.7;
        }
        let encode = |f: &AcousticFeatures| {
            let mut tape = Tape::new();
            let enc = encode_full(&mut tape, &store, &cfg, &plan, f).unwrap();
            tape.value(enc.out).to_vec()
        };
        let (a, b) = (encode(&base), encode(&altered));
        let d = cfg.model_dim;
        assert_eq!(&a[..4 * d], &b[..4 * d], "block 0 rows changed");
        assert_ne!(&a[4 * d..], &b[4 * d..]);
    }

    #[test]
    fn single_short_block_equals_block_call() {
        let cfg = test_cfg();
        let mut rng = StdRng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &cfg, &mut rng);
        let plan = BlockPlan::new(160, 64).unwrap();
        let feats = random_feats(30, cfg.feat_dim, &mut rng);
        let mut tape = Tape::new();
        let full = encode_full(&mut tape, &store, &cfg, &plan, &feats).unwrap();
        let full_vals = tape.value(full.out).to_vec();

        let mut tape2 = Tape::new();
        let ctx = tape2.constant(1, cfg.model_dim, vec![0.0; cfg.model_dim]);
        let window: Vec<f64> = feats.data.iter().map(|&v| v as f64).collect();
        let (out, _) =
            encode_window_on_tape(&mut tape2, &store, &cfg, ctx, &window, 0).unwrap();
        assert_eq!(full_vals, tape2.value(out));
        assert_eq!(full.block_avail_ms, vec![1600.0]);
    }

    #[test]
    fn encoder_gradients_flow_across_blocks() {
        // Loss on the last block's rows must reach parameters through
        // the context vector of earlier blocks; just confirm the
        // downsampling projections get nonzero gradient.
        let cfg = test_cfg();
        let mut rng = StdRng::seed_from_u64(6);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &cfg, &mut rng);
        let plan = BlockPlan::new(16, 8).unwrap();
        let feats = random_feats(32, cfg.feat_dim, &mut rng);
        let mut tape = Tape::new();
        let enc = encode_full(&mut tape, &store, &cfg, &plan, &feats).unwrap();
        let last = tape.slice_rows(enc.out, enc.rows - 1, enc.rows);
        let loss = tape.sum_all(last);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get("enc.ds1.w").unwrap();
        assert!(g.iter().any(|&x| x != 0.0));
    }
}

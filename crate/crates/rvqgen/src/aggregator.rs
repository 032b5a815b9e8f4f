//! Patch windows and the window aggregator.
//!
//! An utterance's grid is cut into patches of `stride` frames. For patch k
//! the aggregator reads a window of `patch` frames ending where the patch
//! ends, embeds each frame as a mix-weighted sum of lifted per-layer code
//! embeddings, runs a small bidirectional encoder, and averages the hidden
//! rows over the patch itself into a single patch vector. Out-of-range
//! frames are PAD on every layer; PAD stays visible here (windows encode
//! their own padding), unlike inside the infiller.

use crate::blocks::{self, AttnMode, BlockError};
use crate::codec::{self, RvqGrid};
use crate::model::ModelConfig;
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Number of patches covering `frames` frames: `ceil(frames / stride)`.
pub fn patch_count(frames: usize, stride: usize) -> usize {
    frames.div_ceil(stride)
}

pub fn pad_frame(layers: usize) -> Vec<u16> {
    vec![codec::PAD; layers]
}

fn frame_or_pad(grid: &RvqGrid, index: isize) -> Vec<u16> {
    if index < 0 || index as usize >= grid.len() {
        pad_frame(grid.layers())
    } else {
        grid.row(index as usize).to_vec()
    }
}

/// Window for patch k: frames `[(k+1)*stride - patch, (k+1)*stride)`,
/// PAD-filled outside the grid.
pub fn window_frames(grid: &RvqGrid, k: usize, patch: usize, stride: usize) -> Vec<Vec<u16>> {
    let hi = ((k + 1) * stride) as isize;
    (hi - patch as isize..hi)
        .map(|i| frame_or_pad(grid, i))
        .collect()
}

/// Target slice for patch k: frames `[k*stride, (k+1)*stride)`, PAD-filled
/// past the end of the grid.
pub fn slice_frames(grid: &RvqGrid, k: usize, stride: usize) -> Vec<Vec<u16>> {
    let lo = (k * stride) as isize;
    (lo..lo + stride as isize)
        .map(|i| frame_or_pad(grid, i))
        .collect()
}

/// Depth pruning: codes on layers `l_keep..` become NULL. Structural PAD
/// entries stay PAD so padding detection still works on every layer.
pub fn apply_keep(frames: &mut [Vec<u16>], l_keep: usize) {
    for frame in frames {
        for code in frame.iter_mut().skip(l_keep) {
            if *code != codec::PAD {
                *code = codec::NULL;
            }
        }
    }
}

/// Embeds window frames on the tape: row f gets
/// `sum_j mix[j] * table_j[code_{f,j}] @ lift_j`.
pub fn embed_window_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    frames: &[Vec<u16>],
) -> Result<Var, BlockError> {
    let mix = bound.var("agg.mix");
    let mut acc: Option<Var> = None;
    for j in 0..cfg.layers {
        let rows: Vec<usize> = frames
            .iter()
            .map(|f| {
                debug_assert_eq!(f.len(), cfg.layers);
                f[j] as usize
            })
            .collect();
        let table = tape.row_gather(bound.var(&format!("codes.table{j}")), &rows)?;
        let lifted = tape.matmul(table, bound.var(&format!("codes.lift{j}")))?;
        let w = tape.col_slice(mix, j, 1)?;
        let term = tape.scale_by(lifted, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// Tape-side window encoder: returns the `[1, d_model]` patch vector.
pub fn encode_window_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    frames: &[Vec<u16>],
) -> Result<Var, BlockError> {
    assert_eq!(frames.len(), cfg.patch, "window length mismatch");
    let x = embed_window_tape(tape, bound, cfg, frames)?;
    let positions: Vec<usize> = (0..cfg.patch).collect();
    let h = blocks::forward_tape(
        tape,
        bound,
        "agg",
        &cfg.agg_block(),
        x,
        &positions,
        AttnMode::Bidirectional,
        None,
    )?;
    Ok(tape.mean_rows(h, cfg.patch - cfg.stride, cfg.stride)?)
}

/// Kernel-only window encoder for generation; matches the tape path.
pub fn encode_window<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    frames: &[Vec<u16>],
) -> Result<Vec<E>, BlockError> {
    assert_eq!(frames.len(), cfg.patch, "window length mismatch");
    let d = cfg.d_model;
    let mut x = Tensor::<E>::zeros(&[cfg.patch, d]);
    let mix = store.get("agg.mix");
    for j in 0..cfg.layers {
        let w = mix.data()[j].to_f64();
        let table = store.get(&format!("codes.table{j}"));
        let lift = store.get(&format!("codes.lift{j}"));
        for (f, frame) in frames.iter().enumerate() {
            debug_assert_eq!(frame.len(), cfg.layers);
            let code = frame[j] as usize;
            let trow = &table.data()[code * cfg.d_code..(code + 1) * cfg.d_code];
            let out = &mut x.data_mut()[f * d..(f + 1) * d];
            for (c, tv) in trow.iter().enumerate() {
                let scale = w * tv.to_f64();
                let lrow = &lift.data()[c * d..(c + 1) * d];
                for (o, lv) in out.iter_mut().zip(lrow) {
                    *o = E::from_f64(o.to_f64() + scale * lv.to_f64());
                }
            }
        }
    }
    let h = blocks::forward_infer(
        store,
        "agg",
        &cfg.agg_block(),
        &x,
        AttnMode::Bidirectional,
        None,
        None,
    )?;
    let mut v = vec![0.0f64; d];
    for f in cfg.patch - cfg.stride..cfg.patch {
        for c in 0..d {
            v[c] += h.data()[f * d + c].to_f64();
        }
    }
    Ok(v.iter().map(|&s| E::from_f64(s / cfg.stride as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{EOS, NULL, PAD};
    use crate::model::init_params;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Grid with layers=3 where frame f carries codes (f, f, f).
    fn ramp_grid(len: usize) -> RvqGrid {
        let rows: Vec<Vec<u16>> = (0..len as u16).map(|f| vec![f; 3]).collect();
        RvqGrid::from_frames(3, &rows)
    }

    #[test]
    fn window_covers_trailing_frames_with_left_pad() {
        let grid = ramp_grid(16);
        let w0 = window_frames(&grid, 0, 8, 4);
        assert_eq!(w0.len(), 8);
        for f in &w0[..4] {
            assert_eq!(f, &vec![PAD; 3]);
        }
        for (i, f) in w0[4..].iter().enumerate() {
            assert_eq!(f[0], i as u16);
        }
        let w1 = window_frames(&grid, 1, 8, 4);
        let codes: Vec<u16> = w1.iter().map(|f| f[0]).collect();
        assert_eq!(codes, (0..8).collect::<Vec<u16>>());
    }

    #[test]
    fn last_window_and_slice_right_pad() {
        let grid = ramp_grid(9);
        assert_eq!(patch_count(grid.len(), 4), 3);
        let w2 = window_frames(&grid, 2, 4, 4);
        assert_eq!(w2[0][0], 8);
        for f in &w2[1..] {
            assert_eq!(f, &vec![PAD; 3]);
        }
        assert_eq!(slice_frames(&grid, 2, 4), w2);
    }

    #[test]
    fn window_equals_slice_when_patch_equals_stride() {
        let grid = ramp_grid(12);
        for k in 0..patch_count(12, 4) {
            assert_eq!(window_frames(&grid, k, 4, 4), slice_frames(&grid, k, 4));
        }
    }

    proptest! {
        #[test]
        fn patch_count_is_ceiling(frames in 1usize..200, stride in 1usize..12) {
            let k = patch_count(frames, stride);
            prop_assert!(k * stride >= frames);
            prop_assert!((k - 1) * stride < frames);
        }
    }

    #[test]
    fn apply_keep_nulls_upper_layers_but_not_pad() {
        let mut frames = vec![vec![5, 6, 7], vec![PAD, PAD, PAD], vec![EOS, NULL, 9]];
        apply_keep(&mut frames, 1);
        assert_eq!(frames[0], vec![5, NULL, NULL]);
        assert_eq!(frames[1], vec![PAD, PAD, PAD]);
        assert_eq!(frames[2], vec![EOS, NULL, NULL]);
    }

    fn micro_window(seed: u64) -> (ModelConfig, Vec<Vec<u16>>) {
        let cfg = ModelConfig::micro();
        let text = [3u8, 9];
        let grid = codec::synthesize_codes(&text, 2, seed).unwrap();
        (cfg.clone(), window_frames(&grid, 0, cfg.patch, cfg.stride))
    }

    #[test]
    fn zero_mix_gives_zero_patch_vector() {
        let (cfg, frames) = micro_window(4);
        let mut store: ParamStore<f32> =
            init_params(&cfg, &mut ChaCha12Rng::seed_from_u64(7));
        store.get_mut("agg.mix").data_mut().fill(0.0);
        let v = encode_window(&store, &cfg, &frames).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pruning_depth_changes_the_patch_vector() {
        let (cfg, frames) = micro_window(4);
        let store: ParamStore<f32> = init_params(&cfg, &mut ChaCha12Rng::seed_from_u64(7));
        let full = encode_window(&store, &cfg, &frames).unwrap();
        let mut pruned = frames.clone();
        apply_keep(&mut pruned, 1);
        let coarse = encode_window(&store, &cfg, &pruned).unwrap();
        let diff: f32 = full
            .iter()
            .zip(&coarse)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(diff > 1e-3, "pruning should move the vector, max diff {diff}");
    }

    #[test]
    fn tape_and_kernel_paths_agree() {
        let (cfg, mut frames) = micro_window(11);
        // Exercise reserved codes too.
        frames[6] = vec![EOS, NULL, NULL, NULL, NULL, NULL];
        frames[7] = pad_frame(cfg.layers);
        let store: ParamStore<f64> = init_params(&cfg, &mut ChaCha12Rng::seed_from_u64(13));
        let kernel = encode_window(&store, &cfg, &frames).unwrap();
        let mut tape = Tape::new();
        let bound = TapeBinding::bind(&mut tape, &store);
        let v = encode_window_tape(&mut tape, &bound, &cfg, &frames).unwrap();
        for (a, b) in tape.value(v).data().iter().zip(&kernel) {
            assert!((a - b).abs() < 1e-12, "tape {a} vs kernel {b}");
        }
    }

    #[test]
    fn gradients_flow_to_tables_lifts_and_mix() {
        let (cfg, frames) = micro_window(21);
        let store: ParamStore<f64> = init_params(&cfg, &mut ChaCha12Rng::seed_from_u64(3));

        let loss_at = |s: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let bound = TapeBinding::bind(&mut tape, s);
            let v = encode_window_tape(&mut tape, &bound, &cfg, &frames).unwrap();
            let sq = tape.mul(v, v).unwrap();
            let l = tape.sum(sq);
            tape.value(l).data()[0]
        };

        let mut tape = Tape::new();
        let bound = TapeBinding::bind(&mut tape, &store);
        let v = encode_window_tape(&mut tape, &bound, &cfg, &frames).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();

        let h = 1e-5;
        for (name, coord) in [
            ("agg.mix", 0usize),
            ("agg.mix", 3),
            ("codes.lift0", 17),
            ("codes.table0", frames[2][0] as usize * cfg.d_code + 1),
            ("agg.l0.attn.wq", 40),
            ("agg.final_norm", 5),
        ] {
            let analytic = tape.grad(bound.var(name)).unwrap().data()[coord];
            let mut plus = store.cast::<f64>();
            plus.get_mut(name).data_mut()[coord] += h;
            let mut minus = store.cast::<f64>();
            minus.get_mut(name).data_mut()[coord] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() < 1e-6 * fd.abs().max(analytic.abs()) + 1e-8,
                "{name}[{coord}]: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn codes_outside_the_patch_do_not_change_it_without_attention() {
        // With the encoder replaced by identity (zero attention and FFN
        // weights), the patch vector is the mean of the embedded patch
        // rows only, so context frames cannot leak in.
        let (cfg, frames) = micro_window(30);
        let mut store: ParamStore<f32> =
            init_params(&cfg, &mut ChaCha12Rng::seed_from_u64(5));
        for l in 0..cfg.agg_layers {
            for w in ["attn.wo", "ffn.w_down"] {
                store
                    .get_mut(&format!("agg.l{l}.{w}"))
                    .data_mut()
                    .fill(0.0);
            }
        }
        let mut wide = cfg.clone();
        wide.patch = 12;
        let mut wframes = vec![pad_frame(cfg.layers); 4];
        wframes.extend(frames.clone());
        let mut wother = wframes.clone();
        wother[0] = vec![1, 2, 3, 4, 5, 6];
        let a = encode_window(&store, &wide, &wframes).unwrap();
        let b = encode_window(&store, &wide, &wother).unwrap();
        assert_eq!(a, b);
        // Sanity: with real attention the same change does leak in.
        let store2: ParamStore<f32> = init_params(&cfg, &mut ChaCha12Rng::seed_from_u64(5));
        let a2 = encode_window(&store2, &wide, &wframes).unwrap();
        let b2 = encode_window(&store2, &wide, &wother).unwrap();
        assert_ne!(a2, b2);
    }
}

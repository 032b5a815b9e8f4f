//! Masked-diffusion infiller over one patch of the code grid.
//!
//! The forward process masks each decodable slot of a target patch
//! independently with probability `mask_lambda(t)`; the infiller then reads
//! `[drafter slot, previous patch, target patch]` bidirectionally and
//! predicts the original code at every slot. Training weights each patch's
//! summed masked-slot losses by `1/t`, so lightly masked draws count more.
//!
//! Slots whose code is PAD are structural: they are never masked, never
//! scored, and are hidden from attention keys so length cues must come from
//! content rather than from padding to the right of an EOS frame.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::blocks::{self, AttnMode, BlockError};
use crate::codec::{self, EOS, MASK, PAD};
use crate::model::ModelConfig;
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Smallest diffusion time drawn during training.
pub const T_MIN: f64 = 0.005;
/// Additive logit penalty that removes a code from a head's support.
pub const ILLEGAL: f64 = -1e9;

const TYPE_PREFIX: usize = 0;
const TYPE_TARGET: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("diffusion time {0} outside (0, 1]")]
    BadTime(f64),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Masking probability at time t: `cos((1 - t) * pi / 2)`, increasing from
/// 0 at t=0 to 1 at t=1. Evaluated as `sin(t * pi / 2)` so both endpoints
/// are exact in floating point.
pub fn mask_lambda(t: f64) -> Result<f64, DiffusionError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DiffusionError::BadTime(t));
    }
    Ok((t * std::f64::consts::FRAC_PI_2).sin())
}

/// Whether a slot holding this code takes part in masking and scoring:
/// content codes everywhere, EOS on layer 0. PAD is structure and NULL
/// marks pruned layers; neither is ever predicted.
pub fn maskable(code: u16, layer: usize) -> bool {
    codec::is_content(code) || (layer == 0 && code == EOS)
}

/// Frame-major linear index of a slot.
pub fn slot_index(frame: usize, layer: usize, layers: usize) -> usize {
    frame * layers + layer
}

/// Inverse of [`slot_index`].
pub fn slot_coords(index: usize, layers: usize) -> (usize, usize) {
    (index / layers, index % layers)
}

/// Applies the forward process to a target patch: each maskable slot is
/// replaced by MASK independently with probability `mask_lambda(t)`.
/// Returns the corrupted frames and the frame-major mask indicator.
/// Unlike the schedule itself, corruption requires t strictly positive.
pub fn forward_mask(
    target: &[Vec<u16>],
    t: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<Vec<u16>>, Vec<bool>), DiffusionError> {
    if t <= 0.0 {
        return Err(DiffusionError::BadTime(t));
    }
    let lambda = mask_lambda(t)?;
    let layers = target.first().map_or(0, Vec::len);
    let mut out = target.to_vec();
    let mut masked = vec![false; target.len() * layers];
    for (f, frame) in out.iter_mut().enumerate() {
        for (j, code) in frame.iter_mut().enumerate() {
            if maskable(*code, j) && rng.gen::<f64>() < lambda {
                *code = MASK;
                masked[slot_index(f, j, layers)] = true;
            }
        }
    }
    Ok((out, masked))
}

/// Drafter conditioning for one patch on the tape.
#[derive(Clone, Copy)]
pub enum CondTape {
    /// Gate-scaled drafting hidden, `[1, d_model]`.
    Hidden(Var),
    /// Conditioning dropped; the learned null token stands in.
    Dropped,
}

/// History patch input: the previous target slice, or dropped. Dropped fills
/// the history half with structural PAD, which attention never sees, so the
/// infiller runs on the same footing as the sequence-start patch (whose
/// history window is likewise all PAD).
#[derive(Clone, Copy)]
pub enum History<'a> {
    Frames(&'a [Vec<u16>]),
    Dropped,
}

/// Code layout of one assembled infiller sequence; row 0 is the drafter
/// slot, then `stride * layers` history slots, then the target slots, both
/// frame-major.
fn sequence_codes(
    cfg: &ModelConfig,
    history: History<'_>,
    target: &[Vec<u16>],
) -> (Vec<u16>, Vec<bool>) {
    let s = cfg.stride;
    let j = cfg.layers;
    assert_eq!(target.len(), s, "target patch must span the stride");
    let hist_frames: Vec<Vec<u16>> = match history {
        History::Frames(f) => {
            assert_eq!(f.len(), s, "history patch must span the stride");
            f.to_vec()
        }
        History::Dropped => vec![vec![PAD; j]; s],
    };
    let mut codes = Vec::with_capacity(2 * s * j);
    for frame in hist_frames.iter().chain(target) {
        assert_eq!(frame.len(), j, "frame width mismatch");
        codes.extend_from_slice(frame);
    }
    // Attention keys: the drafter slot is always visible; a code slot is
    // visible unless it is structural PAD.
    let mut visible = vec![true; 1 + 2 * s * j];
    for (i, &c) in codes.iter().enumerate() {
        visible[1 + i] = c != PAD;
    }
    (codes, visible)
}

/// Tape-side infiller pass returning the `[stride * layers, d_model]`
/// post-norm hiddens of the target slots, frame-major.
pub fn target_hiddens_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    cond: CondTape,
    history: History<'_>,
    target: &[Vec<u16>],
) -> Result<Var, DiffusionError> {
    let s = cfg.stride;
    let jl = cfg.layers;
    let (codes, visible) = sequence_codes(cfg, history, target);

    // Code-content embedding, built layer by layer then permuted to the
    // frame-major sequence order.
    let mut per_layer = Vec::with_capacity(jl);
    for j in 0..jl {
        let rows: Vec<usize> = (0..2 * s)
            .map(|f| codes[slot_index(f, j, jl)] as usize)
            .collect();
        let g = tape.row_gather(bound.var(&format!("codes.table{j}")), &rows)?;
        per_layer.push(tape.matmul(g, bound.var(&format!("codes.lift{j}")))?);
    }
    let stacked = tape.row_concat(&per_layer)?; // [jl * 2s, d], layer-major
    let perm: Vec<usize> = (0..2 * s * jl)
        .map(|i| {
            let (f, j) = slot_coords(i, jl);
            j * 2 * s + f
        })
        .collect();
    let content = tape.row_gather(stacked, &perm)?; // [2s*jl, d]

    let mut pos_idx = Vec::with_capacity(2 * s * jl);
    let mut layer_idx = Vec::with_capacity(2 * s * jl);
    let mut type_idx = Vec::with_capacity(2 * s * jl);
    for half in 0..2 {
        for f in 0..s {
            for j in 0..jl {
                pos_idx.push(half * s + f);
                layer_idx.push(j);
                type_idx.push(if half == 0 { TYPE_PREFIX } else { TYPE_TARGET });
            }
        }
    }
    let pos = tape.row_gather(bound.var("mdm.pos"), &pos_idx)?;
    let layer = tape.row_gather(bound.var("mdm.layer"), &layer_idx)?;
    let typ = tape.row_gather(bound.var("mdm.type"), &type_idx)?;
    let mut x = tape.add(content, pos)?;
    x = tape.add(x, layer)?;
    x = tape.add(x, typ)?;

    let cond_row = match cond {
        CondTape::Hidden(h) => tape.scale_by(h, bound.var("mdm.gate"))?,
        CondTape::Dropped => bound.var("mdm.null_ar"),
    };
    let cond_type = tape.row_gather(bound.var("mdm.type"), &[TYPE_PREFIX])?;
    let cond_x = tape.add(cond_row, cond_type)?;
    let seq = tape.row_concat(&[cond_x, x])?;

    let positions: Vec<usize> = (0..cfg.mdm_seq_len()).collect();
    let h = blocks::forward_tape(
        tape,
        bound,
        "mdm",
        &cfg.mdm_block(),
        seq,
        &positions,
        AttnMode::Bidirectional,
        Some(&visible),
    )?;
    let picks: Vec<usize> = (1 + s * jl..1 + 2 * s * jl).collect();
    Ok(tape.row_gather(h, &picks)?)
}

/// Additive legality row for layer j's head: 0 on predictable codes,
/// [`ILLEGAL`] elsewhere. Layer 0 may emit EOS; no layer emits PAD, MASK,
/// or NULL.
pub fn legality_row<E: Scalar>(cfg: &ModelConfig, layer: usize) -> Vec<E> {
    (0..cfg.codes_total() as u16)
        .map(|c| {
            if maskable(c, layer) {
                E::ZERO
            } else {
                E::from_f64(ILLEGAL)
            }
        })
        .collect()
}

/// Per-layer legal logits from target-slot hiddens: element j is
/// `[stride, codes_total]`, row f scoring slot (f, j).
pub fn head_logits_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    target_hiddens: Var,
) -> Result<Vec<Var>, DiffusionError> {
    let mut out = Vec::with_capacity(cfg.layers);
    for j in 0..cfg.layers {
        let rows: Vec<usize> = (0..cfg.stride).map(|f| slot_index(f, j, cfg.layers)).collect();
        let h = tape.row_gather(target_hiddens, &rows)?;
        let logits = tape.matmul(h, bound.var(&format!("mdm.head{j}")))?;
        out.push(tape.add_row_const(logits, &legality_row(cfg, j))?);
    }
    Ok(out)
}

/// Weighted masked-slot loss for one patch: the sum over layers of
/// cross-entropy at masked slots, times `weight` (the 1/t importance
/// factor). Unscored when `mask` is all false: contributes exactly zero.
pub fn patch_loss_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    target_hiddens: Var,
    true_target: &[Vec<u16>],
    mask: &[bool],
    weight: f64,
) -> Result<Var, DiffusionError> {
    let logits = head_logits_tape(tape, bound, cfg, target_hiddens)?;
    let mut total: Option<Var> = None;
    for (j, &lg) in logits.iter().enumerate() {
        let targets: Vec<usize> = (0..cfg.stride)
            .map(|f| true_target[f][j] as usize)
            .collect();
        let layer_mask: Vec<bool> = (0..cfg.stride)
            .map(|f| {
                let idx = slot_index(f, j, cfg.layers);
                // Only maskable codes were eligible, but keep the guard so
                // a stray mask bit on PAD or NULL can never be scored.
                mask[idx] && maskable(true_target[f][j], j)
            })
            .collect();
        let term = tape.masked_ce(lg, &targets, &layer_mask, weight)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Kernel-side conditioning input.
pub enum CondIn<'a, E> {
    Hidden(&'a [E]),
    Dropped,
}

/// Kernel-only infiller pass mirroring [`target_hiddens_tape`]; used by the
/// decoder, where no gradients are needed.
pub fn target_hiddens<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    cond: CondIn<'_, E>,
    history: History<'_>,
    target: &[Vec<u16>],
) -> Result<Tensor<E>, DiffusionError> {
    let s = cfg.stride;
    let jl = cfg.layers;
    let d = cfg.d_model;
    let (codes, visible) = sequence_codes(cfg, history, target);

    let seq_len = cfg.mdm_seq_len();
    let mut x = Tensor::<E>::zeros(&[seq_len, d]);

    let typ = store.get("mdm.type");
    match cond {
        CondIn::Hidden(h) => {
            assert_eq!(h.len(), d, "conditioning width mismatch");
            let gate = store.get("mdm.gate").data()[0].to_f64();
            for c in 0..d {
                x.data_mut()[c] = E::from_f64(
                    gate * h[c].to_f64() + typ.data()[TYPE_PREFIX * d + c].to_f64(),
                );
            }
        }
        CondIn::Dropped => {
            let null = store.get("mdm.null_ar");
            for c in 0..d {
                x.data_mut()[c] = E::from_f64(
                    null.data()[c].to_f64() + typ.data()[TYPE_PREFIX * d + c].to_f64(),
                );
            }
        }
    }

    let pos = store.get("mdm.pos");
    let layer_tab = store.get("mdm.layer");
    for i in 0..2 * s * jl {
        let (rel, j) = slot_coords(i, jl);
        let in_history = rel < s;
        let frame = if in_history { rel } else { rel - s };
        let row = &mut x.data_mut()[(1 + i) * d..(2 + i) * d];
        let code = codes[i] as usize;
        let table = store.get(&format!("codes.table{j}"));
        let lift = store.get(&format!("codes.lift{j}"));
        let trow = &table.data()[code * cfg.d_code..(code + 1) * cfg.d_code];
        for (c, &tv) in trow.iter().enumerate() {
            let tv = tv.to_f64();
            let lrow = &lift.data()[c * d..(c + 1) * d];
            for (o, lv) in row.iter_mut().zip(lrow) {
                *o = E::from_f64(o.to_f64() + tv * lv.to_f64());
            }
        }
        let pos_row = if in_history { frame } else { s + frame };
        let type_row = if in_history { TYPE_PREFIX } else { TYPE_TARGET };
        for (c, o) in row.iter_mut().enumerate() {
            *o = E::from_f64(
                o.to_f64()
                    + pos.data()[pos_row * d + c].to_f64()
                    + layer_tab.data()[j * d + c].to_f64()
                    + typ.data()[type_row * d + c].to_f64(),
            );
        }
    }

    let h = blocks::forward_infer(
        store,
        "mdm",
        &cfg.mdm_block(),
        &x,
        AttnMode::Bidirectional,
        None,
        Some(&visible),
    )?;
    let mut out = Tensor::<E>::zeros(&[s * jl, d]);
    let src = &h.data()[(1 + s * jl) * d..];
    out.data_mut().copy_from_slice(src);
    Ok(out)
}

/// Kernel-side logits: flat `[stride * layers, codes_total]` in f64,
/// frame-major rows, legality applied. The decoder samples from these.
pub fn head_logits<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    target_hiddens: &Tensor<E>,
) -> Vec<f64> {
    let d = cfg.d_model;
    let ct = cfg.codes_total();
    let s = cfg.stride;
    let jl = cfg.layers;
    let mut out = vec![0.0f64; s * jl * ct];
    for j in 0..jl {
        let head = store.get(&format!("mdm.head{j}"));
        let legal = legality_row::<E>(cfg, j);
        for f in 0..s {
            let idx = slot_index(f, j, jl);
            let hrow = &target_hiddens.data()[idx * d..(idx + 1) * d];
            let orow = &mut out[idx * ct..(idx + 1) * ct];
            for (c, o) in orow.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for (k, hv) in hrow.iter().enumerate() {
                    acc += hv.to_f64() * head.data()[k * ct + c].to_f64();
                }
                *o = acc + legal[c].to_f64();
            }
        }
    }
    out
}

//! Autoregressive drafter over text and patch vectors.
//!
//! The drafter reads `[text symbols, separator, v_0, v_1, ...]` causally
//! and its hidden state after each element conditions the next patch: the
//! separator's hidden drafts patch 0, and the hidden over window vector
//! v_{k-1} drafts patch k. Training runs the whole prefix in one
//! teacher-forced pass; generation extends a KV cache one patch at a time.

use crate::blocks::{self, AttnMode, BlockError, KvCache};
use crate::model::ModelConfig;
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const TYPE_TEXT: usize = 0;
const TYPE_WINDOW: usize = 1;

fn check_text(cfg: &ModelConfig, text: &[u8]) -> Result<(), BlockError> {
    if text.is_empty() {
        return Err(BlockError::Config("drafter needs a non-empty text".into()));
    }
    if let Some(&bad) = text.iter().find(|&&s| s as usize >= cfg.alphabet) {
        return Err(BlockError::Config(format!(
            "text symbol {bad} outside alphabet 0..{}",
            cfg.alphabet
        )));
    }
    Ok(())
}

/// Teacher-forced pass: returns a `[k_total, d_model]` matrix whose row k
/// is the drafting hidden for patch k. `windows` must hold the
/// `k_total - 1` window vectors v_0..v_{k_total-2}, each `[1, d_model]`.
pub fn conditions_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    text: &[u8],
    windows: &[Var],
) -> Result<Var, BlockError> {
    check_text(cfg, text)?;
    let k_total = windows.len() + 1;
    let n_text = text.len();

    let text_idx: Vec<usize> = text.iter().map(|&s| s as usize).collect();
    let sym = tape.row_gather(bound.var("lm.text_embed"), &text_idx)?;
    let text_type = tape.row_gather(bound.var("lm.type"), &vec![TYPE_TEXT; n_text])?;
    let text_x = tape.add(sym, text_type)?;

    let sep_type = tape.row_gather(bound.var("lm.type"), &[TYPE_TEXT])?;
    let sep_x = tape.add(bound.var("lm.sep"), sep_type)?;

    let mut parts = vec![text_x, sep_x];
    for &w in windows {
        let wt = tape.row_gather(bound.var("lm.type"), &[TYPE_WINDOW])?;
        parts.push(tape.add(w, wt)?);
    }
    let x = tape.row_concat(&parts)?;
    let len = n_text + k_total;
    let positions: Vec<usize> = (0..len).collect();
    let h = blocks::forward_tape(
        tape,
        bound,
        "lm",
        &cfg.lm_block(),
        x,
        &positions,
        AttnMode::Causal,
        None,
    )?;
    // Row n_text is the separator; rows after it sit over the windows.
    let picks: Vec<usize> = (0..k_total).map(|k| n_text + k).collect();
    Ok(tape.row_gather(h, &picks)?)
}

/// Incremental drafter state; cloning it forks the stream cheaply.
#[derive(Debug, Clone)]
pub struct DrafterState<E: Scalar> {
    cache: KvCache<E>,
}

/// Encodes `[text, separator]` and returns the state plus h_0, the
/// drafting hidden for patch 0.
pub fn prefix_encode<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    text: &[u8],
) -> Result<(DrafterState<E>, Vec<E>), BlockError> {
    check_text(cfg, text)?;
    let d = cfg.d_model;
    let type_tab = store.get("lm.type");
    let embed = store.get("lm.text_embed");
    let mut x = Tensor::<E>::zeros(&[text.len() + 1, d]);
    for (i, &s) in text.iter().enumerate() {
        for c in 0..d {
            x.data_mut()[i * d + c] = E::from_f64(
                embed.data()[s as usize * d + c].to_f64()
                    + type_tab.data()[TYPE_TEXT * d + c].to_f64(),
            );
        }
    }
    let sep = store.get("lm.sep");
    let last = text.len() * d;
    for c in 0..d {
        x.data_mut()[last + c] = E::from_f64(
            sep.data()[c].to_f64() + type_tab.data()[TYPE_TEXT * d + c].to_f64(),
        );
    }
    let mut cache = KvCache::new(&cfg.lm_block());
    let h = blocks::forward_infer(
        store,
        "lm",
        &cfg.lm_block(),
        &x,
        AttnMode::Causal,
        Some(&mut cache),
        None,
    )?;
    let h0 = h.data()[text.len() * d..(text.len() + 1) * d].to_vec();
    Ok((DrafterState { cache }, h0))
}

/// Feeds one window vector and returns the extended state plus the
/// drafting hidden for the next patch.
pub fn step<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    state: &DrafterState<E>,
    window_vec: &[E],
) -> Result<(DrafterState<E>, Vec<E>), BlockError> {
    let d = cfg.d_model;
    assert_eq!(window_vec.len(), d, "window vector width mismatch");
    let type_tab = store.get("lm.type");
    let mut x = Tensor::<E>::zeros(&[1, d]);
    for c in 0..d {
        x.data_mut()[c] = E::from_f64(
            window_vec[c].to_f64() + type_tab.data()[TYPE_WINDOW * d + c].to_f64(),
        );
    }
    let mut next = state.clone();
    let h = blocks::forward_infer(
        store,
        "lm",
        &cfg.lm_block(),
        &x,
        AttnMode::Causal,
        Some(&mut next.cache),
        None,
    )?;
    Ok((next, h.data().to_vec()))
}

//! Confidence-based parallel decoding and full generation.
//!
//! A patch starts all-MASK. Each of the N steps predicts every open slot,
//! then re-masks the least confident ones down to a shrinking budget
//! `floor(rho_{n+1} * |Omega|)`, where Omega is the fixed set of decodable
//! slots (everything not pre-filled by a prompt remainder or pruned away).
//! A slot that survives a re-masking round is committed for good. Logits
//! are shaped by a repetition penalty, an annealed temperature with
//! per-layer and per-frame discounts, and classifier-free guidance on the
//! infiller's pre-head embeddings; sampling switches to greedy once half
//! the slots are committed.
//!
//! Generation drives this patch by patch: the drafter consumes the text
//! and each finished window, its hidden conditions the next patch, and
//! decoding stops at the first layer-0 EOS or after `max_patches`.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, pad_frame};
use crate::blocks::BlockError;
use crate::codec::{self, RvqGrid, EOS, MASK, NULL};
use crate::diffusion::{self, slot_index, CondIn, DiffusionError, History};
use crate::lm;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("bad decode config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Block(#[from] BlockError),
}

/// Which classifier-free guidance construction to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CfgSchema {
    /// One guidance step on the drafter condition: two forwards.
    A,
    /// Nested guidance through an unconditional branch: three forwards.
    B,
}

/// Guidance weights. `g_hist` is the fully conditioned branch, `g_ar`
/// drops the drafter hidden but keeps history, `g_uncond` drops both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfgParams {
    pub schema: CfgSchema,
    pub w_hist: f64,
    pub w_ar: f64,
    pub w_rescale: f64,
    pub eps: f64,
}

impl Default for CfgParams {
    fn default() -> Self {
        CfgParams {
            schema: CfgSchema::A,
            w_hist: 1.25,
            w_ar: 0.0,
            w_rescale: 0.75,
            eps: 1e-6,
        }
    }
}

/// Per-patch decoding knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    /// Prediction passes per patch.
    pub steps: usize,
    pub temp_layer: f64,
    pub temp_time: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub anneal_start: f64,
    pub anneal_end: f64,
    /// Committed-slot fraction at which sampling hands over to greedy.
    pub hybrid: f64,
    pub rep_factor: f64,
    /// Completed patches the repetition penalty looks back over.
    pub rep_window: usize,
    pub cfg: CfgParams,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            steps: 24,
            temp_layer: 0.8,
            temp_time: 0.95,
            top_k: 50,
            top_p: 0.9,
            anneal_start: 1.0,
            anneal_end: 0.1,
            hybrid: 0.5,
            rep_factor: 1.1,
            rep_window: 4,
            cfg: CfgParams::default(),
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: &str| Err(DecodeError::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.temp_layer <= 0.0 || self.temp_time <= 0.0 {
            return bad("temperature factors must be positive");
        }
        if self.anneal_start <= 0.0 || self.anneal_end <= 0.0 {
            return bad("anneal endpoints must be positive");
        }
        if self.top_k == 0 {
            return bad("top-k must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top-p must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hybrid) {
            return bad("hybrid fraction must lie in [0, 1]");
        }
        if self.rep_factor < 1.0 {
            return bad("repetition factor must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.cfg.w_rescale) {
            return bad("w_rescale must lie in [0, 1]");
        }
        if self.cfg.eps <= 0.0 {
            return bad("rescale epsilon must be positive");
        }
        Ok(())
    }

    /// Pure-conditional fast path: guidance provably changes nothing, so
    /// the extra forwards are skipped.
    fn cfg_is_identity(&self) -> bool {
        self.cfg.schema == CfgSchema::A && self.cfg.w_hist == 0.0 && self.cfg.w_rescale == 0.0
    }
}

/// Re-masking budget after step n of N: `mask_lambda(1 - n/N)`, running
/// from 1 at n=0 to exactly 0 at n=N.
pub fn mask_budget(n: usize, steps: usize) -> Result<f64, DecodeError> {
    if steps == 0 {
        return Err(DecodeError::Config("budget needs at least one step".into()));
    }
    if n > steps {
        return Err(DecodeError::Config(format!(
            "step index {n} beyond step count {steps}"
        )));
    }
    Ok(diffusion::mask_lambda(1.0 - n as f64 / steps as f64)?)
}

/// Linear temperature anneal across the N steps.
pub fn anneal(params: &DecodeParams, n: usize) -> f64 {
    if params.steps <= 1 {
        return params.anneal_start;
    }
    let frac = n as f64 / (params.steps - 1) as f64;
    params.anneal_start + (params.anneal_end - params.anneal_start) * frac
}

/// Effective sampling temperature for slot (frame, layer) at step n:
/// `anneal(n) * T_layer^layer * T_time^frame`.
pub fn effective_temperature(params: &DecodeParams, n: usize, frame: usize, layer: usize) -> f64 {
    anneal(params, n) * params.temp_layer.powi(layer as i32) * params.temp_time.powi(frame as i32)
}

/// Codes seen per RVQ layer over the trailing completed patches.
pub fn repetition_codes(
    patches: &[Vec<Vec<u16>>],
    layers: usize,
    window: usize,
) -> Vec<HashSet<u16>> {
    let mut sets = vec![HashSet::new(); layers];
    let start = patches.len().saturating_sub(window);
    for patch in &patches[start..] {
        for frame in patch {
            for (j, &code) in frame.iter().enumerate().take(layers) {
                if codec::is_content(code) {
                    sets[j].insert(code);
                }
            }
        }
    }
    sets
}

/// Discourages codes already used in the same layer nearby: their positive
/// logits are divided by the factor, negative ones multiplied.
pub fn apply_repetition_penalty(logits: &mut [f64], repeated: &HashSet<u16>, factor: f64) {
    if factor == 1.0 || repeated.is_empty() {
        return;
    }
    for &code in repeated {
        let l = &mut logits[code as usize];
        if *l > 0.0 {
            *l /= factor;
        } else {
            *l *= factor;
        }
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Greedy pick: argmax probability, ties to the lower code. Returns
/// (code, confidence).
fn greedy_pick(probs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for c in 1..probs.len() {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    (best, probs[best])
}

/// Top-k plus nucleus filtering, then one categorical draw. Confidence is
/// the maximum probability of the renormalized filtered distribution.
fn sample_pick(probs: &[f64], top_k: usize, top_p: f64, rng: &mut ChaCha12Rng) -> (usize, f64) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    let k = top_k.min(order.len());
    let mut kept = 0usize;
    let mut total = 0.0f64;
    for &c in order.iter().take(k) {
        kept += 1;
        total += probs[c];
        if total >= top_p {
            break;
        }
    }
    let u = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    for &c in order.iter().take(kept) {
        cum += probs[c];
        if u < cum {
            return (c, probs[order[0]] / total);
        }
    }
    (order[kept - 1], probs[order[0]] / total)
}

/// Combines the guidance branches on pre-head embeddings, Eq.-style:
/// schema A pushes away from the drafter-dropped branch; schema B first
/// sharpens that branch against the unconditional one. The result is
/// optionally variance-rescaled per slot back to the conditional branch's
/// spread and blended by `w_rescale`.
pub fn apply_cfg<E: Scalar>(
    g_hist: &Tensor<E>,
    g_ar: &Tensor<E>,
    g_uncond: Option<&Tensor<E>>,
    p: &CfgParams,
) -> Result<Tensor<E>, DecodeError> {
    if g_hist.shape() != g_ar.shape() {
        return Err(DecodeError::Shape(format!(
            "guidance branches {:?} vs {:?}",
            g_hist.shape(),
            g_ar.shape()
        )));
    }
    if p.schema == CfgSchema::B {
        match g_uncond {
            None => {
                return Err(DecodeError::Config(
                    "schema B needs the unconditional branch".into(),
                ))
            }
            Some(u) if u.shape() != g_hist.shape() => {
                return Err(DecodeError::Shape(format!(
                    "unconditional branch {:?} vs {:?}",
                    u.shape(),
                    g_hist.shape()
                )));
            }
            _ => {}
        }
    }
    let (rows, d) = g_hist.dims2().map_err(|e| DecodeError::Shape(e.to_string()))?;
    let mut out = Tensor::<E>::zeros(&[rows, d]);
    for r in 0..rows {
        let hist: Vec<f64> = g_hist.data()[r * d..(r + 1) * d]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let ar: Vec<f64> = g_ar.data()[r * d..(r + 1) * d]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let mut guided = vec![0.0f64; d];
        match p.schema {
            CfgSchema::A => {
                for c in 0..d {
                    guided[c] = hist[c] + p.w_hist * (hist[c] - ar[c]);
                }
            }
            CfgSchema::B => {
                let un = g_uncond.expect("checked above");
                for c in 0..d {
                    let u = un.data()[r * d + c].to_f64();
                    let sharpened = ar[c] + p.w_ar * (ar[c] - u);
                    guided[c] = hist[c] + p.w_hist * (hist[c] - sharpened);
                }
            }
        }
        if p.w_rescale > 0.0 {
            let std_of = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
            };
            let scale = std_of(&hist) / (std_of(&guided) + p.eps);
            for g in guided.iter_mut() {
                *g = p.w_rescale * (*g * scale) + (1.0 - p.w_rescale) * *g;
            }
        }
        for c in 0..d {
            out.data_mut()[r * d + c] = E::from_f64(guided[c]);
        }
    }
    Ok(out)
}

/// Guided pre-head embeddings for the current target state; skips the
/// extra branches entirely when guidance is a provable identity.
fn guided_hiddens<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    cond: &[E],
    history: &[Vec<u16>],
    target: &[Vec<u16>],
    params: &DecodeParams,
) -> Result<Tensor<E>, DecodeError> {
    let hist = diffusion::target_hiddens(
        store,
        cfg,
        CondIn::Hidden(cond),
        History::Frames(history),
        target,
    )?;
    if params.cfg_is_identity() {
        return Ok(hist);
    }
    let ar = diffusion::target_hiddens(
        store,
        cfg,
        CondIn::Dropped,
        History::Frames(history),
        target,
    )?;
    let uncond = match params.cfg.schema {
        CfgSchema::A => None,
        CfgSchema::B => Some(diffusion::target_hiddens(
            store,
            cfg,
            CondIn::Dropped,
            History::Dropped,
            target,
        )?),
    };
    apply_cfg(&hist, &ar, uncond.as_ref(), &params.cfg)
}

/// One patch to decode: the drafter hidden, the previous patch, the
/// repetition lookback, and slots already fixed before decoding starts
/// (prompt remainders and pruned layers).
pub struct PatchTask<'a, E: Scalar> {
    pub cond: &'a [E],
    pub history: &'a [Vec<u16>],
    pub rep_patches: &'a [Vec<Vec<u16>>],
    /// Frame-major, `stride * layers` long; `Some(code)` is pre-filled.
    pub prefill: Vec<Option<u16>>,
}

#[derive(Debug, Clone)]
pub struct DecodeStats {
    /// Slots committed at each step; sums to `omega`.
    pub commits_per_step: Vec<usize>,
    /// Decodable (non-pre-filled) slot count.
    pub omega: usize,
    pub sampled_steps: usize,
    pub greedy_steps: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Fixed,
    Open,
    Committed,
}

/// Decodes one patch from all-MASK to completion.
pub fn decode_patch<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    task: &PatchTask<'_, E>,
    params: &DecodeParams,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<Vec<u16>>, DecodeStats), DecodeError> {
    params.validate()?;
    let s = cfg.stride;
    let jl = cfg.layers;
    let total = s * jl;
    if task.prefill.len() != total {
        return Err(DecodeError::Shape(format!(
            "prefill length {} vs {total} slots",
            task.prefill.len()
        )));
    }

    let mut codes = vec![MASK; total];
    let mut status = vec![Slot::Open; total];
    for (i, pre) in task.prefill.iter().enumerate() {
        if let Some(c) = pre {
            codes[i] = *c;
            status[i] = Slot::Fixed;
        }
    }
    let omega = status.iter().filter(|&&st| st == Slot::Open).count();
    let mut stats = DecodeStats {
        commits_per_step: Vec::new(),
        omega,
        sampled_steps: 0,
        greedy_steps: 0,
    };
    if omega == 0 {
        return Ok((frames_of(&codes, s, jl), stats));
    }

    let rep_sets = repetition_codes(task.rep_patches, jl, params.rep_window);
    let ct = cfg.codes_total();

    let mut committed = 0usize;
    for n in 0..params.steps {
        let target = frames_of(&codes, s, jl);
        let hiddens = guided_hiddens(store, cfg, task.cond, task.history, &target, params)?;
        let logits = diffusion::head_logits(store, cfg, &hiddens);

        let sampling = (committed as f64 / omega as f64) < params.hybrid;
        if sampling {
            stats.sampled_steps += 1;
        } else {
            stats.greedy_steps += 1;
        }

        // Provisionally decode every open slot in linear order so RNG
        // consumption is reproducible.
        let mut proposals: Vec<(usize, u16, f64)> = Vec::new();
        for i in 0..total {
            if status[i] != Slot::Open {
                continue;
            }
            let (frame, layer) = diffusion::slot_coords(i, jl);
            let mut row = logits[i * ct..(i + 1) * ct].to_vec();
            apply_repetition_penalty(&mut row, &rep_sets[layer], params.rep_factor);
            let temp = effective_temperature(params, n, frame, layer);
            for l in row.iter_mut() {
                *l /= temp;
            }
            let probs = softmax_row(&row);
            let (code, conf) = if sampling {
                sample_pick(&probs, params.top_k, params.top_p, rng)
            } else {
                greedy_pick(&probs)
            };
            proposals.push((i, code as u16, conf));
        }

        let budget = (mask_budget(n + 1, params.steps)? * omega as f64).floor() as usize;
        debug_assert!(budget <= proposals.len(), "budget exceeds open slots");
        // Least confident keep their masks; ties resolve to the lower
        // index so runs are reproducible.
        proposals.sort_by(|a, b| {
            a.2.partial_cmp(&b.2)
                .expect("confidence is finite")
                .then(a.0.cmp(&b.0))
        });
        for (rank, &(i, code, _)) in proposals.iter().enumerate() {
            if rank < budget {
                codes[i] = MASK;
            } else {
                codes[i] = code;
                status[i] = Slot::Committed;
                committed += 1;
            }
        }
        stats.commits_per_step.push(proposals.len() - budget);
    }
    assert!(
        codes.iter().all(|&c| c != MASK),
        "decode left masked slots behind"
    );
    Ok((frames_of(&codes, s, jl), stats))
}

fn frames_of(codes: &[u16], s: usize, jl: usize) -> Vec<Vec<u16>> {
    (0..s).map(|f| codes[f * jl..(f + 1) * jl].to_vec()).collect()
}

/// Whole-utterance generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub decode: DecodeParams,
    /// RVQ layers dropped at inference; their slots come out NULL.
    pub prune: usize,
    pub max_patches: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            decode: DecodeParams::default(),
            prune: 0,
            max_patches: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Generated continuation only (prompt frames excluded), ending with
    /// its EOS frame unless truncated.
    pub grid: RvqGrid,
    pub truncated: bool,
    /// Patches decoded.
    pub patches: usize,
    /// Infiller prediction passes: steps x patches. Guidance branches
    /// within one pass are not counted separately.
    pub nfe: usize,
}

/// Generates the continuation of `prompt` so that the whole utterance
/// reads `full_text`. The prompt's trailing EOS frame, if present, is
/// stripped first; a partial trailing patch of the prompt is completed by
/// infilling around pre-filled slots.
pub fn generate<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    full_text: &[u8],
    prompt: &RvqGrid,
    gp: &GenParams,
    rng: &mut ChaCha12Rng,
) -> Result<Generated, DecodeError> {
    gp.decode.validate()?;
    if gp.prune >= cfg.layers {
        return Err(DecodeError::Config(format!(
            "pruning {} of {} layers leaves nothing to decode",
            gp.prune, cfg.layers
        )));
    }
    if gp.max_patches == 0 {
        return Err(DecodeError::Config("max_patches must be positive".into()));
    }
    if prompt.layers() != cfg.layers {
        return Err(DecodeError::Shape(format!(
            "prompt has {} layers, model expects {}",
            prompt.layers(),
            cfg.layers
        )));
    }
    let l_keep = cfg.layers - gp.prune;
    let s = cfg.stride;
    let jl = cfg.layers;

    let mut work = prompt.clone();
    if !work.is_empty() && work.get(work.len() - 1, 0) == EOS {
        work = work.slice(0, work.len() - 1);
    }
    let lp = work.len();
    let k0 = lp / s;
    let rem = lp - k0 * s;

    let (mut state, mut h) = lm::prefix_encode(store, cfg, full_text)?;
    for k in 0..k0 {
        let mut win = aggregator::window_frames(&work, k, cfg.patch, s);
        aggregator::apply_keep(&mut win, l_keep);
        let v = aggregator::encode_window(store, cfg, &win)?;
        let (next, hidden) = lm::step(store, cfg, &state, &v)?;
        state = next;
        h = hidden;
    }

    let mut truncated = true;
    let mut patches = 0usize;
    let mut k = k0;
    while patches < gp.max_patches {
        let mut history = if k == 0 {
            vec![pad_frame(jl); s]
        } else {
            aggregator::slice_frames(&work, k - 1, s)
        };
        aggregator::apply_keep(&mut history, l_keep);

        let rep: Vec<Vec<Vec<u16>>> = (k.saturating_sub(gp.decode.rep_window)..k)
            .map(|kk| {
                let mut sl = aggregator::slice_frames(&work, kk, s);
                aggregator::apply_keep(&mut sl, l_keep);
                sl
            })
            .collect();

        let mut prefill: Vec<Option<u16>> = vec![None; s * jl];
        let fresh_from = if k == k0 { rem } else { 0 };
        for f in 0..fresh_from {
            let mut row = work.row(k * s + f).to_vec();
            aggregator::apply_keep(std::slice::from_mut(&mut row), l_keep);
            for (j, &code) in row.iter().enumerate() {
                prefill[slot_index(f, j, jl)] = Some(code);
            }
        }
        for f in 0..s {
            for j in l_keep..jl {
                let idx = slot_index(f, j, jl);
                if prefill[idx].is_none() {
                    prefill[idx] = Some(NULL);
                }
            }
        }

        let task = PatchTask {
            cond: &h,
            history: &history,
            rep_patches: &rep,
            prefill,
        };
        let (frames, _) = decode_patch(store, cfg, &task, &gp.decode, rng)?;
        patches += 1;

        let mut saw_eos = false;
        for frame in frames.iter().skip(fresh_from) {
            if frame[0] == EOS {
                let mut eos_row = vec![NULL; jl];
                eos_row[0] = EOS;
                work.push_frame(&eos_row);
                saw_eos = true;
                break;
            }
            work.push_frame(frame);
        }
        if saw_eos {
            truncated = false;
            break;
        }
        if patches == gp.max_patches {
            break;
        }
        let mut win = aggregator::window_frames(&work, k, cfg.patch, s);
        aggregator::apply_keep(&mut win, l_keep);
        let v = aggregator::encode_window(store, cfg, &win)?;
        let (next, hidden) = lm::step(store, cfg, &state, &v)?;
        state = next;
        h = hidden;
        k += 1;
    }

    Ok(Generated {
        grid: work.slice(lp, work.len()),
        truncated,
        patches,
        nfe: gp.decode.steps * patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    /// Tiny 2-frame, 2-layer model for fast structural decode tests.
    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::micro();
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ffn = 32;
        cfg.lm_layers = 1;
        cfg.mdm_layers = 1;
        cfg.agg_layers = 1;
        cfg.layers = 2;
        cfg.d_code = 8;
        cfg.patch = 2;
        cfg.stride = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn greedy_params(steps: usize) -> DecodeParams {
        DecodeParams {
            steps,
            hybrid: 0.0,
            cfg: CfgParams {
                w_hist: 0.0,
                w_rescale: 0.0,
                ..CfgParams::default()
            },
            ..DecodeParams::default()
        }
    }

    #[test]
    fn mask_budget_endpoints_and_monotonicity() {
        assert_eq!(mask_budget(0, 4).unwrap(), 1.0);
        assert_eq!(mask_budget(4, 4).unwrap(), 0.0);
        assert!((mask_budget(2, 4).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        for steps in 1..=64usize {
            let mut prev = f64::INFINITY;
            for n in 0..=steps {
                let r = mask_budget(n, steps).unwrap();
                assert!(r < prev, "budget must strictly decrease");
                prev = r;
            }
        }
        assert!(mask_budget(5, 4).is_err());
        assert!(mask_budget(0, 0).is_err());
    }

    #[test]
    fn temperature_shaping_matches_direct_powers() {
        let p = DecodeParams::default();
        assert_eq!(effective_temperature(&p, 0, 0, 0), 1.0);
        let want = 0.8f64.powi(2) * 0.95f64.powi(3);
        assert!((want - 0.548).abs() < 1e-3, "spot value {want}");
        assert!((effective_temperature(&p, 0, 3, 2) - want).abs() < 1e-15);

        let mut flat = DecodeParams::default();
        flat.temp_layer = 1.0;
        flat.temp_time = 1.0;
        for n in 0..flat.steps {
            assert_eq!(effective_temperature(&flat, n, 3, 2), anneal(&flat, n));
        }
        assert_eq!(anneal(&p, 0), 1.0);
        assert!((anneal(&p, p.steps - 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn repetition_penalty_lowers_repeated_code_probability() {
        let logits = vec![1.5, -0.5, 0.2, 0.0];
        let base = softmax_row(&logits);
        let both: HashSet<u16> = [0u16, 1].into_iter().collect();

        let mut copy = logits.clone();
        apply_repetition_penalty(&mut copy, &both, 1.0);
        assert_eq!(copy, logits, "factor 1 must be a no-op");
        apply_repetition_penalty(&mut copy, &HashSet::new(), 1.5);
        assert_eq!(copy, logits, "empty history must be a no-op");

        // Penalizing a single code must strictly lower its probability,
        // whether its logit is positive or negative.
        for &code in &[0usize, 1] {
            let mut one = logits.clone();
            let set: HashSet<u16> = [code as u16].into_iter().collect();
            apply_repetition_penalty(&mut one, &set, 1.5);
            let after = softmax_row(&one);
            assert!(after[code] < base[code], "code {code} must lose mass");
        }
        // Joint penalty drains mass from the repeated set as a whole.
        let mut joint = logits.clone();
        apply_repetition_penalty(&mut joint, &both, 1.5);
        let after = softmax_row(&joint);
        assert!(after[0] + after[1] < base[0] + base[1]);
        assert!(after[2] > base[2]);
    }

    #[test]
    fn sampling_filters_and_degenerates_to_greedy() {
        let probs = softmax_row(&[2.0, 1.0, 0.5, -1.0, -3.0]);
        // A nucleus narrower than the top prob keeps only the argmax.
        for seed in 0..20 {
            let (c, conf) = sample_pick(&probs, 5, 1e-9, &mut rng(seed));
            assert_eq!(c, 0);
            assert!((conf - 1.0).abs() < 1e-12);
        }
        // Same seed, same draw; confidence is the renormalized max.
        let a = sample_pick(&probs, 3, 0.99, &mut rng(7));
        let b = sample_pick(&probs, 3, 0.99, &mut rng(7));
        assert_eq!(a, b);
        let kept: f64 = probs[..3].iter().sum();
        assert!((a.1 - probs[0] / kept).abs() < 1e-12);
        // top_k beyond the vocabulary is clamped.
        let (c, _) = sample_pick(&probs, 99, 1.0, &mut rng(1));
        assert!(c < probs.len());
    }

    #[test]
    fn cfg_identities_hold() {
        let mk = |seed: u64| {
            let mut r = rng(seed);
            let data: Vec<f64> = (0..6 * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[6, 8], data).unwrap()
        };
        let hist = mk(1);
        let ar = mk(2);

        let mut p = CfgParams::default();
        p.w_hist = 0.0;
        p.w_rescale = 0.0;
        let out = apply_cfg(&hist, &ar, None, &p).unwrap();
        assert_eq!(out.data(), hist.data(), "zero guidance must be exact");

        let mut p = CfgParams::default();
        p.w_hist = 3.7;
        p.w_rescale = 0.0;
        let out = apply_cfg(&hist, &hist, None, &p).unwrap();
        assert_eq!(out.data(), hist.data(), "equal branches leave no direction");

        let mut p = CfgParams::default();
        p.w_hist = 1.25;
        p.w_rescale = 1.0;
        let out = apply_cfg(&hist, &ar, None, &p).unwrap();
        let (rows, d) = out.dims2().unwrap();
        let std_of = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
        };
        for r in 0..rows {
            let sh = std_of(&hist.data()[r * d..(r + 1) * d]);
            let so = std_of(&out.data()[r * d..(r + 1) * d]);
            assert!((sh - so).abs() < 1e-5, "row {r}: {so} vs {sh}");
        }

        let mut p = CfgParams::default();
        p.schema = CfgSchema::B;
        assert!(apply_cfg(&hist, &ar, None, &p).is_err(), "B needs uncond");
        let bad = Tensor::<f64>::zeros(&[3, 8]);
        assert!(apply_cfg(&hist, &bad, None, &CfgParams::default()).is_err());
    }

    fn tiny_task<'a>(
        cond: &'a [f32],
        history: &'a [Vec<u16>],
        prefill: Vec<Option<u16>>,
    ) -> PatchTask<'a, f32> {
        PatchTask {
            cond,
            history,
            rep_patches: &[],
            prefill,
        }
    }

    #[test]
    fn four_slots_four_steps_commit_exactly_one_per_step() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(5));
        let cond = vec![0.1f32; cfg.d_model];
        let history = vec![vec![3u16, 7], vec![9, 1]];
        let params = greedy_params(4);
        let (frames, stats) = decode_patch(
            &store,
            &cfg,
            &tiny_task(&cond, &history, vec![None; 4]),
            &params,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(stats.omega, 4);
        assert_eq!(stats.commits_per_step, vec![1, 1, 1, 1]);
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn decoded_patches_never_contain_reserved_codes() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(6));
        let mut params = greedy_params(2);
        params.hybrid = 1.0; // always sampling: the stressful mode
        let mut r = rng(99);
        for _ in 0..1000 {
            let cond: Vec<f32> = (0..cfg.d_model).map(|_| r.gen_range(-1.0..1.0)).collect();
            let history: Vec<Vec<u16>> = (0..cfg.stride)
                .map(|_| (0..cfg.layers).map(|_| r.gen_range(0..64u16)).collect())
                .collect();
            let (frames, _) = decode_patch(
                &store,
                &cfg,
                &tiny_task(&cond, &history, vec![None; 4]),
                &params,
                &mut r,
            )
            .unwrap();
            for (f, frame) in frames.iter().enumerate() {
                for (j, &code) in frame.iter().enumerate() {
                    let legal = codec::is_content(code) || (j == 0 && code == EOS);
                    assert!(legal, "slot ({f},{j}) holds reserved code {code}");
                }
            }
        }
    }

    #[test]
    fn greedy_decode_ignores_the_seed_entirely() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(8));
        let cond = vec![0.3f32; cfg.d_model];
        let history = vec![vec![0u16, 0], vec![1, 1]];
        let params = greedy_params(4);
        let run = |seed| {
            decode_patch(
                &store,
                &cfg,
                &tiny_task(&cond, &history, vec![None; 4]),
                &params,
                &mut rng(seed),
            )
            .unwrap()
            .0
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn prefilled_slots_are_untouched_and_excluded_from_omega() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(9));
        let cond = vec![0.0f32; cfg.d_model];
        let history = vec![vec![2u16, 2], vec![2, 2]];
        // Fix frame 0 entirely: codes 11 and NULL (a pruned-style slot).
        let prefill = vec![Some(11u16), Some(NULL), None, None];
        let params = greedy_params(3);
        let (frames, stats) = decode_patch(
            &store,
            &cfg,
            &tiny_task(&cond, &history, prefill),
            &params,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(stats.omega, 2);
        assert_eq!(stats.commits_per_step.iter().sum::<usize>(), 2);
        assert_eq!(frames[0], vec![11, NULL]);
        assert!(frames[1].iter().all(|&c| codec::is_content(c) || c == EOS));
    }

    #[test]
    fn fully_prefilled_patch_skips_prediction() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(10));
        let cond = vec![0.0f32; cfg.d_model];
        let history = vec![vec![2u16, 2], vec![2, 2]];
        let prefill: Vec<Option<u16>> = vec![Some(1), Some(2), Some(3), Some(4)];
        let (frames, stats) = decode_patch(
            &store,
            &cfg,
            &tiny_task(&cond, &history, prefill),
            &greedy_params(4),
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(stats.omega, 0);
        assert!(stats.commits_per_step.is_empty());
        assert_eq!(frames, vec![vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn cfg_on_and_off_agree_when_weights_are_zero() {
        // Full guidance machinery with zero weights must equal the
        // short-circuited conditional pass bit for bit.
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(11));
        let cond = vec![0.2f32; cfg.d_model];
        let history = vec![vec![5u16, 6], vec![7, 8]];
        let target = vec![vec![MASK, MASK], vec![MASK, MASK]];
        let params_off = greedy_params(4);
        let mut params_zero = greedy_params(4);
        params_zero.cfg.w_rescale = 0.0;
        params_zero.cfg.w_hist = 0.0;
        // Force the long path by using schema B with zero weights.
        params_zero.cfg.schema = CfgSchema::B;
        params_zero.cfg.w_ar = 0.0;

        let a = guided_hiddens(&store, &cfg, &cond, &history, &target, &params_off).unwrap();
        let b = guided_hiddens(&store, &cfg, &cond, &history, &target, &params_zero).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x, y, "zero-weight guidance must be exact");
        }
    }

    fn tiny_prompt(cfg: &ModelConfig, frames: usize) -> RvqGrid {
        let rows: Vec<Vec<u16>> = (0..frames)
            .map(|f| (0..cfg.layers).map(|j| ((3 * f + j) % 60) as u16).collect())
            .collect();
        let mut grid = RvqGrid::from_frames(cfg.layers, &rows);
        let mut eos = vec![NULL; cfg.layers];
        eos[0] = EOS;
        grid.push_frame(&eos);
        grid
    }

    #[test]
    fn generation_is_seed_deterministic_and_respects_max_patches() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(12));
        let prompt = tiny_prompt(&cfg, 3); // 3 content frames + EOS
        let text = [1u8, 2, 3, 4];
        let mut gp = GenParams {
            decode: greedy_params(3),
            prune: 0,
            max_patches: 4,
        };
        gp.decode.hybrid = 1.0; // sampling throughout
        let a = generate(&store, &cfg, &text, &prompt, &gp, &mut rng(5)).unwrap();
        let b = generate(&store, &cfg, &text, &prompt, &gp, &mut rng(5)).unwrap();
        assert_eq!(a.grid.to_rows(), b.grid.to_rows());
        assert_eq!(a.truncated, b.truncated);
        assert!(a.patches <= gp.max_patches);
        assert_eq!(a.nfe, gp.decode.steps * a.patches);
        // 3 prompt frames => one frame of the first patch is pre-filled,
        // so patch 1 contributes 1 fresh frame, later patches 2 each.
        let max_len = 1 + (gp.max_patches - 1) * cfg.stride;
        assert!(a.grid.len() <= max_len, "{} > {max_len}", a.grid.len());
        if a.truncated {
            assert_eq!(a.patches, gp.max_patches);
        } else {
            let last = a.grid.len() - 1;
            assert_eq!(a.grid.get(last, 0), EOS);
            for j in 1..cfg.layers {
                assert_eq!(a.grid.get(last, j), NULL);
            }
        }
        // The continuation never repeats the prompt's frames.
        for f in 0..a.grid.len().saturating_sub(1) {
            assert!(codec::is_content(a.grid.get(f, 0)));
        }
    }

    #[test]
    fn pruned_generation_emits_null_upper_layers_only() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(13));
        let prompt = tiny_prompt(&cfg, 4);
        let gp = GenParams {
            decode: greedy_params(3),
            prune: 1,
            max_patches: 3,
        };
        let out = generate(&store, &cfg, &[0, 1, 2], &prompt, &gp, &mut rng(1)).unwrap();
        assert!(!out.grid.is_empty());
        for f in 0..out.grid.len() {
            let c0 = out.grid.get(f, 0);
            assert!(codec::is_content(c0) || c0 == EOS);
            assert_eq!(out.grid.get(f, 1), NULL, "pruned layer must stay NULL");
        }
        // Pruning the whole stack is rejected.
        let gp_bad = GenParams {
            decode: greedy_params(3),
            prune: 2,
            max_patches: 3,
        };
        assert!(generate(&store, &cfg, &[0], &prompt, &gp_bad, &mut rng(1)).is_err());
    }

    #[test]
    fn pruning_shrinks_decoded_slot_count_by_depth() {
        let cfg = tiny_cfg();
        let store: ParamStore<f32> = init_params(&cfg, &mut rng(14));
        let cond = vec![0.1f32; cfg.d_model];
        let history = vec![vec![2u16, 2], vec![2, 2]];
        let full = decode_patch(
            &store,
            &cfg,
            &tiny_task(&cond, &history, vec![None; 4]),
            &greedy_params(2),
            &mut rng(0),
        )
        .unwrap()
        .1;
        // Prune the top layer: its two slots arrive pre-filled NULL.
        let prefill = vec![None, Some(NULL), None, Some(NULL)];
        let pruned = decode_patch(
            &store,
            &cfg,
            &tiny_task(&cond, &history, prefill),
            &greedy_params(2),
            &mut rng(0),
        )
        .unwrap()
        .1;
        assert_eq!(full.omega, cfg.stride * cfg.layers);
        assert_eq!(pruned.omega, cfg.stride);
    }
}

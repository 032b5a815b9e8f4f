//! Training objective assembly.
//!
//! Every stochastic choice in a batch — per-example depth truncation,
//! per-patch diffusion time, mask indicators, and condition drops — is
//! drawn up front into [`BatchDraws`], so the loss is a pure function of
//! (parameters, items, draws). Tests can then enumerate or replay draws,
//! and a training step is exactly reproducible from its seed.
//!
//! The loss over a batch is
//! `sum_patches (1/t) * sum_masked nll / sum_patches masked_count`:
//! each patch's masked-slot cross-entropy is weighted by the inverse of
//! its own diffusion time, and the whole batch is normalized by the raw
//! masked-slot count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::aggregator::{self, pad_frame};
use crate::blocks::BlockError;
use crate::codec::{Utterance, MASK};
use crate::diffusion::{self, CondTape, DiffusionError, History, T_MIN};
use crate::lm;
use crate::model::{init_params, ModelConfig};
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Probability of dropping the drafter condition, and independently the
/// history patch, for any one training patch.
pub const DROP_P: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("draws cover {draws} examples, batch has {items}")]
    DrawMismatch { items: usize, draws: usize },
    #[error("example {example}: draws cover {draws} patches, grid needs {patches}")]
    PatchMismatch {
        example: usize,
        draws: usize,
        patches: usize,
    },
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Randomness consumed by one patch of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDraw {
    /// Diffusion time in (T_MIN, 1].
    pub t: f64,
    /// Frame-major mask indicator over the target slots.
    pub mask: Vec<bool>,
    pub drop_ar: bool,
    pub drop_hist: bool,
}

/// Randomness consumed by one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleDraw {
    /// RVQ layers kept after depth truncation, in 1..=layers.
    pub l_keep: usize,
    pub patches: Vec<PatchDraw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraws {
    pub examples: Vec<ExampleDraw>,
}

/// An utterance grid cut down to the model's layer count. Dataset grids
/// always carry the codec's full depth; shallower models read a prefix.
pub fn model_grid(cfg: &ModelConfig, item: &Utterance) -> Vec<Vec<u16>> {
    item.grid
        .iter()
        .map(|row| row[..cfg.layers].to_vec())
        .collect()
}

fn kept_grid(cfg: &ModelConfig, item: &Utterance, l_keep: usize) -> Vec<Vec<u16>> {
    let mut rows = model_grid(cfg, item);
    aggregator::apply_keep(&mut rows, l_keep);
    rows
}

fn grid_of(cfg: &ModelConfig, rows: &[Vec<u16>]) -> crate::codec::RvqGrid {
    crate::codec::RvqGrid::from_frames(cfg.layers, rows)
}

/// Draws all randomness for a batch. Order per example: kept depth, then
/// per patch the diffusion time, the mask bits, and the two drop flags.
pub fn draw_batch(
    cfg: &ModelConfig,
    items: &[&Utterance],
    rng: &mut ChaCha12Rng,
) -> BatchDraws {
    let examples = items
        .iter()
        .map(|item| {
            let dropped = rng.gen_range(0..cfg.layers);
            let l_keep = cfg.layers - dropped;
            let rows = kept_grid(cfg, item, l_keep);
            let grid = grid_of(cfg, &rows);
            let k_total = aggregator::patch_count(grid.len(), cfg.stride);
            let patches = (0..k_total)
                .map(|k| {
                    let t = 1.0 - (1.0 - T_MIN) * rng.gen::<f64>();
                    let target = aggregator::slice_frames(&grid, k, cfg.stride);
                    let (_, mask) = diffusion::forward_mask(&target, t, rng)
                        .expect("t drawn strictly positive");
                    PatchDraw {
                        t,
                        mask,
                        drop_ar: rng.gen::<f64>() < DROP_P,
                        drop_hist: rng.gen::<f64>() < DROP_P,
                    }
                })
                .collect();
            ExampleDraw { l_keep, patches }
        })
        .collect();
    BatchDraws { examples }
}

fn corrupt(target: &[Vec<u16>], mask: &[bool], layers: usize) -> Vec<Vec<u16>> {
    target
        .iter()
        .enumerate()
        .map(|(f, frame)| {
            frame
                .iter()
                .enumerate()
                .map(|(j, &c)| {
                    if mask[diffusion::slot_index(f, j, layers)] {
                        MASK
                    } else {
                        c
                    }
                })
                .collect()
        })
        .collect()
}

/// Forward-pass side products useful for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Masked slots across the batch; the loss normalizer.
    pub masked_slots: usize,
    /// Patch draws that contributed at least one masked slot.
    pub active_patches: usize,
    /// All patch draws seen.
    pub patches: usize,
    /// Plain cross-entropy per masked slot, without the 1/t weighting.
    pub mean_nll: f64,
}

/// Assembles the batch loss on the tape. Teacher forcing throughout: the
/// drafter reads ground-truth windows, and each patch's history is the
/// ground-truth previous slice, both under the example's kept depth.
pub fn batch_loss_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    cfg: &ModelConfig,
    items: &[&Utterance],
    draws: &BatchDraws,
) -> Result<(Var, LossStats), ObjectiveError> {
    if items.len() != draws.examples.len() {
        return Err(ObjectiveError::DrawMismatch {
            items: items.len(),
            draws: draws.examples.len(),
        });
    }
    let mut total: Option<Var> = None;
    let mut stats = LossStats {
        masked_slots: 0,
        active_patches: 0,
        patches: 0,
        mean_nll: 0.0,
    };
    let mut raw_nll = 0.0f64;

    for (i, (item, ex)) in items.iter().zip(&draws.examples).enumerate() {
        let rows = kept_grid(cfg, item, ex.l_keep);
        let grid = grid_of(cfg, &rows);
        let k_total = aggregator::patch_count(grid.len(), cfg.stride);
        if ex.patches.len() != k_total {
            return Err(ObjectiveError::PatchMismatch {
                example: i,
                draws: ex.patches.len(),
                patches: k_total,
            });
        }
        stats.patches += k_total;

        // Skip the whole example when no patch draws a mask; its windows
        // would only feed loss terms that cannot exist.
        if ex.patches.iter().all(|p| !p.mask.iter().any(|&b| b)) {
            continue;
        }

        let mut windows = Vec::with_capacity(k_total.saturating_sub(1));
        for k in 0..k_total.saturating_sub(1) {
            let frames = aggregator::window_frames(&grid, k, cfg.patch, cfg.stride);
            windows.push(aggregator::encode_window_tape(tape, bound, cfg, &frames)?);
        }
        let conds = lm::conditions_tape(tape, bound, cfg, &item.text, &windows)?;

        for (k, pd) in ex.patches.iter().enumerate() {
            let m: usize = pd.mask.iter().filter(|&&b| b).count();
            if m == 0 {
                continue;
            }
            let target = aggregator::slice_frames(&grid, k, cfg.stride);
            let corrupted = corrupt(&target, &pd.mask, cfg.layers);
            let history_frames = if k == 0 {
                vec![pad_frame(cfg.layers); cfg.stride]
            } else {
                aggregator::slice_frames(&grid, k - 1, cfg.stride)
            };
            let cond = if pd.drop_ar {
                CondTape::Dropped
            } else {
                CondTape::Hidden(tape.row_gather(conds, &[k])?)
            };
            let history = if pd.drop_hist {
                History::Dropped
            } else {
                History::Frames(&history_frames)
            };
            let hiddens =
                diffusion::target_hiddens_tape(tape, bound, cfg, cond, history, &corrupted)?;
            let term =
                diffusion::patch_loss_tape(tape, bound, cfg, hiddens, &target, &pd.mask, 1.0 / pd.t)?;
            raw_nll += tape.value(term).data()[0].to_f64() * pd.t;
            stats.masked_slots += m;
            stats.active_patches += 1;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }

    let loss = match total {
        None => tape.constant(Tensor::scalar(E::from_f64(0.0))),
        Some(sum) => tape.scale(sum, 1.0 / stats.masked_slots as f64),
    };
    if stats.masked_slots > 0 {
        stats.mean_nll = raw_nll / stats.masked_slots as f64;
    }
    Ok((loss, stats))
}

/// One parameter block's finite-difference audit.
#[derive(Debug, Clone)]
pub struct FdCheck {
    pub name: String,
    /// Coordinates probed.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest |analytic| seen among probed coordinates.
    pub max_grad: f64,
}

/// Audits the analytic gradient of the batch loss against central finite
/// differences in f64, probing `coords` entries of every parameter
/// block. Draws are fixed up front (with the rare drop/truncation paths
/// forced on), so the loss is a smooth function of the parameters and
/// the comparison is exact up to O(h^2).
pub fn fd_gradient_report(
    cfg: &ModelConfig,
    items: &[&Utterance],
    seed: u64,
    coords: usize,
    h: f64,
) -> Result<Vec<FdCheck>, ObjectiveError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store: ParamStore<f64> = init_params(cfg, &mut rng);
    let mut draws = draw_batch(cfg, items, &mut rng);
    if let Some(ex) = draws.examples.first_mut() {
        ex.l_keep = ex.l_keep.clamp(1, cfg.layers.saturating_sub(1).max(1));
        let mut masked: Vec<usize> = ex
            .patches
            .iter()
            .enumerate()
            .filter(|(_, p)| p.mask.iter().any(|&b| b))
            .map(|(i, _)| i)
            .collect();
        if masked.is_empty() {
            // Frame 0 layer 0 is always content, hence maskable.
            ex.patches[0].mask[0] = true;
            masked.push(0);
        }
        ex.patches[masked[0]].drop_ar = true;
        ex.patches[*masked.get(1).unwrap_or(&masked[0])].drop_hist = true;
    }

    let loss_value = |store: &ParamStore<f64>| -> Result<f64, ObjectiveError> {
        let mut tape = Tape::new();
        let bound = TapeBinding::bind(&mut tape, store);
        let (loss, _) = batch_loss_tape(&mut tape, &bound, cfg, items, &draws)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let bound = TapeBinding::bind(&mut tape, &store);
    let (loss, _) = batch_loss_tape(&mut tape, &bound, cfg, items, &draws)?;
    tape.backward(loss)?;
    let mut analytic: ParamStore<f64> = ParamStore::new();
    let mut names: Vec<String> = Vec::new();
    for (name, t) in store.iter() {
        names.push(name.to_string());
        let g = tape
            .grad(bound.var(name))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        analytic.insert(name.to_string(), g);
    }
    drop(tape);

    let mut report = Vec::new();
    for name in names {
        let len = store.get(&name).data().len();
        let mut picks = vec![0, len - 1];
        while picks.len() < coords.min(len) {
            let c = rng.gen_range(0..len);
            if !picks.contains(&c) {
                picks.push(c);
            }
        }
        picks.truncate(coords.min(len));
        let mut check = FdCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel_err: 0.0,
            max_grad: 0.0,
        };
        for c in picks {
            let orig = store.get(&name).data()[c];
            store.get_mut(&name).data_mut()[c] = orig + h;
            let up = loss_value(&store)?;
            store.get_mut(&name).data_mut()[c] = orig - h;
            let down = loss_value(&store)?;
            store.get_mut(&name).data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.get(&name).data()[c];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.max_grad = check.max_grad.max(a.abs());
        }
        report.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{EOS, NULL};
    use crate::diffusion::{head_logits, mask_lambda, maskable, target_hiddens, CondIn};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

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

    /// Hand-built utterance: 3 content frames then an EOS frame, deep
    /// enough for any cfg.layers <= 6.
    fn tiny_item() -> Utterance {
        let mut grid: Vec<Vec<u16>> = (0..3)
            .map(|f| (0..6).map(|j| ((5 * f + j) % 60) as u16).collect())
            .collect();
        let mut eos = vec![NULL; 6];
        eos[0] = EOS;
        grid.push(eos);
        Utterance {
            text: vec![1, 2, 3, 4],
            style: 0,
            grid,
            seed: 7,
        }
    }

    #[test]
    fn draws_are_deterministic_and_in_range() {
        let cfg = tiny_cfg();
        let item = tiny_item();
        let a = draw_batch(&cfg, &[&item, &item], &mut rng(3));
        let b = draw_batch(&cfg, &[&item, &item], &mut rng(3));
        assert_eq!(a, b);
        for ex in &a.examples {
            assert!((1..=cfg.layers).contains(&ex.l_keep));
            // 4 frames, stride 2 => 2 patches.
            assert_eq!(ex.patches.len(), 2);
            for pd in &ex.patches {
                assert!(pd.t > T_MIN && pd.t <= 1.0);
                assert_eq!(pd.mask.len(), cfg.stride * cfg.layers);
            }
        }
        assert_ne!(
            a,
            draw_batch(&cfg, &[&item, &item], &mut rng(4)),
            "different seeds should differ"
        );
    }

    #[test]
    fn draw_statistics_match_their_laws() {
        let cfg = tiny_cfg();
        let item = tiny_item();
        let mut r = rng(11);
        let n = 4000usize;
        let mut keep_counts = vec![0usize; cfg.layers + 1];
        let mut drops = 0usize;
        let mut patch_draws = 0usize;
        for _ in 0..n {
            let d = draw_batch(&cfg, &[&item], &mut r);
            keep_counts[d.examples[0].l_keep] += 1;
            for pd in &d.examples[0].patches {
                patch_draws += 1;
                drops += usize::from(pd.drop_ar) + usize::from(pd.drop_hist);
            }
        }
        // l_keep uniform over {1..layers}: each within 4 sigma.
        let p = 1.0 / cfg.layers as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &keep_counts[1..] {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma, "count {c}");
        }
        // Drop flags: Bernoulli(0.1) over 2 * patch_draws trials.
        let trials = 2 * patch_draws;
        let sigma = (trials as f64 * DROP_P * (1.0 - DROP_P)).sqrt();
        assert!((drops as f64 - trials as f64 * DROP_P).abs() < 4.0 * sigma);
    }

    #[test]
    fn masks_fall_only_on_maskable_slots_of_the_kept_grid() {
        let cfg = tiny_cfg();
        let item = tiny_item();
        let mut r = rng(21);
        for _ in 0..200 {
            let d = draw_batch(&cfg, &[&item], &mut r);
            let ex = &d.examples[0];
            let rows = kept_grid(&cfg, &item, ex.l_keep);
            let grid = grid_of(&cfg, &rows);
            for (k, pd) in ex.patches.iter().enumerate() {
                let target = aggregator::slice_frames(&grid, k, cfg.stride);
                for f in 0..cfg.stride {
                    for j in 0..cfg.layers {
                        let idx = diffusion::slot_index(f, j, cfg.layers);
                        if pd.mask[idx] {
                            assert!(maskable(target[f][j], j), "masked unmaskable slot");
                        }
                    }
                }
            }
        }
    }

    /// Independent recomputation of the batch loss through the kernel
    /// path: incremental drafter, manual masking, manual softmax NLL.
    fn oracle_loss(
        store: &ParamStore<f64>,
        cfg: &ModelConfig,
        items: &[&Utterance],
        draws: &BatchDraws,
    ) -> f64 {
        let ct = cfg.codes_total();
        let mut num = 0.0f64;
        let mut den = 0usize;
        for (item, ex) in items.iter().zip(&draws.examples) {
            let rows = kept_grid(cfg, item, ex.l_keep);
            let grid = grid_of(cfg, &rows);
            let k_total = aggregator::patch_count(grid.len(), cfg.stride);
            let (mut state, mut h) = lm::prefix_encode(store, cfg, &item.text).unwrap();
            for (k, pd) in ex.patches.iter().enumerate().take(k_total) {
                if pd.mask.iter().any(|&b| b) {
                    let target = aggregator::slice_frames(&grid, k, cfg.stride);
                    let corrupted = corrupt(&target, &pd.mask, cfg.layers);
                    let history = if k == 0 {
                        vec![pad_frame(cfg.layers); cfg.stride]
                    } else {
                        aggregator::slice_frames(&grid, k - 1, cfg.stride)
                    };
                    let cond = if pd.drop_ar {
                        CondIn::Dropped
                    } else {
                        CondIn::Hidden(&h)
                    };
                    let hist = if pd.drop_hist {
                        History::Dropped
                    } else {
                        History::Frames(&history)
                    };
                    let hidden = target_hiddens(store, cfg, cond, hist, &corrupted).unwrap();
                    let logits = head_logits(store, cfg, &hidden);
                    for f in 0..cfg.stride {
                        for j in 0..cfg.layers {
                            let idx = diffusion::slot_index(f, j, cfg.layers);
                            if pd.mask[idx] {
                                let row = &logits[idx * ct..(idx + 1) * ct];
                                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                                let z: f64 = row.iter().map(|&l| (l - mx).exp()).sum();
                                let nll = z.ln() - (row[target[f][j] as usize] - mx);
                                num += nll / pd.t;
                                den += 1;
                            }
                        }
                    }
                }
                if k + 1 < k_total {
                    let win = aggregator::window_frames(&grid, k, cfg.patch, cfg.stride);
                    let v = aggregator::encode_window(store, cfg, &win).unwrap();
                    let (next, hidden) = lm::step(store, cfg, &state, &v).unwrap();
                    state = next;
                    h = hidden;
                }
            }
        }
        if den == 0 {
            0.0
        } else {
            num / den as f64
        }
    }

    #[test]
    fn tape_loss_matches_independent_kernel_composition() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, &mut rng(31));
        let item_a = tiny_item();
        let mut item_b = tiny_item();
        item_b.text = vec![7, 8, 9, 10, 11];
        for row in item_b.grid.iter_mut() {
            for c in row.iter_mut() {
                if crate::codec::is_content(*c) {
                    *c = (*c + 13) % 60;
                }
            }
        }
        let items = [&item_a, &item_b];
        // Sweep seeds so drop flags, truncation depths, and zero-mask
        // draws all occur across the sweep.
        for seed in 0..6u64 {
            let draws = draw_batch(&cfg, &items, &mut rng(seed));
            let mut tape = Tape::new();
            let bound = TapeBinding::bind(&mut tape, &store);
            let (loss, stats) = batch_loss_tape(&mut tape, &bound, &cfg, &items, &draws).unwrap();
            let got = tape.value(loss).data()[0];
            let want = oracle_loss(&store, &cfg, &items, &draws);
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                "seed {seed}: tape {got} vs oracle {want}"
            );
            assert_eq!(
                stats.masked_slots == 0,
                got == 0.0,
                "zero loss iff nothing masked"
            );
        }
    }

    #[test]
    fn uniform_heads_give_exactly_predictable_loss() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = init_params(&cfg, &mut rng(41));
        for j in 0..cfg.layers {
            let t = store.get_mut(&format!("mdm.head{j}"));
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let item = tiny_item();
        let draws = draw_batch(&cfg, &[&item], &mut rng(5));

        let mut tape = Tape::new();
        let bound = TapeBinding::bind(&mut tape, &store);
        let (loss, stats) =
            batch_loss_tape(&mut tape, &bound, &cfg, &[&item], &draws).unwrap();
        let got = tape.value(loss).data()[0];

        // Zeroed heads leave only the legality offsets: exact uniform over
        // 65 codes on layer 0 (content + EOS) and 64 above.
        let mut num = 0.0;
        let mut den = 0usize;
        for ex in &draws.examples {
            for pd in &ex.patches {
                for (idx, &m) in pd.mask.iter().enumerate() {
                    if m {
                        let (_, j) = diffusion::slot_coords(idx, cfg.layers);
                        let v = if j == 0 { 65.0f64 } else { 64.0 };
                        num += v.ln() / pd.t;
                        den += 1;
                    }
                }
            }
        }
        assert_eq!(den, stats.masked_slots);
        let want = num / den as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        // The unweighted per-slot value sits within 5% of ln 64.
        assert!((stats.mean_nll - 64.0f64.ln()).abs() / 64.0f64.ln() < 0.05);
    }

    #[test]
    fn zero_mask_batch_gives_zero_loss_and_no_gradients() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, &mut rng(51));
        let item = tiny_item();
        let mut draws = draw_batch(&cfg, &[&item], &mut rng(5));
        for ex in draws.examples.iter_mut() {
            for pd in ex.patches.iter_mut() {
                pd.mask.iter_mut().for_each(|b| *b = false);
            }
        }
        let mut tape = Tape::new();
        let bound = TapeBinding::bind(&mut tape, &store);
        let (loss, stats) = batch_loss_tape(&mut tape, &bound, &cfg, &[&item], &draws).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        assert_eq!(stats.masked_slots, 0);
        assert_eq!(stats.active_patches, 0);
        assert_eq!(stats.mean_nll, 0.0);
        tape.backward(loss).unwrap();
        for (name, _) in store.iter() {
            let g = tape.grad(bound.var(name));
            assert!(
                g.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)),
                "{name} received gradient from an empty loss"
            );
        }
    }

    #[test]
    fn truncation_makes_loss_independent_of_dropped_layers() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, &mut rng(61));
        let item = tiny_item();
        let mut twisted = tiny_item();
        // Rewrite layer 1 codes everywhere; layer 0 untouched.
        for row in twisted.grid.iter_mut() {
            if crate::codec::is_content(row[1]) {
                row[1] = (row[1] + 29) % 60;
            }
        }
        let mut draws = draw_batch(&cfg, &[&item], &mut rng(5));
        draws.examples[0].l_keep = 1;
        // Re-draw masks restricted to layer 0 so they stay legal for the
        // truncated grid.
        for pd in draws.examples[0].patches.iter_mut() {
            for (idx, b) in pd.mask.iter_mut().enumerate() {
                let (_, j) = diffusion::slot_coords(idx, cfg.layers);
                if j > 0 {
                    *b = false;
                }
            }
        }
        let eval = |it: &Utterance| {
            let mut tape = Tape::new();
            let bound = TapeBinding::bind(&mut tape, &store);
            let (loss, _) = batch_loss_tape(&mut tape, &bound, &cfg, &[it], &draws).unwrap();
            tape.value(loss).data()[0]
        };
        assert_eq!(
            eval(&item),
            eval(&twisted),
            "pruned layer contents leaked into the loss"
        );
    }

    #[test]
    fn dropped_condition_makes_loss_invariant_to_drafter_inputs() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, &mut rng(71));
        let item = tiny_item();
        let mut other_text = tiny_item();
        other_text.text = vec![9, 9, 9, 9];
        let mut draws = draw_batch(&cfg, &[&item], &mut rng(5));
        for ex in draws.examples.iter_mut() {
            ex.l_keep = cfg.layers;
            for pd in ex.patches.iter_mut() {
                pd.drop_ar = true;
            }
        }
        let eval = |it: &Utterance, d: &BatchDraws| {
            let mut tape = Tape::new();
            let bound = TapeBinding::bind(&mut tape, &store);
            let (loss, _) = batch_loss_tape(&mut tape, &bound, &cfg, &[it], d).unwrap();
            tape.value(loss).data()[0]
        };
        assert_eq!(
            eval(&item, &draws),
            eval(&other_text, &draws),
            "text reached the loss despite dropped conditions"
        );
        // With conditions kept, the text must matter.
        for ex in draws.examples.iter_mut() {
            for pd in ex.patches.iter_mut() {
                pd.drop_ar = false;
            }
        }
        assert_ne!(eval(&item, &draws), eval(&other_text, &draws));
    }

    #[test]
    fn mismatched_draws_are_rejected() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, &mut rng(81));
        let item = tiny_item();
        let draws = draw_batch(&cfg, &[&item], &mut rng(5));

        let mut tape = Tape::new();
        let bound = TapeBinding::bind(&mut tape, &store);
        let items: Vec<&Utterance> = vec![&item, &item];
        assert!(matches!(
            batch_loss_tape(&mut tape, &bound, &cfg, &items, &draws),
            Err(ObjectiveError::DrawMismatch { .. })
        ));

        let mut short = draws.clone();
        short.examples[0].patches.pop();
        let mut tape = Tape::new();
        let bound = TapeBinding::bind(&mut tape, &store);
        assert!(matches!(
            batch_loss_tape(&mut tape, &bound, &cfg, &[&item], &short),
            Err(ObjectiveError::PatchMismatch { .. })
        ));
    }

    /// Exhaustive-vs-Monte-Carlo agreement of the expected loss over mask
    /// draws on a patch with exactly three maskable slots.
    #[test]
    fn mask_draw_expectation_matches_exhaustive_enumeration() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, &mut rng(91));
        // Target [[c, c], [EOS, NULL]]: three maskable slots (NULL inert).
        let target = vec![vec![10u16, 20], vec![EOS, NULL]];
        let history = vec![vec![1u16, 2], vec![3, 4]];
        let cond = vec![0.25f64; cfg.d_model];
        let t = 0.6;
        let lambda = mask_lambda(t).unwrap();
        let slots = [
            diffusion::slot_index(0, 0, cfg.layers),
            diffusion::slot_index(0, 1, cfg.layers),
            diffusion::slot_index(1, 0, cfg.layers),
        ];
        let ct = cfg.codes_total();

        // Per-pattern loss via the kernel path, and its probability.
        let pattern_loss = |bits: usize| -> f64 {
            let mut mask = vec![false; cfg.stride * cfg.layers];
            for (b, &idx) in slots.iter().enumerate() {
                mask[idx] = bits >> b & 1 == 1;
            }
            let m = mask.iter().filter(|&&x| x).count();
            if m == 0 {
                return 0.0;
            }
            let corrupted = corrupt(&target, &mask, cfg.layers);
            let hidden = target_hiddens(
                &store,
                &cfg,
                CondIn::Hidden(&cond),
                History::Frames(&history),
                &corrupted,
            )
            .unwrap();
            let logits = head_logits(&store, &cfg, &hidden);
            let mut sum = 0.0;
            for f in 0..cfg.stride {
                for j in 0..cfg.layers {
                    let idx = diffusion::slot_index(f, j, cfg.layers);
                    if mask[idx] {
                        let row = &logits[idx * ct..(idx + 1) * ct];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&l| (l - mx).exp()).sum();
                        sum += z.ln() - (row[target[f][j] as usize] - mx);
                    }
                }
            }
            sum / (t * m as f64)
        };
        let losses: Vec<f64> = (0..8).map(pattern_loss).collect();
        let exact: f64 = (0..8usize)
            .map(|bits| {
                let m = bits.count_ones();
                let p = lambda.powi(m as i32) * (1.0 - lambda).powi(3 - m as i32);
                p * losses[bits]
            })
            .sum();

        let mut r = rng(101);
        let n = 50_000usize;
        let mut mc = 0.0f64;
        for _ in 0..n {
            let (_, mask) = diffusion::forward_mask(&target, t, &mut r).unwrap();
            let bits = slots
                .iter()
                .enumerate()
                .fold(0usize, |acc, (b, &idx)| acc | usize::from(mask[idx]) << b);
            mc += losses[bits];
        }
        mc /= n as f64;
        assert!(
            (mc - exact).abs() / exact.abs() < 0.02,
            "monte carlo {mc} vs exhaustive {exact}"
        );
    }
}

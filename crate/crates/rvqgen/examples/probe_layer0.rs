//! Scratch diagnostic: teacher-forced layer-0 prediction accuracy.

use std::path::Path;

use rvqgen::aggregator;
use rvqgen::codec::{self, load_dataset};
use rvqgen::diffusion::{head_logits, slot_index, target_hiddens, CondIn, History};
use rvqgen::lm;
use rvqgen::train::load_checkpoint;

fn main() {
    let ckpt_path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/micro/ckpt_02000.dstr".into());
    let ckpt = load_checkpoint(Path::new(&ckpt_path)).expect("checkpoint");
    let cfg = ckpt.model.clone();
    let store = ckpt.store;
    let data = load_dataset(Path::new("runs/data/eval.jsonl")).expect("eval data");

    let mut hits = 0usize;
    let mut block_hits = 0usize;
    let mut sym_hits = 0usize;
    let mut total = 0usize;
    let ct = cfg.codes_total();
    for item in data.iter().take(40) {
        let grid = item.grid();
        let k_total = aggregator::patch_count(grid.len(), cfg.stride);
        let (mut state, mut h) = lm::prefix_encode(&store, &cfg, &item.text).unwrap();
        for k in 0..k_total {
            let target = aggregator::slice_frames(&grid, k, cfg.stride);
            let history = if k == 0 {
                vec![aggregator::pad_frame(cfg.layers); cfg.stride]
            } else {
                aggregator::slice_frames(&grid, k - 1, cfg.stride)
            };
            // Mask every layer-0 content/EOS slot, keep uppers visible.
            let mut corrupted = target.clone();
            let mut masked = vec![false; cfg.stride * cfg.layers];
            for f in 0..cfg.stride {
                let c = target[f][0];
                if codec::is_content(c) || c == codec::EOS {
                    corrupted[f][0] = codec::MASK;
                    masked[slot_index(f, 0, cfg.layers)] = true;
                }
            }
            let hidden = target_hiddens(
                &store,
                &cfg,
                CondIn::Hidden(&h),
                History::Frames(&history),
                &corrupted,
            )
            .unwrap();
            let logits = head_logits(&store, &cfg, &hidden);
            for f in 0..cfg.stride {
                let idx = slot_index(f, 0, cfg.layers);
                if !masked[idx] {
                    continue;
                }
                let row = &logits[idx * ct..(idx + 1) * ct];
                let mut best = 0usize;
                for c in 1..ct {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                let truth = target[f][0] as usize;
                total += 1;
                hits += usize::from(best == truth);
                if codec::is_content(truth as u16) && codec::is_content(best as u16) {
                    block_hits += usize::from(best / 12 == truth / 12);
                    sym_hits += usize::from(best % 12 == truth % 12);
                }
            }
            if k + 1 < k_total {
                let win = aggregator::window_frames(&grid, k, cfg.patch, cfg.stride);
                let v = aggregator::encode_window(&store, &cfg, &win).unwrap();
                let (next, hidden) = lm::step(&store, &cfg, &state, &v).unwrap();
                state = next;
                h = hidden;
            }
        }
    }
    println!(
        "layer0 slots {total}: exact {:.3}  style-block {:.3}  symbol {:.3}",
        hits as f64 / total as f64,
        block_hits as f64 / total as f64,
        sym_hits as f64 / total as f64
    );
}

//! Generates the toy train/eval splits used by the other examples.
//!
//! Writes `runs/data/train.jsonl` and `runs/data/eval.jsonl` (2,000 and
//! 200 utterances). Fixed seed, so the files are byte-identical across
//! machines; eval texts never appear in the train split.
//!
//!     cargo run --release --example gen_data

use std::path::Path;

use rvqgen::codec::{load_dataset, make_dataset, TextLaw};

fn main() {
    let dir = Path::new("runs/data");
    std::fs::create_dir_all(dir).expect("create runs/data");
    let train = dir.join("train.jsonl");
    let eval = dir.join("eval.jsonl");
    make_dataset(2000, 200, TextLaw::default(), 7, &train, &eval).expect("dataset generation");

    for (name, path) in [("train", &train), ("eval", &eval)] {
        let items = load_dataset(path).expect("reload");
        let frames: usize = items.iter().map(|u| u.grid.len()).sum();
        println!(
            "{name}: {} utterances, {frames} frames -> {}",
            items.len(),
            path.display()
        );
    }
}

//! Scratch diagnostic: overfit a 4-item dataset; loss must collapse.

use std::path::Path;

use rvqgen::codec::load_dataset;
use rvqgen::model::ModelConfig;
use rvqgen::train::{TrainConfig, Trainer};

fn main() {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let batch: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(96);
    let data = load_dataset(Path::new("runs/data/train.jsonl")).expect("dataset");
    let n: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let data = &data[..n];
    let train = TrainConfig {
        steps,
        batch_frames: batch,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(ModelConfig::micro(), train);
    for _ in 0..steps {
        let o = t.train_step(data).unwrap();
        if o.log.step % 25 == 0 || o.log.step + 1 == steps {
            println!(
                "step {:>4}  loss {:.4}  nll/slot {:.4}  grad {:.3}",
                o.log.step, o.log.loss, o.stats.mean_nll, o.grad_norm
            );
        }
    }
}

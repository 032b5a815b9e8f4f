//! Trains the micro model on the toy task and saves checkpoints.
//!
//! Expects `runs/data/train.jsonl` (run the `gen_data` example first).
//! Writes the loss log, timing log, and periodic checkpoints under
//! `runs/micro/`; resumes from the latest checkpoint if one exists.
//!
//!     cargo run --release --example train_micro [STEPS]

use std::path::Path;

use rvqgen::codec::load_dataset;
use rvqgen::model::ModelConfig;
use rvqgen::train::{latest_checkpoint, load_checkpoint, train_loop, TrainConfig, Trainer};

fn main() {
    let steps: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("STEPS must be an integer"))
        .unwrap_or(2000);
    let data = load_dataset(Path::new("runs/data/train.jsonl"))
        .expect("load runs/data/train.jsonl (run the gen_data example first)");
    let out = Path::new("runs/micro");

    let train = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let mut trainer = resume_or_new(out, train);
    println!(
        "training micro model from step {} to {}",
        trainer.step, trainer.train.steps
    );
    let final_path = train_loop(&mut trainer, &data, out, |o| {
        if o.log.step % 50 == 0 || o.log.step + 1 == steps {
            println!(
                "step {:>5}  loss {:.4}  nll/slot {:.4}  grad {:.3}",
                o.log.step, o.log.loss, o.stats.mean_nll, o.grad_norm
            );
        }
    })
    .expect("training");
    println!("final checkpoint: {}", final_path.display());
}

fn resume_or_new(out: &Path, train: TrainConfig) -> Trainer {
    match latest_checkpoint(out) {
        Some((step, path)) if step < train.steps => {
            println!("resuming from {}", path.display());
            let ckpt = load_checkpoint(&path).expect("load checkpoint");
            let mut t = Trainer::from_checkpoint(ckpt);
            t.train.steps = train.steps;
            t
        }
        _ => Trainer::new(ModelConfig::micro(), train),
    }
}

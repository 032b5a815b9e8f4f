//! Scored evaluation of a trained model on the held-out split.
//!
//! Greedy decoding without guidance (the configuration the learnability
//! gate is stated in), scored against the codec oracle with seeded
//! bootstrap intervals.
//!
//!     cargo run --release --example evaluate [LIMIT] [CKPT_DIR]
//!
//! LIMIT caps the item count (0 = all 200, the default). Expects
//! `runs/data/eval.jsonl` and a checkpoint under CKPT_DIR (default
//! runs/micro).

use std::path::{Path, PathBuf};

use rvqgen::codec::load_dataset;
use rvqgen::decode::CfgParams;
use rvqgen::eval::{self, EvalConfig};
use rvqgen::train;

fn main() {
    let mut args = std::env::args().skip(1);
    let limit: usize = args.next().map_or(0, |s| s.parse().expect("LIMIT is a count"));
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/micro".into()));

    let items = load_dataset(Path::new("runs/data/eval.jsonl"))
        .expect("load runs/data/eval.jsonl (run the gen_data example first)");
    let (_, path) = train::latest_checkpoint(&dir)
        .unwrap_or_else(|| panic!("no checkpoint under {} (run train_micro first)", dir.display()));
    let ckpt = train::load_checkpoint(&path).expect("load checkpoint");
    ckpt.validate().expect("checkpoint validation");
    println!("model: {} (step {})", path.display(), ckpt.step);

    let mut ec = EvalConfig {
        limit,
        ..EvalConfig::default()
    };
    ec.gen.decode.hybrid = 0.0;
    ec.gen.decode.cfg = CfgParams {
        w_hist: 0.0,
        w_rescale: 0.0,
        ..CfgParams::default()
    };

    let report = eval::evaluate(&ckpt.store, &ckpt.model, &items, &ec).expect("evaluation");
    let (ceil_ser, ceil_style) = eval::oracle_ceiling(&items[..report.n]);

    println!("\n{} items, greedy, unguided:", report.n);
    for (name, a) in [
        ("ser", report.ser),
        ("style_consistency", report.style_consistency),
        ("detail", report.detail),
    ] {
        println!("  {name:<18} {:.4}  [{:.4}, {:.4}]", a.mean, a.ci_lo, a.ci_hi);
    }
    println!("  eos_within_one     {:.4}", report.eos_within_one);
    println!("  truncated_rate     {:.4}", report.truncated_rate);
    println!("  mean_nfe           {:.1}", report.mean_nfe);
    println!("oracle ceiling: ser {ceil_ser:.4}, style {ceil_style:.4}");

    let worst = report
        .records
        .iter()
        .max_by(|a, b| a.ser.partial_cmp(&b.ser).expect("finite"))
        .expect("nonempty");
    let render = |t: &[u8]| t.iter().map(|&s| (b'a' + s) as char).collect::<String>();
    println!(
        "worst item #{}: \"{}\" -> \"{}\" (ser {:.3})",
        worst.index,
        render(&worst.text),
        render(&worst.transcript),
        worst.ser
    );
}

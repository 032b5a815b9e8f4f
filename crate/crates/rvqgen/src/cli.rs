//! Command-line front end: data generation, training, synthesis,
//! evaluation, and ablations, all driven by one merged config.
//!
//! Exit codes: 0 success, 2 config error, 3 gated assertion failure,
//! 4 runtime or I/O error. Every command dumps its effective config to
//! `out/effective.toml` before doing work, and every command is
//! deterministic given that dump (wall-clock timing goes to stderr and
//! the timing log only).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::codec::{self, load_dataset, make_dataset, mix, oracle_transcribe, Utterance};
use crate::config::{self, ConfigError, RunConfig};
use crate::decode;
use crate::eval::{
    ablate_cfg, ablate_decoding, ablate_patch_size, ablate_pruning, build_case, evaluate,
    short_hash, write_arms, write_patch_arms, write_prune_arms, write_report, ArmSummary,
    EvalReport, PruneArm,
};
use crate::train::{latest_checkpoint, load_checkpoint, train_loop, Checkpoint, Trainer};

const TAG_SYNTH: u64 = 0x636c_692e_7379_6e74;

#[derive(Parser, Debug)]
#[command(
    name = "rvqgen",
    version,
    about = "Patch-level drafter plus masked-diffusion infiller over RVQ code grids"
)]
pub struct Cli {
    /// TOML config file; every key has a default, so it may be omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed for data generation, synthesis prompts, and eval.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints, logs, and reports.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted-key config override, repeatable: --override train.steps=500
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Utterance-level eval workers; reports are identical at any count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Synthesize the train/eval datasets with the exact codec.
    GenData,
    /// Train the model, checkpointing into the output directory.
    ///
    /// Resume keeps the checkpoint's optimizer settings and takes only
    /// the step target from the config.
    Train {
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate one utterance and transcribe it with the codec oracle.
    Synth {
        /// Target text over the symbol alphabet a..l.
        #[arg(long)]
        text: String,
        /// Names the prompt; distinct ids give distinct prompts.
        #[arg(long, default_value_t = 0)]
        prompt_id: u64,
        /// Style index; defaults to prompt_id mod the style count.
        #[arg(long)]
        style: Option<usize>,
    },
    /// Score generations against the codec oracles; writes report files.
    Eval {
        /// Exit 3 if the SER ceiling or style floor is violated.
        #[arg(long)]
        assert: bool,
    },
    /// Run one ablation suite and write its table.
    Ablate {
        #[arg(value_enum)]
        which: Ablation,
        /// Exit 3 if the suite's asserted bounds fail.
        #[arg(long)]
        assert: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Pure vs shaped sampling vs greedy, three seeds each.
    Decoding,
    /// Layer pruning sweep over every depth.
    Pruning,
    /// Guidance schema and weight grid.
    Cfg,
    /// Trains one model per patch size on an equal step budget.
    PatchSize,
}

enum CmdError {
    Config(ConfigError),
    Assert(String),
    Run(String),
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e)
    }
}

macro_rules! run_error_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CmdError {
            fn from(e: $ty) -> Self {
                CmdError::Run(e.to_string())
            }
        }
    )*};
}
run_error_from!(
    crate::eval::EvalError,
    crate::train::TrainError,
    crate::decode::DecodeError,
    crate::codec::CodecError,
    std::io::Error,
    serde_json::Error
);

/// Parses argv and dispatches; returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CmdError::Config(e)) => {
            eprintln!("config error: {e}");
            2
        }
        Err(CmdError::Assert(m)) => {
            eprintln!("assertion failed: {m}");
            3
        }
        Err(CmdError::Run(m)) => {
            eprintln!("error: {m}");
            4
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CmdError> {
    // Direct flags are sugar for overrides and win over --override.
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!(
            "out={}",
            toml::Value::String(o.display().to_string())
        ));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let rc = config::load(cli.config.as_deref(), &overrides)?;
    rc.write_effective()?;

    match cli.cmd {
        Cmd::GenData => cmd_gen_data(&rc),
        Cmd::Train { resume } => cmd_train(&rc, resume),
        Cmd::Synth {
            text,
            prompt_id,
            style,
        } => cmd_synth(&rc, &text, prompt_id, style),
        Cmd::Eval { assert } => cmd_eval(&rc, assert),
        Cmd::Ablate { which, assert } => cmd_ablate(&rc, which, assert),
    }
}

/// Symbols render as the letters a..l; the oracle's undecodable marker
/// renders as '?'.
pub fn parse_symbols(text: &str) -> Result<Vec<u8>, String> {
    text.chars()
        .map(|c| match c {
            'a'..='z' if (c as usize - 'a' as usize) < codec::ALPHABET => {
                Ok(c as u8 - b'a')
            }
            _ => Err(format!(
                "symbol {c:?} outside the alphabet a..{}",
                (b'a' + codec::ALPHABET as u8 - 1) as char
            )),
        })
        .collect()
}

pub fn render_symbols(syms: &[u8]) -> String {
    syms.iter()
        .map(|&s| {
            if (s as usize) < codec::ALPHABET {
                (b'a' + s) as char
            } else {
                '?'
            }
        })
        .collect()
}

fn file_sha256(path: &std::path::Path) -> Result<String, std::io::Error> {
    let bytes = std::fs::read(path)?;
    let mut hex = String::new();
    for b in Sha256::digest(&bytes) {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

fn cmd_gen_data(rc: &RunConfig) -> Result<(), CmdError> {
    make_dataset(
        rc.data.n_train,
        rc.data.n_eval,
        rc.data.law,
        rc.seed,
        &rc.data.train,
        &rc.data.eval,
    )?;
    for (split, path) in [("train", &rc.data.train), ("eval", &rc.data.eval)] {
        let items = load_dataset(path)?;
        let frames: usize = items.iter().map(|u| u.grid.len()).sum();
        println!(
            "{split} {} items {} frames sha256 {}",
            items.len(),
            frames,
            file_sha256(path)?
        );
    }
    Ok(())
}

fn cmd_train(rc: &RunConfig, resume: bool) -> Result<(), CmdError> {
    let mc = rc.model.resolve()?;
    let data = load_dataset(&rc.data.train)?;
    let mut trainer = if resume {
        match latest_checkpoint(&rc.out) {
            Some((step, _)) if step >= rc.train.steps => {
                println!("training already complete at step {step}");
                return Ok(());
            }
            Some((_, path)) => {
                let ckpt = load_checkpoint(&path)?;
                if ckpt.model != mc {
                    return Err(CmdError::Run(format!(
                        "{} was trained with a different model config",
                        path.display()
                    )));
                }
                println!("resuming from {}", path.display());
                let mut t = Trainer::from_checkpoint(ckpt);
                t.train.steps = rc.train.steps;
                t
            }
            None => Trainer::new(mc, rc.train.clone()),
        }
    } else {
        Trainer::new(mc, rc.train.clone())
    };
    let t0 = std::time::Instant::now();
    let total = trainer.train.steps;
    let final_path = train_loop(&mut trainer, &data, &rc.out, |o| {
        if o.log.step % 50 == 0 || o.log.step + 1 == total {
            println!("step {:>5}  loss {:.4}  lr {:.6}", o.log.step, o.log.loss, o.log.lr);
        }
    })?;
    eprintln!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    println!("final checkpoint {}", final_path.display());
    Ok(())
}

fn checkpoint_path(rc: &RunConfig) -> Result<PathBuf, CmdError> {
    if rc.ckpt.as_os_str().is_empty() {
        latest_checkpoint(&rc.out)
            .map(|(_, p)| p)
            .ok_or_else(|| {
                CmdError::Run(format!("no checkpoint found under {}", rc.out.display()))
            })
    } else {
        Ok(rc.ckpt.clone())
    }
}

fn load_ckpt(rc: &RunConfig) -> Result<(Checkpoint, String), CmdError> {
    let path = checkpoint_path(rc)?;
    let hash = short_hash(&std::fs::read(&path)?);
    Ok((load_checkpoint(&path)?, hash))
}

fn cmd_synth(
    rc: &RunConfig,
    text: &str,
    prompt_id: u64,
    style: Option<usize>,
) -> Result<(), CmdError> {
    let target = parse_symbols(text).map_err(CmdError::Run)?;
    if target.is_empty() {
        return Err(CmdError::Run("--text must not be empty".into()));
    }
    let style = style.unwrap_or((prompt_id % codec::STYLES as u64) as usize);
    if style >= codec::STYLES {
        return Err(CmdError::Run(format!(
            "style {style} out of range 0..{}",
            codec::STYLES
        )));
    }
    let (ckpt, _) = load_ckpt(rc)?;

    let pseudo = Utterance {
        text: target.clone(),
        style,
        grid: Vec::new(),
        seed: prompt_id,
    };
    let case = build_case(&pseudo)?;
    let mut rng = ChaCha12Rng::seed_from_u64(mix(&[TAG_SYNTH, rc.seed, prompt_id]));
    let out = decode::generate(
        &ckpt.store,
        &ckpt.model,
        &case.full_text,
        &case.prompt,
        &rc.gen,
        &mut rng,
    )?;

    let transcript = oracle_transcribe(&out.grid);
    let ser = codec::symbol_error_rate(&transcript, &target);
    let record = Utterance {
        text: target,
        style,
        grid: out.grid.to_rows(),
        seed: prompt_id,
    };
    std::fs::create_dir_all(&rc.out)?;
    let grid_path = rc.out.join(format!("synth_{prompt_id}.jsonl"));
    std::fs::write(&grid_path, serde_json::to_string(&record)? + "\n")?;
    let txt_path = rc.out.join(format!("synth_{prompt_id}.txt"));
    let body = format!(
        "transcript {}\nser {}\npatches {} truncated {}\n",
        render_symbols(&transcript),
        ser,
        out.patches,
        out.truncated
    );
    std::fs::write(&txt_path, &body)?;
    print!("{body}");
    println!("wrote {}", grid_path.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("n {}", report.n);
    for (name, a) in [
        ("ser", report.ser),
        ("style_consistency", report.style_consistency),
        ("detail", report.detail),
    ] {
        println!("{name} {} [{}, {}]", a.mean, a.ci_lo, a.ci_hi);
    }
    println!("eos_within_one {}", report.eos_within_one);
    println!("truncated_rate {}", report.truncated_rate);
    println!("mean_nfe {}", report.mean_nfe);
}

fn cmd_eval(rc: &RunConfig, assert: bool) -> Result<(), CmdError> {
    let (ckpt, ckpt_hash) = load_ckpt(rc)?;
    let items = load_dataset(&rc.data.eval)?;
    let ec = rc.eval_config();
    let cfg_hash = short_hash(&serde_json::to_vec(&ec)?);
    let report = evaluate(&ckpt.store, &ckpt.model, &items, &ec)?;
    let (jsonl, csv) = write_report(&rc.out, &ckpt_hash, &cfg_hash, &report)?;
    print_report(&report);
    println!("wrote {}", jsonl.display());
    println!("wrote {}", csv.display());
    if assert {
        check_eval_bounds(rc, &report).map_err(CmdError::Assert)?;
    }
    Ok(())
}

fn check_eval_bounds(rc: &RunConfig, report: &EvalReport) -> Result<(), String> {
    if report.ser.mean > rc.eval.ser_max {
        return Err(format!(
            "ser {} exceeds ceiling {}",
            report.ser.mean, rc.eval.ser_max
        ));
    }
    if report.style_consistency.mean < rc.eval.style_min {
        return Err(format!(
            "style consistency {} below floor {}",
            report.style_consistency.mean, rc.eval.style_min
        ));
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<(), CmdError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_ablate(rc: &RunConfig, which: Ablation, assert: bool) -> Result<(), CmdError> {
    let items = load_dataset(&rc.data.eval)?;
    let base = rc.eval_config();
    let cfg_hash = short_hash(&serde_json::to_vec(&base)?);
    match which {
        Ablation::Decoding => {
            let (ckpt, ckpt_hash) = load_ckpt(rc)?;
            let arms = ablate_decoding(&ckpt.store, &ckpt.model, &items, &base)?;
            let stem = rc.out.join(format!("ablate_decoding_{ckpt_hash}_{cfg_hash}"));
            write_arms(&stem.with_extension("csv"), &arms)?;
            write_jsonl(&stem.with_extension("jsonl"), &arms)?;
            for a in &arms {
                println!("{} seed {} ser {} style {}", a.arm, a.seed, a.ser, a.style_consistency);
            }
            println!("wrote {}", stem.with_extension("csv").display());
            if assert {
                check_decoding_bounds(&arms).map_err(CmdError::Assert)?;
            }
        }
        Ablation::Pruning => {
            let (ckpt, ckpt_hash) = load_ckpt(rc)?;
            let arms = ablate_pruning(&ckpt.store, &ckpt.model, &items, &base)?;
            let stem = rc.out.join(format!("ablate_pruning_{ckpt_hash}_{cfg_hash}"));
            write_prune_arms(&stem.with_extension("csv"), &arms)?;
            write_jsonl(&stem.with_extension("jsonl"), &arms)?;
            for a in &arms {
                println!(
                    "pruned {} ser {} detail {} slots {}",
                    a.pruned, a.ser, a.detail, a.slots_per_patch
                );
            }
            println!("wrote {}", stem.with_extension("csv").display());
            if assert {
                check_pruning_bounds(&arms, rc.eval.prune_delta_max).map_err(CmdError::Assert)?;
            }
        }
        Ablation::Cfg => {
            let (ckpt, ckpt_hash) = load_ckpt(rc)?;
            let arms = ablate_cfg(&ckpt.store, &ckpt.model, &items, &base)?;
            let stem = rc.out.join(format!("ablate_cfg_{ckpt_hash}_{cfg_hash}"));
            write_arms(&stem.with_extension("csv"), &arms)?;
            write_jsonl(&stem.with_extension("jsonl"), &arms)?;
            for a in &arms {
                println!("{} ser {} style {}", a.arm, a.ser, a.style_consistency);
            }
            println!("wrote {}", stem.with_extension("csv").display());
        }
        Ablation::PatchSize => {
            let mc = rc.model.resolve()?;
            let train_items = load_dataset(&rc.data.train)?;
            let arms = ablate_patch_size(&mc, &rc.train, &train_items, &items, &base)?;
            let stem = rc.out.join(format!("ablate_patch_size_scratch_{cfg_hash}"));
            write_patch_arms(&stem.with_extension("csv"), &arms)?;
            write_jsonl(&stem.with_extension("jsonl"), &arms)?;
            for a in &arms {
                println!(
                    "patch {} final_loss {} ser {} style {}",
                    a.patch, a.final_loss, a.ser, a.style_consistency
                );
            }
            println!("wrote {}", stem.with_extension("csv").display());
        }
    }
    Ok(())
}

/// Shaped sampling must not lose to pure sampling on mean SER, and
/// greedy must be identical across decode seeds.
fn check_decoding_bounds(arms: &[ArmSummary]) -> Result<(), String> {
    let mean = |name: &str| {
        let v: Vec<f64> = arms.iter().filter(|a| a.arm == name).map(|a| a.ser).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let pure = mean("pure_sample");
    let shaped = mean("shaped_sample");
    if shaped > pure {
        return Err(format!("shaped sampling ser {shaped} exceeds pure sampling {pure}"));
    }
    let greedy: Vec<&ArmSummary> = arms.iter().filter(|a| a.arm == "shaped_greedy").collect();
    for pair in greedy.windows(2) {
        if pair[0].ser != pair[1].ser || pair[0].style_consistency != pair[1].style_consistency {
            return Err("greedy decoding varied across seeds".into());
        }
    }
    Ok(())
}

/// Pruning may move SER only within the allowed delta and must not
/// increase the detail score.
fn check_pruning_bounds(arms: &[PruneArm], delta_max: f64) -> Result<(), String> {
    let base = arms.first().map(|a| a.ser).unwrap_or(0.0);
    for a in arms {
        if a.ser - base > delta_max {
            return Err(format!(
                "ser at {} pruned layers rose by {} (allowed {delta_max})",
                a.pruned,
                a.ser - base
            ));
        }
    }
    for pair in arms.windows(2) {
        if pair[1].detail > pair[0].detail + 1e-12 {
            return Err(format!(
                "detail score rose from {} to {} at {} pruned layers",
                pair[0].detail, pair[1].detail, pair[1].pruned
            ));
        }
    }
    Ok(())
}

//! Optimizer, training loop, and checkpointing.
//!
//! Each step derives its own RNG stream from `(seed, step)`, so a run is
//! a pure function of its configuration: resuming from a checkpoint at
//! step k replays steps k.. exactly as an uninterrupted run would, and
//! the checkpoint only needs to store the seed and the step counter.
//!
//! Parameters update with Adam plus decoupled weight decay, a global
//! gradient-norm clip, and a linear warmup. The drafter (`lm.*` blocks)
//! runs at half the learning rate of everything else.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{mix, Utterance};
use crate::model::{init_params, ModelConfig};
use crate::objective::{batch_loss_tape, draw_batch, LossStats, ObjectiveError};
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

const TAG_INIT: u64 = 0x7261_696e_2e69_6e69;
const TAG_STEP: u64 = 0x7261_696e_2e73_7470;

pub const CKPT_MAGIC: [u8; 4] = *b"DSTR";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step} (batch seed {seed:#x})")]
    NonFinite { step: u64, seed: u64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CKPT_VERSION})")]
    BadVersion { found: u32 },
    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint block {name} has shape {found:?}, expected {expected:?}")]
    BlockMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing block {0}")]
    MissingBlock(String),
    #[error("checkpoint has unexpected block {0}")]
    UnexpectedBlock(String),
    #[error("checkpoint disagrees with the requested run: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Optimization hyperparameters; every field has a reproducible default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Batch budget in code frames; examples are added until reached.
    pub batch_frames: usize,
    /// Drafter learning rate (`lm.*` blocks).
    pub lr_lm: f64,
    /// Learning rate for every other block.
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Linear warmup steps.
    pub warmup: u64,
    pub adam_eps: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_frames: 768,
            lr_lm: 3e-4,
            lr_rest: 6e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            clip: 1.0,
            warmup: 200,
            adam_eps: 1e-8,
            checkpoint_every: 500,
            seed: 42,
        }
    }
}

/// Warmup multiplier on both learning rates at a given step.
pub fn lr_factor(tc: &TrainConfig, step: u64) -> f64 {
    if tc.warmup == 0 {
        1.0
    } else {
        ((step + 1) as f64 / tc.warmup as f64).min(1.0)
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Full step result; only `log` is serialized.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub log: StepLog,
    pub grad_norm: f64,
    pub stats: LossStats,
}

/// Model parameters plus optimizer state and position in the run.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub store: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
    pub step: u64,
}

fn zeros_like(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.insert(name.to_string(), Tensor::zeros(t.shape()));
    }
    out
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(mix(&[TAG_INIT, train.seed]));
        let store: ParamStore<f32> = init_params(&model, &mut rng);
        let adam_m = zeros_like(&store);
        let adam_v = zeros_like(&store);
        Trainer {
            model,
            train,
            store,
            adam_m,
            adam_v,
            step: 0,
        }
    }

    /// Draws the batch for a step and runs forward, backward, and the
    /// optimizer update. The batch is a pure function of (seed, step).
    pub fn train_step(&mut self, data: &[Utterance]) -> Result<StepOutcome, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let step_seed = mix(&[TAG_STEP, self.train.seed, self.step]);
        let mut rng = ChaCha12Rng::seed_from_u64(step_seed);

        let mut items: Vec<&Utterance> = Vec::new();
        let mut frames = 0usize;
        while frames < self.train.batch_frames {
            let item = &data[rng.gen_range(0..data.len())];
            frames += item.grid.len();
            items.push(item);
        }
        let draws = draw_batch(&self.model, &items, &mut rng);

        let mut tape = Tape::<f32>::new();
        let bound = TapeBinding::bind(&mut tape, &self.store);
        let (loss, stats) = batch_loss_tape(&mut tape, &bound, &self.model, &items, &draws)?;
        let loss_val = tape.value(loss).data()[0].to_f64();
        if !loss_val.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                seed: step_seed,
            });
        }
        tape.backward(loss)?;

        let mut sq_norm = 0.0f64;
        for (name, _) in self.store.iter() {
            if let Some(g) = tape.grad(bound.var(name)) {
                sq_norm += g.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>();
            }
        }
        let grad_norm = sq_norm.sqrt();
        let clip_scale = if grad_norm > self.train.clip {
            self.train.clip / grad_norm
        } else {
            1.0
        };

        let factor = lr_factor(&self.train, self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.train.beta1.powi(t);
        let bc2 = 1.0 - self.train.beta2.powi(t);
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let lr = factor
                * if name.starts_with("lm.") {
                    self.train.lr_lm
                } else {
                    self.train.lr_rest
                };
            let grad = tape.grad(bound.var(&name));
            let numel = self.store.get(&name).numel();
            let m = self.adam_m.get_mut(&name);
            for i in 0..numel {
                let g = grad.map_or(0.0, |g| g.data()[i].to_f64()) * clip_scale;
                let m_i = self.train.beta1 * m.data()[i].to_f64() + (1.0 - self.train.beta1) * g;
                m.data_mut()[i] = Scalar::from_f64(m_i);
            }
            let v = self.adam_v.get_mut(&name);
            for i in 0..numel {
                let g = grad.map_or(0.0, |g| g.data()[i].to_f64()) * clip_scale;
                let v_i =
                    self.train.beta2 * v.data()[i].to_f64() + (1.0 - self.train.beta2) * g * g;
                v.data_mut()[i] = Scalar::from_f64(v_i);
            }
            let m = self.adam_m.get(&name);
            let v = self.adam_v.get(&name);
            let mut update = vec![0.0f64; numel];
            for i in 0..numel {
                let m_hat = m.data()[i].to_f64() / bc1;
                let v_hat = v.data()[i].to_f64() / bc2;
                update[i] = m_hat / (v_hat.sqrt() + self.train.adam_eps);
            }
            let p = self.store.get_mut(&name);
            for i in 0..numel {
                let old = p.data()[i].to_f64();
                let new = old - lr * update[i] - lr * self.train.weight_decay * old;
                p.data_mut()[i] = Scalar::from_f64(new);
            }
        }

        let outcome = StepOutcome {
            log: StepLog {
                step: self.step,
                loss: loss_val,
                lr: factor * self.train.lr_rest,
            },
            grad_norm,
            stats,
        };
        self.step += 1;
        Ok(outcome)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            store: self.store.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Trainer {
            model: ckpt.model,
            train: ckpt.train,
            store: ckpt.store,
            adam_m: ckpt.adam_m,
            adam_v: ckpt.adam_v,
            step: ckpt.step,
        }
    }
}

/// Everything needed to resume or evaluate a run.
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub store: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    step: u64,
    model: ModelConfig,
    train: TrainConfig,
}

impl Checkpoint {
    /// Confirms the stored blocks match a fresh initialization of the
    /// stored model config, naming the first offender.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let template: ParamStore<f32> = init_params(&self.model, &mut rng);
        for (name, t) in template.iter() {
            if !self.store.contains(name) {
                return Err(TrainError::MissingBlock(name.to_string()));
            }
            let found = self.store.get(name);
            if found.shape() != t.shape() {
                return Err(TrainError::BlockMismatch {
                    name: name.to_string(),
                    found: found.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        for (name, _) in self.store.iter() {
            if !template.contains(name) {
                return Err(TrainError::UnexpectedBlock(name.to_string()));
            }
        }
        for (part, store) in [("adam.m", &self.adam_m), ("adam.v", &self.adam_v)] {
            for (name, t) in template.iter() {
                if !store.contains(name) {
                    return Err(TrainError::MissingBlock(format!("{part}.{name}")));
                }
                if store.get(name).shape() != t.shape() {
                    return Err(TrainError::BlockMismatch {
                        name: format!("{part}.{name}"),
                        found: store.get(name).shape().to_vec(),
                        expected: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn write_block<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serializes a checkpoint: magic, version, JSON header, then length-
/// prefixed named blocks (parameters, then `adam.m.*`, then `adam.v.*`)
/// as little-endian f32. Byte-identical across save/load/save.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&CkptHeader {
        step: ckpt.step,
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let count = ckpt.store.len() + ckpt.adam_m.len() + ckpt.adam_v.len();
    w.write_all(&(count as u64).to_le_bytes())?;
    for (name, t) in ckpt.store.iter() {
        write_block(&mut w, name, t)?;
    }
    for (name, t) in ckpt.adam_m.iter() {
        write_block(&mut w, &format!("adam.m.{name}"), t)?;
    }
    for (name, t) in ckpt.adam_v.iter() {
        write_block(&mut w, &format!("adam.v.{name}"), t)?;
    }
    w.flush()?;
    Ok(())
}

struct ByteReader<R: Read> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, TrainError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| TrainError::Corrupt(format!("unexpected end of file reading {n} bytes")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut r = ByteReader {
        inner: BufReader::new(File::open(path)?),
    };
    let magic = r.bytes(4)?;
    if magic != CKPT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(TrainError::BadVersion { found: version });
    }
    let header_len = r.u64()? as usize;
    if header_len > 1 << 24 {
        return Err(TrainError::Corrupt(format!(
            "implausible header length {header_len}"
        )));
    }
    let header: CkptHeader = serde_json::from_slice(&r.bytes(header_len)?)
        .map_err(|e| TrainError::Corrupt(format!("bad header JSON: {e}")))?;
    let count = r.u64()? as usize;

    let mut blocks: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(TrainError::Corrupt(format!(
                "implausible block name length {name_len}"
            )));
        }
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| TrainError::Corrupt("block name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(TrainError::Corrupt(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(TrainError::Corrupt(format!("implausible block size {numel}")));
        }
        let raw = r.bytes(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| TrainError::Corrupt(format!("block {name}: {e}")))?;
        if blocks.insert(name.clone(), t).is_some() {
            return Err(TrainError::Corrupt(format!("duplicate block {name}")));
        }
    }

    let mut store = ParamStore::new();
    let mut adam_m = ParamStore::new();
    let mut adam_v = ParamStore::new();
    for (name, t) in blocks {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_v.insert(rest.to_string(), t);
        } else {
            store.insert(name, t);
        }
    }
    let ckpt = Checkpoint {
        model: header.model,
        train: header.train,
        step: header.step,
        store,
        adam_m,
        adam_v,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

/// Newest `ckpt_{step}.dstr` under `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    let mut latest: Option<(u64, PathBuf)> = None;
    for e in std::fs::read_dir(dir).ok()?.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".dstr"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if latest.as_ref().is_none_or(|(s, _)| step > *s) {
                latest = Some((step, e.path()));
            }
        }
    }
    latest
}

/// One line of the timing log; wall time lives here and never in the
/// deterministic loss log.
#[derive(Debug, Serialize)]
struct TimingLine {
    step: u64,
    millis: u128,
}

/// Runs the trainer to `train.steps`, appending to the loss and timing
/// logs and saving periodic checkpoints `ckpt_{step}.dstr`. Returns the
/// final checkpoint path.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &[Utterance],
    out_dir: &Path,
    mut progress: impl FnMut(&StepOutcome),
) -> Result<PathBuf, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let append = trainer.step > 0;
    let mut loss_log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(out_dir.join("loss.jsonl"))?,
    );
    let mut timing_log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(out_dir.join("timings.jsonl"))?,
    );

    while trainer.step < trainer.train.steps {
        let t0 = std::time::Instant::now();
        let outcome = trainer.train_step(data)?;
        serde_json::to_writer(&mut loss_log, &outcome.log)?;
        loss_log.write_all(b"\n")?;
        serde_json::to_writer(
            &mut timing_log,
            &TimingLine {
                step: outcome.log.step,
                millis: t0.elapsed().as_millis(),
            },
        )?;
        timing_log.write_all(b"\n")?;
        progress(&outcome);
        let every = trainer.train.checkpoint_every;
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.train.steps {
            save_checkpoint(
                &out_dir.join(format!("ckpt_{:05}.dstr", trainer.step)),
                &trainer.checkpoint(),
            )?;
        }
    }
    loss_log.flush()?;
    timing_log.flush()?;
    let final_path = out_dir.join(format!("ckpt_{:05}.dstr", trainer.step));
    save_checkpoint(&final_path, &trainer.checkpoint())?;
    Ok(final_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{EOS, NULL};

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

    fn tiny_tc(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_frames: 8,
            warmup: 4,
            checkpoint_every: 0,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Vec<Utterance> {
        (0..4u64)
            .map(|i| {
                let mut grid: Vec<Vec<u16>> = (0..5)
                    .map(|f| (0..6).map(|j| ((i as usize * 7 + 3 * f + j) % 60) as u16).collect())
                    .collect();
                let mut eos = vec![NULL; 6];
                eos[0] = EOS;
                grid.push(eos);
                Utterance {
                    text: vec![(i % 12) as u8, ((i + 3) % 12) as u8, 1, 2],
                    style: (i % 8) as usize,
                    grid,
                    seed: i,
                }
            })
            .collect()
    }

    fn params_bits(store: &ParamStore<f32>) -> Vec<u32> {
        store
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn warmup_factor_ramps_then_holds() {
        let tc = tiny_tc(10);
        assert!((lr_factor(&tc, 0) - 0.25).abs() < 1e-15);
        assert!((lr_factor(&tc, 3) - 1.0).abs() < 1e-15);
        assert_eq!(lr_factor(&tc, 100), 1.0);
        let mut none = tc;
        none.warmup = 0;
        assert_eq!(lr_factor(&none, 0), 1.0);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = tiny_data();
        let mut a = Trainer::new(tiny_cfg(), tiny_tc(4));
        let mut b = Trainer::new(tiny_cfg(), tiny_tc(4));
        for _ in 0..4 {
            let oa = a.train_step(&data).unwrap();
            let ob = b.train_step(&data).unwrap();
            assert_eq!(oa.log, ob.log);
        }
        assert_eq!(params_bits(&a.store), params_bits(&b.store));

        let mut c = Trainer::new(
            tiny_cfg(),
            TrainConfig {
                seed: 8,
                ..tiny_tc(4)
            },
        );
        c.train_step(&data).unwrap();
        a.step = 0;
        assert_ne!(
            c.train_step(&data).unwrap().log.loss,
            a.train_step(&data).unwrap().log.loss,
            "different seeds should draw different batches"
        );
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();

        let mut full = Trainer::new(tiny_cfg(), tiny_tc(6));
        for _ in 0..6 {
            full.train_step(&data).unwrap();
        }

        let mut half = Trainer::new(tiny_cfg(), tiny_tc(6));
        for _ in 0..3 {
            half.train_step(&data).unwrap();
        }
        let path = dir.path().join("mid.dstr");
        save_checkpoint(&path, &half.checkpoint()).unwrap();
        let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap());
        assert_eq!(resumed.step, 3);
        for _ in 0..3 {
            resumed.train_step(&data).unwrap();
        }

        assert_eq!(params_bits(&full.store), params_bits(&resumed.store));
        assert_eq!(params_bits(&full.adam_m), params_bits(&resumed.adam_m));
        assert_eq!(params_bits(&full.adam_v), params_bits(&resumed.adam_v));
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_cfg(), tiny_tc(2));
        t.train_step(&data).unwrap();

        let p1 = dir.path().join("a.dstr");
        let p2 = dir.path().join("b.dstr");
        save_checkpoint(&p1, &t.checkpoint()).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.step, 1);
        assert_eq!(loaded.train, t.train);
    }

    #[test]
    fn checkpoint_failure_modes_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(tiny_cfg(), tiny_tc(1));
        let path = dir.path().join("c.dstr");
        save_checkpoint(&path, &t.checkpoint()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::BadVersion { found: 99 })
        ));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::Corrupt(_))));
    }

    #[test]
    fn validation_names_the_offending_block() {
        let t = Trainer::new(tiny_cfg(), tiny_tc(1));
        let mut ckpt = t.checkpoint();

        let mut missing = ParamStore::new();
        for (name, tensor) in ckpt.store.iter() {
            if name != "mdm.gate" {
                missing.insert(name.to_string(), tensor.clone());
            }
        }
        let full = std::mem::replace(&mut ckpt.store, missing);
        match ckpt.validate() {
            Err(TrainError::MissingBlock(name)) => assert_eq!(name, "mdm.gate"),
            other => panic!("expected MissingBlock, got {other:?}"),
        }
        ckpt.store = full;

        *ckpt.adam_m.get_mut("mdm.gate") = Tensor::zeros(&[2, 2]);
        match ckpt.validate() {
            Err(TrainError::BlockMismatch { name, .. }) => assert_eq!(name, "adam.m.mdm.gate"),
            other => panic!("expected BlockMismatch, got {other:?}"),
        }
    }

    #[test]
    fn poisoned_parameters_abort_with_the_batch_seed() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_cfg(), tiny_tc(1));
        t.store.get_mut("mdm.gate").data_mut()[0] = f32::NAN;
        match t.train_step(&data) {
            Err(TrainError::NonFinite { step: 0, seed }) => {
                assert_eq!(seed, mix(&[TAG_STEP, 7, 0]));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(t.train_step(&[]).is_err(), "empty dataset must error");
    }

    #[test]
    fn tiny_clip_freezes_the_adaptive_update() {
        let data = tiny_data();
        let mut free = Trainer::new(tiny_cfg(), tiny_tc(1));
        let mut frozen = Trainer::new(
            tiny_cfg(),
            TrainConfig {
                clip: 1e-12,
                weight_decay: 0.0,
                ..tiny_tc(1)
            },
        );
        free.train.weight_decay = 0.0;
        let before = params_bits(&frozen.store);
        free.train_step(&data).unwrap();
        frozen.train_step(&data).unwrap();

        let delta_max = |t: &Trainer, before: &[u32]| {
            params_bits(&t.store)
                .iter()
                .zip(before)
                .map(|(&a, &b)| (f32::from_bits(a) - f32::from_bits(b)).abs() as f64)
                .fold(0.0f64, f64::max)
        };
        let d_frozen = delta_max(&frozen, &before);
        let d_free = delta_max(&free, &before);
        // With the norm crushed to ~0, every Adam ratio is ~g/(0+eps)
        // scaled by the clip, so parameters barely move.
        assert!(d_frozen < 1e-8, "frozen moved {d_frozen}");
        assert!(d_free > 1e-6, "free run should actually update");
    }

    #[test]
    fn train_loop_writes_logs_and_final_checkpoint() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(
            tiny_cfg(),
            TrainConfig {
                checkpoint_every: 2,
                ..tiny_tc(5)
            },
        );
        let mut seen = 0;
        let final_path = train_loop(&mut t, &data, dir.path(), |_| seen += 1).unwrap();
        assert_eq!(seen, 5);
        assert!(final_path.ends_with("ckpt_00005.dstr"));
        assert!(dir.path().join("ckpt_00002.dstr").exists());
        assert!(dir.path().join("ckpt_00004.dstr").exists());

        let log = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        let lines: Vec<StepLog> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].step, 0);
        assert!(lines.iter().all(|l| l.loss.is_finite() && l.lr > 0.0));
        let timings = std::fs::read_to_string(dir.path().join("timings.jsonl")).unwrap();
        assert_eq!(timings.lines().count(), 5);

        // Extending a finished run appends to the log instead of
        // rewriting it.
        let done = load_checkpoint(&final_path).unwrap();
        let mut resumed = Trainer::from_checkpoint(done);
        resumed.train.steps = 6;
        train_loop(&mut resumed, &data, dir.path(), |_| {}).unwrap();
        let log2 = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        assert_eq!(log2.lines().count(), 6, "append mode should extend the log");
        assert!(log2.starts_with(&log));
    }
}

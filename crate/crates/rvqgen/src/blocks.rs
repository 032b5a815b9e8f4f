//! Pre-norm transformer stack: rotary attention, gated FFN, RMS norms.
//!
//! No biases and no dropout anywhere. The stack exists twice: once as tape
//! ops for training and once as plain kernels with a KV cache for decoding.
//! The two implementations are checked against each other to 1e-5.

use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{
    self, Scalar, Tape, Tensor, TensorError, Var,
};

/// Rotary base shared by every stack.
pub const ROPE_BASE: f64 = 10000.0;
/// RMS norm epsilon shared by every stack.
pub const RMS_EPS: f64 = 1e-6;
/// Init scale for projections and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum BlockError {
    #[error("block configuration: {0}")]
    Config(String),
    #[error("KV cache cannot be used in bidirectional attention")]
    CacheBidirectional,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Attention direction of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    Causal,
    Bidirectional,
}

/// Shape of one transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ffn == 0 {
            return Err(BlockError::Config(format!(
                "all extents must be positive, got {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(BlockError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(BlockError::Config(format!(
                "head_dim {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

/// Registers all blocks of a stack under `prefix`: projections at
/// `N(0, 0.02)`, norm gains at one.
pub fn init_stack<E: Scalar>(
    store: &mut ParamStore<E>,
    rng: &mut rand_chacha::ChaCha12Rng,
    prefix: &str,
    cfg: &BlockConfig,
) {
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(
                format!("{prefix}.l{l}.attn.{w}"),
                Tensor::randn(rng, &[d, d], INIT_STD),
            );
        }
        store.insert(
            format!("{prefix}.l{l}.ffn.w_gate"),
            Tensor::randn(rng, &[d, f], INIT_STD),
        );
        store.insert(
            format!("{prefix}.l{l}.ffn.w_up"),
            Tensor::randn(rng, &[d, f], INIT_STD),
        );
        store.insert(
            format!("{prefix}.l{l}.ffn.w_down"),
            Tensor::randn(rng, &[f, d], INIT_STD),
        );
        store.insert(
            format!("{prefix}.l{l}.norm_attn"),
            Tensor::from_vec(&[1, d], vec![E::ONE; d]).expect("length matches"),
        );
        store.insert(
            format!("{prefix}.l{l}.norm_ffn"),
            Tensor::from_vec(&[1, d], vec![E::ONE; d]).expect("length matches"),
        );
    }
    store.insert(
        format!("{prefix}.final_norm"),
        Tensor::from_vec(&[1, d], vec![E::ONE; d]).expect("length matches"),
    );
}

/// Full-sequence stack forward on a tape. `positions` are the rotary
/// positions of the rows of `x`; `key_visible` hides columns (keys) from
/// every query when present.
pub fn forward_tape<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &TapeBinding,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    positions: &[usize],
    mode: AttnMode,
    key_visible: Option<&[bool]>,
) -> Result<Var, BlockError> {
    let n = tape.value(x).shape()[0];
    let hd = cfg.head_dim();
    let row_limit: Option<Vec<usize>> = match mode {
        AttnMode::Causal => Some((1..=n).collect()),
        AttnMode::Bidirectional => None,
    };
    let mut h = x;
    for l in 0..cfg.n_layers {
        let p = |name: &str| format!("{prefix}.l{l}.{name}");
        let normed = tape.rms_norm(h, bound.var(&p("norm_attn")), RMS_EPS)?;
        let q = tape.matmul(normed, bound.var(&p("attn.wq")))?;
        let k = tape.matmul(normed, bound.var(&p("attn.wk")))?;
        let v = tape.matmul(normed, bound.var(&p("attn.wv")))?;
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = tape.col_slice(q, head * hd, hd)?;
            let kh = tape.col_slice(k, head * hd, hd)?;
            let vh = tape.col_slice(v, head * hd, hd)?;
            let qh = tape.rope(qh, positions, ROPE_BASE)?;
            let kh = tape.rope(kh, positions, ROPE_BASE)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let probs = tape.attn_softmax(
                scores,
                (hd as f64).sqrt(),
                row_limit.clone(),
                key_visible.map(|kv| kv.to_vec()),
            )?;
            head_outs.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.col_concat(&head_outs)?;
        let proj = tape.matmul(merged, bound.var(&p("attn.wo")))?;
        h = tape.add(h, proj)?;

        let normed = tape.rms_norm(h, bound.var(&p("norm_ffn")), RMS_EPS)?;
        let gate = tape.matmul(normed, bound.var(&p("ffn.w_gate")))?;
        let up = tape.matmul(normed, bound.var(&p("ffn.w_up")))?;
        let gated = tape.silu(gate);
        let prod = tape.mul(gated, up)?;
        let down = tape.matmul(prod, bound.var(&p("ffn.w_down")))?;
        h = tape.add(h, down)?;
    }
    Ok(tape.rms_norm(h, bound.var(&format!("{prefix}.final_norm")), RMS_EPS)?)
}

/// Per-layer key/value memory for incremental decoding. Keys are stored
/// after rotary encoding, one `[len * head_dim]` buffer per head.
#[derive(Debug, Clone)]
pub struct KvCache<E> {
    layers: Vec<LayerCache<E>>,
    len: usize,
}

#[derive(Debug, Clone)]
struct LayerCache<E> {
    k: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Scalar> KvCache<E> {
    pub fn new(cfg: &BlockConfig) -> Self {
        KvCache {
            layers: (0..cfg.n_layers)
                .map(|_| LayerCache {
                    k: vec![Vec::new(); cfg.n_heads],
                    v: vec![Vec::new(); cfg.n_heads],
                })
                .collect(),
            len: 0,
        }
    }

    /// Number of positions already absorbed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Kernel-only stack forward used at decode time.
///
/// With a cache the mode must be causal: rows of `x` are appended at
/// positions `cache.len()..`, and attention runs over everything absorbed so
/// far. Without a cache this is a full-sequence forward with rows at
/// positions `0..n`.
pub fn forward_infer<E: Scalar>(
    store: &ParamStore<E>,
    prefix: &str,
    cfg: &BlockConfig,
    x: &Tensor<E>,
    mode: AttnMode,
    mut cache: Option<&mut KvCache<E>>,
    key_visible: Option<&[bool]>,
) -> Result<Tensor<E>, BlockError> {
    if cache.is_some() && mode == AttnMode::Bidirectional {
        return Err(BlockError::CacheBidirectional);
    }
    let (n, d) = x.dims2()?;
    debug_assert_eq!(d, cfg.d_model);
    let hd = cfg.head_dim();
    let start = cache.as_ref().map_or(0, |c| c.len);
    let positions: Vec<usize> = (start..start + n).collect();

    let mut h = x.data().to_vec();
    for l in 0..cfg.n_layers {
        let p = |name: &str| format!("{prefix}.l{l}.{name}");
        let mut normed = vec![E::ZERO; n * d];
        tensor::rms_norm_rows(&h, n, d, store.get(&p("norm_attn")).data(), RMS_EPS, &mut normed);
        let mut q = vec![E::ZERO; n * d];
        let mut k = vec![E::ZERO; n * d];
        let mut v = vec![E::ZERO; n * d];
        tensor::gemm(n, d, d, &normed, false, store.get(&p("attn.wq")).data(), false, 0.0, &mut q);
        tensor::gemm(n, d, d, &normed, false, store.get(&p("attn.wk")).data(), false, 0.0, &mut k);
        tensor::gemm(n, d, d, &normed, false, store.get(&p("attn.wv")).data(), false, 0.0, &mut v);

        let mut merged = vec![E::ZERO; n * d];
        for head in 0..cfg.n_heads {
            let mut qh = take_head(&q, n, d, head, hd);
            let mut kh = take_head(&k, n, d, head, hd);
            let vh = take_head(&v, n, d, head, hd);
            let qr = {
                let mut out = vec![E::ZERO; n * hd];
                tensor::rope_rows(&qh, n, hd, &positions, ROPE_BASE, false, &mut out);
                out
            };
            {
                let mut out = vec![E::ZERO; n * hd];
                tensor::rope_rows(&kh, n, hd, &positions, ROPE_BASE, false, &mut out);
                kh = out;
            }
            qh = qr;

            // Keys/values this head attends over: cached + new.
            let (k_all, v_all, total) = match cache.as_mut() {
                Some(c) => {
                    let lc = &mut c.layers[l];
                    lc.k[head].extend_from_slice(&kh);
                    lc.v[head].extend_from_slice(&vh);
                    (lc.k[head].clone(), lc.v[head].clone(), start + n)
                }
                None => (kh, vh, n),
            };

            let mut scores = vec![E::ZERO; n * total];
            tensor::gemm(n, hd, total, &qh, false, &k_all, true, 0.0, &mut scores);
            let row_limit: Option<Vec<usize>> = match mode {
                AttnMode::Causal => Some((0..n).map(|i| start + i + 1).collect()),
                AttnMode::Bidirectional => None,
            };
            let mut probs = vec![E::ZERO; n * total];
            tensor::softmax_rows_masked(
                &scores,
                n,
                total,
                (hd as f64).sqrt(),
                row_limit.as_deref(),
                key_visible,
                &mut probs,
            );
            let mut mix = vec![E::ZERO; n * hd];
            tensor::gemm(n, total, hd, &probs, false, &v_all, false, 0.0, &mut mix);
            put_head(&mut merged, &mix, n, d, head, hd);
        }
        let mut proj = vec![E::ZERO; n * d];
        tensor::gemm(n, d, d, &merged, false, store.get(&p("attn.wo")).data(), false, 0.0, &mut proj);
        for (hv, pv) in h.iter_mut().zip(&proj) {
            *hv = E::from_f64(hv.to_f64() + pv.to_f64());
        }

        let mut normed = vec![E::ZERO; n * d];
        tensor::rms_norm_rows(&h, n, d, store.get(&p("norm_ffn")).data(), RMS_EPS, &mut normed);
        let f = cfg.d_ffn;
        let mut gate = vec![E::ZERO; n * f];
        let mut up = vec![E::ZERO; n * f];
        tensor::gemm(n, d, f, &normed, false, store.get(&p("ffn.w_gate")).data(), false, 0.0, &mut gate);
        tensor::gemm(n, d, f, &normed, false, store.get(&p("ffn.w_up")).data(), false, 0.0, &mut up);
        let mut gated = vec![E::ZERO; n * f];
        tensor::silu_slice(&gate, &mut gated);
        for (gv, uv) in gated.iter_mut().zip(&up) {
            *gv = E::from_f64(gv.to_f64() * uv.to_f64());
        }
        let mut down = vec![E::ZERO; n * d];
        tensor::gemm(n, f, d, &gated, false, store.get(&p("ffn.w_down")).data(), false, 0.0, &mut down);
        for (hv, dv) in h.iter_mut().zip(&down) {
            *hv = E::from_f64(hv.to_f64() + dv.to_f64());
        }
    }
    if let Some(c) = cache {
        c.len += n;
    }
    let mut out = vec![E::ZERO; n * d];
    tensor::rms_norm_rows(
        &h,
        n,
        d,
        store.get(&format!("{prefix}.final_norm")).data(),
        RMS_EPS,
        &mut out,
    );
    Ok(Tensor::from_vec(&[n, d], out).expect("length matches"))
}

fn take_head<E: Scalar>(full: &[E], n: usize, d: usize, head: usize, hd: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(n * hd);
    for r in 0..n {
        out.extend_from_slice(&full[r * d + head * hd..r * d + (head + 1) * hd]);
    }
    out
}

fn put_head<E: Scalar>(full: &mut [E], block: &[E], n: usize, d: usize, head: usize, hd: usize) {
    for r in 0..n {
        full[r * d + head * hd..r * d + (head + 1) * hd]
            .copy_from_slice(&block[r * hd..(r + 1) * hd]);
    }
}

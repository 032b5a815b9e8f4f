//! Model configuration and the full parameter inventory.
//!
//! Three transformer stacks share one parameter store: the window
//! aggregator (`agg.*`), the autoregressive drafter (`lm.*`), and the
//! masked-diffusion infiller (`mdm.*`), plus per-layer code tables and
//! lifts (`codes.*`) shared by every component that embeds codes.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, BlockConfig, INIT_STD};
use crate::codec;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    Config(String),
}

/// Shapes of everything learned. Serialized into checkpoints, so field
/// names are part of the on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub lm_layers: usize,
    pub mdm_layers: usize,
    pub agg_layers: usize,
    /// RVQ depth J.
    pub layers: usize,
    /// Content codes per layer.
    pub vocab: usize,
    /// Width of the per-layer code tables before the lift.
    pub d_code: usize,
    /// Window length the aggregator reads (frames).
    pub patch: usize,
    /// Stride between patches = frames per target slice.
    pub stride: usize,
    pub alphabet: usize,
}

impl ModelConfig {
    pub fn micro() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            lm_layers: 4,
            mdm_layers: 4,
            agg_layers: 2,
            layers: codec::LAYERS,
            vocab: codec::VOCAB,
            d_code: codec::CODE_DIM,
            patch: 8,
            stride: 8,
            alphabet: codec::ALPHABET,
        }
    }

    pub fn small() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 8,
            d_ffn: 256,
            lm_layers: 6,
            mdm_layers: 6,
            agg_layers: 2,
            layers: codec::LAYERS,
            vocab: codec::VOCAB,
            d_code: codec::CODE_DIM,
            patch: 8,
            stride: 8,
            alphabet: codec::ALPHABET,
        }
    }

    /// Embedding rows per code table: content codes plus PAD/MASK/EOS/NULL.
    pub fn codes_total(&self) -> usize {
        self.vocab + 4
    }

    pub fn agg_block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.agg_layers,
            d_ffn: self.d_ffn,
        }
    }

    pub fn lm_block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.lm_layers,
            d_ffn: self.d_ffn,
        }
    }

    pub fn mdm_block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.mdm_layers,
            d_ffn: self.d_ffn,
        }
    }

    /// Slots in one infiller sequence: drafter slot, one history patch,
    /// one target patch.
    pub fn mdm_seq_len(&self) -> usize {
        1 + 2 * self.stride * self.layers
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.agg_block()
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        self.lm_block()
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        self.mdm_block()
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        if self.layers == 0 || self.d_code == 0 || self.alphabet == 0 {
            return Err(ModelError::Config(
                "layers, d_code, alphabet must be positive".into(),
            ));
        }
        // Reserved-code indices (PAD and friends) and the embedding
        // transplant are laid out for the codec's code space.
        if self.vocab != codec::VOCAB {
            return Err(ModelError::Config(format!(
                "vocab must match the codec's {} content codes, got {}",
                codec::VOCAB,
                self.vocab
            )));
        }
        if self.layers > codec::LAYERS {
            return Err(ModelError::Config(format!(
                "at most {} RVQ layers are available, got {}",
                codec::LAYERS,
                self.layers
            )));
        }
        if self.stride == 0 || self.patch < self.stride {
            return Err(ModelError::Config(format!(
                "need window >= stride >= 1, got patch {} stride {}",
                self.patch, self.stride
            )));
        }
        Ok(())
    }
}

/// Initializes every parameter block, then transplants the codec codebooks
/// into the content rows of the code tables.
///
/// Draw order is fixed (blocks created in a fixed sequence from one RNG),
/// so a seed fully determines the parameters.
pub fn init_params<E: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> ParamStore<E> {
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    for j in 0..cfg.layers {
        store.insert(
            format!("codes.table{j}"),
            Tensor::randn(rng, &[cfg.codes_total(), cfg.d_code], INIT_STD),
        );
        store.insert(
            format!("codes.lift{j}"),
            Tensor::randn(rng, &[cfg.d_code, d], INIT_STD),
        );
    }
    store.insert(
        "agg.mix",
        Tensor::from_vec(&[1, cfg.layers], vec![E::ONE; cfg.layers]).unwrap(),
    );
    blocks::init_stack(&mut store, rng, "agg", &cfg.agg_block());

    store.insert(
        "lm.text_embed",
        Tensor::randn(rng, &[cfg.alphabet, d], INIT_STD),
    );
    store.insert("lm.sep", Tensor::randn(rng, &[1, d], INIT_STD));
    store.insert("lm.type", Tensor::randn(rng, &[2, d], INIT_STD));
    blocks::init_stack(&mut store, rng, "lm", &cfg.lm_block());

    store.insert(
        "mdm.pos",
        Tensor::randn(rng, &[2 * cfg.stride, d], INIT_STD),
    );
    store.insert(
        "mdm.layer",
        Tensor::randn(rng, &[cfg.layers, d], INIT_STD),
    );
    store.insert("mdm.type", Tensor::randn(rng, &[2, d], INIT_STD));
    store.insert(
        "mdm.gate",
        Tensor::from_vec(&[1, 1], vec![E::ONE]).unwrap(),
    );
    store.insert("mdm.null_ar", Tensor::randn(rng, &[1, d], INIT_STD));
    blocks::init_stack(&mut store, rng, "mdm", &cfg.mdm_block());
    for j in 0..cfg.layers {
        store.insert(
            format!("mdm.head{j}"),
            Tensor::randn(rng, &[d, cfg.codes_total()], INIT_STD),
        );
    }

    transplant_codebooks(&mut store, cfg, rng);
    store
}

/// Copies the codec's per-layer codebooks into the content rows of
/// `codes.table{j}`: the first `min(CODE_DIM, d_code)` channels are exact
/// copies; channels beyond that (if the table is wider) are Gaussian draws
/// moment-matched to the codebook; reserved rows keep their small init.
fn transplant_codebooks<E: Scalar>(
    store: &mut ParamStore<E>,
    cfg: &ModelConfig,
    rng: &mut ChaCha12Rng,
) {
    let books = codec::codebooks();
    for (j, book) in books.iter().enumerate().take(cfg.layers) {
        let n = book.len() as f64;
        let mean = book.iter().sum::<f64>() / n;
        let std = (book.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let copy = codec::CODE_DIM.min(cfg.d_code);
        let table = store.get_mut(&format!("codes.table{j}"));
        for code in 0..cfg.vocab {
            for ch in 0..copy {
                table.data_mut()[code * cfg.d_code + ch] =
                    E::from_f64(book[code * codec::CODE_DIM + ch]);
            }
            for ch in copy..cfg.d_code {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                table.data_mut()[code * cfg.d_code + ch] = E::from_f64(mean + std * z);
            }
        }
    }
}

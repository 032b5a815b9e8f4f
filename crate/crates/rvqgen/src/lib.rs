//! Patch-level autoregressive drafting plus masked-diffusion infilling over
//! residual-vector-quantized (RVQ) code grids.
//!
//! A causal language model sketches one hidden vector per patch of the code
//! stream; a bidirectional masked-diffusion model infills the patch's
//! time-by-layer code grid in a few confidence-ranked steps. A synthetic,
//! exactly invertible codec supplies training data and closed-form scoring,
//! so every stage of the pipeline can be verified end to end.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example codec_oracle      # the synthetic codec and its scores
//! cargo run --release --example gradient_check    # autodiff vs finite differences
//! cargo run --release --example gen_data          # build a dataset on disk
//! cargo run --release --example train_micro       # short training run
//! cargo run --release --example synthesize        # text -> code grid -> text round trip
//! cargo run --release --example evaluate          # scored evaluation with bootstrap CIs
//! cargo run --release --example prune_layers      # quality/compute trade-off at decode time
//! cargo run --release --example decoding_strategies
//! cargo run --release --example cfg_variants      # guidance schemas side by side
//! ```
//!
//! The same capabilities are reachable through the `rvqgen` binary
//! (`gen-data`, `train`, `synth`, `eval`, `ablate`).

pub mod aggregator;
pub mod blocks;
pub mod cli;
pub mod codec;
pub mod config;
pub mod decode;
pub mod diffusion;
pub mod eval;
pub mod lm;
pub mod model;
pub mod objective;
pub mod params;
pub mod tensor;
pub mod train;

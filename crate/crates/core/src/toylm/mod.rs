//! A small decoder-only transformer used as the substrate for SAE training,
//! activation dumps and steered generation.
//!
//! The hook point is the residual stream after a layer's MLP. Training uses
//! hand-written backpropagation and Adam on CPU.

mod dump;
mod generate;
mod model;
mod sae_train;
mod train;

pub use dump::{dump_activations, dump_activations_with, prompt_tokens, ActivationDump, DumpRecord};
pub use generate::{generate, perplexity, perplexity_tokens, GenerateConfig, Generation, SteeringHook};
pub use model::{Batch, ForwardPass, LayerHook, ToyLm, ToyLmConfig};
pub use sae_train::{batch_grads, batch_loss, init_sae, train_sae, SaeGrads, SaeTrainConfig, SaeTrainReport};
pub use train::{train_toy_lm, unigram_perplexity, LmTrainConfig, LmTrainReport};

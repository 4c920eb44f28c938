//! Topic alignment for sparse autoencoders.
//!
//! Neurons of a top-k SAE are scored by how close the prompts they fire on
//! are to a small alignment set, and the scores steer which neurons survive
//! the top-k selection at generation time.
//!
//! ```
//! use ndarray::array;
//! use sae_align::{apply_swap, activate, ActivationSpec, ScoreTable};
//!
//! let gamma = array![3.0f32, 1.0, 2.0, -1.0];
//! let scores = ScoreTable::from_scores(&[0.1, 1.0, 0.2, 1.0]);
//! let spec = ActivationSpec::top_k(1);
//! assert_eq!(activate(gamma.view(), &spec).indices(), &[0]);
//! let steered = apply_swap(gamma.view(), &scores, &spec).unwrap();
//! assert_eq!(steered.indices(), &[1]);
//! assert_eq!(steered.values(), &[1.0]);
//! ```

pub mod archive;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod sae;
pub mod scoring;
pub mod steering;
pub mod toylm;

pub use archive::TensorArchive;
pub use corpus::{Prompt, PromptRole, PromptSet};
pub use error::{Error, Result};
pub use sae::{activate, ActivationKind, ActivationSpec, SaeModel, SparseActivation};
pub use scoring::{ScoreConfig, ScoreTable};
pub use steering::{
    apply_clamp, apply_swap, apply_weight_ablation, contamination, neurons_changed, PolicyKind,
    SteeringPolicy,
};
pub use toylm::{ActivationDump, ToyLm};

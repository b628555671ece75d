//! Network architectures: the Transformer-ESN feature extractor, MLPs for
//! the target side, predictors and decoder, and their optimizer and
//! checkpoint format.

mod checkpoint;
mod esn;
mod extractor;
mod mlp;
mod optim;
mod params;

pub use checkpoint::{load_extractor, load_mlp, save_extractor, save_mlp};
pub use esn::{esn_init, esn_run, esn_states, spectral_radius, Reservoir, POWER_ITERATION_LIMIT};
pub use extractor::{
    extract_embedding, positional_encoding, transformer_encode, Extractor, ExtractorConfig,
    ExtractorKind,
};
pub use mlp::{mlp_forward, Mlp, MlpSpec};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamEntry, ParamSet};

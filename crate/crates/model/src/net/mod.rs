//! Track-token diffusion transformer with adaLN-Zero conditioning.

pub mod config;
pub mod embed;
pub mod params;
pub mod tokens;
pub mod transformer;

pub use config::NetConfig;
pub use embed::{bilinear_feature, position_encoding, sinusoid};
pub use params::{Layout, Params};
pub use tokens::{build_tokens, TokenBatch};
pub use transformer::{backward, forward, predict, ForwardCache};

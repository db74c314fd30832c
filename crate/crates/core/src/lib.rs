//! Review-augmented generative recommendation.
//!
//! Items and reviews are tokenized into multi-level semantic IDs by a
//! residual-quantization autoencoder ([`rqvae`]); user histories are
//! serialized as interleaved item/review token streams ([`sequence`]) and fed
//! to a small encoder-decoder transformer ([`genrec`]) that is then aligned
//! toward item generation with preference optimization ([`align`]).
//! Recommendations are produced by trie-constrained beam search ([`decode`])
//! and scored with leave-one-out HIT@K / NDCG@K ([`eval`]).

pub mod align;
pub mod checkpoint;
pub mod dataio;
pub mod decode;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod genrec;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rqvae;
pub mod sequence;
pub mod tensor;

pub use error::{Error, Result};

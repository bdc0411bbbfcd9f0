//! Sampling, batch and streaming generation, and speculative decoding.

mod generate;
mod sampling;
mod speculative;
mod utf8;

pub use generate::{generate_ids, inference, stream_inference, Completion};
pub use sampling::{next_distribution, sample_from, sample_token, GenParams};
pub use speculative::{
    acceptance_probability, residual_distribution, speculative_decode, speculative_distribution, SpecStats,
};
pub use utf8::{decode_complete, Utf8StreamDecoder};

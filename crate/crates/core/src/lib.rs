//! Cross-modal metric learning with a relation-aware quadruplet loss, hard
//! pair mining and a memory-augmented margin learner, evaluated with
//! zero-shot retrieval metrics on two-modality embeddings.

pub mod dataspace;
pub mod losses;
pub mod meta_margin;
pub mod numerics;
pub mod retrieval;
pub mod trainer;

/// Seeded generator used everywhere randomness is needed.
pub type SeedRng = rand_chacha::ChaCha8Rng;

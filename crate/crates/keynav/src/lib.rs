//! Vocabulary key-space analysis and decoding-path navigation for language
//! models.
//!
//! The library splits into six pieces:
//!
//! - [`keyspace`]: the token vocabulary plus its |V| x D key matrix, with
//!   the dot-product/softmax next-token math and similarity primitives.
//! - [`cluster`]: k-means over the key space, the in-top-cluster /
//!   out-of-top-cluster partition of middle-ranked tokens, and the
//!   cluster-penalty rerank.
//! - [`backend`]: a uniform model-access contract (candidates, forced-prefix
//!   completion, chat) with HTTP, logit-dump and fixture implementations,
//!   plus query recovery from observed logits.
//! - [`probing`]: probing tasks and the iterative in-context-navigation loop
//!   that pushes each new query away from explored answers.
//! - [`eval`]: MAP/precision, the unique-n-gram diversity ratio, the LLM
//!   judge, answer extraction and self-consistency voting.
//! - [`drift`]: statistics comparing two key spaces and the group
//!   probability-shift metric over before/after NTP dumps.

pub mod backend;
pub mod cluster;
pub mod drift;
pub mod error;
pub mod eval;
pub mod keyspace;
pub mod linalg;
pub mod probing;
pub mod tensor;

pub use error::{Error, Result};

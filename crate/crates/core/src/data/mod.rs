pub mod corpus;
pub mod synthetic;
pub mod vocab;

pub use vocab::{Vocabulary, EOS, PAD, SOS, UNK};

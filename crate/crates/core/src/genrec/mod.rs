//! Generative recommender over identifier tokens: example construction,
//! a small causal transformer trained with a temperature-scaled generation
//! loss, and Trie-constrained beam search.

mod beam;
mod examples;
mod loss;
mod model;
mod train;
mod trie;
mod vocab;

pub use beam::{constrained_beam_search, constrained_beam_search_with_tau, recommend, Recommendation};
pub use examples::{
    build_examples, eval_examples, examples_from_sequence, history_tokens, pack_examples, EvalSplit, ExampleMode,
    SequenceExample, TokenStream, HISTORY_CAP,
};
pub use loss::{example_loss, hard_negative_weight, ranking_generation_loss};
pub use model::{KvCache, RecommenderArch, RecommenderModel, MODEL_FORMAT_VERSION};
pub use train::{evaluate_examples, train_recommender, RecEpochRecord, RecTrainingConfig, RecTrainingLog};
pub use trie::{IdentifierTrie, ROOT};
pub use vocab::{TokenVocabulary, BOS, END, PAD};

pub mod autograd;
pub mod cf;
pub mod cluster;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod genrec;
pub mod gradcheck;
pub mod nn;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod regularizers;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod tokenizer_training;

pub use autograd::{Activation, ParamId, ParamStore, Parameter, RatioMode, Segment, Tape, Var};
pub use data::{Catalog, CfEmbeddingTable, EmbeddingTable, Interaction, InteractionDataset, SemanticEmbeddingTable, UserSequence};
pub use error::{Error, Result};
pub use genrec::{IdentifierTrie, RecommenderModel, SequenceExample, TokenVocabulary};
pub use metrics::RankingResult;
pub use rng::SeededRng;
pub use tensor::Tensor;
pub use tokenizer::{CodebookSet, Identifier, IdentifierAssignment, RqTokenizer, TokenizerArch};

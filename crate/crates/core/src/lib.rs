//! Few-shot quantity extraction over MeasEval-style corpora.
//!
//! The pipeline runs in four stages: build a few-shot prompt per paragraph
//! ([`promptkit`]), submit it to a completion backend ([`backend`]), parse
//! the completion text ([`parser`]) and anchor the extracted strings back to
//! character offsets ([`reconstruct`]). [`scorer`] compares the result with
//! gold annotations, and [`corpus`] reads and writes both.

pub mod backend;
pub mod corpus;
pub mod parser;
pub mod pipeline;
pub mod promptkit;
pub mod reconstruct;
pub mod scorer;

pub use corpus::{Annotation, AnnotationType, Corpus, Other, Paragraph};
pub use parser::{parse_completion, FinishReason, ParseOutcome};
pub use promptkit::{build_prompt, BudgetPolicy, FewShotExample, QuantityBlock};
pub use reconstruct::{reconstruct, ReconstructionReport};
pub use scorer::{score_corpus, ScoreReport};

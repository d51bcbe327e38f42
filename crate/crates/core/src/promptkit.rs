//! Few-shot prompt construction and request token budgeting.
//!
//! A prompt is a sequence of worked examples followed by the target
//! paragraph. Each example uses the grammar
//!
//! ```text
//! Text:
//! <paragraph>
//!
//! Data:
//! Quantity: <value>
//! Unit: <value>
//! Property: <value>
//! Entity: <value>
//!
//! Quantity: ...
//! <|endoftext|>
//! ```
//!
//! and the target is appended as `Text:\n<paragraph>\n\nData:\n`, leaving the
//! model to continue the data section.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::corpus::Paragraph;
use crate::parser::{self, FinishReason};

pub const END_OF_TEXT: &str = "<|endoftext|>";

/// The shipped base prompt: nine worked examples, nineteen quantities.
pub const BUILTIN_BASE_PROMPT: &str = include_str!("../data/base_prompt.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("invalid quantity block: {0}")]
    InvalidBlock(String),
    #[error("a prompt needs at least one worked example")]
    NoExamples,
    #[error("example {index}: {message}")]
    Fixture { index: usize, message: String },
    #[error("exact token estimation requested but no tokenizer is installed")]
    NoTokenizer,
    #[error("invalid budget policy: {0}")]
    InvalidPolicy(String),
    #[error("prompt of {prompt_tokens} tokens leaves no room for a completion under the {limit}-token limit")]
    OversizedPrompt { prompt_tokens: usize, limit: usize },
}

/// One measured quantity and its optional attributes, as written in a
/// prompt's data section.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantityBlock {
    pub quantity: String,
    pub unit: Option<String>,
    pub property: Option<String>,
    pub entity: Option<String>,
}

impl QuantityBlock {
    /// Builds a block, trimming every value. Values must be non-empty and
    /// fit on one line.
    pub fn new(
        quantity: &str,
        unit: Option<&str>,
        property: Option<&str>,
        entity: Option<&str>,
    ) -> Result<Self, PromptError> {
        let block = QuantityBlock {
            quantity: quantity.trim().to_string(),
            unit: unit.map(|s| s.trim().to_string()),
            property: property.map(|s| s.trim().to_string()),
            entity: entity.map(|s| s.trim().to_string()),
        };
        block.validate()?;
        Ok(block)
    }

    pub fn quantity(quantity: &str) -> Result<Self, PromptError> {
        Self::new(quantity, None, None, None)
    }

    pub fn with_unit(mut self, unit: &str) -> Self {
        self.unit = Some(unit.trim().to_string());
        self
    }

    pub fn with_property(mut self, property: &str) -> Self {
        self.property = Some(property.trim().to_string());
        self
    }

    pub fn with_entity(mut self, entity: &str) -> Self {
        self.entity = Some(entity.trim().to_string());
        self
    }

    /// Labelled lines in canonical order: Quantity, Unit, Property, Entity.
    pub fn lines(&self) -> impl Iterator<Item = (&'static str, &str)> {
        [
            ("Quantity", Some(self.quantity.as_str())),
            ("Unit", self.unit.as_deref()),
            ("Property", self.property.as_deref()),
            ("Entity", self.entity.as_deref()),
        ]
        .into_iter()
        .filter_map(|(label, value)| value.map(|v| (label, v)))
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (label, value) in self.lines() {
            if value.trim().is_empty() {
                return Err(PromptError::InvalidBlock(format!("{label} is empty")));
            }
            if value.contains(['\n', '\r']) {
                return Err(PromptError::InvalidBlock(format!("{label} spans several lines")));
            }
            if value.contains(END_OF_TEXT) {
                return Err(PromptError::InvalidBlock(format!("{label} contains {END_OF_TEXT}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for QuantityBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (label, value)) in self.lines().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{label}: {value}")?;
        }
        Ok(())
    }
}

/// A worked example: a paragraph and the blocks annotated in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotExample {
    pub paragraph_text: String,
    pub blocks: Vec<QuantityBlock>,
}

impl FewShotExample {
    pub fn new(paragraph_text: impl Into<String>, blocks: Vec<QuantityBlock>) -> Result<Self, PromptError> {
        let example = FewShotExample {
            paragraph_text: paragraph_text.into(),
            blocks,
        };
        if example.blocks.is_empty() {
            return Err(PromptError::InvalidBlock("an example needs at least one block".into()));
        }
        for block in &example.blocks {
            block.validate()?;
        }
        Ok(example)
    }
}

/// Renders the data section body: blocks separated by one blank line.
pub fn serialize_blocks(blocks: &[QuantityBlock]) -> String {
    blocks
        .iter()
        .map(QuantityBlock::to_string)
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn serialize_example(example: &FewShotExample) -> String {
    format!(
        "Text:\n{}\n\nData:\n{}\n{END_OF_TEXT}\n",
        example.paragraph_text,
        serialize_blocks(&example.blocks)
    )
}

/// Concatenates the examples in the given order and appends the target
/// paragraph with a dangling `Data:` label.
pub fn build_prompt(base_examples: &[FewShotExample], target: &Paragraph) -> Result<String, PromptError> {
    if base_examples.is_empty() {
        return Err(PromptError::NoExamples);
    }
    let mut prompt: String = base_examples.iter().map(serialize_example).collect();
    prompt.push_str("Text:\n");
    prompt.push_str(&target.text);
    prompt.push_str("\n\nData:\n");
    Ok(prompt)
}

/// Parses a base-prompt file written in the example grammar. The loader is
/// strict: any parser warning inside a data section is an error.
pub fn parse_base_prompt(content: &str) -> Result<Vec<FewShotExample>, PromptError> {
    let mut examples = Vec::new();
    let mut rest = content;
    let mut index = 0;
    while !rest.trim().is_empty() {
        let fixture_err = |message: String| PromptError::Fixture { index, message };
        let Some(end) = rest.find(END_OF_TEXT) else {
            return Err(fixture_err(format!("missing {END_OF_TEXT} terminator")));
        };
        let chunk = &rest[..end];
        rest = rest[end + END_OF_TEXT.len()..]
            .strip_prefix('\n')
            .unwrap_or(&rest[end + END_OF_TEXT.len()..]);

        let body = chunk
            .strip_prefix("Text:\n")
            .ok_or_else(|| fixture_err("example must start with \"Text:\"".into()))?;
        let split = body
            .find("\n\nData:\n")
            .ok_or_else(|| fixture_err("missing \"Data:\" section".into()))?;
        let paragraph_text = &body[..split];
        let data = &body[split + "\n\nData:\n".len()..];
        let outcome = parser::parse_completion(data, &FinishReason::Stop);
        if let Some(warning) = outcome.warnings.first() {
            return Err(fixture_err(format!("data section: {warning}")));
        }
        let example = FewShotExample::new(paragraph_text, outcome.blocks)
            .map_err(|e| fixture_err(e.to_string()))?;
        examples.push(example);
        index += 1;
    }
    if examples.is_empty() {
        return Err(PromptError::NoExamples);
    }
    Ok(examples)
}

pub fn builtin_base_prompt() -> Vec<FewShotExample> {
    parse_base_prompt(BUILTIN_BASE_PROMPT).expect("shipped base prompt parses")
}

/// Counts tokens with a sub-word vocabulary.
pub trait TokenCounter: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

impl<F> TokenCounter for F
where
    F: Fn(&str) -> usize + Send + Sync,
{
    fn count_tokens(&self, text: &str) -> usize {
        self(text)
    }
}

/// Byte-pair counter using the GPT-2 vocabulary (`r50k_base`).
#[cfg(feature = "bpe")]
pub struct Gpt2TokenCounter {
    bpe: tiktoken_rs::CoreBPE,
}

#[cfg(feature = "bpe")]
impl Gpt2TokenCounter {
    pub fn new() -> Self {
        Self {
            bpe: tiktoken_rs::r50k_base().expect("bundled r50k vocabulary loads"),
        }
    }
}

#[cfg(feature = "bpe")]
impl Default for Gpt2TokenCounter {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(feature = "bpe")]
impl TokenCounter for Gpt2TokenCounter {
    fn count_tokens(&self, text: &str) -> usize {
        self.bpe.encode_ordinary(text).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorMode {
    #[default]
    Heuristic,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPolicy {
    /// Ceiling on prompt plus completion tokens per request.
    pub token_limit: usize,
    pub max_tokens_cap: usize,
    pub chars_per_token: f64,
    pub safety_margin: usize,
    pub estimator_mode: EstimatorMode,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self {
            token_limit: 2049,
            max_tokens_cap: 350,
            chars_per_token: 4.0,
            safety_margin: 0,
            estimator_mode: EstimatorMode::Heuristic,
        }
    }
}

impl BudgetPolicy {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.token_limit == 0 {
            return Err(PromptError::InvalidPolicy("token_limit must be positive".into()));
        }
        if self.max_tokens_cap == 0 || self.max_tokens_cap > self.token_limit {
            return Err(PromptError::InvalidPolicy(
                "max_tokens_cap must be in 1..=token_limit".into(),
            ));
        }
        if !(self.chars_per_token.is_finite() && self.chars_per_token > 0.0) {
            return Err(PromptError::InvalidPolicy("chars_per_token must be positive".into()));
        }
        Ok(())
    }
}

/// ceil(code points / chars_per_token).
pub fn heuristic_tokens(text: &str, chars_per_token: f64) -> usize {
    let chars = text.chars().count();
    if chars == 0 {
        return 0;
    }
    (chars as f64 / chars_per_token).ceil() as usize
}

/// Estimates prompt size under a [`BudgetPolicy`], using an injected
/// [`TokenCounter`] in exact mode.
#[derive(Clone)]
pub struct TokenEstimator {
    policy: BudgetPolicy,
    counter: Option<Arc<dyn TokenCounter>>,
}

impl fmt::Debug for TokenEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenEstimator")
            .field("policy", &self.policy)
            .field("counter", &self.counter.is_some())
            .finish()
    }
}

impl TokenEstimator {
    pub fn new(policy: BudgetPolicy) -> Self {
        Self { policy, counter: None }
    }

    pub fn with_counter(policy: BudgetPolicy, counter: Arc<dyn TokenCounter>) -> Self {
        Self {
            policy,
            counter: Some(counter),
        }
    }

    pub fn policy(&self) -> &BudgetPolicy {
        &self.policy
    }

    pub fn estimate(&self, text: &str) -> Result<usize, PromptError> {
        estimate_tokens(text, &self.policy, self.counter.as_deref())
    }
}

pub fn estimate_tokens(
    text: &str,
    policy: &BudgetPolicy,
    counter: Option<&dyn TokenCounter>,
) -> Result<usize, PromptError> {
    match policy.estimator_mode {
        EstimatorMode::Heuristic => Ok(heuristic_tokens(text, policy.chars_per_token)),
        EstimatorMode::Exact => counter
            .map(|c| c.count_tokens(text))
            .ok_or(PromptError::NoTokenizer),
    }
}

/// Completion budget for a prompt: `min(cap, limit - margin - prompt)`.
/// Fails when nothing would be left for the completion.
pub fn compute_max_tokens(prompt_tokens: usize, policy: &BudgetPolicy) -> Result<usize, PromptError> {
    let available = policy
        .token_limit
        .checked_sub(policy.safety_margin)
        .and_then(|room| room.checked_sub(prompt_tokens))
        .unwrap_or(0);
    if available == 0 {
        return Err(PromptError::OversizedPrompt {
            prompt_tokens,
            limit: policy.token_limit,
        });
    }
    Ok(policy.max_tokens_cap.min(available))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn power_example() -> FewShotExample {
        let text = "The averaged power extracted during one cycle increased by 22% from 48.4 MW to 59.0 MW (Fig. 10e).";
        FewShotExample::new(
            text,
            vec![
                QuantityBlock::quantity("one").unwrap().with_entity("cycle"),
                QuantityBlock::quantity("22%")
                    .unwrap()
                    .with_unit("%")
                    .with_property("averaged power extracted")
                    .with_entity("one cycle"),
                QuantityBlock::quantity("48.4 MW to 59.0 MW")
                    .unwrap()
                    .with_unit("MW")
                    .with_property("averaged power extracted")
                    .with_entity("one cycle"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn serializes_power_example() {
        let expected = "Text:\nThe averaged power extracted during one cycle increased by 22% from 48.4 MW to 59.0 MW (Fig. 10e).\n\n\
Data:\n\
Quantity: one\nEntity: cycle\n\n\
Quantity: 22%\nUnit: %\nProperty: averaged power extracted\nEntity: one cycle\n\n\
Quantity: 48.4 MW to 59.0 MW\nUnit: MW\nProperty: averaged power extracted\nEntity: one cycle\n\
<|endoftext|>\n";
        assert_eq!(serialize_example(&power_example()), expected);
    }

    #[test]
    fn omits_absent_labels() {
        let block = QuantityBlock::new("50 µg", Some("µg"), None, Some("cell lysate")).unwrap();
        assert_eq!(block.to_string(), "Quantity: 50 µg\nUnit: µg\nEntity: cell lysate");
        let block = QuantityBlock::quantity("two").unwrap().with_entity("hiPSC lines");
        assert_eq!(block.to_string(), "Quantity: two\nEntity: hiPSC lines");
    }

    #[test]
    fn rejects_invalid_blocks() {
        assert!(QuantityBlock::quantity("  ").is_err());
        assert!(QuantityBlock::new("1", Some(""), None, None).is_err());
        assert!(QuantityBlock::quantity("1\n2").is_err());
        assert!(FewShotExample::new("x", vec![]).is_err());
    }

    #[test]
    fn build_prompt_structure() {
        let target = Paragraph::new("T", "X.");
        let prompt = build_prompt(&[power_example()], &target).unwrap();
        assert_eq!(prompt.matches(END_OF_TEXT).count(), 1);
        assert!(prompt.ends_with("Text:\nX.\n\nData:\n"));
        assert_eq!(build_prompt(&[], &target), Err(PromptError::NoExamples));
    }

    #[test]
    fn example_order_changes_prompt() {
        let examples = builtin_base_prompt();
        let target = Paragraph::new("T", "X.");
        let mut swapped = examples.clone();
        swapped.swap(0, 1);
        assert_ne!(
            build_prompt(&examples, &target).unwrap(),
            build_prompt(&swapped, &target).unwrap()
        );
    }

    #[test]
    fn builtin_prompt_roundtrips_bytes() {
        let examples = builtin_base_prompt();
        assert_eq!(examples.len(), 9);
        assert_eq!(examples.iter().map(|e| e.blocks.len()).sum::<usize>(), 19);
        let rendered: String = examples.iter().map(serialize_example).collect();
        assert_eq!(rendered, BUILTIN_BASE_PROMPT);
        assert!(rendered.starts_with("Text:\nThe particles also significantly toughened"));
    }

    #[test]
    fn loader_rejects_malformed_fixtures() {
        assert!(matches!(
            parse_base_prompt("Text:\nabc\n\nQuantity: 1\n<|endoftext|>\n"),
            Err(PromptError::Fixture { index: 0, .. })
        ));
        assert!(matches!(
            parse_base_prompt("Text:\nabc\n\nData:\nQuantity: 1\n"),
            Err(PromptError::Fixture { .. })
        ));
        assert!(matches!(
            parse_base_prompt("Text:\nabc\n\nData:\nBogus: 1\n<|endoftext|>\n"),
            Err(PromptError::Fixture { .. })
        ));
        assert_eq!(parse_base_prompt(""), Err(PromptError::NoExamples));
    }

    #[test]
    fn heuristic_estimates() {
        let policy = BudgetPolicy::default();
        assert_eq!(estimate_tokens("abcdefgh", &policy, None).unwrap(), 2);
        assert_eq!(estimate_tokens("", &policy, None).unwrap(), 0);
        assert_eq!(estimate_tokens("abcdefghi", &policy, None).unwrap(), 3);
        // code points, not bytes
        assert_eq!(estimate_tokens("µµµµ", &policy, None).unwrap(), 1);
    }

    #[test]
    fn exact_mode_needs_a_counter() {
        let policy = BudgetPolicy {
            estimator_mode: EstimatorMode::Exact,
            ..BudgetPolicy::default()
        };
        assert_eq!(estimate_tokens("abc", &policy, None), Err(PromptError::NoTokenizer));
        let words = |s: &str| s.split_whitespace().count();
        let estimator = TokenEstimator::with_counter(policy, Arc::new(words));
        assert_eq!(estimator.estimate("a b c").unwrap(), 3);
    }

    #[test]
    fn max_tokens_examples() {
        let policy = BudgetPolicy::default();
        assert_eq!(compute_max_tokens(1500, &policy).unwrap(), 350);
        assert_eq!(compute_max_tokens(1800, &policy).unwrap(), 249);
        assert_eq!(compute_max_tokens(2048, &policy).unwrap(), 1);
        assert_eq!(
            compute_max_tokens(2049, &policy),
            Err(PromptError::OversizedPrompt {
                prompt_tokens: 2049,
                limit: 2049
            })
        );
        let margin = BudgetPolicy {
            safety_margin: 100,
            ..BudgetPolicy::default()
        };
        assert_eq!(compute_max_tokens(1800, &margin).unwrap(), 149);
        assert!(compute_max_tokens(1949, &margin).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(BudgetPolicy::default().validate().is_ok());
        let bad = BudgetPolicy {
            max_tokens_cap: 3000,
            ..BudgetPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = BudgetPolicy {
            chars_per_token: 0.0,
            ..BudgetPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}

//! Turns raw completion text back into [`QuantityBlock`]s.
//!
//! The parser is total: malformed output never fails, it only produces
//! warnings. A `Quantity:` line or a blank line ends the current block, and
//! parsing stops at the first end-of-text marker or `Text:` line, since
//! anything after that is the model inventing further examples.

use std::fmt;

use crate::promptkit::QuantityBlock;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FinishReason {
    Stop,
    Length,
    Other(String),
}

impl FinishReason {
    pub fn parse(s: &str) -> Self {
        match s {
            "stop" => FinishReason::Stop,
            "length" => FinishReason::Length,
            other => FinishReason::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            FinishReason::Stop => "stop",
            FinishReason::Length => "length",
            FinishReason::Other(s) => s,
        }
    }
}

impl fmt::Display for FinishReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Warning {
    UnknownLabel(String),
    /// The completion hit its token budget, so the last block may be cut short.
    TruncatedFinalBlock,
    EmptyOutput,
    StrayText(String),
    DuplicateLabel(String),
    EmptyValue(String),
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::UnknownLabel(line) => write!(f, "unknown label: {line}"),
            Warning::TruncatedFinalBlock => f.write_str("final block may be truncated"),
            Warning::EmptyOutput => f.write_str("empty output"),
            Warning::StrayText(line) => write!(f, "stray text: {line}"),
            Warning::DuplicateLabel(line) => write!(f, "duplicate label: {line}"),
            Warning::EmptyValue(line) => write!(f, "empty value: {line}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParseOutcome {
    pub blocks: Vec<QuantityBlock>,
    pub warnings: Vec<Warning>,
    pub truncated: bool,
}

impl ParseOutcome {
    /// True when the final block may be incomplete.
    pub fn final_block_suspect(&self) -> bool {
        self.warnings.contains(&Warning::TruncatedFinalBlock)
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Quantity,
    Unit,
    Property,
    Entity,
}

fn slot_for(label: &str) -> Option<Slot> {
    match label {
        "Quantity" => Some(Slot::Quantity),
        "Unit" => Some(Slot::Unit),
        "Property" | "MeasuredProperty" => Some(Slot::Property),
        "Entity" | "MeasuredEntity" => Some(Slot::Entity),
        _ => None,
    }
}

const STOP_MARKERS: [&str; 2] = ["<|endoftext|>", "</endoftext|>"];

pub fn parse_completion(text: &str, finish_reason: &FinishReason) -> ParseOutcome {
    let cut = STOP_MARKERS
        .iter()
        .filter_map(|m| text.find(m))
        .min()
        .unwrap_or(text.len());
    let text = &text[..cut];

    let mut outcome = ParseOutcome {
        truncated: *finish_reason == FinishReason::Length,
        ..ParseOutcome::default()
    };
    let mut current: Option<QuantityBlock> = None;
    let mut content_lines = 0usize;

    for raw_line in text.split('\n') {
        let line = raw_line.trim();
        if line.is_empty() {
            outcome.blocks.extend(current.take());
            continue;
        }
        if line.starts_with("Text:") {
            break;
        }
        if line == "Data:" {
            outcome.blocks.extend(current.take());
            continue;
        }
        content_lines += 1;

        let Some((label, value)) = line.split_once(':') else {
            outcome.warnings.push(Warning::StrayText(line.to_string()));
            continue;
        };
        let value = value.trim();
        let Some(slot) = slot_for(label.trim()) else {
            outcome.warnings.push(Warning::UnknownLabel(line.to_string()));
            continue;
        };

        if let Slot::Quantity = slot {
            outcome.blocks.extend(current.take());
            if value.is_empty() {
                outcome.warnings.push(Warning::EmptyValue(line.to_string()));
            } else {
                current = Some(QuantityBlock {
                    quantity: value.to_string(),
                    unit: None,
                    property: None,
                    entity: None,
                });
            }
            continue;
        }

        let Some(block) = current.as_mut() else {
            outcome.warnings.push(Warning::StrayText(line.to_string()));
            continue;
        };
        if value.is_empty() {
            outcome.warnings.push(Warning::EmptyValue(line.to_string()));
            continue;
        }
        let field = match slot {
            Slot::Unit => &mut block.unit,
            Slot::Property => &mut block.property,
            Slot::Entity => &mut block.entity,
            Slot::Quantity => unreachable!(),
        };
        if field.is_some() {
            outcome.warnings.push(Warning::DuplicateLabel(line.to_string()));
        } else {
            *field = Some(value.to_string());
        }
    }
    outcome.blocks.extend(current.take());

    if content_lines == 0 {
        outcome.warnings.push(Warning::EmptyOutput);
    }
    if outcome.truncated && !outcome.blocks.is_empty() {
        outcome.warnings.push(Warning::TruncatedFinalBlock);
    }
    outcome
}

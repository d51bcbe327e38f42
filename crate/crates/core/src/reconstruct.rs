//! Rebuilds stand-off annotations from parsed blocks.
//!
//! Spans are placed at the first occurrence of the model's string in the
//! paragraph. Strings that cannot be placed are dropped and reported; the
//! emitted annotation text is always the paragraph slice, never the model's
//! spelling of it.

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Annotation, AnnotationType, Other, Paragraph};
use crate::promptkit::QuantityBlock;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReconstructError {
    #[error("cannot locate an empty string")]
    EmptyNeedle,
}

/// Removes exact duplicate blocks after the first occurrence, keeping order.
pub fn dedup_blocks(blocks: &[QuantityBlock]) -> (Vec<QuantityBlock>, usize) {
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(blocks.len());
    for block in blocks {
        let key = normalized(block);
        if seen.insert(key) {
            kept.push(block.clone());
        }
    }
    let removed = blocks.len() - kept.len();
    (kept, removed)
}

fn normalized(block: &QuantityBlock) -> [Option<String>; 4] {
    let trim = |s: &Option<String>| s.as_deref().map(|v| v.trim().to_string());
    [
        Some(block.quantity.trim().to_string()),
        trim(&block.unit),
        trim(&block.property),
        trim(&block.entity),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum MatchMode {
    Exact,
    CaseInsensitive,
    WhitespaceNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanResult {
    Found {
        start: usize,
        end: usize,
        occurrences: usize,
        mode: MatchMode,
    },
    NotFound,
}

/// Single-char lowercase fold; chars whose lowercase form is longer than one
/// char are left alone so positions stay aligned.
fn fold(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Every start position (overlapping) of `needle` in `haystack`, as char
/// indices.
fn match_starts(haystack: &[char], needle: &[char]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, window)| *window == needle)
        .map(|(i, _)| i)
        .collect()
}

/// Collapses whitespace runs to one space. Returns the folded chars and, for
/// each, the char index in the original text where it begins.
fn collapse_whitespace(chars: &[char]) -> (Vec<char>, Vec<usize>) {
    let mut out = Vec::with_capacity(chars.len());
    let mut origin = Vec::with_capacity(chars.len());
    let mut in_run = false;
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !in_run {
                out.push(' ');
                origin.push(i);
            }
            in_run = true;
        } else {
            out.push(fold(c));
            origin.push(i);
            in_run = false;
        }
    }
    (out, origin)
}

/// Finds the first occurrence of `needle` in the paragraph, trying exact,
/// then case-insensitive, then whitespace-normalized case-insensitive
/// matching. Offsets are code points; `occurrences` counts overlapping
/// matches under the mode that succeeded.
pub fn locate_span(paragraph: &Paragraph, needle: &str) -> Result<SpanResult, ReconstructError> {
    let needle = needle.trim();
    if needle.is_empty() {
        return Err(ReconstructError::EmptyNeedle);
    }
    let hay: Vec<char> = paragraph.text.chars().collect();
    let pin: Vec<char> = needle.chars().collect();

    let exact = match_starts(&hay, &pin);
    if let Some(&start) = exact.first() {
        return Ok(SpanResult::Found {
            start,
            end: start + pin.len(),
            occurrences: exact.len(),
            mode: MatchMode::Exact,
        });
    }

    let hay_folded: Vec<char> = hay.iter().copied().map(fold).collect();
    let pin_folded: Vec<char> = pin.iter().copied().map(fold).collect();
    let insensitive = match_starts(&hay_folded, &pin_folded);
    if let Some(&start) = insensitive.first() {
        return Ok(SpanResult::Found {
            start,
            end: start + pin.len(),
            occurrences: insensitive.len(),
            mode: MatchMode::CaseInsensitive,
        });
    }

    let (hay_norm, origin) = collapse_whitespace(&hay);
    let (pin_norm, _) = collapse_whitespace(&pin);
    let normalized = match_starts(&hay_norm, &pin_norm);
    if let Some(&first) = normalized.first() {
        // The needle is trimmed, so both ends of a match are non-whitespace.
        let start = origin[first];
        let end = origin[first + pin_norm.len() - 1] + 1;
        return Ok(SpanResult::Found {
            start,
            end,
            occurrences: normalized.len(),
            mode: MatchMode::WhitespaceNormalized,
        });
    }
    Ok(SpanResult::NotFound)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpanLabel {
    Quantity,
    Unit,
    MeasuredProperty,
    MeasuredEntity,
}

impl fmt::Display for SpanLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DropReason {
    /// The string does not occur in the paragraph.
    NotFound,
    EmptyValue,
    /// The block's quantity could not be placed, so its attributes have
    /// nothing to attach to.
    QuantityDropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedSpan {
    pub doc_id: String,
    pub annot_set: u32,
    pub label: SpanLabel,
    pub text: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AmbiguousSpan {
    pub doc_id: String,
    pub annot_id: u32,
    pub label: SpanLabel,
    pub text: String,
    pub occurrence_count: usize,
    pub mode: MatchMode,
}

/// An entity that fell back to `HasQuantity` because its block's property
/// could not be placed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelationFallback {
    pub doc_id: String,
    pub annot_set: u32,
    pub entity_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReconstructionReport {
    pub annotations: Vec<Annotation>,
    pub dropped: Vec<DroppedSpan>,
    pub ambiguous: Vec<AmbiguousSpan>,
    pub relation_fallbacks: Vec<RelationFallback>,
    pub dedup_removed: usize,
}

struct Builder<'a> {
    paragraph: &'a Paragraph,
    report: ReconstructionReport,
    next_id: u32,
}

impl Builder<'_> {
    fn drop_span(&mut self, annot_set: u32, label: SpanLabel, text: &str, reason: DropReason) {
        self.report.dropped.push(DroppedSpan {
            doc_id: self.paragraph.doc_id.clone(),
            annot_set,
            label,
            text: text.to_string(),
            reason,
        });
    }

    /// Places `value` and emits an annotation for it, or records the drop.
    fn emit(
        &mut self,
        annot_set: u32,
        label: SpanLabel,
        annot_type: AnnotationType,
        value: &str,
        other: Other,
    ) -> Option<u32> {
        if value.trim().is_empty() {
            self.drop_span(annot_set, label, value, DropReason::EmptyValue);
            return None;
        }
        let located = locate_span(self.paragraph, value).expect("needle checked non-empty");
        let SpanResult::Found {
            start,
            end,
            occurrences,
            mode,
        } = located
        else {
            self.drop_span(annot_set, label, value, DropReason::NotFound);
            return None;
        };
        let annot_id = self.next_id;
        self.next_id += 1;
        let text = self
            .paragraph
            .slice(start, end)
            .expect("located span lies inside the paragraph")
            .to_string();
        if occurrences >= 2 {
            self.report.ambiguous.push(AmbiguousSpan {
                doc_id: self.paragraph.doc_id.clone(),
                annot_id,
                label,
                text: text.clone(),
                occurrence_count: occurrences,
                mode,
            });
        }
        self.report.annotations.push(Annotation {
            doc_id: self.paragraph.doc_id.clone(),
            annot_set,
            annot_type,
            start_offset: start,
            end_offset: end,
            annot_id,
            text,
            other,
        });
        Some(annot_id)
    }
}

/// Converts already-deduplicated blocks into annotations for one paragraph.
///
/// Per block: the quantity is placed first (if it cannot be, the whole
/// block is dropped), then the property and the entity. The unit is stored
/// on the quantity. A property points at its quantity; an entity points at
/// the property when one was emitted, otherwise at the quantity.
pub fn reconstruct(paragraph: &Paragraph, blocks: &[QuantityBlock]) -> ReconstructionReport {
    let mut builder = Builder {
        paragraph,
        report: ReconstructionReport::default(),
        next_id: 1,
    };

    for (index, block) in blocks.iter().enumerate() {
        let annot_set = index as u32 + 1;
        let unit = block
            .unit
            .as_deref()
            .map(str::trim)
            .filter(|u| !u.is_empty());
        let quantity_other = Other {
            unit: unit.map(str::to_string),
            ..Other::default()
        };
        let Some(quantity_id) = builder.emit(
            annot_set,
            SpanLabel::Quantity,
            AnnotationType::Quantity,
            &block.quantity,
            quantity_other,
        ) else {
            let dependents = [
                (SpanLabel::Unit, &block.unit),
                (SpanLabel::MeasuredProperty, &block.property),
                (SpanLabel::MeasuredEntity, &block.entity),
            ];
            for (label, value) in dependents {
                if let Some(value) = value {
                    builder.drop_span(annot_set, label, value, DropReason::QuantityDropped);
                }
            }
            continue;
        };
        if let Some(unit) = &block.unit {
            if unit.trim().is_empty() {
                builder.drop_span(annot_set, SpanLabel::Unit, unit, DropReason::EmptyValue);
            }
        }

        let property_id = block.property.as_deref().and_then(|property| {
            builder.emit(
                annot_set,
                SpanLabel::MeasuredProperty,
                AnnotationType::MeasuredProperty,
                property,
                Other {
                    has_quantity: Some(quantity_id),
                    ..Other::default()
                },
            )
        });

        if let Some(entity) = block.entity.as_deref() {
            let other = match property_id {
                Some(property_id) => Other {
                    has_property: Some(property_id),
                    ..Other::default()
                },
                None => Other {
                    has_quantity: Some(quantity_id),
                    ..Other::default()
                },
            };
            let entity_id = builder.emit(
                annot_set,
                SpanLabel::MeasuredEntity,
                AnnotationType::MeasuredEntity,
                entity,
                other,
            );
            if let (Some(entity_id), Some(_), None) = (entity_id, &block.property, property_id) {
                builder.report.relation_fallbacks.push(RelationFallback {
                    doc_id: paragraph.doc_id.clone(),
                    annot_set,
                    entity_id,
                });
            }
        }
    }
    builder.report
}

/// Deduplicates then reconstructs, recording the dedup count in the report.
pub fn reconstruct_deduped(paragraph: &Paragraph, blocks: &[QuantityBlock]) -> ReconstructionReport {
    let (unique, removed) = dedup_blocks(blocks);
    let mut report = reconstruct(paragraph, &unique);
    report.dedup_removed = removed;
    report
}

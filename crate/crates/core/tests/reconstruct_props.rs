use proptest::prelude::*;

use measeval_core::corpus::{validate_document, AnnotationType, Paragraph};
use measeval_core::promptkit::QuantityBlock;
use measeval_core::reconstruct::{
    dedup_blocks, locate_span, reconstruct, reconstruct_deduped, MatchMode, SpanLabel, SpanResult,
};

fn first_match(hay: &[char], needle: &[char]) -> Option<usize> {
    if needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

fn count_matches(hay: &[char], needle: &[char]) -> usize {
    if needle.len() > hay.len() {
        return 0;
    }
    (0..=hay.len() - needle.len()).filter(|&i| hay[i..i + needle.len()] == *needle).count()
}

fn paragraph_text() -> impl Strategy<Value = String> {
    "[abAB c%µ1-]{1,60}"
}

fn block() -> impl Strategy<Value = QuantityBlock> {
    let value = "[abAB c%1]{1,6}";
    (
        value,
        prop::option::of(value),
        prop::option::of(value),
        prop::option::of(value),
    )
        .prop_filter_map("blank quantity", |(q, u, p, e)| {
            QuantityBlock::new(&q, u.as_deref(), p.as_deref(), e.as_deref()).ok()
        })
}

proptest! {
    #[test]
    fn exact_lookup_matches_brute_force(text in paragraph_text(), start in 0usize..60, len in 1usize..8) {
        let hay: Vec<char> = text.chars().collect();
        let start = start % hay.len();
        let end = (start + len).min(hay.len());
        let needle: String = hay[start..end].iter().collect();
        prop_assume!(!needle.trim().is_empty() && needle.trim() == needle);
        let pin: Vec<char> = needle.chars().collect();
        let paragraph = Paragraph::new("d", text.clone());
        let expected = first_match(&hay, &pin).unwrap();
        let found = locate_span(&paragraph, &needle).unwrap();
        prop_assert_eq!(found, SpanResult::Found {
            start: expected,
            end: expected + pin.len(),
            occurrences: count_matches(&hay, &pin),
            mode: MatchMode::Exact,
        });
    }

    #[test]
    fn case_flipped_lookup_finds_first_folded_match(text in "[abAB c1]{1,60}", start in 0usize..60, len in 1usize..8) {
        let hay: Vec<char> = text.chars().collect();
        let start = start % hay.len();
        let end = (start + len).min(hay.len());
        let original: String = hay[start..end].iter().collect();
        prop_assume!(!original.trim().is_empty() && original.trim() == original);
        let flipped: String = original
            .chars()
            .map(|c| if c.is_ascii_lowercase() { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
            .collect();
        let pin: Vec<char> = flipped.chars().collect();
        let paragraph = Paragraph::new("d", text.clone());
        let found = locate_span(&paragraph, &flipped).unwrap();
        let lower_hay: Vec<char> = hay.iter().map(|c| c.to_ascii_lowercase()).collect();
        let lower_pin: Vec<char> = pin.iter().map(|c| c.to_ascii_lowercase()).collect();
        let expected = match first_match(&hay, &pin) {
            Some(i) => (i, MatchMode::Exact),
            None => (first_match(&lower_hay, &lower_pin).unwrap(), MatchMode::CaseInsensitive),
        };
        let SpanResult::Found { start, end, mode, .. } = found else {
            return Err(TestCaseError::fail("case-flipped needle not found"));
        };
        prop_assert_eq!((start, mode), expected);
        prop_assert_eq!(end - start, pin.len());
    }

    #[test]
    fn dedup_is_idempotent_and_counts_removals(blocks in prop::collection::vec(block(), 0..12)) {
        let mut doubled = blocks.clone();
        doubled.extend(blocks.iter().cloned());
        let (unique, removed) = dedup_blocks(&doubled);
        prop_assert_eq!(unique.len() + removed, doubled.len());
        let (again, removed_again) = dedup_blocks(&unique);
        prop_assert_eq!(&again, &unique);
        prop_assert_eq!(removed_again, 0);
        let (from_original, _) = dedup_blocks(&blocks);
        prop_assert_eq!(unique, from_original);
    }

    #[test]
    fn every_value_is_emitted_or_dropped(text in paragraph_text(), blocks in prop::collection::vec(block(), 0..8)) {
        let paragraph = Paragraph::new("d", text);
        let report = reconstruct(&paragraph, &blocks);
        let spans: usize = blocks
            .iter()
            .map(|b| 1 + usize::from(b.property.is_some()) + usize::from(b.entity.is_some()))
            .sum();
        let dropped_spans = report.dropped.iter().filter(|d| d.label != SpanLabel::Unit).count();
        prop_assert_eq!(report.annotations.len() + dropped_spans, spans);

        let units = blocks.iter().filter(|b| b.unit.is_some()).count();
        let attached = report.annotations.iter().filter(|a| a.other.unit.is_some()).count();
        let dropped_units = report.dropped.iter().filter(|d| d.label == SpanLabel::Unit).count();
        prop_assert_eq!(attached + dropped_units, units);

        prop_assert!(validate_document(Some(&paragraph), &report.annotations).is_empty());
        for a in &report.annotations {
            prop_assert_eq!(paragraph.slice(a.start_offset, a.end_offset), Some(a.text.as_str()));
        }
    }
}

#[test]
fn whitespace_variants_map_back_to_original_offsets() {
    let paragraph = Paragraph::new("d", "efficiency reached 18.2  % under standard test\nconditions");
    let found = locate_span(&paragraph, "18.2 %").unwrap();
    assert_eq!(
        found,
        SpanResult::Found { start: 19, end: 26, occurrences: 1, mode: MatchMode::WhitespaceNormalized }
    );
    let found = locate_span(&paragraph, "Standard Test Conditions").unwrap();
    assert!(matches!(found, SpanResult::Found { start: 33, end: 57, mode: MatchMode::WhitespaceNormalized, .. }));
}

#[test]
fn repetition_loop_yields_one_annotation_set() {
    let paragraph = Paragraph::new(
        "S0019103512003533-5211",
        "Simulations R1-R18 assumed a 10 keV electron energy flux precipitating into the auroral oval.",
    );
    let block = QuantityBlock::quantity("10 keV electron energy flux")
        .unwrap()
        .with_unit("keV")
        .with_entity("simulations R1-R18");
    let report = reconstruct_deduped(&paragraph, &vec![block; 12]);
    assert_eq!(report.dedup_removed, 11);
    assert_eq!(report.annotations.len(), 2);
    assert!(report.annotations.iter().all(|a| a.annot_set == 1));
    let entity = report
        .annotations
        .iter()
        .find(|a| a.annot_type == AnnotationType::MeasuredEntity)
        .unwrap();
    assert_eq!(entity.text, "Simulations R1-R18");
}

use proptest::prelude::*;

use measeval_core::corpus::{Annotation, AnnotationType, Corpus, Other, Paragraph};
use measeval_core::scorer::{overlap_score, score_corpus, ScoreClass, Span};

fn quantity(doc: &str, id: u32, start: usize, end: usize) -> Annotation {
    Annotation {
        doc_id: doc.into(),
        annot_set: id,
        annot_type: AnnotationType::Quantity,
        start_offset: start,
        end_offset: end,
        annot_id: id,
        text: "x".repeat(end - start),
        other: Other::default(),
    }
}

fn corpus_of(rows: Vec<Annotation>) -> Corpus {
    let mut corpus = Corpus::new();
    corpus.insert_paragraph(Paragraph::new("D", "x".repeat(400))).unwrap();
    corpus.add_annotations(rows);
    corpus
}

/// Non-overlapping spans laid out left to right.
fn disjoint_spans(max: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..6, 1usize..12), 0..max).prop_map(|parts| {
        let mut cursor = 0;
        parts
            .into_iter()
            .map(|(gap, len)| {
                let start = cursor + gap;
                cursor = start + len;
                (start, cursor)
            })
            .collect()
    })
}

fn rows(spans: &[(usize, usize)]) -> Vec<Annotation> {
    spans
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| quantity("D", i as u32 + 1, s, e))
        .collect()
}

proptest! {
    #[test]
    fn overlap_is_symmetric_and_bounded(a in 0usize..50, la in 1usize..20, b in 0usize..50, lb in 1usize..20) {
        let x = Span::new(a, a + la);
        let y = Span::new(b, b + lb);
        let s = overlap_score(x, y).unwrap();
        prop_assert_eq!(s, overlap_score(y, x).unwrap());
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s == 1.0, x == y);
    }

    #[test]
    fn growing_a_contained_prediction_raises_the_score(start in 0usize..30, len in 2usize..20, inner in 1usize..19) {
        let gold = Span::new(start, start + len);
        let inner = inner.min(len - 1);
        let smaller = overlap_score(gold, Span::new(start, start + inner)).unwrap();
        let larger = overlap_score(gold, Span::new(start, start + inner + 1)).unwrap();
        prop_assert!(larger > smaller);
    }

    #[test]
    fn swapping_gold_and_prediction_swaps_precision_and_recall(
        gold in disjoint_spans(10),
        pred in disjoint_spans(10),
    ) {
        let forward = score_corpus(&corpus_of(rows(&gold)), &corpus_of(rows(&pred))).unwrap();
        let backward = score_corpus(&corpus_of(rows(&pred)), &corpus_of(rows(&gold))).unwrap();
        let f = forward.overall;
        let b = backward.overall;
        prop_assert!((f.precision - b.recall).abs() < 1e-12);
        prop_assert!((f.recall - b.precision).abs() < 1e-12);
        prop_assert!((f.f_measure - b.f_measure).abs() < 1e-12);
    }

    #[test]
    fn gold_against_itself_is_perfect(gold in disjoint_spans(12)) {
        prop_assume!(!gold.is_empty());
        let corpus = corpus_of(rows(&gold));
        let report = score_corpus(&corpus, &corpus).unwrap();
        prop_assert_eq!(report.overall.f_measure, 1.0);
        prop_assert_eq!(report.overall.n_gold, gold.len());
    }
}

#[test]
fn partial_overlap_scores_two_thirds() {
    // "48.4 MW" against a prediction of "48.4".
    let s = overlap_score(Span::new(67, 74), Span::new(67, 71)).unwrap();
    assert!((s - 8.0 / 11.0).abs() < 1e-12);
    let s = overlap_score(Span::new(0, 4), Span::new(0, 2)).unwrap();
    assert!((s - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn one_of_two_found_gives_perfect_precision_half_recall() {
    let gold = corpus_of(vec![quantity("D", 1, 59, 62), quantity("D", 2, 67, 74)]);
    let pred = corpus_of(vec![quantity("D", 1, 59, 62)]);
    let report = score_corpus(&gold, &pred).unwrap();
    let q = report.per_class[&ScoreClass::Quantity];
    assert_eq!((q.precision, q.recall), (1.0, 0.5));
    assert!((q.f_measure - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn units_and_relations_follow_span_matches() {
    let mut gold_q = quantity("D", 1, 59, 62);
    gold_q.other.unit = Some("%".into());
    let entity = Annotation {
        annot_type: AnnotationType::MeasuredEntity,
        annot_id: 2,
        annot_set: 1,
        start_offset: 13,
        end_offset: 18,
        text: "power".into(),
        other: Other { has_quantity: Some(1), ..Other::default() },
        ..gold_q.clone()
    };
    let gold = corpus_of(vec![gold_q.clone(), entity.clone()]);

    let mut wrong_unit = gold_q.clone();
    wrong_unit.other.unit = Some("percent".into());
    let pred = corpus_of(vec![wrong_unit, entity.clone()]);
    let report = score_corpus(&gold, &pred).unwrap();
    assert_eq!(report.per_class[&ScoreClass::Unit].f_measure, 0.0);
    assert_eq!(report.per_class[&ScoreClass::HasQuantity].f_measure, 1.0);

    // Relation credit is capped by the weaker of its two span matches.
    let mut short_entity = entity;
    short_entity.start_offset = 15;
    short_entity.text = "wer".into();
    let pred = corpus_of(vec![gold_q, short_entity]);
    let report = score_corpus(&gold, &pred).unwrap();
    let rel = report.per_class[&ScoreClass::HasQuantity];
    assert!((rel.matched_score_sum - 0.75).abs() < 1e-12);
}

#[test]
fn unknown_predicted_documents_are_rejected() {
    let gold = corpus_of(vec![quantity("D", 1, 0, 3)]);
    let mut pred = Corpus::new();
    pred.add_annotations([quantity("E", 1, 0, 3)]);
    assert!(score_corpus(&gold, &pred).is_err());
}

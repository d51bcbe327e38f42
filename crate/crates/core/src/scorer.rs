//! Overlap-based scoring of predicted annotations against gold.
//!
//! Span classes (one per annotation type) are matched one-to-one by greedy
//! descending overlap. `Unit` and the relation classes are derived from the
//! span matches: a unit counts when its quantity pair matched and the unit
//! strings agree, and a relation counts when both of its endpoints were
//! matched to the endpoints of a gold relation of the same kind.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::corpus::{Annotation, AnnotationType, Corpus, RelationKind};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("invalid span [{start}, {end})")]
    InvalidSpan { start: usize, end: usize },
    #[error("annotations from several documents passed to match_document: {0:?}")]
    MixedDocuments(Vec<String>),
    #[error("predicted documents missing from gold: {0:?}")]
    UnknownDocuments(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    fn of(a: &Annotation) -> Self {
        Self::new(a.start_offset, a.end_offset)
    }
}

/// Character-overlap F1: `2 * |gold ∩ pred| / (|gold| + |pred|)`.
pub fn overlap_score(gold: Span, pred: Span) -> Result<f64, ScoreError> {
    for span in [gold, pred] {
        if span.start >= span.end {
            return Err(ScoreError::InvalidSpan {
                start: span.start,
                end: span.end,
            });
        }
    }
    Ok(overlap_unchecked(gold, pred))
}

fn overlap_unchecked(gold: Span, pred: Span) -> f64 {
    let inter = gold.end.min(pred.end).saturating_sub(gold.start.max(pred.start));
    let total = (gold.end - gold.start) + (pred.end - pred.start);
    if total == 0 {
        return 0.0;
    }
    2.0 * inter as f64 / total as f64
}

/// Scoring classes in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScoreClass {
    Quantity,
    Unit,
    MeasuredEntity,
    MeasuredProperty,
    Qualifier,
    HasQuantity,
    HasProperty,
    Qualifies,
}

impl ScoreClass {
    pub const ALL: [ScoreClass; 8] = [
        ScoreClass::Quantity,
        ScoreClass::Unit,
        ScoreClass::MeasuredEntity,
        ScoreClass::MeasuredProperty,
        ScoreClass::Qualifier,
        ScoreClass::HasQuantity,
        ScoreClass::HasProperty,
        ScoreClass::Qualifies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreClass::Quantity => "Quantity",
            ScoreClass::Unit => "Unit",
            ScoreClass::MeasuredEntity => "MeasuredEntity",
            ScoreClass::MeasuredProperty => "MeasuredProperty",
            ScoreClass::Qualifier => "Qualifier",
            ScoreClass::HasQuantity => "HasQuantity",
            ScoreClass::HasProperty => "HasProperty",
            ScoreClass::Qualifies => "Qualifies",
        }
    }

    fn from_type(t: AnnotationType) -> Self {
        match t {
            AnnotationType::Quantity => ScoreClass::Quantity,
            AnnotationType::MeasuredEntity => ScoreClass::MeasuredEntity,
            AnnotationType::MeasuredProperty => ScoreClass::MeasuredProperty,
            AnnotationType::Qualifier => ScoreClass::Qualifier,
        }
    }

    fn from_relation(kind: RelationKind) -> Self {
        match kind {
            RelationKind::HasQuantity => ScoreClass::HasQuantity,
            RelationKind::HasProperty => ScoreClass::HasProperty,
            RelationKind::Qualifies => ScoreClass::Qualifies,
        }
    }
}

impl fmt::Display for ScoreClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One matched pair or one unmatched item. For unit and relation classes
/// the ids are those of the quantity / relation source annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub doc_id: String,
    pub class: ScoreClass,
    pub gold_id: Option<u32>,
    pub pred_id: Option<u32>,
    pub score: f64,
}

/// Greedy one-to-one assignment over pairs with positive weight: highest
/// weight first, ties broken by (gold index, pred index). Returns
/// `(gold index, pred index, weight)` triples.
pub fn greedy_assignment(weights: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = weights
        .iter()
        .enumerate()
        .flat_map(|(g, row)| row.iter().enumerate().map(move |(p, &w)| (g, p, w)))
        .filter(|&(_, _, w)| w > 0.0)
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut gold_used = HashSet::new();
    let mut pred_used = HashSet::new();
    let mut chosen = Vec::new();
    for (g, p, w) in pairs {
        if !gold_used.contains(&g) && !pred_used.contains(&p) {
            gold_used.insert(g);
            pred_used.insert(p);
            chosen.push((g, p, w));
        }
    }
    chosen
}

fn single_doc<'a>(gold: &'a [Annotation], pred: &'a [Annotation]) -> Result<String, ScoreError> {
    let ids: std::collections::BTreeSet<&str> =
        gold.iter().chain(pred).map(|a| a.doc_id.as_str()).collect();
    match ids.len() {
        0 => Ok(String::new()),
        1 => Ok(ids.into_iter().next().unwrap_or_default().to_string()),
        _ => Err(ScoreError::MixedDocuments(ids.into_iter().map(str::to_string).collect())),
    }
}

fn unmatched(doc_id: &str, class: ScoreClass, gold_id: Option<u32>, pred_id: Option<u32>) -> MatchRecord {
    MatchRecord {
        doc_id: doc_id.to_string(),
        class,
        gold_id,
        pred_id,
        score: 0.0,
    }
}

/// Matches one document's predictions against its gold annotations.
pub fn match_document(gold: &[Annotation], pred: &[Annotation]) -> Result<Vec<MatchRecord>, ScoreError> {
    let doc_id = single_doc(gold, pred)?;
    for a in gold.iter().chain(pred) {
        if a.start_offset >= a.end_offset {
            return Err(ScoreError::InvalidSpan {
                start: a.start_offset,
                end: a.end_offset,
            });
        }
    }

    let mut records = Vec::new();
    // pred annot_id -> (gold annot_id, span score)
    let mut span_match: HashMap<u32, (u32, f64)> = HashMap::new();

    for annot_type in AnnotationType::ALL {
        let class = ScoreClass::from_type(annot_type);
        let mut g: Vec<&Annotation> = gold.iter().filter(|a| a.annot_type == annot_type).collect();
        let mut p: Vec<&Annotation> = pred.iter().filter(|a| a.annot_type == annot_type).collect();
        g.sort_by_key(|a| a.annot_id);
        p.sort_by_key(|a| a.annot_id);
        let weights: Vec<Vec<f64>> = g
            .iter()
            .map(|ga| p.iter().map(|pa| overlap_unchecked(Span::of(ga), Span::of(pa))).collect())
            .collect();
        let chosen = greedy_assignment(&weights);
        let mut gold_hit = vec![false; g.len()];
        let mut pred_hit = vec![false; p.len()];
        for &(gi, pi, score) in &chosen {
            gold_hit[gi] = true;
            pred_hit[pi] = true;
            span_match.insert(p[pi].annot_id, (g[gi].annot_id, score));
            records.push(MatchRecord {
                doc_id: doc_id.clone(),
                class,
                gold_id: Some(g[gi].annot_id),
                pred_id: Some(p[pi].annot_id),
                score,
            });
        }
        records.extend(
            g.iter()
                .zip(&gold_hit)
                .filter(|(_, hit)| !**hit)
                .map(|(a, _)| unmatched(&doc_id, class, Some(a.annot_id), None)),
        );
        records.extend(
            p.iter()
                .zip(&pred_hit)
                .filter(|(_, hit)| !**hit)
                .map(|(a, _)| unmatched(&doc_id, class, None, Some(a.annot_id))),
        );

        if annot_type == AnnotationType::Quantity {
            records.extend(unit_records(&doc_id, &g, &p, &chosen));
        }
    }

    records.extend(relation_records(&doc_id, gold, pred, &span_match));
    Ok(records)
}

fn unit_records(
    doc_id: &str,
    gold: &[&Annotation],
    pred: &[&Annotation],
    chosen: &[(usize, usize, f64)],
) -> Vec<MatchRecord> {
    let mut records = Vec::new();
    let mut gold_done = HashSet::new();
    let mut pred_done = HashSet::new();
    for &(gi, pi, score) in chosen {
        let (Some(gu), Some(pu)) = (&gold[gi].other.unit, &pred[pi].other.unit) else {
            continue;
        };
        if gu.trim() == pu.trim() {
            gold_done.insert(gi);
            pred_done.insert(pi);
            records.push(MatchRecord {
                doc_id: doc_id.to_string(),
                class: ScoreClass::Unit,
                gold_id: Some(gold[gi].annot_id),
                pred_id: Some(pred[pi].annot_id),
                score,
            });
        }
    }
    for (gi, a) in gold.iter().enumerate() {
        if a.other.unit.is_some() && !gold_done.contains(&gi) {
            records.push(unmatched(doc_id, ScoreClass::Unit, Some(a.annot_id), None));
        }
    }
    for (pi, a) in pred.iter().enumerate() {
        if a.other.unit.is_some() && !pred_done.contains(&pi) {
            records.push(unmatched(doc_id, ScoreClass::Unit, None, Some(a.annot_id)));
        }
    }
    records
}

fn relation_records(
    doc_id: &str,
    gold: &[Annotation],
    pred: &[Annotation],
    span_match: &HashMap<u32, (u32, f64)>,
) -> Vec<MatchRecord> {
    let mut records = Vec::new();
    let edges = |anns: &[Annotation]| {
        let mut edges: Vec<(RelationKind, u32, u32)> = anns
            .iter()
            .flat_map(|a| a.other.relations().map(move |(kind, target)| (kind, a.annot_id, target)))
            .collect();
        edges.sort();
        edges
    };
    let gold_edges = edges(gold);
    let pred_edges = edges(pred);
    let gold_index: HashMap<(RelationKind, u32, u32), usize> =
        gold_edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();

    let mut gold_hit = vec![false; gold_edges.len()];
    for &(kind, source, target) in &pred_edges {
        let class = ScoreClass::from_relation(kind);
        let matched = match (span_match.get(&source), span_match.get(&target)) {
            (Some(&(gs, s_score)), Some(&(gt, t_score))) => gold_index
                .get(&(kind, gs, gt))
                .filter(|&&i| !gold_hit[i])
                .map(|&i| (i, gs, s_score.min(t_score))),
            _ => None,
        };
        match matched {
            Some((i, gold_source, score)) => {
                gold_hit[i] = true;
                records.push(MatchRecord {
                    doc_id: doc_id.to_string(),
                    class,
                    gold_id: Some(gold_source),
                    pred_id: Some(source),
                    score,
                });
            }
            None => records.push(unmatched(doc_id, class, None, Some(source))),
        }
    }
    for (i, &(kind, source, _)) in gold_edges.iter().enumerate() {
        if !gold_hit[i] {
            records.push(unmatched(doc_id, ScoreClass::from_relation(kind), Some(source), None));
        }
    }
    records
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub n_gold: usize,
    pub n_pred: usize,
    pub matched_score_sum: f64,
}

impl ClassScore {
    /// Precision with no predictions is 1 when gold is also empty and 0
    /// otherwise; recall is defined symmetrically.
    pub fn from_counts(n_gold: usize, n_pred: usize, matched_score_sum: f64) -> Self {
        let ratio = |num: f64, den: usize, other: usize| {
            if den == 0 {
                if other == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                num / den as f64
            }
        };
        let precision = ratio(matched_score_sum, n_pred, n_gold);
        let recall = ratio(matched_score_sum, n_gold, n_pred);
        ClassScore {
            precision,
            recall,
            f_measure: harmonic_mean(precision, recall),
            n_gold,
            n_pred,
            matched_score_sum,
        }
    }
}

pub fn harmonic_mean(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub per_class: BTreeMap<ScoreClass, ClassScore>,
    pub overall: ClassScore,
    pub matches: Vec<MatchRecord>,
}

impl ScoreReport {
    /// Aggregates match records. Classes appear when they have at least one
    /// gold or predicted item; the overall row micro-averages all of them.
    pub fn from_matches(matches: Vec<MatchRecord>) -> Self {
        let mut tallies: BTreeMap<ScoreClass, (usize, usize, f64)> = BTreeMap::new();
        for m in &matches {
            let t = tallies.entry(m.class).or_default();
            if m.gold_id.is_some() {
                t.0 += 1;
            }
            if m.pred_id.is_some() {
                t.1 += 1;
            }
            t.2 += m.score;
        }
        let per_class: BTreeMap<ScoreClass, ClassScore> = tallies
            .iter()
            .map(|(&class, &(g, p, s))| (class, ClassScore::from_counts(g, p, s)))
            .collect();
        let overall = if tallies.is_empty() {
            ClassScore::default()
        } else {
            let (g, p, s) = tallies
                .values()
                .fold((0, 0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1, acc.2 + t.2));
            ClassScore::from_counts(g, p, s)
        };
        ScoreReport {
            per_class,
            overall,
            matches,
        }
    }
}

/// Scores every document in `gold`; predicted documents must be a subset.
pub fn score_corpus(gold: &Corpus, pred: &Corpus) -> Result<ScoreReport, ScoreError> {
    let gold_ids = gold.doc_ids();
    let unknown: Vec<String> = pred
        .doc_ids()
        .into_iter()
        .filter(|id| !gold_ids.contains(id))
        .map(str::to_string)
        .collect();
    if !unknown.is_empty() {
        return Err(ScoreError::UnknownDocuments(unknown));
    }
    let mut matches = Vec::new();
    for doc_id in gold_ids {
        matches.extend(match_document(
            gold.annotations_for(doc_id),
            pred.annotations_for(doc_id),
        )?);
    }
    Ok(ScoreReport::from_matches(matches))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    DelimitedValues,
}

/// Renders one row per present class in fixed order, then an overall row.
/// Scores use three decimals.
pub fn render_report(report: &ScoreReport, format: ReportFormat) -> String {
    let rows = ScoreClass::ALL
        .iter()
        .filter_map(|c| report.per_class.get(c).map(|s| (c.as_str(), s)))
        .chain(std::iter::once(("overall", &report.overall)));
    let mut out = String::new();
    match format {
        ReportFormat::Table => {
            out.push_str(&format!(
                "{:<16}  {:<5}  {:<5}  {:<5}  {:>6}  {:>6}\n",
                "class", "P", "R", "F", "gold", "pred"
            ));
            for (name, s) in rows {
                out.push_str(&format!(
                    "{:<16}  {:.3}  {:.3}  {:.3}  {:>6}  {:>6}\n",
                    name, s.precision, s.recall, s.f_measure, s.n_gold, s.n_pred
                ));
            }
        }
        ReportFormat::DelimitedValues => {
            out.push_str("class\tprecision\trecall\tf_measure\tn_gold\tn_pred\tmatched_score_sum\n");
            for (name, s) in rows {
                out.push_str(&format!(
                    "{}\t{:.3}\t{:.3}\t{:.3}\t{}\t{}\t{:.3}\n",
                    name, s.precision, s.recall, s.f_measure, s.n_gold, s.n_pred, s.matched_score_sum
                ));
            }
        }
    }
    out
}

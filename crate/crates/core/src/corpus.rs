//! Paragraphs, stand-off annotations, and their TSV representation.
//!
//! Offsets are counted in Unicode code points. A paragraph's text is kept
//! byte-for-byte as read from disk so that offsets computed against it stay
//! aligned with the gold data.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::Value;
use thiserror::Error;

/// Column order used when writing annotation files.
pub const TSV_COLUMNS: [&str; 8] = [
    "docId",
    "annotSet",
    "annotType",
    "startOffset",
    "endOffset",
    "annotId",
    "text",
    "other",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8")]
    Decode { path: PathBuf },
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("row {row}: malformed other payload {raw:?}: {message}")]
    MalformedOther {
        row: usize,
        raw: String,
        message: String,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// A document unit. All annotation offsets index into `text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub doc_id: String,
    pub text: String,
}

impl Paragraph {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }

    /// Length in code points.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Code-point slice `[start, end)`, or `None` when out of range.
    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        char_slice(&self.text, start, end)
    }
}

/// Slices `text` by code-point offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(Some(text.len()));
    let begin = indices.nth(start)?;
    let finish = if end == start {
        begin
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnnotationType {
    Quantity,
    MeasuredEntity,
    MeasuredProperty,
    Qualifier,
}

impl AnnotationType {
    pub const ALL: [AnnotationType; 4] = [
        AnnotationType::Quantity,
        AnnotationType::MeasuredEntity,
        AnnotationType::MeasuredProperty,
        AnnotationType::Qualifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationType::Quantity => "Quantity",
            AnnotationType::MeasuredEntity => "MeasuredEntity",
            AnnotationType::MeasuredProperty => "MeasuredProperty",
            AnnotationType::Qualifier => "Qualifier",
        }
    }
}

impl fmt::Display for AnnotationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown annotation type {0:?}")]
pub struct UnknownAnnotationType(pub String);

impl FromStr for AnnotationType {
    type Err = UnknownAnnotationType;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "Quantity" => Ok(AnnotationType::Quantity),
            "MeasuredEntity" => Ok(AnnotationType::MeasuredEntity),
            "MeasuredProperty" => Ok(AnnotationType::MeasuredProperty),
            "Qualifier" => Ok(AnnotationType::Qualifier),
            other => Err(UnknownAnnotationType(other.to_string())),
        }
    }
}

/// The `other` column: unit, modifiers and relation references.
///
/// Relation targets are stored as integer ids; on disk they are written as
/// quoted strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Other {
    pub unit: Option<String>,
    pub mods: Option<Vec<String>>,
    pub has_quantity: Option<u32>,
    pub has_property: Option<u32>,
    pub qualifies: Option<u32>,
}

impl Other {
    pub fn is_empty(&self) -> bool {
        *self == Other::default()
    }

    /// Relation keys in canonical order, paired with their target id.
    pub fn relations(&self) -> impl Iterator<Item = (RelationKind, u32)> + '_ {
        [
            (RelationKind::HasQuantity, self.has_quantity),
            (RelationKind::HasProperty, self.has_property),
            (RelationKind::Qualifies, self.qualifies),
        ]
        .into_iter()
        .filter_map(|(kind, id)| id.map(|id| (kind, id)))
    }

    /// Parses a JSON object with any key order. Relation ids may be quoted
    /// or bare integers.
    pub fn parse(raw: &str) -> std::result::Result<Self, String> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Ok(Other::default());
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| e.to_string())?;
        let Value::Object(map) = value else {
            return Err("expected a JSON object".to_string());
        };
        let mut other = Other::default();
        for (key, value) in map {
            match key.as_str() {
                "unit" => match value {
                    Value::String(s) => other.unit = Some(s),
                    _ => return Err("unit must be a string".to_string()),
                },
                "mods" => {
                    let Value::Array(items) = value else {
                        return Err("mods must be a list".to_string());
                    };
                    let mods = items
                        .into_iter()
                        .map(|v| match v {
                            Value::String(s) => Ok(s),
                            _ => Err("mods entries must be strings".to_string()),
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    other.mods = Some(mods);
                }
                "HasQuantity" => other.has_quantity = Some(relation_id(&key, &value)?),
                "HasProperty" => other.has_property = Some(relation_id(&key, &value)?),
                "Qualifies" => other.qualifies = Some(relation_id(&key, &value)?),
                unknown => return Err(format!("unknown key {unknown:?}")),
            }
        }
        Ok(other)
    }

    /// Compact rendering with key order unit, mods, HasQuantity,
    /// HasProperty, Qualifies. Empty payloads render as "".
    pub fn render(&self) -> String {
        if self.is_empty() {
            return String::new();
        }
        let quote = |s: &str| serde_json::to_string(s).expect("strings always serialize");
        let mut parts = Vec::new();
        if let Some(unit) = &self.unit {
            parts.push(format!("\"unit\": {}", quote(unit)));
        }
        if let Some(mods) = &self.mods {
            let items: Vec<String> = mods.iter().map(|m| quote(m)).collect();
            parts.push(format!("\"mods\": [{}]", items.join(", ")));
        }
        for (kind, id) in self.relations() {
            parts.push(format!("\"{}\": \"{}\"", kind.as_str(), id));
        }
        format!("{{{}}}", parts.join(", "))
    }
}

fn relation_id(key: &str, value: &Value) -> std::result::Result<u32, String> {
    let parsed = match value {
        Value::String(s) => s.trim().parse::<u32>().ok(),
        Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
        _ => None,
    };
    match parsed {
        Some(id) if id > 0 => Ok(id),
        _ => Err(format!("{key} must reference a positive integer id, got {value}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    HasQuantity,
    HasProperty,
    Qualifies,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::HasQuantity => "HasQuantity",
            RelationKind::HasProperty => "HasProperty",
            RelationKind::Qualifies => "Qualifies",
        }
    }

    /// Whether an annotation of type `target` may be referenced by this relation.
    pub fn accepts_target(self, target: AnnotationType) -> bool {
        match self {
            RelationKind::HasQuantity => target == AnnotationType::Quantity,
            RelationKind::HasProperty => target == AnnotationType::MeasuredProperty,
            RelationKind::Qualifies => matches!(
                target,
                AnnotationType::Quantity | AnnotationType::MeasuredProperty
            ),
        }
    }
}

/// One stand-off annotation row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub doc_id: String,
    pub annot_set: u32,
    pub annot_type: AnnotationType,
    pub start_offset: usize,
    pub end_offset: usize,
    pub annot_id: u32,
    pub text: String,
    pub other: Other,
}

/// Paragraphs plus annotations, both keyed by document id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub paragraphs: BTreeMap<String, Paragraph>,
    pub annotations: BTreeMap<String, Vec<Annotation>>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_paragraph(&mut self, paragraph: Paragraph) -> Result<()> {
        if self.paragraphs.contains_key(&paragraph.doc_id) {
            return Err(CorpusError::DuplicateDocId(paragraph.doc_id));
        }
        self.paragraphs.insert(paragraph.doc_id.clone(), paragraph);
        Ok(())
    }

    /// Appends annotations, grouping them by their `doc_id`.
    pub fn add_annotations(&mut self, annotations: impl IntoIterator<Item = Annotation>) {
        for annotation in annotations {
            self.annotations
                .entry(annotation.doc_id.clone())
                .or_default()
                .push(annotation);
        }
    }

    /// Every document id that has a paragraph or annotations.
    pub fn doc_ids(&self) -> BTreeSet<&str> {
        self.paragraphs
            .keys()
            .chain(self.annotations.keys())
            .map(String::as_str)
            .collect()
    }

    pub fn annotations_for(&self, doc_id: &str) -> &[Annotation] {
        self.annotations.get(doc_id).map_or(&[], Vec::as_slice)
    }

    /// All annotations flattened in document order.
    pub fn all_annotations(&self) -> Vec<Annotation> {
        self.annotations.values().flatten().cloned().collect()
    }
}

/// Reads one paragraph per regular file in `dir`. The document id is the
/// file name without its extension; hidden files are skipped.
pub fn load_paragraphs(dir: &Path) -> Result<Corpus> {
    let entries = fs::read_dir(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            paths.push(path);
        }
    }
    paths.sort();

    let mut corpus = Corpus::new();
    for path in paths {
        let Some(doc_id) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        let bytes = fs::read(&path).map_err(|source| CorpusError::Io {
            path: path.clone(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|_| CorpusError::Decode { path: path.clone() })?;
        corpus.insert_paragraph(Paragraph { doc_id, text })?;
    }
    Ok(corpus)
}

/// Loads annotations from a single TSV file or from every `.tsv` file in a
/// directory. For files without a `docId` column the file stem is used.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "tsv"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };

    let mut annotations = Vec::new();
    for file in files {
        let bytes = fs::read(&file).map_err(|source| CorpusError::Io {
            path: file.clone(),
            source,
        })?;
        let content =
            String::from_utf8(bytes).map_err(|_| CorpusError::Decode { path: file.clone() })?;
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned());
        annotations.extend(parse_annotation_tsv(&content, stem.as_deref())?);
    }
    Ok(annotations)
}

struct Columns {
    doc_id: Option<usize>,
    annot_set: Option<usize>,
    annot_type: usize,
    start: usize,
    end: usize,
    annot_id: usize,
    text: usize,
    other: usize,
}

impl Columns {
    fn from_header(header: &str) -> Result<Self> {
        let index: HashMap<String, usize> = header
            .split('\t')
            .enumerate()
            .map(|(i, name)| (name.trim().to_ascii_lowercase(), i))
            .collect();
        let find = |name: &str| index.get(&name.to_ascii_lowercase()).copied();
        let require = |name: &str| {
            find(name).ok_or_else(|| CorpusError::Schema {
                row: 1,
                message: format!("missing required column {name:?}"),
            })
        };
        Ok(Columns {
            doc_id: find("docId"),
            annot_set: find("annotSet"),
            annot_type: require("annotType")?,
            start: require("startOffset")?,
            end: require("endOffset")?,
            annot_id: require("annotId")?,
            text: require("text")?,
            other: require("other")?,
        })
    }
}

/// Parses an annotation TSV. The header row names the columns; `docId` and
/// `annotSet` are optional, falling back to `default_doc_id` and 1.
///
/// Row numbers in errors are 1-based file lines (the header is row 1).
pub fn parse_annotation_tsv(content: &str, default_doc_id: Option<&str>) -> Result<Vec<Annotation>> {
    let mut lines = content.split('\n').enumerate();
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header = header.strip_suffix('\r').unwrap_or(header);
    if header.trim().is_empty() {
        return Ok(Vec::new());
    }
    let columns = Columns::from_header(header)?;
    if columns.doc_id.is_none() && default_doc_id.is_none() {
        return Err(CorpusError::Schema {
            row: 1,
            message: "no docId column and no default document id".to_string(),
        });
    }

    let mut annotations = Vec::new();
    for (index, line) in lines {
        let row = index + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |i: usize| fields.get(i).copied().unwrap_or("");
        let integer = |i: usize, name: &str| {
            field(i).trim().parse::<u64>().map_err(|_| CorpusError::Parse {
                row,
                message: format!("{name} is not a non-negative integer: {:?}", field(i)),
            })
        };
        let positive_u32 = |i: usize, name: &str| {
            integer(i, name).and_then(|n| match u32::try_from(n) {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(CorpusError::Parse {
                    row,
                    message: format!("{name} must be a positive integer: {:?}", field(i)),
                }),
            })
        };

        let doc_id = match columns.doc_id {
            Some(i) => field(i).to_string(),
            None => default_doc_id.unwrap_or_default().to_string(),
        };
        let annot_set = match columns.annot_set {
            Some(i) => positive_u32(i, "annotSet")?,
            None => 1,
        };
        let annot_type = field(columns.annot_type)
            .trim()
            .parse::<AnnotationType>()
            .map_err(|e| CorpusError::Schema {
                row,
                message: e.to_string(),
            })?;
        let start_offset = integer(columns.start, "startOffset")? as usize;
        let end_offset = integer(columns.end, "endOffset")? as usize;
        let annot_id = positive_u32(columns.annot_id, "annotId")?;
        let raw_other = field(columns.other);
        let other = Other::parse(raw_other).map_err(|message| CorpusError::MalformedOther {
            row,
            raw: raw_other.to_string(),
            message,
        })?;

        annotations.push(Annotation {
            doc_id,
            annot_set,
            annot_type,
            start_offset,
            end_offset,
            annot_id,
            text: field(columns.text).to_string(),
            other,
        });
    }
    Ok(annotations)
}

/// Renders annotations as TSV, rows sorted by (docId, annotSet, annotId).
pub fn write_annotation_tsv(annotations: &[Annotation]) -> String {
    let mut rows: Vec<&Annotation> = annotations.iter().collect();
    rows.sort_by(|a, b| {
        (&a.doc_id, a.annot_set, a.annot_id).cmp(&(&b.doc_id, b.annot_set, b.annot_id))
    });
    let mut out = TSV_COLUMNS.join("\t");
    out.push('\n');
    for a in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            a.doc_id,
            a.annot_set,
            a.annot_type,
            a.start_offset,
            a.end_offset,
            a.annot_id,
            a.text,
            a.other.render()
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    MissingParagraph,
    EmptyDocId,
    EmptyParagraph,
    DuplicateAnnotId,
    InvalidSpan,
    OffsetOutOfRange,
    TextMismatch,
    DanglingReference,
    WrongReferenceType,
    UnitOnNonQuantity,
    /// Text containing a tab or line break cannot be written to TSV.
    UnrepresentableText,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub doc_id: String,
    pub annot_id: Option<u32>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.annot_id {
            Some(id) => write!(f, "{}#{}: {:?}: {}", self.doc_id, id, self.rule, self.detail),
            None => write!(f, "{}: {:?}: {}", self.doc_id, self.rule, self.detail),
        }
    }
}

/// Checks every annotation invariant. An empty result means the corpus is valid.
pub fn validate(corpus: &Corpus) -> Vec<Violation> {
    let mut violations = Vec::new();

    for (doc_id, paragraph) in &corpus.paragraphs {
        if doc_id.is_empty() {
            violations.push(Violation {
                doc_id: doc_id.clone(),
                annot_id: None,
                rule: Rule::EmptyDocId,
                detail: "document id is empty".to_string(),
            });
        }
        if paragraph.text.is_empty() {
            violations.push(Violation {
                doc_id: doc_id.clone(),
                annot_id: None,
                rule: Rule::EmptyParagraph,
                detail: "paragraph text is empty".to_string(),
            });
        }
    }

    for (doc_id, annotations) in &corpus.annotations {
        let paragraph = corpus.paragraphs.get(doc_id);
        if paragraph.is_none() {
            violations.push(Violation {
                doc_id: doc_id.clone(),
                annot_id: None,
                rule: Rule::MissingParagraph,
                detail: "annotations reference a document without a paragraph".to_string(),
            });
        }
        violations.extend(validate_document(paragraph, annotations));
    }
    violations
}

/// Validates one document's annotations; span checks are skipped when the
/// paragraph is unknown.
pub fn validate_document(paragraph: Option<&Paragraph>, annotations: &[Annotation]) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut push = |a: &Annotation, rule: Rule, detail: String| {
        violations.push(Violation {
            doc_id: a.doc_id.clone(),
            annot_id: Some(a.annot_id),
            rule,
            detail,
        });
    };

    let mut types: HashMap<u32, AnnotationType> = HashMap::new();
    for a in annotations {
        if types.insert(a.annot_id, a.annot_type).is_some() {
            push(a, Rule::DuplicateAnnotId, format!("annotId {} is not unique", a.annot_id));
        }
    }
    let char_len = paragraph.map(Paragraph::char_len);

    for a in annotations {
        if a.start_offset >= a.end_offset {
            push(
                a,
                Rule::InvalidSpan,
                format!("start {} is not before end {}", a.start_offset, a.end_offset),
            );
        } else if let (Some(paragraph), Some(len)) = (paragraph, char_len) {
            if a.end_offset > len {
                push(
                    a,
                    Rule::OffsetOutOfRange,
                    format!("end {} exceeds paragraph length {len}", a.end_offset),
                );
            } else {
                let slice = paragraph.slice(a.start_offset, a.end_offset).unwrap_or_default();
                if slice != a.text {
                    push(
                        a,
                        Rule::TextMismatch,
                        format!("text {:?} but paragraph has {slice:?}", a.text),
                    );
                }
            }
        }
        if a.text.contains(['\t', '\n', '\r']) {
            push(a, Rule::UnrepresentableText, format!("text {:?}", a.text));
        }
        if a.other.unit.is_some() && a.annot_type != AnnotationType::Quantity {
            push(a, Rule::UnitOnNonQuantity, format!("unit on a {}", a.annot_type));
        }
        for (kind, target) in a.other.relations() {
            match types.get(&target) {
                None => push(
                    a,
                    Rule::DanglingReference,
                    format!("{} references missing id {target}", kind.as_str()),
                ),
                Some(&target_type) if !kind.accepts_target(target_type) => push(
                    a,
                    Rule::WrongReferenceType,
                    format!("{} references {target_type} {target}", kind.as_str()),
                ),
                Some(_) => {}
            }
        }
    }
    violations
}

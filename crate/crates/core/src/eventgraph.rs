//! Data model for multimodal event graphs.
//!
//! A [`Document`] pairs a tokenized article with a shot-segmented video. Text
//! events are trigger spans inside one sentence, video events are shots. A
//! [`MultimodalEventGraph`] holds directed text-to-video relations for one
//! document; unlabeled pairs are implicitly [`Label::NoRel`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Version written into every corpus record.
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Hierarchical,
    Identical,
    NoRel,
}

impl Label {
    /// Classifier output order.
    pub const ALL: [Label; 3] = [Label::Hierarchical, Label::Identical, Label::NoRel];

    pub fn index(self) -> usize {
        match self {
            Label::Hierarchical => 0,
            Label::Identical => 1,
            Label::NoRel => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hierarchical => "Hierarchical",
            Label::Identical => "Identical",
            Label::NoRel => "NoRel",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Half-open token range `[start, end)` within one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(self) -> usize {
        self.0
    }

    pub fn end(self) -> usize {
        self.1
    }

    pub fn is_empty(self) -> bool {
        self.0 >= self.1
    }

    pub fn overlaps(self, other: Span) -> bool {
        self.0 < other.1 && other.0 < self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEvent {
    pub id: String,
    pub sentence_index: usize,
    pub trigger_span: Span,
    /// Space-joined tokens addressed by `trigger_span`.
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEvent {
    pub id: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_ref: Option<String>,
}

impl VideoEvent {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

/// One article/video pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub video_duration_s: f64,
    pub description_word_count: u32,
    pub text_events: Vec<TextEvent>,
    pub video_events: Vec<VideoEvent>,
    #[serde(default)]
    pub asr_segments: Vec<AsrSegment>,
}

impl Document {
    pub fn text_event(&self, id: &str) -> Option<&TextEvent> {
        self.text_events.iter().find(|e| e.id == id)
    }

    pub fn video_event(&self, id: &str) -> Option<&VideoEvent> {
        self.video_events.iter().find(|e| e.id == id)
    }

    pub fn text_index(&self, id: &str) -> Option<usize> {
        self.text_events.iter().position(|e| e.id == id)
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.video_events.iter().position(|e| e.id == id)
    }

    /// Tokens of the sentence holding `event`.
    pub fn sentence_of(&self, event: &TextEvent) -> Option<&[String]> {
        self.sentences.get(event.sentence_index).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub text_event_id: String,
    pub video_event_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Relations predicted or annotated for one document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MultimodalEventGraph {
    pub doc_id: String,
    pub relations: Vec<Relation>,
}

impl MultimodalEventGraph {
    pub fn new(doc_id: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            relations: Vec::new(),
        }
    }

    /// Adds a relation; a second record for the same pair is rejected.
    pub fn insert(&mut self, relation: Relation) -> Result<()> {
        if self.relations.iter().any(|r| {
            r.text_event_id == relation.text_event_id && r.video_event_id == relation.video_event_id
        }) {
            return Err(Error::Data {
                doc_id: self.doc_id.clone(),
                message: format!(
                    "duplicate relation for pair ({}, {})",
                    relation.text_event_id, relation.video_event_id
                ),
            });
        }
        self.relations.push(relation);
        Ok(())
    }

    pub fn label_of(&self, text_event_id: &str, video_event_id: &str) -> Label {
        self.relations
            .iter()
            .find(|r| r.text_event_id == text_event_id && r.video_event_id == video_event_id)
            .map_or(Label::NoRel, |r| r.label)
    }
}

/// A broken invariant: which field, and which rule it failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every document invariant. Returns an empty list iff the document is well formed.
pub fn validate_document(doc: &Document) -> Vec<Violation> {
    let mut out = Vec::new();
    if doc.doc_id.is_empty() {
        out.push(Violation::new("doc_id", "non-empty"));
    }
    if !doc.video_duration_s.is_finite() || doc.video_duration_s < 0.0 {
        out.push(Violation::new("video_duration_s", "finite and >= 0"));
    }

    let mut seen = HashSet::new();
    for (i, ev) in doc.text_events.iter().enumerate() {
        let field = |name: &str| format!("text_events[{i}].{name}");
        if ev.id.is_empty() {
            out.push(Violation::new(field("id"), "non-empty"));
        }
        if !seen.insert(ev.id.as_str()) {
            out.push(Violation::new(field("id"), "unique event id"));
        }
        let Some(sentence) = doc.sentences.get(ev.sentence_index) else {
            out.push(Violation::new(
                field("sentence_index"),
                "sentence_index < number of sentences",
            ));
            continue;
        };
        let Span(start, end) = ev.trigger_span;
        if start >= end {
            out.push(Violation::new(field("trigger_span"), "non-empty span"));
        } else if end > sentence.len() {
            out.push(Violation::new(
                field("trigger_span"),
                "span within sentence token bounds",
            ));
        } else if sentence[start..end].join(" ") != ev.surface {
            out.push(Violation::new(
                field("surface"),
                "surface equals tokens addressed by trigger_span",
            ));
        }
    }

    for (j, ev) in doc.video_events.iter().enumerate() {
        let field = |name: &str| format!("video_events[{j}].{name}");
        if ev.id.is_empty() {
            out.push(Violation::new(field("id"), "non-empty"));
        }
        if !seen.insert(ev.id.as_str()) {
            out.push(Violation::new(field("id"), "unique event id"));
        }
        if !(ev.start_s.is_finite() && ev.start_s >= 0.0) {
            out.push(Violation::new(field("start_s"), "0 <= start_s"));
        }
        if !(ev.start_s < ev.end_s) {
            out.push(Violation::new(field("end_s"), "start_s < end_s"));
        }
        if !(ev.end_s <= doc.video_duration_s) {
            out.push(Violation::new(field("end_s"), "end_s <= video_duration_s"));
        }
        if j > 0 {
            let prev = &doc.video_events[j - 1];
            if ev.start_s < prev.start_s {
                out.push(Violation::new(field("start_s"), "sorted by start_s"));
            } else if ev.start_s < prev.end_s {
                out.push(Violation::new(field("start_s"), "non-overlapping shots"));
            }
        }
    }

    for (k, seg) in doc.asr_segments.iter().enumerate() {
        if !(seg.start_s.is_finite() && seg.start_s <= seg.end_s) {
            out.push(Violation::new(
                format!("asr_segments[{k}]"),
                "start_s <= end_s",
            ));
        }
    }
    out
}

/// Checks a relation set against its document: ids resolve and each pair appears at most once.
pub fn validate_graph(doc: &Document, graph: &MultimodalEventGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    if graph.doc_id != doc.doc_id {
        out.push(Violation::new("doc_id", "graph belongs to document"));
    }
    let mut pairs = HashSet::new();
    for (i, r) in graph.relations.iter().enumerate() {
        if doc.text_event(&r.text_event_id).is_none() {
            out.push(Violation::new(
                format!("relations[{i}].text_event_id"),
                "dangling id",
            ));
        }
        if doc.video_event(&r.video_event_id).is_none() {
            out.push(Violation::new(
                format!("relations[{i}].video_event_id"),
                "dangling id",
            ));
        }
        if let Some(c) = r.confidence {
            if !(0.0..=1.0).contains(&c) {
                out.push(Violation::new(
                    format!("relations[{i}].confidence"),
                    "confidence in [0, 1]",
                ));
            }
        }
        if !pairs.insert((r.text_event_id.as_str(), r.video_event_id.as_str())) {
            out.push(Violation::new(
                format!("relations[{i}]"),
                "at most one relation per pair",
            ));
        }
    }
    out
}

/// All text-video pairs, text events in document order, video events in temporal order.
pub fn pair_space(doc: &Document) -> Vec<(&str, &str)> {
    pair_indices(doc)
        .map(|(i, j)| (doc.text_events[i].id.as_str(), doc.video_events[j].id.as_str()))
        .collect()
}

/// Index form of [`pair_space`].
pub fn pair_indices(doc: &Document) -> impl Iterator<Item = (usize, usize)> {
    let n = doc.video_events.len();
    (0..doc.text_events.len()).flat_map(move |i| (0..n).map(move |j| (i, j)))
}

/// Corpus admission thresholds. Both bounds are inclusive on the kept side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusFilter {
    pub max_duration_s: f64,
    pub min_desc_words: u32,
}

impl Default for CorpusFilter {
    fn default() -> Self {
        Self {
            max_duration_s: 840.0,
            min_desc_words: 10,
        }
    }
}

impl CorpusFilter {
    pub fn keeps(&self, doc: &Document) -> bool {
        doc.video_duration_s <= self.max_duration_s
            && doc.description_word_count >= self.min_desc_words
    }
}

pub fn filter_corpus<I>(docs: I, filter: CorpusFilter) -> impl Iterator<Item = Document>
where
    I: IntoIterator<Item = Document>,
{
    docs.into_iter().filter(move |d| filter.keeps(d))
}

#[derive(Serialize)]
struct CorpusRecordOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    doc: &'a Document,
}

#[derive(Deserialize)]
struct CorpusRecordIn {
    #[serde(default)]
    schema_version: Option<u32>,
    #[serde(flatten)]
    doc: Document,
}

/// Loads a corpus (one JSON document per line) and validates every document.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let records: Vec<CorpusRecordIn> = jsonl::read(path)?;
    let mut docs = Vec::with_capacity(records.len());
    let mut ids = HashSet::new();
    for (line, rec) in records.into_iter().enumerate() {
        if let Some(v) = rec.schema_version {
            if v != CORPUS_SCHEMA_VERSION {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 1,
                    message: format!("unsupported corpus schema_version {v}"),
                });
            }
        }
        let violations = validate_document(&rec.doc);
        if !violations.is_empty() {
            return Err(Error::Validation {
                doc_id: rec.doc.doc_id,
                violations,
            });
        }
        if !ids.insert(rec.doc.doc_id.clone()) {
            return Err(Error::Data {
                doc_id: rec.doc.doc_id,
                message: "duplicate doc_id in corpus".into(),
            });
        }
        docs.push(rec.doc);
    }
    Ok(docs)
}

pub fn save_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let records: Vec<_> = docs
        .iter()
        .map(|doc| CorpusRecordOut {
            schema_version: CORPUS_SCHEMA_VERSION,
            doc,
        })
        .collect();
    jsonl::write(path, &records)
}

/// Identifies one text-video pair across a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub doc_id: String,
    pub text_event_id: String,
    pub video_event_id: String,
}

impl PairKey {
    pub fn new(
        doc_id: impl Into<String>,
        text_event_id: impl Into<String>,
        video_event_id: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            text_event_id: text_event_id.into(),
            video_event_id: video_event_id.into(),
        }
    }
}

/// One line of a relation (gold or prediction) file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub doc_id: String,
    pub text_event_id: String,
    pub video_event_id: String,
    pub label: Label,
    #[serde(default)]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub provenance: String,
}

impl RelationRecord {
    pub fn key(&self) -> PairKey {
        PairKey::new(&self.doc_id, &self.text_event_id, &self.video_event_id)
    }
}

pub fn load_relations(path: &Path) -> Result<Vec<RelationRecord>> {
    jsonl::read(path)
}

pub fn save_relations(records: &[RelationRecord], path: &Path) -> Result<()> {
    jsonl::write(path, records)
}

/// Flattens per-document graphs into relation records tagged with `provenance`.
pub fn graphs_to_records(graphs: &[MultimodalEventGraph], provenance: &str) -> Vec<RelationRecord> {
    graphs
        .iter()
        .flat_map(|g| {
            g.relations.iter().map(move |r| RelationRecord {
                doc_id: g.doc_id.clone(),
                text_event_id: r.text_event_id.clone(),
                video_event_id: r.video_event_id.clone(),
                label: r.label,
                confidence: r.confidence,
                provenance: provenance.to_string(),
            })
        })
        .collect()
}

/// Groups relation records by document, rejecting duplicate pairs.
pub fn records_to_graphs(records: &[RelationRecord]) -> Result<BTreeMap<String, MultimodalEventGraph>> {
    let mut out: BTreeMap<String, MultimodalEventGraph> = BTreeMap::new();
    for r in records {
        out.entry(r.doc_id.clone())
            .or_insert_with(|| MultimodalEventGraph::new(&r.doc_id))
            .insert(Relation {
                text_event_id: r.text_event_id.clone(),
                video_event_id: r.video_event_id.clone(),
                label: r.label,
                confidence: r.confidence,
            })?;
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    pub(crate) fn sample_doc() -> Document {
        Document {
            doc_id: "d1".into(),
            sentences: vec![toks("police made an arrest today"), toks("crowds gathered")],
            video_duration_s: 12.0,
            description_word_count: 14,
            text_events: vec![TextEvent {
                id: "e1".into(),
                sentence_index: 0,
                trigger_span: Span(3, 4),
                surface: "arrest".into(),
            }],
            video_events: vec![
                VideoEvent {
                    id: "v1".into(),
                    start_s: 0.0,
                    end_s: 5.0,
                    frame_ref: None,
                },
                VideoEvent {
                    id: "v2".into(),
                    start_s: 5.0,
                    end_s: 12.0,
                    frame_ref: Some("shot-2".into()),
                },
            ],
            asr_segments: vec![],
        }
    }

    #[test]
    fn well_formed_document_has_no_violations() {
        assert!(validate_document(&sample_doc()).is_empty());
    }

    #[test]
    fn zero_length_shot_is_a_violation() {
        let mut doc = sample_doc();
        doc.video_events[0].end_s = 5.0;
        doc.video_events[0].start_s = 5.0;
        let v = validate_document(&doc);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, "start_s < end_s");
    }

    #[test]
    fn dangling_relation_id() {
        let doc = sample_doc();
        let mut g = MultimodalEventGraph::new("d1");
        g.insert(Relation {
            text_event_id: "e1".into(),
            video_event_id: "v9".into(),
            label: Label::Identical,
            confidence: None,
        })
        .unwrap();
        let v = validate_graph(&doc, &g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "dangling id");
    }

    #[test]
    fn graph_rejects_duplicate_pair() {
        let mut g = MultimodalEventGraph::new("d1");
        let r = Relation {
            text_event_id: "e1".into(),
            video_event_id: "v1".into(),
            label: Label::Identical,
            confidence: None,
        };
        g.insert(r.clone()).unwrap();
        assert!(g.insert(Relation { label: Label::Hierarchical, ..r }).is_err());
    }

    /// Every single-field corruption must be caught.
    #[test]
    fn single_field_mutations_are_detected() {
        let mutations: Vec<(&str, Box<dyn Fn(&mut Document)>)> = vec![
            ("empty doc_id", Box::new(|d| d.doc_id.clear())),
            ("negative duration", Box::new(|d| d.video_duration_s = -1.0)),
            ("nan duration", Box::new(|d| d.video_duration_s = f64::NAN)),
            ("empty text id", Box::new(|d| d.text_events[0].id.clear())),
            ("bad sentence", Box::new(|d| d.text_events[0].sentence_index = 7)),
            ("empty span", Box::new(|d| d.text_events[0].trigger_span = Span(3, 3))),
            ("span out of range", Box::new(|d| d.text_events[0].trigger_span = Span(4, 9))),
            ("surface mismatch", Box::new(|d| d.text_events[0].surface = "arrests".into())),
            ("dup id", Box::new(|d| d.video_events[1].id = "e1".into())),
            ("empty video id", Box::new(|d| d.video_events[0].id.clear())),
            ("negative start", Box::new(|d| d.video_events[0].start_s = -0.5)),
            ("end before start", Box::new(|d| d.video_events[1].end_s = 4.0)),
            ("end past duration", Box::new(|d| d.video_events[1].end_s = 13.0)),
            ("overlap", Box::new(|d| d.video_events[1].start_s = 4.0)),
            (
                "unsorted",
                Box::new(|d| {
                    d.video_events.swap(0, 1);
                }),
            ),
            (
                "bad asr",
                Box::new(|d| {
                    d.asr_segments.push(AsrSegment {
                        start_s: 3.0,
                        end_s: 1.0,
                        text: "x".into(),
                    })
                }),
            ),
        ];
        for (name, mutate) in mutations {
            let mut doc = sample_doc();
            mutate(&mut doc);
            assert!(!validate_document(&doc).is_empty(), "mutation {name} not detected");
        }
    }

    #[test]
    fn pair_space_order() {
        let mut doc = sample_doc();
        doc.sentences[1] = toks("crowds gathered");
        doc.text_events.push(TextEvent {
            id: "e2".into(),
            sentence_index: 1,
            trigger_span: Span(1, 2),
            surface: "gathered".into(),
        });
        assert_eq!(
            pair_space(&doc),
            vec![("e1", "v1"), ("e1", "v2"), ("e2", "v1"), ("e2", "v2")]
        );
        doc.text_events.clear();
        assert!(pair_space(&doc).is_empty());
    }

    #[test]
    fn filter_boundaries() {
        let mut doc = sample_doc();
        let f = CorpusFilter::default();
        doc.video_duration_s = 900.0;
        assert!(!f.keeps(&doc));
        doc.video_duration_s = 840.0;
        doc.description_word_count = 10;
        assert!(f.keeps(&doc));
        doc.video_duration_s = 100.0;
        doc.description_word_count = 3;
        assert!(!f.keeps(&doc));
        let kept: Vec<_> = filter_corpus(vec![sample_doc(), doc], f).collect();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn corpus_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_corpus(&empty).unwrap().is_empty());

        let good = serde_json::to_string(&sample_doc()).unwrap();
        let mut missing: serde_json::Value = serde_json::from_str(&good).unwrap();
        missing.as_object_mut().unwrap().remove("doc_id");
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, format!("{good}\n{missing}\n")).unwrap();
        match load_corpus(&bad) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("doc_id"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut broken = sample_doc();
        broken.video_events[0].end_s = 0.0;
        let invalid = dir.path().join("invalid.jsonl");
        save_corpus(&[broken], &invalid).unwrap();
        assert!(matches!(load_corpus(&invalid), Err(Error::Validation { .. })));

        let missing_file = dir.path().join("nope.jsonl");
        assert_eq!(load_corpus(&missing_file).unwrap_err().exit_code(), 2);
    }
}

//! Weak supervision: multimodal pseudo labels from text-side hierarchy
//! predictions plus cross-modal retrieval.
//!
//! For a text hierarchy pair `parent -> sub`, every video event whose
//! similarity to `sub` exceeds the threshold becomes `Identical(sub, v)`, and
//! by one-hop transitivity `Hierarchical(parent, v)`. All text/video pairs are
//! also compared directly to collect extra `Identical` labels. Pairs that end
//! up with both labels are resolved by a [`ConflictPolicy`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{similarity, DocFeatures, Embedding, Featurizer};
use crate::error::{Error, Result};
use crate::eventgraph::{Document, Label, PairKey, Violation};
use crate::jsonl;
use crate::parallel;

pub const DEFAULT_LAMBDA: f64 = 30.39;

/// `parent -> sub` hierarchy between two text events of one document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextHierPair {
    pub doc_id: String,
    pub parent_event_id: String,
    pub sub_event_id: String,
}

/// Text-to-text hierarchy model. Any callable `&Document -> Result<Vec<(parent, sub)>, String>` works.
pub trait HierarchyPredictor: Sync {
    fn predict(&self, doc: &Document) -> std::result::Result<Vec<(String, String)>, String>;
}

impl<F> HierarchyPredictor for F
where
    F: Fn(&Document) -> std::result::Result<Vec<(String, String)>, String> + Sync,
{
    fn predict(&self, doc: &Document) -> std::result::Result<Vec<(String, String)>, String> {
        self(doc)
    }
}

/// Fixture predictor that echoes a stored table of pairs per document.
#[derive(Debug, Clone, Default)]
pub struct TablePredictor {
    table: BTreeMap<String, Vec<(String, String)>>,
}

impl TablePredictor {
    pub fn new(pairs: impl IntoIterator<Item = TextHierPair>) -> Self {
        let mut table: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for p in pairs {
            table
                .entry(p.doc_id)
                .or_default()
                .push((p.parent_event_id, p.sub_event_id));
        }
        Self { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pairs: Vec<TextHierPair> = jsonl::read(path)?;
        Ok(Self::new(pairs))
    }

    pub fn save(pairs: &[TextHierPair], path: &Path) -> Result<()> {
        jsonl::write(path, pairs)
    }
}

impl HierarchyPredictor for TablePredictor {
    fn predict(&self, doc: &Document) -> std::result::Result<Vec<(String, String)>, String> {
        Ok(self.table.get(&doc.doc_id).cloned().unwrap_or_default())
    }
}

/// Runs the predictor and validates its output. Duplicate pairs are dropped.
pub fn detect_text_hierarchy(
    doc: &Document,
    predictor: &dyn HierarchyPredictor,
) -> Result<Vec<TextHierPair>> {
    let raw = predictor.predict(doc).map_err(|message| Error::Predictor {
        doc_id: doc.doc_id.clone(),
        message,
    })?;
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, (parent, sub)) in raw.into_iter().enumerate() {
        let field = format!("hierarchy[{i}]");
        if parent == sub {
            violations.push(Violation {
                field: field.clone(),
                rule: "parent differs from subevent".into(),
            });
        }
        for id in [&parent, &sub] {
            if doc.text_event(id).is_none() {
                violations.push(Violation {
                    field: field.clone(),
                    rule: format!("unknown text event {id}"),
                });
            }
        }
        if seen.insert((parent.clone(), sub.clone())) {
            out.push(TextHierPair {
                doc_id: doc.doc_id.clone(),
                parent_event_id: parent,
                sub_event_id: sub,
            });
        }
    }
    if violations.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation {
            doc_id: doc.doc_id.clone(),
            violations,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Retrieval,
    Propagation,
    DirectMatch,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Retrieval => "retrieval",
            Provenance::Propagation => "propagation",
            Provenance::DirectMatch => "direct-match",
        }
    }
}

/// One machine-generated label; also the record format of the pseudo-label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub doc_id: String,
    pub text_event_id: String,
    pub video_event_id: String,
    pub label: Label,
    pub provenance: Provenance,
    /// Similarity that created the label. Propagated labels carry the subevent's score.
    pub score: f64,
}

impl PseudoLabel {
    pub fn key(&self) -> PairKey {
        PairKey::new(&self.doc_id, &self.text_event_id, &self.video_event_id)
    }
}

/// Video events strictly above `lambda`, in input order.
pub fn retrieve_identical(
    text: &Embedding,
    videos: &[(&str, &Embedding)],
    scale: f64,
    lambda: f64,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (id, v) in videos {
        let s = similarity(text, v, scale)?;
        if s > lambda {
            out.push((id.to_string(), s));
        }
    }
    Ok(out)
}

/// Emits `Hierarchical(parent, v)` for every `parent -> sub` and `Identical(sub, v)`.
///
/// Single hop unless `multi_hop` is set, in which case the text hierarchy is
/// first closed transitively. A pair reached several ways keeps its highest score.
pub fn propagate_hierarchy(
    hier: &[TextHierPair],
    identical: &[PseudoLabel],
    multi_hop: bool,
) -> Vec<PseudoLabel> {
    let pairs: Vec<TextHierPair> = if multi_hop {
        transitive_closure(hier)
    } else {
        hier.to_vec()
    };
    let mut by_text: HashMap<(&str, &str), Vec<&PseudoLabel>> = HashMap::new();
    for l in identical.iter().filter(|l| l.label == Label::Identical) {
        by_text
            .entry((l.doc_id.as_str(), l.text_event_id.as_str()))
            .or_default()
            .push(l);
    }
    let mut out: Vec<PseudoLabel> = Vec::new();
    let mut index: HashMap<PairKey, usize> = HashMap::new();
    for h in &pairs {
        let Some(matches) = by_text.get(&(h.doc_id.as_str(), h.sub_event_id.as_str())) else {
            continue;
        };
        for m in matches {
            let key = PairKey::new(&h.doc_id, &h.parent_event_id, &m.video_event_id);
            match index.get(&key) {
                Some(&i) => out[i].score = out[i].score.max(m.score),
                None => {
                    index.insert(key, out.len());
                    out.push(PseudoLabel {
                        doc_id: h.doc_id.clone(),
                        text_event_id: h.parent_event_id.clone(),
                        video_event_id: m.video_event_id.clone(),
                        label: Label::Hierarchical,
                        provenance: Provenance::Propagation,
                        score: m.score,
                    });
                }
            }
        }
    }
    out
}

fn transitive_closure(hier: &[TextHierPair]) -> Vec<TextHierPair> {
    let mut set: BTreeSet<TextHierPair> = hier.iter().cloned().collect();
    loop {
        let mut added = Vec::new();
        for a in &set {
            for b in &set {
                if a.doc_id == b.doc_id
                    && a.sub_event_id == b.parent_event_id
                    && a.parent_event_id != b.sub_event_id
                {
                    let c = TextHierPair {
                        doc_id: a.doc_id.clone(),
                        parent_event_id: a.parent_event_id.clone(),
                        sub_event_id: b.sub_event_id.clone(),
                    };
                    if !set.contains(&c) {
                        added.push(c);
                    }
                }
            }
        }
        if added.is_empty() {
            return set.into_iter().collect();
        }
        set.extend(added);
    }
}

/// `Identical` labels for every text/video pair above `lambda`, in pair-space order.
pub fn direct_identical_match(
    doc: &Document,
    features: &DocFeatures,
    scale: f64,
    lambda: f64,
) -> Result<Vec<PseudoLabel>> {
    let videos: Vec<(&str, &Embedding)> = doc
        .video_events
        .iter()
        .map(|v| v.id.as_str())
        .zip(&features.video)
        .collect();
    let mut out = Vec::new();
    for (ev, ft) in doc.text_events.iter().zip(&features.text) {
        for (vid, score) in retrieve_identical(ft, &videos, scale, lambda)? {
            out.push(PseudoLabel {
                doc_id: doc.doc_id.clone(),
                text_event_id: ev.id.clone(),
                video_event_id: vid,
                label: Label::Identical,
                provenance: Provenance::DirectMatch,
                score,
            });
        }
    }
    Ok(out)
}

/// What to do with a pair labeled both `Identical` and `Hierarchical`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictPolicy {
    #[default]
    IdenticalWins,
    HierarchicalWins,
    DropBoth,
}

impl FromStr for ConflictPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical-wins" => Ok(ConflictPolicy::IdenticalWins),
            "hierarchical-wins" => Ok(ConflictPolicy::HierarchicalWins),
            "drop-both" => Ok(ConflictPolicy::DropBoth),
            other => Err(Error::config(format!("unknown conflict policy {other:?}"))),
        }
    }
}

impl fmt::Display for ConflictPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConflictPolicy::IdenticalWins => "identical-wins",
            ConflictPolicy::HierarchicalWins => "hierarchical-wins",
            ConflictPolicy::DropBoth => "drop-both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    pub lambda: f64,
    pub conflict_policy: ConflictPolicy,
    pub multi_hop: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            conflict_policy: ConflictPolicy::default(),
            multi_hop: false,
        }
    }
}

/// A pair that received both labels, and what survived.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub key: PairKey,
    pub kept: Option<Label>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    /// Corpus order, then pair-space order within a document.
    pub labels: Vec<PseudoLabel>,
    pub conflicts: Vec<Conflict>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| l.label == label).count()
    }

    pub fn label_map(&self) -> BTreeMap<PairKey, Label> {
        self.labels.iter().map(|l| (l.key(), l.label)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.labels)
    }

    /// Loads a pseudo-label file; conflicts are not persisted.
    pub fn load(path: &Path) -> Result<Self> {
        let labels: Vec<PseudoLabel> = jsonl::read(path)?;
        let mut seen = BTreeSet::new();
        for l in &labels {
            if l.label == Label::NoRel {
                return Err(Error::Data {
                    doc_id: l.doc_id.clone(),
                    message: "pseudo-label files never store NoRel".into(),
                });
            }
            if !seen.insert(l.key()) {
                return Err(Error::Data {
                    doc_id: l.doc_id.clone(),
                    message: format!(
                        "pair ({}, {}) labeled twice",
                        l.text_event_id, l.video_event_id
                    ),
                });
            }
        }
        Ok(Self {
            labels,
            conflicts: Vec::new(),
        })
    }
}

/// Pseudo labels for one document from precomputed features.
pub fn label_document(
    doc: &Document,
    features: &DocFeatures,
    predictor: &dyn HierarchyPredictor,
    scale: f64,
    config: &PseudoLabelConfig,
) -> Result<PseudoLabelSet> {
    let lambda = config.lambda;
    let hier = detect_text_hierarchy(doc, predictor)?;
    let videos: Vec<(&str, &Embedding)> = doc
        .video_events
        .iter()
        .map(|v| v.id.as_str())
        .zip(&features.video)
        .collect();

    let mut subevents: Vec<&str> = Vec::new();
    for h in &hier {
        if !subevents.contains(&h.sub_event_id.as_str()) {
            subevents.push(&h.sub_event_id);
        }
    }
    let mut retrieved = Vec::new();
    for sub in subevents {
        let i = doc.text_index(sub).expect("validated by detect_text_hierarchy");
        for (vid, score) in retrieve_identical(&features.text[i], &videos, scale, lambda)? {
            retrieved.push(PseudoLabel {
                doc_id: doc.doc_id.clone(),
                text_event_id: sub.to_string(),
                video_event_id: vid,
                label: Label::Identical,
                provenance: Provenance::Retrieval,
                score,
            });
        }
    }
    let propagated = propagate_hierarchy(&hier, &retrieved, config.multi_hop);
    let direct = direct_identical_match(doc, features, scale, lambda)?;

    // Identical candidates: retrieval first, then direct match for pairs not already seen.
    let mut identical: HashMap<(String, String), PseudoLabel> = HashMap::new();
    for l in retrieved.into_iter().chain(direct) {
        identical
            .entry((l.text_event_id.clone(), l.video_event_id.clone()))
            .or_insert(l);
    }
    let mut hierarchical: HashMap<(String, String), PseudoLabel> = propagated
        .into_iter()
        .map(|l| ((l.text_event_id.clone(), l.video_event_id.clone()), l))
        .collect();

    let mut out = PseudoLabelSet::default();
    for te in &doc.text_events {
        for ve in &doc.video_events {
            let k = (te.id.clone(), ve.id.clone());
            match (identical.remove(&k), hierarchical.remove(&k)) {
                (Some(i), Some(h)) => {
                    let kept = match config.conflict_policy {
                        ConflictPolicy::IdenticalWins => Some(i),
                        ConflictPolicy::HierarchicalWins => Some(h),
                        ConflictPolicy::DropBoth => None,
                    };
                    let key = PairKey::new(&doc.doc_id, &te.id, &ve.id);
                    log::debug!(
                        "label conflict on {:?}: keeping {:?}",
                        key,
                        kept.as_ref().map(|l| l.label)
                    );
                    out.conflicts.push(Conflict {
                        key,
                        kept: kept.as_ref().map(|l| l.label),
                    });
                    out.labels.extend(kept);
                }
                (Some(l), None) | (None, Some(l)) => out.labels.push(l),
                (None, None) => {}
            }
        }
    }
    Ok(out)
}

/// Pseudo labels for a whole corpus. Documents are processed independently on
/// up to `workers` threads; the result is identical for any worker count.
pub fn generate_pseudo_labels(
    corpus: &[Document],
    predictor: &dyn HierarchyPredictor,
    featurizer: &Featurizer<'_>,
    config: &PseudoLabelConfig,
    workers: usize,
) -> Result<PseudoLabelSet> {
    let scale = featurizer.config.similarity_scale;
    let per_doc = parallel::try_map(corpus, workers, |doc| {
        let features = featurizer.featurize(doc)?;
        label_document(doc, &features, predictor, scale, config)
    })?;
    let mut out = PseudoLabelSet::default();
    for set in per_doc {
        out.labels.extend(set.labels);
        out.conflicts.extend(set.conflicts);
    }
    if !out.conflicts.is_empty() {
        log::info!(
            "{} label conflicts resolved with policy {}",
            out.conflicts.len(),
            config.conflict_policy
        );
    }
    Ok(out)
}

//! Seeded synthetic corpora with planted relations.
//!
//! Each story has a topic. Its first text event names the topic and the others
//! name distinct subevents of it, one sentence per event. Video shots show
//! either a mentioned subevent (Identical to that text event and a subevent of
//! the topic event), the topic itself (Identical to the topic event), or an
//! unrelated scene. Frames are the concept's encoder direction plus Gaussian
//! noise, so retrieval with a planted-mode toy encoder recovers the relations
//! up to the noise level.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{
    frame_timestamps, similarity, span_attention_weights, EncoderConfig, Featurizer, FrameCache,
    FrameCacheRecord, JointEncoder, ToyEncoder, WeightedText,
};
use crate::error::{Error, Result};
use crate::eventgraph::{
    validate_document, Document, Label, RelationRecord, Span, TextEvent, VideoEvent,
};
use crate::pseudolabel::{TextHierPair, DEFAULT_LAMBDA};
use crate::seeding::substream;

/// Topic vocabulary: each topic with its subevents.
pub const TOPICS: [(&str, [&str; 3]); 4] = [
    ("protest", ["march", "rally", "arrest"]),
    ("storm", ["flooding", "evacuation", "rescue"]),
    ("election", ["campaign", "voting", "tally"]),
    ("wedding", ["ceremony", "toast", "dance"]),
];

/// Scenes that relate to no text event.
pub const SCENES: [&str; 4] = ["skyline", "interview", "traffic", "studio"];

const FILLER_WORDS: usize = 300;
/// Noise-free text/concept similarity every generated sentence must reach.
const SENTENCE_MARGIN: f64 = 15.0;

/// Every planted tag, sorted.
pub fn planted_tags() -> Vec<String> {
    let mut tags: Vec<String> = TOPICS
        .iter()
        .flat_map(|(t, subs)| std::iter::once(*t).chain(subs.iter().copied()))
        .chain(SCENES)
        .map(str::to_string)
        .collect();
    tags.sort();
    tags
}

fn parent_of(tag: &str) -> Option<&'static str> {
    TOPICS
        .iter()
        .find(|(_, subs)| subs.contains(&tag))
        .map(|(t, _)| *t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub n_eval_docs: usize,
    /// Inclusive range of text events per document.
    pub text_events: (usize, usize),
    /// Inclusive range of video events per document.
    pub video_events: (usize, usize),
    /// Probability that a shot shows a mentioned subevent.
    pub hierarchy_density: f64,
    /// Probability that a shot shows the topic event itself.
    pub identical_density: f64,
    /// Standard deviation of per-dimension frame noise.
    pub noise: f64,
    pub seed: u64,
    pub dim: usize,
    pub fps: f64,
    /// Probability that the extractor-style corpus drops a text event.
    pub ie_drop_rate: f64,
    /// Probability that the extractor-style corpus adds a spurious event to a document.
    pub ie_spurious_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_docs: 200,
            n_eval_docs: 100,
            text_events: (2, 4),
            video_events: (4, 8),
            hierarchy_density: 0.5,
            identical_density: 0.15,
            noise: 0.1,
            seed: 7,
            dim: 32,
            fps: 3.0,
            ie_drop_rate: 0.1,
            ie_spurious_rate: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        let (m0, m1) = self.text_events;
        let (n0, n1) = self.video_events;
        if m0 < 1 || m1 < m0 || m1 > 4 {
            return fail(format!("text_events range {m0}..={m1} must lie within 1..=4"));
        }
        if n0 < 1 || n1 < n0 {
            return fail(format!("video_events range {n0}..={n1} must be non-empty and start at 1 or more"));
        }
        // Shots last at most 6 s; keep stories under the corpus duration cap.
        if n1 * 6 > 840 {
            return fail("at most 140 video events per document".into());
        }
        for (name, v) in [
            ("hierarchy_density", self.hierarchy_density),
            ("identical_density", self.identical_density),
            ("ie_drop_rate", self.ie_drop_rate),
            ("ie_spurious_rate", self.ie_spurious_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1]"));
            }
        }
        if self.hierarchy_density + self.identical_density > 1.0 {
            return fail("hierarchy_density + identical_density must not exceed 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be >= 0".into());
        }
        let tags = planted_tags().len();
        if self.dim < tags + 4 {
            return fail(format!("dim must be at least {}", tags + 4));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail("fps must be > 0".into());
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<ToyEncoder> {
        ToyEncoder::with_planted(self.seed, self.dim, &planted_tags())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            fps: self.fps,
            ..Default::default()
        }
    }
}

/// Everything one generator run produces.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<Document>,
    pub eval: Vec<Document>,
    /// Evaluation documents with extractor-style (perturbed) text events.
    pub eval_ie: Vec<Document>,
    pub train_gold: Vec<RelationRecord>,
    pub eval_gold: Vec<RelationRecord>,
    /// Gold text hierarchy for the train and eval documents.
    pub hierarchy: Vec<TextHierPair>,
    /// Text hierarchy over the perturbed events of `eval_ie`.
    pub ie_hierarchy: Vec<TextHierPair>,
    pub frames: Vec<FrameCacheRecord>,
    /// Knowledge-base edges in the tab-separated `relation head tail` format.
    pub kb: String,
}

impl SyntheticData {
    pub fn frame_cache(&self) -> Result<FrameCache> {
        let mut cache = FrameCache::new();
        for r in &self.frames {
            cache.insert(
                &r.doc_id,
                &r.event_id,
                r.frames.iter().cloned().map(crate::embedding::Embedding::new).collect(),
            )?;
        }
        Ok(cache)
    }
}

struct Story {
    doc: Document,
    gold: Vec<RelationRecord>,
    hierarchy: Vec<TextHierPair>,
    frames: Vec<FrameCacheRecord>,
    concepts: Vec<&'static str>,
}

fn pick_range(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

/// A sentence of 5 to 8 tokens containing `tag`, redrawn until its event
/// embedding is clearly similar to the tag direction.
fn sentence_for(
    tag: &str,
    rng: &mut ChaCha8Rng,
    encoder: &ToyEncoder,
    config: &EncoderConfig,
) -> Result<(Vec<String>, usize)> {
    let target = crate::embedding::Embedding::new(encoder.token_vector(tag));
    for _ in 0..1000 {
        let len = rng.gen_range(5..=8);
        let at = rng.gen_range(0..len);
        let tokens: Vec<String> = (0..len)
            .map(|i| {
                if i == at {
                    tag.to_string()
                } else {
                    format!("w{}", rng.gen_range(0..FILLER_WORDS))
                }
            })
            .collect();
        let weights = span_attention_weights(len, Span(at, at + 1), config.mask_exponent)?;
        let emb = encoder.encode_texts(&[WeightedText {
            tokens: &tokens,
            weights: &weights,
        }])?;
        if similarity(&emb[0], &target, config.similarity_scale)? >= DEFAULT_LAMBDA + SENTENCE_MARGIN {
            return Ok((tokens, at));
        }
    }
    Err(Error::config(format!("cannot build a sentence for {tag:?} at this dimension")))
}

fn story(
    doc_id: String,
    spec: &SyntheticSpec,
    encoder: &ToyEncoder,
    config: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Story> {
    let (topic, subs) = TOPICS[rng.gen_range(0..TOPICS.len())];
    let m = pick_range(rng, spec.text_events);
    let mut mentioned: Vec<&'static str> = subs.to_vec();
    mentioned.shuffle(rng);
    mentioned.truncate(m - 1);
    let concepts: Vec<&'static str> = std::iter::once(topic).chain(mentioned.iter().copied()).collect();

    let mut sentences = Vec::new();
    let mut text_events = Vec::new();
    for (i, tag) in concepts.iter().enumerate() {
        let (tokens, at) = sentence_for(tag, rng, encoder, config)?;
        sentences.push(tokens);
        text_events.push(TextEvent {
            id: format!("e{}", i + 1),
            sentence_index: i,
            trigger_span: Span(at, at + 1),
            surface: tag.to_string(),
        });
    }
    let hierarchy = (1..concepts.len())
        .map(|i| TextHierPair {
            doc_id: doc_id.clone(),
            parent_event_id: text_events[0].id.clone(),
            sub_event_id: text_events[i].id.clone(),
        })
        .collect();

    let n = pick_range(rng, spec.video_events);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut clock = 0usize;
    let mut video_events = Vec::new();
    let mut frames = Vec::new();
    let mut gold = Vec::new();
    let mut relate = |text: &str, video: &str, label: Label| {
        gold.push(RelationRecord {
            doc_id: doc_id.clone(),
            text_event_id: text.to_string(),
            video_event_id: video.to_string(),
            label,
            confidence: None,
            provenance: "planted".into(),
        })
    };
    for j in 0..n {
        let u: f64 = rng.gen();
        let shown: &str = if u < spec.hierarchy_density && concepts.len() > 1 {
            concepts[rng.gen_range(1..concepts.len())]
        } else if u < spec.hierarchy_density + spec.identical_density {
            topic
        } else {
            SCENES[rng.gen_range(0..SCENES.len())]
        };
        let id = format!("v{}", j + 1);
        for (ti, c) in concepts.iter().enumerate() {
            if *c == shown {
                relate(&text_events[ti].id, &id, Label::Identical);
            }
            if ti == 0 && parent_of(shown) == Some(*c) {
                relate(&text_events[0].id, &id, Label::Hierarchical);
            }
        }
        // Times are kept in tenths of a second so boundaries are exact.
        let end = clock + rng.gen_range(20..=60);
        let event = VideoEvent {
            id: id.clone(),
            start_s: clock as f64 / 10.0,
            end_s: end as f64 / 10.0,
            frame_ref: Some(format!("{doc_id}/{id}")),
        };
        clock = end;
        let direction = encoder.token_vector(shown);
        let rows: Vec<Vec<f64>> = frame_timestamps(&event, spec.fps)
            .iter()
            .map(|_| {
                direction
                    .iter()
                    .map(|x| if spec.noise > 0.0 { x + noise.sample(rng) } else { *x })
                    .collect()
            })
            .collect();
        frames.push(FrameCacheRecord {
            doc_id: doc_id.clone(),
            event_id: id,
            z: rows.len(),
            d: spec.dim,
            fps: spec.fps,
            frames: rows,
        });
        video_events.push(event);
    }
    let doc = Document {
        doc_id,
        sentences,
        video_duration_s: clock as f64 / 10.0,
        description_word_count: rng.gen_range(10..=60),
        text_events,
        video_events,
        asr_segments: Vec::new(),
    };
    let violations = validate_document(&doc);
    if !violations.is_empty() {
        return Err(Error::Validation {
            doc_id: doc.doc_id.clone(),
            violations,
        });
    }
    Ok(Story {
        doc,
        gold,
        hierarchy,
        frames,
        concepts,
    })
}

/// Extractor-style copy of `doc`: events may be dropped, widened by one token,
/// or joined by a spurious event on a filler word.
fn perturb(doc: &Document, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Document, Vec<TextHierPair>) {
    let mut kept: Vec<(usize, TextEvent)> = Vec::new();
    for (i, ev) in doc.text_events.iter().enumerate() {
        if rng.gen::<f64>() < spec.ie_drop_rate {
            continue;
        }
        let len = doc.sentences[ev.sentence_index].len();
        let Span(a, b) = ev.trigger_span;
        let span = match rng.gen_range(0..3) {
            0 if b < len => Span(a, b + 1),
            1 if a > 0 => Span(a - 1, b),
            _ => Span(a, b),
        };
        kept.push((
            i,
            TextEvent {
                id: String::new(),
                sentence_index: ev.sentence_index,
                trigger_span: span,
                surface: doc.sentences[ev.sentence_index][span.0..span.1].join(" "),
            },
        ));
    }
    if rng.gen::<f64>() < spec.ie_spurious_rate {
        let s = rng.gen_range(0..doc.sentences.len());
        let trigger = doc.text_events.iter().find(|e| e.sentence_index == s).map(|e| e.trigger_span);
        let free: Vec<usize> = (0..doc.sentences[s].len())
            .filter(|&k| trigger.is_none_or(|t| !t.overlaps(Span(k, k + 1))))
            .collect();
        if let Some(&k) = free.choose(rng) {
            kept.push((
                usize::MAX,
                TextEvent {
                    id: String::new(),
                    sentence_index: s,
                    trigger_span: Span(k, k + 1),
                    surface: doc.sentences[s][k].clone(),
                },
            ));
        }
    }
    kept.sort_by_key(|(_, e)| (e.sentence_index, e.trigger_span.0));
    let mut origin = BTreeMap::new();
    for (n, (i, ev)) in kept.iter_mut().enumerate() {
        ev.id = format!("p{}", n + 1);
        origin.insert(*i, ev.id.clone());
    }
    let hierarchy = match origin.get(&0) {
        Some(parent) => (1..doc.text_events.len())
            .filter_map(|i| origin.get(&i))
            .map(|sub| TextHierPair {
                doc_id: doc.doc_id.clone(),
                parent_event_id: parent.clone(),
                sub_event_id: sub.clone(),
            })
            .collect(),
        None => Vec::new(),
    };
    let mut out = doc.clone();
    out.text_events = kept.into_iter().map(|(_, e)| e).collect();
    (out, hierarchy)
}

fn kb_text() -> String {
    let mut out = String::from("# relation\thead\ttail\n");
    for (topic, subs) in TOPICS {
        for s in subs {
            let _ = writeln!(out, "/r/HasSubevent\t{topic}\t{s}");
        }
    }
    // Edges of other relations are ignored by extraction.
    for (topic, _) in TOPICS {
        let _ = writeln!(out, "/r/IsA\t{topic}\tevent");
    }
    let _ = writeln!(out, "/r/RelatedTo\tskyline\tstudio");
    out
}

/// Generates train, eval and extractor-style eval corpora with their gold files.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let encoder = spec.encoder()?;
    let config = spec.encoder_config();
    let mut data = SyntheticData {
        train: Vec::new(),
        eval: Vec::new(),
        eval_ie: Vec::new(),
        train_gold: Vec::new(),
        eval_gold: Vec::new(),
        hierarchy: Vec::new(),
        ie_hierarchy: Vec::new(),
        frames: Vec::new(),
        kb: kb_text(),
    };
    for (split, count) in [("train", spec.n_docs), ("eval", spec.n_eval_docs)] {
        for i in 0..count {
            let doc_id = format!("syn-{split}-{i:04}");
            let mut rng = substream(spec.seed, &format!("synthetic/{doc_id}"));
            let s = story(doc_id, spec, &encoder, &config, &mut rng)?;
            debug_assert_eq!(s.concepts.len(), s.doc.text_events.len());
            data.hierarchy.extend(s.hierarchy);
            data.frames.extend(s.frames);
            if split == "train" {
                data.train_gold.extend(s.gold);
                data.train.push(s.doc);
            } else {
                let (ie, ie_h) = perturb(&s.doc, spec, &mut rng);
                data.eval_ie.push(ie);
                data.ie_hierarchy.extend(ie_h);
                data.eval_gold.extend(s.gold);
                data.eval.push(s.doc);
            }
        }
    }
    Ok(data)
}

/// Similarity statistics of planted Identical pairs against all other pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub identical_pairs: usize,
    pub identical_min: f64,
    pub identical_at_or_below_lambda: usize,
    pub other_pairs: usize,
    pub other_max: f64,
    pub other_above_lambda: usize,
}

/// Measures planted-pair similarities with the generator's own encoder and frames.
pub fn calibrate(spec: &SyntheticSpec, data: &SyntheticData, lambda: f64) -> Result<Calibration> {
    let encoder = spec.encoder()?;
    let config = spec.encoder_config();
    let frames = data.frame_cache()?;
    let featurizer = Featurizer::new(&encoder, &frames, &config)?;
    let gold: BTreeMap<crate::eventgraph::PairKey, Label> = data
        .train_gold
        .iter()
        .chain(&data.eval_gold)
        .map(|r| (r.key(), r.label))
        .collect();
    let mut c = Calibration {
        identical_pairs: 0,
        identical_min: f64::INFINITY,
        identical_at_or_below_lambda: 0,
        other_pairs: 0,
        other_max: f64::NEG_INFINITY,
        other_above_lambda: 0,
    };
    for doc in data.train.iter().chain(&data.eval) {
        let f = featurizer.featurize(doc)?;
        for (i, t) in doc.text_events.iter().enumerate() {
            for (j, v) in doc.video_events.iter().enumerate() {
                let sim = featurizer.similarity(&f.text[i], &f.video[j])?;
                let key = crate::eventgraph::PairKey::new(&doc.doc_id, &t.id, &v.id);
                if gold.get(&key) == Some(&Label::Identical) {
                    c.identical_pairs += 1;
                    c.identical_min = c.identical_min.min(sim);
                    c.identical_at_or_below_lambda += usize::from(sim <= lambda);
                } else {
                    c.other_pairs += 1;
                    c.other_max = c.other_max.max(sim);
                    c.other_above_lambda += usize::from(sim > lambda);
                }
            }
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgraph::{validate_graph, records_to_graphs};

    fn small(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_docs: 10,
            n_eval_docs: 5,
            noise,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_identical_pairs_clear_the_threshold() {
        let spec = small(0.0);
        let data = generate(&spec).unwrap();
        let c = calibrate(&spec, &data, DEFAULT_LAMBDA).unwrap();
        assert!(c.identical_pairs > 0);
        assert_eq!(c.identical_at_or_below_lambda, 0, "{c:?}");
        assert_eq!(c.other_above_lambda, 0, "{c:?}");
        assert!(c.identical_min > DEFAULT_LAMBDA);
    }

    #[test]
    fn planted_relations_are_valid_graphs() {
        let data = generate(&small(0.1)).unwrap();
        let graphs = records_to_graphs(&data.train_gold).unwrap();
        for doc in &data.train {
            if let Some(g) = graphs.get(&doc.doc_id) {
                assert!(validate_graph(doc, g).is_empty());
            }
        }
        assert!(data.train_gold.iter().any(|r| r.label == Label::Hierarchical));
        assert!(data.train_gold.iter().any(|r| r.label == Label::Identical));
        for doc in data.train.iter().chain(&data.eval).chain(&data.eval_ie) {
            assert!(validate_document(doc).is_empty(), "{}", doc.doc_id);
            assert!(crate::eventgraph::CorpusFilter::default().keeps(doc));
        }
    }

    #[test]
    fn zero_densities_give_no_gold() {
        let spec = SyntheticSpec {
            hierarchy_density: 0.0,
            identical_density: 0.0,
            ..small(0.1)
        };
        let data = generate(&spec).unwrap();
        assert!(data.train_gold.is_empty() && data.eval_gold.is_empty());
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small(0.1)).unwrap();
        let b = generate(&small(0.1)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.eval_ie, b.eval_ie);
        let c = generate(&SyntheticSpec { seed: 8, ..small(0.1) }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn perturbed_events_mostly_overlap_gold() {
        let data = generate(&SyntheticSpec { n_eval_docs: 40, ..small(0.1) }).unwrap();
        let mut matched = 0;
        let mut total = 0;
        for (g, p) in data.eval.iter().zip(&data.eval_ie) {
            let m = crate::evaluation::match_predicted_text_events(&g.text_events, &p.text_events, false);
            matched += m.len();
            total += g.text_events.len();
            let ids: Vec<&str> = p.text_events.iter().map(|e| e.id.as_str()).collect();
            assert!(data.ie_hierarchy.iter().filter(|h| h.doc_id == p.doc_id).all(|h| ids.contains(&h.parent_event_id.as_str())));
        }
        assert!(matched as f64 > 0.75 * total as f64, "{matched}/{total}");
        assert!(matched < total + 1);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for bad in [
            SyntheticSpec { text_events: (0, 2), ..small(0.1) },
            SyntheticSpec { hierarchy_density: 0.8, identical_density: 0.3, ..small(0.1) },
            SyntheticSpec { dim: 16, ..small(0.1) },
            SyntheticSpec { noise: -1.0, ..small(0.1) },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn kb_parses() {
        let edges = crate::commonsense::parse_kb_edges(&kb_text(), std::path::Path::new("kb.tsv")).unwrap();
        assert_eq!(edges.iter().filter(|e| e.relation == "HasSubevent").count(), 12);
    }
}

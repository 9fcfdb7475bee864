//! Joint text/image encoder interface and the event-level features built on it.
//!
//! Real pretrained encoders plug in through [`JointEncoder`]; the crate ships
//! [`ToyEncoder`], a seeded hash encoder with an optional planted-concept mode
//! used by the synthetic corpus and the tests.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventgraph::{Document, Span, VideoEvent};
use crate::jsonl;
use crate::seeding::substream;

pub const DEFAULT_DIM: usize = 512;

/// Fixed-dimension real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    /// Like [`Embedding::new`] but rejects non-finite entries.
    pub fn try_new(values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Embedding(values))
        } else {
            Err(Error::arg("embedding has non-finite entries"))
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    /// Frame sampling rate in frames per second.
    pub fps: f64,
    /// Exponent of the event-focused attention mask.
    pub mask_exponent: f64,
    /// Multiplier applied to cosine similarity.
    pub similarity_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            fps: 3.0,
            mask_exponent: 1.0,
            similarity_scale: 100.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("encoder dim must be >= 2"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::config("encoder fps must be > 0"));
        }
        if !(self.mask_exponent > 0.0 && self.mask_exponent.is_finite()) {
            return Err(Error::config("mask exponent must be > 0"));
        }
        if !(self.similarity_scale > 0.0 && self.similarity_scale.is_finite()) {
            return Err(Error::config("similarity scale must be > 0"));
        }
        Ok(())
    }
}

/// Attention weights focused on token `k`: `w_i ∝ (1 + |i - k|)^(-p)`, normalized to sum 1.
pub fn event_attention_weights(len: usize, k: usize, p: f64) -> Result<Vec<f64>> {
    if k >= len {
        return Err(Error::arg(format!(
            "event position {k} out of range for sentence of length {len}"
        )));
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::arg("mask exponent must be > 0"));
    }
    let raw: Vec<f64> = (0..len)
        .map(|i| (1.0 + i.abs_diff(k) as f64).powf(-p))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Mask for a multi-token trigger: the mean of the single-token masks over the span.
pub fn span_attention_weights(len: usize, span: Span, p: f64) -> Result<Vec<f64>> {
    if span.is_empty() || span.end() > len {
        return Err(Error::arg("trigger span outside sentence"));
    }
    let width = (span.end() - span.start()) as f64;
    let mut acc = vec![0.0; len];
    for k in span.start()..span.end() {
        for (a, w) in acc.iter_mut().zip(event_attention_weights(len, k, p)?) {
            *a += w / width;
        }
    }
    Ok(acc)
}

/// A sentence plus the attention weights its pooled embedding should use.
#[derive(Debug, Clone, Copy)]
pub struct WeightedText<'a> {
    pub tokens: &'a [String],
    pub weights: &'a [f64],
}

/// A frame to embed: the video event's frame reference and a timestamp in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescriptor {
    pub source: String,
    pub timestamp_s: f64,
}

/// Adapter for a joint text/image encoder.
///
/// Batches must come back in input order. Implementations are read-only after
/// construction and may be shared across threads.
pub trait JointEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Pools each sentence with the given per-token weights.
    fn encode_texts(&self, batch: &[WeightedText<'_>]) -> Result<Vec<Embedding>>;

    fn encode_frames(&self, batch: &[FrameDescriptor]) -> Result<Vec<Embedding>>;
}

pub fn encode_text_event(
    doc: &Document,
    event_id: &str,
    encoder: &dyn JointEncoder,
    config: &EncoderConfig,
) -> Result<Embedding> {
    let event = doc.text_event(event_id).ok_or_else(|| Error::Data {
        doc_id: doc.doc_id.clone(),
        message: format!("unknown text event {event_id}"),
    })?;
    let tokens = doc.sentence_of(event).ok_or_else(|| Error::Data {
        doc_id: doc.doc_id.clone(),
        message: format!("text event {event_id} points past the last sentence"),
    })?;
    let weights = span_attention_weights(tokens.len(), event.trigger_span, config.mask_exponent)?;
    check_dim(encoder, config)?;
    let mut out = encoder.encode_texts(&[WeightedText {
        tokens,
        weights: &weights,
    }])?;
    out.pop().ok_or_else(|| Error::arg("encoder returned an empty batch"))
}

/// Embeds a free-standing phrase with uniform attention over its tokens.
pub fn encode_phrases(phrases: &[&str], encoder: &dyn JointEncoder) -> Result<Vec<Embedding>> {
    let tokens: Vec<Vec<String>> = phrases
        .iter()
        .map(|p| p.split_whitespace().map(str::to_string).collect())
        .collect();
    if tokens.iter().any(Vec::is_empty) {
        return Err(Error::arg("cannot encode an empty phrase"));
    }
    let weights: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| vec![1.0 / t.len() as f64; t.len()])
        .collect();
    let batch: Vec<_> = tokens
        .iter()
        .zip(&weights)
        .map(|(t, w)| WeightedText {
            tokens: t,
            weights: w,
        })
        .collect();
    encoder.encode_texts(&batch)
}

/// Mean of the frame embeddings.
pub fn encode_video_event(frames: &[Embedding]) -> Result<Embedding> {
    let first = frames
        .first()
        .ok_or_else(|| Error::arg("video event has no frames"))?;
    let d = first.dim();
    let mut acc = vec![0.0; d];
    for f in frames {
        if f.dim() != d {
            return Err(Error::arg("frame embeddings differ in dimension"));
        }
        for (a, v) in acc.iter_mut().zip(f.as_slice()) {
            *a += v;
        }
    }
    let z = frames.len() as f64;
    Ok(Embedding(acc.into_iter().map(|a| a / z).collect()))
}

/// Frame timestamps for a shot: midpoints of `1/fps`-second cells, at least one frame.
pub fn frame_timestamps(event: &VideoEvent, fps: f64) -> Vec<f64> {
    let z = ((event.duration_s() * fps).floor() as usize).max(1);
    if event.duration_s() * fps < 1.0 {
        return vec![0.5 * (event.start_s + event.end_s)];
    }
    (0..z)
        .map(|j| event.start_s + (j as f64 + 0.5) / fps)
        .collect()
}

/// `scale * cos(a, b)`.
pub fn similarity(a: &Embedding, b: &Embedding, scale: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::arg(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("similarity of a zero vector is undefined"));
    }
    let cos = (dot(a.as_slice(), b.as_slice()) / (na * nb)).clamp(-1.0, 1.0);
    Ok(scale * cos)
}

fn check_dim(encoder: &dyn JointEncoder, config: &EncoderConfig) -> Result<()> {
    if encoder.dim() != config.dim {
        return Err(Error::config(format!(
            "encoder produces {}-d vectors but config expects {}",
            encoder.dim(),
            config.dim
        )));
    }
    Ok(())
}

/// Deterministic stand-in for a pretrained joint encoder.
///
/// Every token maps to a seeded unit vector. In planted mode each planted tag
/// owns one direction of an orthonormal set, and all other tokens are projected
/// onto the orthogonal complement, so a planted tag is similar only to itself.
/// Frames are embedded from their `source` string, read as a tag.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    seed: u64,
    dim: usize,
    planted: BTreeMap<String, Vec<f64>>,
    basis: Vec<Vec<f64>>,
}

impl ToyEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            planted: BTreeMap::new(),
            basis: Vec::new(),
        }
    }

    /// Planted-correlation mode. Needs strictly fewer distinct tags than dimensions.
    pub fn with_planted<S: AsRef<str>>(seed: u64, dim: usize, tags: &[S]) -> Result<Self> {
        let mut uniq: Vec<&str> = tags.iter().map(AsRef::as_ref).collect();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() >= dim {
            return Err(Error::config(format!(
                "planted mode needs fewer tags ({}) than dimensions ({dim})",
                uniq.len()
            )));
        }
        let mut rng = substream(seed, "toy-encoder/planted");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(uniq.len());
        while basis.len() < uniq.len() {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            project_out(&mut v, &basis);
            if normalize(&mut v) > 1e-6 {
                basis.push(v);
            }
        }
        let planted = uniq
            .into_iter()
            .map(str::to_string)
            .zip(basis.iter().cloned())
            .collect();
        Ok(Self {
            seed,
            dim,
            planted,
            basis,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn planted_tags(&self) -> impl Iterator<Item = &str> {
        self.planted.keys().map(String::as_str)
    }

    /// Unit vector for one token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.planted.get(token) {
            return v.clone();
        }
        let mut rng = substream(self.seed, &format!("toy-encoder/token/{token}"));
        loop {
            let mut v: Vec<f64> = (0..self.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            project_out(&mut v, &self.basis);
            if normalize(&mut v) > 1e-6 {
                return v;
            }
        }
    }
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= c * y;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

impl JointEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_texts(&self, batch: &[WeightedText<'_>]) -> Result<Vec<Embedding>> {
        batch
            .iter()
            .map(|item| {
                if item.tokens.len() != item.weights.len() {
                    return Err(Error::arg("token and weight counts differ"));
                }
                let mut acc = vec![0.0; self.dim];
                for (tok, w) in item.tokens.iter().zip(item.weights) {
                    for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                        *a += w * v;
                    }
                }
                Ok(Embedding(acc))
            })
            .collect()
    }

    fn encode_frames(&self, batch: &[FrameDescriptor]) -> Result<Vec<Embedding>> {
        Ok(batch
            .iter()
            .map(|f| Embedding(self.token_vector(&f.source)))
            .collect())
    }
}

/// One record of the frame-embedding cache: the `z x d` frame matrix of one video event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCacheRecord {
    pub doc_id: String,
    pub event_id: String,
    pub z: usize,
    pub d: usize,
    pub fps: f64,
    pub frames: Vec<Vec<f64>>,
}

/// Supplies per-frame embeddings for a video event.
pub trait FrameSource: Sync {
    fn frames(&self, doc: &Document, event: &VideoEvent) -> Result<Vec<Embedding>>;
}

/// Precomputed frame embeddings keyed by (doc_id, event_id).
#[derive(Debug, Clone, Default)]
pub struct FrameCache {
    dim: Option<usize>,
    entries: HashMap<(String, String), Vec<Embedding>>,
}

impl FrameCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: &str, event_id: &str, frames: Vec<Embedding>) -> Result<()> {
        let d = frames
            .first()
            .map(Embedding::dim)
            .ok_or_else(|| Error::arg("frame cache entry without frames"))?;
        if frames.iter().any(|f| f.dim() != d) || self.dim.is_some_and(|x| x != d) {
            return Err(Error::Data {
                doc_id: doc_id.to_string(),
                message: format!("frame cache entry {event_id} has inconsistent dimension"),
            });
        }
        self.dim = Some(d);
        self.entries
            .insert((doc_id.to_string(), event_id.to_string()), frames);
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<FrameCacheRecord> = jsonl::read(path)?;
        let mut cache = FrameCache::new();
        for (i, r) in records.into_iter().enumerate() {
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if r.z != r.frames.len() || r.z == 0 {
                return Err(bad(format!("header z={} but {} frames", r.z, r.frames.len())));
            }
            if r.frames.iter().any(|f| f.len() != r.d) {
                return Err(bad(format!("frame width differs from header d={}", r.d)));
            }
            let frames = r
                .frames
                .into_iter()
                .map(Embedding::try_new)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| bad(e.to_string()))?;
            cache
                .insert(&r.doc_id, &r.event_id, frames)
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(cache)
    }

    pub fn save(records: &[FrameCacheRecord], path: &Path) -> Result<()> {
        jsonl::write(path, records)
    }
}

impl FrameSource for FrameCache {
    fn frames(&self, doc: &Document, event: &VideoEvent) -> Result<Vec<Embedding>> {
        self.entries
            .get(&(doc.doc_id.clone(), event.id.clone()))
            .cloned()
            .ok_or_else(|| Error::Data {
                doc_id: doc.doc_id.clone(),
                message: format!("no cached frames for video event {}", event.id),
            })
    }
}

/// Samples frames at the configured rate and embeds them with the encoder.
/// Each video event must carry a `frame_ref`.
pub struct EncodedFrames<'a> {
    pub encoder: &'a dyn JointEncoder,
    pub fps: f64,
}

impl FrameSource for EncodedFrames<'_> {
    fn frames(&self, doc: &Document, event: &VideoEvent) -> Result<Vec<Embedding>> {
        let source = event.frame_ref.as_ref().ok_or_else(|| Error::Data {
            doc_id: doc.doc_id.clone(),
            message: format!("video event {} has no frame_ref", event.id),
        })?;
        let batch: Vec<FrameDescriptor> = frame_timestamps(event, self.fps)
            .into_iter()
            .map(|t| FrameDescriptor {
                source: source.clone(),
                timestamp_s: t,
            })
            .collect();
        self.encoder.encode_frames(&batch)
    }
}

/// Cached event embeddings for one document, aligned with its event lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DocFeatures {
    pub text: Vec<Embedding>,
    pub video: Vec<Embedding>,
}

/// Encoder, frame source and config bundled for pipeline stages.
#[derive(Clone, Copy)]
pub struct Featurizer<'a> {
    pub encoder: &'a dyn JointEncoder,
    pub frames: &'a dyn FrameSource,
    pub config: &'a EncoderConfig,
}

impl<'a> Featurizer<'a> {
    pub fn new(
        encoder: &'a dyn JointEncoder,
        frames: &'a dyn FrameSource,
        config: &'a EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_dim(encoder, config)?;
        Ok(Self {
            encoder,
            frames,
            config,
        })
    }

    pub fn featurize(&self, doc: &Document) -> Result<DocFeatures> {
        let mut weights = Vec::with_capacity(doc.text_events.len());
        for ev in &doc.text_events {
            let tokens = doc.sentence_of(ev).ok_or_else(|| Error::Data {
                doc_id: doc.doc_id.clone(),
                message: format!("text event {} points past the last sentence", ev.id),
            })?;
            weights.push(span_attention_weights(
                tokens.len(),
                ev.trigger_span,
                self.config.mask_exponent,
            )?);
        }
        let batch: Vec<WeightedText<'_>> = doc
            .text_events
            .iter()
            .zip(&weights)
            .map(|(ev, w)| WeightedText {
                tokens: &doc.sentences[ev.sentence_index],
                weights: w,
            })
            .collect();
        let text = if batch.is_empty() {
            Vec::new()
        } else {
            self.encoder.encode_texts(&batch)?
        };
        let video = doc
            .video_events
            .iter()
            .map(|ev| encode_video_event(&self.frames.frames(doc, ev)?))
            .collect::<Result<Vec<_>>>()?;
        let d = self.config.dim;
        if text.iter().chain(&video).any(|e| e.dim() != d) {
            return Err(Error::Data {
                doc_id: doc.doc_id.clone(),
                message: format!("event embedding dimension differs from configured {d}"),
            });
        }
        Ok(DocFeatures { text, video })
    }

    pub fn similarity(&self, a: &Embedding, b: &Embedding) -> Result<f64> {
        similarity(a, b, self.config.similarity_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgraph::tests::sample_doc;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn mask_examples() {
        assert_eq!(event_attention_weights(1, 0, 1.0).unwrap(), vec![1.0]);
        let w = event_attention_weights(3, 1, 1.0).unwrap();
        for (a, b) in w.iter().zip([0.25, 0.5, 0.25]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        // 1, 1/4, 1/9, 1/16, 1/25 normalized by their sum 5269/3600.
        let w = event_attention_weights(5, 0, 2.0).unwrap();
        let raw = [1.0, 0.25, 1.0 / 9.0, 1.0 / 16.0, 1.0 / 25.0];
        let total = 5269.0 / 3600.0;
        for (a, r) in w.iter().zip(raw) {
            assert_abs_diff_eq!(*a, r / total, epsilon = 1e-15);
        }
        assert!(event_attention_weights(3, 3, 1.0).is_err());
    }

    #[test]
    fn video_event_mean() {
        let e = Embedding::new(vec![0.3, -1.0]);
        assert_eq!(encode_video_event(std::slice::from_ref(&e)).unwrap(), e);
        let m = encode_video_event(&[Embedding::new(vec![1.0, 0.0]), Embedding::new(vec![0.0, 1.0])])
            .unwrap();
        assert_eq!(m.as_slice(), &[0.5, 0.5]);
        let m = encode_video_event(&vec![e.clone(); 4]).unwrap();
        for (a, b) in m.as_slice().iter().zip(e.as_slice()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        assert!(encode_video_event(&[]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let a = Embedding::new(vec![1.0, 2.0, -0.5]);
        let neg = Embedding::new(vec![-1.0, -2.0, 0.5]);
        assert_abs_diff_eq!(similarity(&a, &a, 100.0).unwrap(), 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(similarity(&a, &neg, 100.0).unwrap(), -100.0, epsilon = 1e-12);
        let x = Embedding::new(vec![1.0, 0.0, 0.0]);
        let y = Embedding::new(vec![0.0, 3.0, 0.0]);
        assert_eq!(similarity(&x, &y, 100.0).unwrap(), 0.0);
        assert!(similarity(&x, &Embedding::zeros(3), 100.0).is_err());
        assert!(similarity(&x, &Embedding::zeros(2), 100.0).is_err());
    }

    #[test]
    fn frame_sampling_uses_midpoints() {
        let ev = VideoEvent {
            id: "v".into(),
            start_s: 2.0,
            end_s: 3.0,
            frame_ref: None,
        };
        let ts = frame_timestamps(&ev, 3.0);
        assert_eq!(ts.len(), 3);
        assert_abs_diff_eq!(ts[0], 2.0 + 1.0 / 6.0, epsilon = 1e-12);
        assert!(ts.iter().all(|t| *t > 2.0 && *t < 3.0));
        let short = VideoEvent { end_s: 2.1, ..ev };
        assert_eq!(frame_timestamps(&short, 3.0), vec![2.05]);
    }

    #[test]
    fn toy_encoder_is_deterministic() {
        let doc = sample_doc();
        let enc = ToyEncoder::new(3, 16);
        let cfg = EncoderConfig {
            dim: 16,
            ..Default::default()
        };
        let a = encode_text_event(&doc, "e1", &enc, &cfg).unwrap();
        let b = encode_text_event(&doc, "e1", &enc, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 16);
        assert!(encode_text_event(&doc, "nope", &enc, &cfg).is_err());
        let wrong = EncoderConfig::default();
        assert!(encode_text_event(&doc, "e1", &enc, &wrong).is_err());
    }

    #[test]
    fn event_position_changes_text_embedding() {
        let mut doc = sample_doc();
        let mut other = doc.text_events[0].clone();
        other.id = "e0".into();
        other.trigger_span = Span(0, 1);
        other.surface = "police".into();
        doc.text_events.push(other);
        let enc = ToyEncoder::new(11, 16);
        let cfg = EncoderConfig {
            dim: 16,
            ..Default::default()
        };
        let a = encode_text_event(&doc, "e1", &enc, &cfg).unwrap();
        let b = encode_text_event(&doc, "e0", &enc, &cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn seeds_give_different_vectors() {
        let a = ToyEncoder::new(1, 8);
        let b = ToyEncoder::new(2, 8);
        let differing = (0..100)
            .filter(|i| {
                let tok = format!("tok{i}");
                a.token_vector(&tok) != b.token_vector(&tok)
            })
            .count();
        assert!(differing >= 99);
    }

    #[test]
    fn planted_tags_exceed_threshold() {
        let enc = ToyEncoder::with_planted(5, 32, &["arrest", "protest"]).unwrap();
        let sentence: Vec<String> = "officials said the arrest was made late on sunday"
            .split(' ')
            .map(str::to_string)
            .collect();
        let w = event_attention_weights(sentence.len(), 3, 1.0).unwrap();
        let text = enc
            .encode_texts(&[WeightedText {
                tokens: &sentence,
                weights: &w,
            }])
            .unwrap()
            .remove(0);
        let frame = |tag: &str| {
            enc.encode_frames(&[FrameDescriptor {
                source: tag.into(),
                timestamp_s: 0.0,
            }])
            .unwrap()
            .remove(0)
        };
        assert!(similarity(&text, &frame("arrest"), 100.0).unwrap() > 30.39);
        assert!(similarity(&text, &frame("protest"), 100.0).unwrap().abs() < 1e-9);
        assert!(ToyEncoder::with_planted(5, 2, &["a", "b"]).is_err());
    }

    #[test]
    fn frame_cache_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        let rec = FrameCacheRecord {
            doc_id: "d1".into(),
            event_id: "v1".into(),
            z: 2,
            d: 2,
            fps: 3.0,
            frames: vec![vec![1.0, 0.0]],
        };
        FrameCache::save(std::slice::from_ref(&rec), &path).unwrap();
        assert!(matches!(FrameCache::load(&path), Err(Error::Parse { line: 1, .. })));
        let ok = FrameCacheRecord {
            z: 1,
            ..rec
        };
        FrameCache::save(&[ok], &path).unwrap();
        let cache = FrameCache::load(&path).unwrap();
        let doc = sample_doc();
        assert_eq!(cache.frames(&doc, &doc.video_events[0]).unwrap().len(), 1);
        assert!(cache.frames(&doc, &doc.video_events[1]).is_err());
    }

    proptest! {
        #[test]
        fn video_mean_is_permutation_invariant(
            frames in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..8),
            rot in 0usize..8,
        ) {
            let embs: Vec<Embedding> = frames.into_iter().map(Embedding::new).collect();
            let mut rotated = embs.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            let a = encode_video_event(&embs).unwrap();
            let b = encode_video_event(&rotated).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            // Linear in one frame: doubling frame 0 adds frame0 / z to the mean.
            let mut doubled = embs.clone();
            doubled[0] = Embedding::new(embs[0].as_slice().iter().map(|v| 2.0 * v).collect());
            let c = encode_video_event(&doubled).unwrap();
            let z = embs.len() as f64;
            for ((cv, av), f0) in c.as_slice().iter().zip(a.as_slice()).zip(embs[0].as_slice()) {
                prop_assert!((cv - av - f0 / z).abs() < 1e-12);
            }
        }

        #[test]
        fn similarity_symmetric_and_scale_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
            alpha in 0.01f64..100.0,
        ) {
            let ea = Embedding::new(a.clone());
            let eb = Embedding::new(b);
            prop_assume!(ea.norm() > 1e-3 && eb.norm() > 1e-3);
            let s = similarity(&ea, &eb, 100.0).unwrap();
            prop_assert!((s - similarity(&eb, &ea, 100.0).unwrap()).abs() < 1e-9);
            let scaled = Embedding::new(a.iter().map(|v| v * alpha).collect());
            prop_assert!((s - similarity(&scaled, &eb, 100.0).unwrap()).abs() < 1e-9);
            prop_assert!((-100.0..=100.0).contains(&s));
        }
    }
}

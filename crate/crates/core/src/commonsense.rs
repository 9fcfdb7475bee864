//! Commonsense pair features learned from knowledge-base subevent edges.
//!
//! Subevent edges (`HasSubevent`, `HasFirstSubevent`, `HasLastSubevent`) give
//! positive phrase pairs; random head/tail pairings give negatives. A single
//! affine layer over the concatenated pair embedding is trained with a margin
//! contrastive loss, then frozen and served to the relation classifier.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{encode_phrases, Embedding, JointEncoder};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::nn::{Mlp, MlpCache, Optimizer, OptimizerKind, Params};
use crate::seeding::substream;

/// Width of commonsense features.
pub const CS_DIM: usize = 512;

pub const SUBEVENT_RELATIONS: [&str; 3] = ["HasSubevent", "HasFirstSubevent", "HasLastSubevent"];

const CHECKPOINT_FORMAT: &str = "mmrel-cs-extractor";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KbEdge {
    pub relation: String,
    pub head: String,
    pub tail: String,
}

/// Parses tab-separated `relation<TAB>head<TAB>tail` lines. Blank lines and `#` comments are skipped;
/// a `/r/` prefix on the relation is dropped.
pub fn parse_kb_edges(text: &str, origin: &Path) -> Result<Vec<KbEdge>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected relation, head and tail separated by tabs".into(),
            });
        }
        out.push(KbEdge {
            relation: fields[0].trim_start_matches("/r/").to_string(),
            head: fields[1].to_string(),
            tail: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn load_kb_edges(path: &Path) -> Result<Vec<KbEdge>> {
    parse_kb_edges(&jsonl::read_string(path)?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KbEventPair {
    pub head: String,
    pub tail: String,
    pub polarity: Polarity,
}

/// Positive pairs from allowed relations (deduplicated, file order) followed by
/// `round(neg_ratio * positives)` seeded negatives: head/tail pairings drawn from
/// positive heads and tails that are neither positives nor self-pairs.
pub fn extract_kb_pairs(
    edges: &[KbEdge],
    allowed: &[&str],
    neg_ratio: f64,
    seed: u64,
) -> Result<Vec<KbEventPair>> {
    if !(neg_ratio >= 0.0 && neg_ratio.is_finite()) {
        return Err(Error::arg("neg_ratio must be >= 0"));
    }
    let mut positives: BTreeSet<(String, String)> = BTreeSet::new();
    let mut out = Vec::new();
    for e in edges {
        if allowed.contains(&e.relation.as_str()) && positives.insert((e.head.clone(), e.tail.clone())) {
            out.push(KbEventPair {
                head: e.head.clone(),
                tail: e.tail.clone(),
                polarity: Polarity::Positive,
            });
        }
    }
    let wanted = (neg_ratio * positives.len() as f64).round() as usize;
    if wanted == 0 {
        return Ok(out);
    }
    let heads: Vec<&str> = positives
        .iter()
        .map(|(h, _)| h.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tails: Vec<&str> = positives
        .iter()
        .map(|(_, t)| t.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let allowed_pair =
        |h: &str, t: &str| h != t && !positives.contains(&(h.to_string(), t.to_string()));
    let mut rng = substream(seed, "kb-negatives");

    let negatives: Vec<(String, String)> = if heads.len() * tails.len() <= 1_000_000 {
        let mut cands: Vec<(&str, &str)> = heads
            .iter()
            .flat_map(|h| tails.iter().map(move |t| (*h, *t)))
            .filter(|(h, t)| allowed_pair(h, t))
            .collect();
        if cands.len() < wanted {
            return Err(Error::arg(format!(
                "only {} negative pairings available, {wanted} requested",
                cands.len()
            )));
        }
        cands.shuffle(&mut rng);
        cands
            .into_iter()
            .take(wanted)
            .map(|(h, t)| (h.to_string(), t.to_string()))
            .collect()
    } else {
        let mut chosen = BTreeSet::new();
        let mut picked = Vec::new();
        let mut attempts = 0usize;
        while picked.len() < wanted {
            attempts += 1;
            if attempts > 100 * wanted + 10_000 {
                return Err(Error::arg("could not sample enough negative pairings"));
            }
            let h = heads[rng.gen_range(0..heads.len())];
            let t = tails[rng.gen_range(0..tails.len())];
            if allowed_pair(h, t) && chosen.insert((h, t)) {
                picked.push((h.to_string(), t.to_string()));
            }
        }
        picked
    };
    out.extend(negatives.into_iter().map(|(head, tail)| KbEventPair {
        head,
        tail,
        polarity: Polarity::Negative,
    }));
    Ok(out)
}

/// Trainable state of the extractor: the feature map and the anchor point the
/// contrastive loss measures distances from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsParams {
    pub map: Mlp,
    pub anchor: Array1<f64>,
}

impl Params for CsParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.map.visit(f);
        f("anchor", self.anchor.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.map.visit_mut(f);
        f("anchor", self.anchor.as_slice_mut().expect("standard layout"));
    }
}

impl CsParams {
    /// `depth` affine layers from `2 * embed_dim` to [`CS_DIM`], ReLU between them.
    pub fn init<R: Rng>(embed_dim: usize, depth: usize, rng: &mut R) -> Self {
        let mut widths = vec![2 * embed_dim];
        widths.extend(std::iter::repeat_n(CS_DIM, depth.max(1)));
        Self {
            map: Mlp::init(&widths, rng),
            anchor: Array1::zeros(CS_DIM),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            map: self.map.zeros_like(),
            anchor: Array1::zeros(self.anchor.len()),
        }
    }

    /// Mean pair loss: `0.5 * D^2` for positives and `0.5 * max(0, margin - D)^2`
    /// for negatives, where `D` is the distance from the pair feature to the anchor.
    /// Rows of `inputs` are concatenated `[head; tail]` embeddings.
    pub fn contrastive_loss(
        &self,
        inputs: ArrayView2<'_, f64>,
        polarity: &[Polarity],
        margin: f64,
        grad: Option<&mut CsParams>,
    ) -> f64 {
        let n = inputs.nrows();
        assert_eq!(n, polarity.len());
        let (feats, cache) = self.map.forward(inputs);
        let mut dfeat = Array2::zeros(feats.raw_dim());
        let mut loss = 0.0;
        for (i, pol) in polarity.iter().enumerate() {
            let diff = &feats.row(i) - &self.anchor;
            let dist = diff.dot(&diff).sqrt();
            match pol {
                Polarity::Positive => {
                    loss += 0.5 * dist * dist;
                    dfeat.row_mut(i).assign(&(&diff / n as f64));
                }
                Polarity::Negative => {
                    if dist < margin {
                        let gap = margin - dist;
                        loss += 0.5 * gap * gap;
                        if dist > 0.0 {
                            dfeat.row_mut(i).assign(&(&diff * (-gap / dist / n as f64)));
                        }
                    }
                }
            }
        }
        if let Some(g) = grad {
            self.map.backward(&cache, dfeat.view(), &mut g.map);
            g.anchor -= &dfeat.sum_axis(Axis(0));
        }
        loss / n as f64
    }
}

/// The commonsense feature extractor. Once frozen its weights never change.
#[derive(Debug, Clone, PartialEq)]
pub struct CsExtractor {
    params: CsParams,
    embed_dim: usize,
    frozen: bool,
}

impl CsExtractor {
    pub fn new(params: CsParams) -> Result<Self> {
        let input = params.map.input_dim();
        if !input.is_multiple_of(2) || params.map.output_dim() != CS_DIM || params.anchor.len() != CS_DIM {
            return Err(Error::arg(format!(
                "extractor must map an even-width pair input to {CS_DIM} features"
            )));
        }
        Ok(Self {
            params,
            embed_dim: input / 2,
            frozen: false,
        })
    }

    pub fn params(&self) -> &CsParams {
        &self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn depth(&self) -> usize {
        self.params.map.layers.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Applies one optimizer step. Rejected once frozen.
    pub fn update(&mut self, grad: &CsParams, optimizer: &mut Optimizer) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        optimizer.step(&mut self.params, grad);
        Ok(())
    }

    /// `CS([text; video])` for one pair.
    pub fn features(&self, text: &Embedding, video: &Embedding) -> Result<Array1<f64>> {
        if !self.frozen {
            return Err(Error::arg("commonsense features require a frozen extractor"));
        }
        if text.dim() != self.embed_dim || video.dim() != self.embed_dim {
            return Err(Error::arg(format!(
                "extractor expects {}-d inputs, got {} and {}",
                self.embed_dim,
                text.dim(),
                video.dim()
            )));
        }
        let x = concatenate![
            Axis(0),
            ArrayView1::from(text.as_slice()),
            ArrayView1::from(video.as_slice())
        ];
        let x = x.insert_axis(Axis(0));
        Ok(self.params.map.predict(x.view()).row(0).to_owned())
    }

    /// Batched features for rows `[text; video]`, with the cache needed for input gradients.
    pub(crate) fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        self.params.map.forward(inputs)
    }

    /// Gradient of a loss on the features with respect to the inputs. Weights stay untouched.
    pub(crate) fn input_gradient(&self, cache: &MlpCache, dfeat: ArrayView2<'_, f64>) -> Array2<f64> {
        self.params.map.backward_input(cache, dfeat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = CsCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_dim: 2 * self.embed_dim,
            output_dim: CS_DIM,
            depth: self.depth(),
            frozen: self.frozen,
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::arg(e.to_string()))?;
        jsonl::write_string(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = jsonl::read_string(path)?;
        let ckpt: CsCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message,
        };
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.params.map.input_dim() != ckpt.input_dim
            || ckpt.output_dim != CS_DIM
            || ckpt.params.map.layers.len() != ckpt.depth
        {
            return Err(bad("checkpoint header disagrees with its tensors".into()));
        }
        let mut ex = CsExtractor::new(ckpt.params).map_err(|e| bad(e.to_string()))?;
        ex.frozen = ckpt.frozen;
        Ok(ex)
    }
}

#[derive(Serialize, Deserialize)]
struct CsCheckpoint {
    format: String,
    version: u32,
    input_dim: usize,
    output_dim: usize,
    depth: usize,
    frozen: bool,
    params: CsParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsConfig {
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub neg_ratio: f64,
    pub depth: usize,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            margin: 0.5,
            lr: 0.05,
            momentum: 0.9,
            neg_ratio: 1.0,
            depth: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CsTrainReport {
    /// Loss at the start of each epoch, before that epoch's update.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Embeds each pair as `[head; tail]` rows.
pub fn embed_pairs(pairs: &[KbEventPair], encoder: &dyn JointEncoder) -> Result<Array2<f64>> {
    let heads: Vec<&str> = pairs.iter().map(|p| p.head.as_str()).collect();
    let tails: Vec<&str> = pairs.iter().map(|p| p.tail.as_str()).collect();
    let h = encode_phrases(&heads, encoder)?;
    let t = encode_phrases(&tails, encoder)?;
    let d = encoder.dim();
    let mut x = Array2::zeros((pairs.len(), 2 * d));
    for (i, (a, b)) in h.iter().zip(&t).enumerate() {
        x.row_mut(i)
            .iter_mut()
            .zip(a.as_slice().iter().chain(b.as_slice()))
            .for_each(|(dst, src)| *dst = *src);
    }
    Ok(x)
}

/// Full-batch training of the extractor; the result comes back frozen.
pub fn train_cs(
    pairs: &[KbEventPair],
    encoder: &dyn JointEncoder,
    config: &CsConfig,
    seed: u64,
) -> Result<(CsExtractor, CsTrainReport)> {
    let has = |p: Polarity| pairs.iter().any(|x| x.polarity == p);
    if !has(Polarity::Positive) || !has(Polarity::Negative) {
        return Err(Error::arg(
            "commonsense training needs at least one positive and one negative pair",
        ));
    }
    if config.depth == 0 {
        return Err(Error::config("commonsense extractor depth must be >= 1"));
    }
    let inputs = embed_pairs(pairs, encoder)?;
    let polarity: Vec<Polarity> = pairs.iter().map(|p| p.polarity).collect();
    let mut rng = substream(seed, "cs-init");
    let mut extractor = CsExtractor::new(CsParams::init(encoder.dim(), config.depth, &mut rng))?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd, config.lr, config.momentum)?;
    let mut grad = extractor.params.zeros_like();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        grad.fill_zero();
        let loss = extractor
            .params
            .contrastive_loss(inputs.view(), &polarity, config.margin, Some(&mut grad));
        epoch_losses.push(loss);
        extractor.update(&grad, &mut opt)?;
    }
    let final_loss = extractor
        .params
        .contrastive_loss(inputs.view(), &polarity, config.margin, None);
    extractor.freeze();
    Ok((
        extractor,
        CsTrainReport {
            epoch_losses,
            final_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ToyEncoder;
    use crate::nn::{relative_error, Linear};

    fn edge(r: &str, h: &str, t: &str) -> KbEdge {
        KbEdge {
            relation: r.into(),
            head: h.into(),
            tail: t.into(),
        }
    }

    #[test]
    fn parses_tsv_and_reports_line() {
        let text = "# comment\n/r/HasSubevent\tprotest\tarrest\nIsA\tdog\tanimal\n";
        let edges = parse_kb_edges(text, Path::new("kb.tsv")).unwrap();
        assert_eq!(edges[0], edge("HasSubevent", "protest", "arrest"));
        assert_eq!(edges.len(), 2);
        match parse_kb_edges("HasSubevent\tonly two\n", Path::new("kb.tsv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extraction_filters_relations() {
        let edges = vec![
            edge("HasSubevent", "protest", "arrest"),
            edge("IsA", "dog", "animal"),
            edge("HasLastSubevent", "storm", "flood"),
        ];
        let pairs = extract_kb_pairs(&edges, &SUBEVENT_RELATIONS, 0.0, 1).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.polarity == Polarity::Positive));
        assert_eq!(pairs[0].head, "protest");
        assert!(pairs.iter().all(|p| p.head != "dog"));
    }

    fn ten_positive_edges() -> Vec<KbEdge> {
        (0..10)
            .map(|i| edge("HasSubevent", &format!("parent{}", i % 4), &format!("child{i}")))
            .collect()
    }

    #[test]
    fn negatives_avoid_positives() {
        let pairs = extract_kb_pairs(&ten_positive_edges(), &SUBEVENT_RELATIONS, 1.0, 9).unwrap();
        let pos: BTreeSet<_> = pairs
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
            .map(|p| (p.head.clone(), p.tail.clone()))
            .collect();
        let neg: Vec<_> = pairs
            .iter()
            .filter(|p| p.polarity == Polarity::Negative)
            .collect();
        assert_eq!(pos.len(), 10);
        assert_eq!(neg.len(), 10);
        for n in neg {
            assert!(!pos.contains(&(n.head.clone(), n.tail.clone())));
        }
        let again = extract_kb_pairs(&ten_positive_edges(), &SUBEVENT_RELATIONS, 1.0, 9).unwrap();
        assert_eq!(pairs, again);
        assert!(extract_kb_pairs(&ten_positive_edges(), &SUBEVENT_RELATIONS, 100.0, 9).is_err());
    }

    #[test]
    fn zero_extractor_gives_zero_features() {
        let params = CsParams {
            map: Mlp {
                layers: vec![Linear::zeros(8, CS_DIM)],
            },
            anchor: Array1::zeros(CS_DIM),
        };
        let mut ex = CsExtractor::new(params).unwrap();
        let z = Embedding::zeros(4);
        assert!(ex.features(&z, &z).is_err(), "unfrozen extractor must not serve");
        ex.freeze();
        let f = ex.features(&z, &z).unwrap();
        assert_eq!(f.len(), CS_DIM);
        assert!(f.iter().all(|v| *v == 0.0));
        assert!(ex.features(&z, &Embedding::zeros(3)).is_err());
    }

    #[test]
    fn frozen_extractor_rejects_updates() {
        let mut rng = substream(1, "t");
        let params = CsParams::init(4, 1, &mut rng);
        let grad = params.zeros_like();
        let mut ex = CsExtractor::new(params).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0).unwrap();
        ex.update(&grad, &mut opt).unwrap();
        ex.freeze();
        let before = ex.clone();
        assert!(matches!(ex.update(&grad, &mut opt), Err(Error::Frozen)));
        assert_eq!(ex, before);
    }

    fn toy_pairs() -> (Vec<KbEventPair>, ToyEncoder) {
        let edges: Vec<KbEdge> = (0..20)
            .map(|i| edge("HasSubevent", &format!("p{}", i % 5), &format!("c{i}")))
            .collect();
        let tags: Vec<String> = (0..5)
            .map(|i| format!("p{i}"))
            .chain((0..20).map(|i| format!("c{i}")))
            .collect();
        let enc = ToyEncoder::with_planted(4, 32, &tags).unwrap();
        (extract_kb_pairs(&edges, &SUBEVENT_RELATIONS, 1.0, 4).unwrap(), enc)
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (pairs, enc) = toy_pairs();
        let cfg = CsConfig {
            epochs: 60,
            ..Default::default()
        };
        let (ex, report) = train_cs(&pairs, &enc, &cfg, 3).unwrap();
        assert!(ex.is_frozen());
        assert!(report.final_loss < report.epoch_losses[0]);
        let (ex2, _) = train_cs(&pairs, &enc, &cfg, 3).unwrap();
        assert_eq!(ex.params(), ex2.params());

        let a = Embedding::new((0..32).map(|i| (i as f64 * 0.7).sin()).collect());
        let b = Embedding::new((0..32).map(|i| (i as f64 * 1.3).cos()).collect());
        let f = ex.features(&a, &b).unwrap();
        assert_eq!(f.len(), CS_DIM);
        assert_ne!(f, ex.features(&b, &a).unwrap());

        let positives: Vec<_> = pairs
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
            .cloned()
            .collect();
        assert!(train_cs(&positives, &enc, &cfg, 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (pairs, enc) = toy_pairs();
        let cfg = CsConfig {
            epochs: 3,
            ..Default::default()
        };
        let (ex, _) = train_cs(&pairs, &enc, &cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cs.json");
        ex.save(&path).unwrap();
        assert_eq!(CsExtractor::load(&path).unwrap(), ex);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = substream(5, "cs-gradcheck");
        let mut params = CsParams::init(4, 1, &mut rng);
        params.anchor.iter_mut().enumerate().for_each(|(i, a)| *a = 0.01 * (i as f64).sin());
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.61).sin() * 0.3);
        let pol = [
            Polarity::Positive,
            Polarity::Negative,
            Polarity::Positive,
            Polarity::Negative,
            Polarity::Negative,
        ];
        // Margin large enough that every negative is inside it.
        let margin = 50.0;
        let mut grad = params.zeros_like();
        params.contrastive_loss(x.view(), &pol, margin, Some(&mut grad));
        let analytic = grad.flatten();
        let h = 1e-5;
        let mut k = 0;
        let mut probe = params.clone();
        let n = probe.num_params();
        while k < n {
            let shift = |m: &mut CsParams, delta: f64| {
                let mut idx = 0;
                m.visit_mut(&mut |_, p| {
                    for v in p.iter_mut() {
                        if idx == k {
                            *v += delta;
                        }
                        idx += 1;
                    }
                });
            };
            shift(&mut probe, h);
            let up = probe.contrastive_loss(x.view(), &pol, margin, None);
            shift(&mut probe, -2.0 * h);
            let down = probe.contrastive_loss(x.view(), &pol, margin, None);
            shift(&mut probe, h);
            let numeric = (up - down) / (2.0 * h);
            assert!(
                relative_error(analytic[k], numeric, 1e-6) < 1e-4,
                "param {k}: {} vs {numeric}",
                analytic[k]
            );
            k += 37;
        }
    }
}

//! The relation classifier.
//!
//! Video-event embeddings of a document are contextualized by a small
//! transformer. Each text/video pair is then described by
//! `[ft; cfv; cs; ft - cfv; ft * cfv]` (text feature, contextualized video
//! feature, commonsense feature, and the two interaction terms) and a
//! two-layer perceptron scores it as Hierarchical, Identical or NoRel.
//! The contextual transformer, commonsense and interaction blocks can each be
//! switched off for ablations.

mod train;
pub mod transformer;

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::commonsense::{CsExtractor, CS_DIM};
use crate::embedding::{DocFeatures, Embedding, Featurizer};
use crate::error::{Error, Result};
use crate::eventgraph::{Document, Label, MultimodalEventGraph, Relation};
use crate::jsonl;
use crate::nn::{softmax_rows, Mlp, OptimizerKind, Params};
use crate::seeding::substream;

pub use train::{save_training_log, train, EpochStats, TrainReport};
pub use transformer::ContextualTransformer;

const CHECKPOINT_FORMAT: &str = "mmrel-merp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MerpConfig {
    pub ct_layers: usize,
    pub ct_heads: usize,
    /// Longest video-event sequence the transformer sees at once.
    pub max_video_events: usize,
    pub embed_dim: usize,
    pub use_ct: bool,
    pub use_cs: bool,
    pub use_ei: bool,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub prune_threshold: f64,
    /// Pipeline runs replace this with the top-level seed.
    pub seed: u64,
    /// NoRel examples per labeled example. `None` keeps every unlabeled pair.
    pub norel_ratio: Option<f64>,
    /// Hidden width of the head. `None` uses the rounded geometric mean of input width and 3.
    pub hidden_width: Option<usize>,
    /// Fraction of documents held out for the per-epoch accuracy log.
    pub holdout_fraction: f64,
}

impl Default for MerpConfig {
    fn default() -> Self {
        Self {
            ct_layers: 1,
            ct_heads: 4,
            max_video_events: 77,
            embed_dim: crate::embedding::DEFAULT_DIM,
            use_ct: true,
            use_cs: true,
            use_ei: true,
            lr: 1e-5,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            batch_size: 1024,
            epochs: 15,
            prune_threshold: 28.0,
            seed: 0,
            norel_ratio: None,
            hidden_width: None,
            holdout_fraction: 0.1,
        }
    }
}

impl MerpConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.ct_layers < 1 {
            return fail("ct_layers must be >= 1");
        }
        if self.ct_heads < 1 || !self.embed_dim.is_multiple_of(self.ct_heads) {
            return fail("ct_heads must divide embed_dim");
        }
        if self.max_video_events < 1 {
            return fail("max_video_events must be >= 1");
        }
        if self.embed_dim < 2 {
            return fail("embed_dim must be >= 2");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.norel_ratio.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
            return fail("norel_ratio must be >= 0");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail("holdout_fraction must be in [0, 1)");
        }
        if self.hidden_width == Some(0) {
            return fail("hidden_width must be >= 1");
        }
        Ok(())
    }

    /// Width of the concatenated pair features.
    pub fn input_width(&self) -> usize {
        let d = self.embed_dim;
        2 * d + if self.use_cs { CS_DIM } else { 0 } + if self.use_ei { 2 * d } else { 0 }
    }

    pub fn head_hidden_width(&self) -> usize {
        self.hidden_width
            .unwrap_or_else(|| ((self.input_width() * 3) as f64).sqrt().round() as usize)
    }
}

/// Feature blocks of one pair. Disabled blocks are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub ft: Array1<f64>,
    pub cfv: Array1<f64>,
    pub cs: Option<Array1<f64>>,
    pub sf: Option<Array1<f64>>,
    pub mf: Option<Array1<f64>>,
}

impl PairFeatures {
    /// `[ft; cfv; cs; sf; mf]`, skipping disabled blocks.
    pub fn concat(&self) -> Array1<f64> {
        let blocks: Vec<ArrayView1<'_, f64>> = [Some(&self.ft), Some(&self.cfv), self.cs.as_ref(), self.sf.as_ref(), self.mf.as_ref()]
            .into_iter()
            .flatten()
            .map(|a| a.view())
            .collect();
        ndarray::concatenate(Axis(0), &blocks).expect("1-d blocks")
    }
}

/// Subtraction and elementwise-product interactions: `(ft - cfv, ft * cfv)`.
pub fn interaction_features(ft: ArrayView1<'_, f64>, cfv: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    if ft.len() != cfv.len() {
        return Err(Error::arg(format!(
            "interaction needs equal widths, got {} and {}",
            ft.len(),
            cfv.len()
        )));
    }
    Ok((&ft - &cfv, &ft * &cfv))
}

/// Inverse-frequency class weights `total / (3 * count_c)`, in `Label::ALL` order.
pub fn class_weights(counts: [usize; 3]) -> Result<[f64; 3]> {
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::arg(format!(
            "class {} has no examples; smooth or drop it before weighting",
            Label::ALL[i]
        )));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.map(|c| total as f64 / (3.0 * c as f64)))
}

/// Trainable parameters: the contextual transformer and the classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerpParams {
    pub ct: ContextualTransformer,
    pub head: Mlp,
}

impl MerpParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            ct: self.ct.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

impl Params for MerpParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.ct.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.ct.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Pairs of one document to score, as `(text index, video index)`.
#[derive(Debug, Clone)]
pub struct DocPairs<'a> {
    pub features: &'a DocFeatures,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct MerpModel {
    pub config: MerpConfig,
    pub params: MerpParams,
    cs: Option<CsExtractor>,
}

impl MerpModel {
    /// Fresh model initialised from `config.seed`. `cs` is required iff `config.use_cs`.
    pub fn new(config: MerpConfig, cs: Option<CsExtractor>) -> Result<Self> {
        config.validate()?;
        let cs = Self::check_cs(&config, cs)?;
        let mut rng = substream(config.seed, "merp-init");
        let ct = ContextualTransformer::init(
            config.embed_dim,
            config.ct_layers,
            config.ct_heads,
            config.max_video_events,
            &mut rng,
        );
        let head = Mlp::init(
            &[config.input_width(), config.head_hidden_width(), 3],
            &mut rng,
        );
        Ok(Self {
            config,
            params: MerpParams { ct, head },
            cs,
        })
    }

    fn check_cs(config: &MerpConfig, cs: Option<CsExtractor>) -> Result<Option<CsExtractor>> {
        if !config.use_cs {
            return Ok(None);
        }
        let cs = cs.ok_or_else(|| Error::config("use_cs is on but no commonsense extractor was given"))?;
        if !cs.is_frozen() {
            return Err(Error::config("commonsense extractor must be frozen"));
        }
        if cs.embed_dim() != config.embed_dim {
            return Err(Error::config(format!(
                "commonsense extractor expects {}-d embeddings, model uses {}",
                cs.embed_dim(),
                config.embed_dim
            )));
        }
        Ok(Some(cs))
    }

    pub fn cs(&self) -> Option<&CsExtractor> {
        self.cs.as_ref()
    }

    fn stack(embs: &[Embedding]) -> Array2<f64> {
        let d = embs.first().map_or(0, Embedding::dim);
        let mut m = Array2::zeros((embs.len(), d));
        for (mut row, e) in m.rows_mut().into_iter().zip(embs) {
            row.assign(&ArrayView1::from(e.as_slice()));
        }
        m
    }

    /// Contextualized features of the first `max_video_events` video events.
    pub fn contextualize(&self, video: &[Embedding]) -> Result<Vec<Embedding>> {
        if video.is_empty() {
            return Err(Error::arg("cannot contextualize an empty video"));
        }
        let d = self.config.embed_dim;
        if video.iter().any(|e| e.dim() != d) {
            return Err(Error::arg(format!("video embeddings must be {d}-d")));
        }
        let keep = video.len().min(self.config.max_video_events);
        let x = Self::stack(&video[..keep]);
        let y = if self.config.use_ct {
            self.params.ct.forward(x.view()).0
        } else {
            x
        };
        Ok(y.rows().into_iter().map(|r| Embedding::new(r.to_vec())).collect())
    }

    /// Contextualized features for every video event: consecutive windows of
    /// `max_video_events` are contextualized independently.
    pub fn contextualize_all(&self, video: &[Embedding]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(video.len());
        for window in video.chunks(self.config.max_video_events) {
            out.extend(self.contextualize(window)?);
        }
        Ok(out)
    }

    /// Assembles the feature blocks for one pair.
    pub fn pair_features(&self, ft: &Embedding, cfv: &Embedding) -> Result<PairFeatures> {
        let d = self.config.embed_dim;
        if ft.dim() != d || cfv.dim() != d {
            return Err(Error::arg(format!("pair features need {d}-d inputs")));
        }
        let cs = match &self.cs {
            Some(cs) => Some(cs.features(ft, cfv)?),
            None => None,
        };
        let (sf, mf) = if self.config.use_ei {
            let (sf, mf) = interaction_features(ArrayView1::from(ft.as_slice()), ArrayView1::from(cfv.as_slice()))?;
            (Some(sf), Some(mf))
        } else {
            (None, None)
        };
        Ok(PairFeatures {
            ft: Array1::from(ft.as_slice().to_vec()),
            cfv: Array1::from(cfv.as_slice().to_vec()),
            cs,
            sf,
            mf,
        })
    }

    /// Class probabilities in `Label::ALL` order.
    pub fn classify_pair(&self, features: &PairFeatures) -> Result<[f64; 3]> {
        let x = features.concat();
        if x.len() != self.config.input_width() {
            return Err(Error::arg(format!(
                "classifier expects {} input features, got {}",
                self.config.input_width(),
                x.len()
            )));
        }
        let logits = self.params.head.predict(x.insert_axis(Axis(0)).view());
        let p = softmax_rows(logits.view());
        Ok([p[[0, 0]], p[[0, 1]], p[[0, 2]]])
    }

    /// Builds the head input rows for `pairs`, given contextualized video rows.
    /// Also returns the commonsense cache for the backward pass.
    fn assemble(
        &self,
        text: &Array2<f64>,
        cfv: &Array2<f64>,
        pairs: &[(usize, usize)],
    ) -> (Array2<f64>, Option<crate::nn::MlpCache>) {
        let d = self.config.embed_dim;
        let width = self.config.input_width();
        let mut x = Array2::zeros((pairs.len(), width));
        let mut cs_in = Array2::zeros((if self.cs.is_some() { pairs.len() } else { 0 }, 2 * d));
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let ft = text.row(i);
            let fv = cfv.row(j);
            let mut row = x.row_mut(p);
            row.slice_mut(s![..d]).assign(&ft);
            row.slice_mut(s![d..2 * d]).assign(&fv);
            let mut at = 2 * d;
            if self.cs.is_some() {
                cs_in.row_mut(p).slice_mut(s![..d]).assign(&ft);
                cs_in.row_mut(p).slice_mut(s![d..]).assign(&fv);
                at += CS_DIM;
            }
            if self.config.use_ei {
                row.slice_mut(s![at..at + d]).assign(&(&ft - &fv));
                row.slice_mut(s![at + d..at + 2 * d]).assign(&(&ft * &fv));
            }
        }
        let cache = self.cs.as_ref().map(|cs| {
            let (feats, cache) = cs.forward_batch(cs_in.view());
            x.slice_mut(s![.., 2 * d..2 * d + CS_DIM]).assign(&feats);
            cache
        });
        (x, cache)
    }

    /// Class probabilities for many pairs of one document, in input order.
    pub fn score_pairs(&self, features: &DocFeatures, pairs: &[(usize, usize)]) -> Result<Array2<f64>> {
        if pairs.is_empty() {
            return Ok(Array2::zeros((0, 3)));
        }
        let text = Self::stack(&features.text);
        let cfv = Self::stack(&self.contextualize_all(&features.video)?);
        let (x, _) = self.assemble(&text, &cfv, pairs);
        let logits = self.params.head.predict(x.view());
        Ok(softmax_rows(logits.view()))
    }

    /// Weighted cross-entropy `sum_i w_{y_i} CE_i / sum_i w_{y_i}` over all pairs in `batch`.
    /// When `grad` is given, parameter gradients are accumulated into it.
    pub fn batch_loss(
        &self,
        batch: &[(DocPairs<'_>, Vec<Label>)],
        weights: [f64; 3],
        mut grad: Option<&mut MerpParams>,
    ) -> Result<f64> {
        let total_weight = batch_weight(batch.iter().flat_map(|(_, l)| l.iter()), weights);
        if total_weight <= 0.0 {
            return Ok(0.0);
        }
        let mut loss = 0.0;
        for (doc, labels) in batch {
            loss += self.doc_loss(doc, labels, weights, total_weight, grad.as_deref_mut())?;
        }
        Ok(loss / total_weight)
    }

    /// Unnormalized `sum_i w_{y_i} CE_i` over one document's pairs. Gradients are
    /// scaled by `1 / total_weight` so per-document contributions add up to the batch gradient.
    pub(crate) fn doc_loss(
        &self,
        doc: &DocPairs<'_>,
        labels: &[Label],
        weights: [f64; 3],
        total_weight: f64,
        grad: Option<&mut MerpParams>,
    ) -> Result<f64> {
        if doc.pairs.len() != labels.len() {
            return Err(Error::arg("every pair needs exactly one label"));
        }
        if doc.pairs.is_empty() {
            return Ok(0.0);
        }
        let d = self.config.embed_dim;
        let cap = self.config.max_video_events;
        let text = Self::stack(&doc.features.text);
        let video = Self::stack(&doc.features.video);
        let n = video.nrows();
        if text.ncols() != d || video.ncols() != d {
            return Err(Error::arg(format!("features must be {d}-d")));
        }
        let mut cfv = Array2::zeros((n, d));
        let mut ct_caches = Vec::new();
        for start in (0..n).step_by(cap) {
            let end = (start + cap).min(n);
            let window = video.slice(s![start..end, ..]);
            if self.config.use_ct {
                let (y, cache) = self.params.ct.forward(window);
                cfv.slice_mut(s![start..end, ..]).assign(&y);
                ct_caches.push((start, end, cache));
            } else {
                cfv.slice_mut(s![start..end, ..]).assign(&window);
            }
        }
        let (x, cs_cache) = self.assemble(&text, &cfv, &doc.pairs);
        let (logits, head_cache) = self.params.head.forward(x.view());
        let probs = softmax_rows(logits.view());
        let mut loss = 0.0;
        let mut dlogits = probs.clone();
        for (p, label) in labels.iter().enumerate() {
            let w = weights[label.index()];
            loss -= w * probs[[p, label.index()]].max(f64::MIN_POSITIVE).ln();
            dlogits[[p, label.index()]] -= 1.0;
            dlogits.row_mut(p).mapv_inplace(|v| v * w / total_weight);
        }
        let Some(g) = grad else {
            return Ok(loss);
        };
        let dx = self.params.head.backward(&head_cache, dlogits.view(), &mut g.head);
        if !self.config.use_ct {
            return Ok(loss);
        }
        let mut dcfv: Array2<f64> = Array2::zeros((n, d));
        let dcs_in = match (&self.cs, &cs_cache) {
            (Some(cs), Some(cache)) => Some(cs.input_gradient(cache, dx.slice(s![.., 2 * d..2 * d + CS_DIM]))),
            _ => None,
        };
        let ei_at = 2 * d + if self.cs.is_some() { CS_DIM } else { 0 };
        for (p, &(i, j)) in doc.pairs.iter().enumerate() {
            let mut acc = dx.slice(s![p, d..2 * d]).to_owned();
            if let Some(dcs) = &dcs_in {
                acc += &dcs.slice(s![p, d..]);
            }
            if self.config.use_ei {
                acc -= &dx.slice(s![p, ei_at..ei_at + d]);
                acc += &(&dx.slice(s![p, ei_at + d..ei_at + 2 * d]) * &text.row(i));
            }
            let mut row = dcfv.row_mut(j);
            row += &acc;
        }
        for (start, end, cache) in &ct_caches {
            self.params.ct.backward(cache, dcfv.slice(s![*start..*end, ..]), &mut g.ct);
        }
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = MerpCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            ct: self.params.ct.clone(),
            head: self.params.head.clone(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::arg(e.to_string()))?;
        jsonl::write_string(path, &text)
    }

    /// Loads a checkpoint and attaches the commonsense extractor it was trained with.
    pub fn load(path: &Path, cs: Option<CsExtractor>) -> Result<Self> {
        let text = jsonl::read_string(path)?;
        let ckpt: MerpCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            });
        }
        ckpt.config.validate()?;
        let c = &ckpt.config;
        if ckpt.head.input_dim() != c.input_width()
            || ckpt.head.output_dim() != 3
            || ckpt.ct.dim() != c.embed_dim
            || ckpt.ct.layers.len() != c.ct_layers
            || ckpt.ct.max_len() != c.max_video_events
        {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "checkpoint config disagrees with its tensors".into(),
            });
        }
        let cs = Self::check_cs(&ckpt.config, cs)?;
        Ok(Self {
            config: ckpt.config,
            params: MerpParams {
                ct: ckpt.ct,
                head: ckpt.head,
            },
            cs,
        })
    }
}

pub(crate) fn batch_weight<'a>(labels: impl Iterator<Item = &'a Label>, weights: [f64; 3]) -> f64 {
    labels.map(|l| weights[l.index()]).sum()
}

/// Reads only the configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<MerpConfig> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        config: MerpConfig,
    }
    let text = jsonl::read_string(path)?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("not a model checkpoint ({})", header.format),
        });
    }
    Ok(header.config)
}

#[derive(Serialize, Deserialize)]
struct MerpCheckpoint {
    format: String,
    version: u32,
    config: MerpConfig,
    ct: ContextualTransformer,
    head: Mlp,
}

/// Argmax prediction for every pair of `doc`; NoRel pairs are left out of the graph.
pub fn predict_graph(
    doc: &Document,
    model: &MerpModel,
    featurizer: &Featurizer<'_>,
    prune: bool,
) -> Result<MultimodalEventGraph> {
    let features = featurizer.featurize(doc)?;
    predict_with_features(doc, &features, model, featurizer.config.similarity_scale, prune)
}

/// [`predict_graph`] from precomputed features.
pub fn predict_with_features(
    doc: &Document,
    features: &DocFeatures,
    model: &MerpModel,
    similarity_scale: f64,
    prune: bool,
) -> Result<MultimodalEventGraph> {
    let pairs: Vec<(usize, usize)> = crate::eventgraph::pair_indices(doc).collect();
    let probs = model.score_pairs(features, &pairs)?;
    let mut graph = MultimodalEventGraph::new(&doc.doc_id);
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let row = probs.row(p);
        let best = argmax(row);
        let label = Label::ALL[best];
        if label != Label::NoRel {
            graph.insert(Relation {
                text_event_id: doc.text_events[i].id.clone(),
                video_event_id: doc.video_events[j].id.clone(),
                label,
                confidence: Some(row[best]),
            })?;
        }
    }
    if prune {
        let scorer = |t: &str, v: &str| -> Result<f64> {
            let i = doc.text_index(t).expect("predicted ids come from the document");
            let j = doc.video_index(v).expect("predicted ids come from the document");
            crate::embedding::similarity(&features.text[i], &features.video[j], similarity_scale)
        };
        graph = prune_identical(&graph, scorer, model.config.prune_threshold)?;
    }
    Ok(graph)
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Drops every Identical relation whose text/video similarity is below `threshold`
/// (it becomes NoRel). Other relations pass through unchanged.
pub fn prune_identical<F>(
    graph: &MultimodalEventGraph,
    mut similarity: F,
    threshold: f64,
) -> Result<MultimodalEventGraph>
where
    F: FnMut(&str, &str) -> Result<f64>,
{
    let mut out = MultimodalEventGraph::new(&graph.doc_id);
    for r in &graph.relations {
        if r.label == Label::Identical && similarity(&r.text_event_id, &r.video_event_id)? < threshold {
            continue;
        }
        out.relations.push(r.clone());
    }
    Ok(out)
}

//! Pipeline configuration and the stages behind each CLI command.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::commonsense::{
    extract_kb_pairs, load_kb_edges, train_cs, CsConfig, CsExtractor, CsTrainReport, SUBEVENT_RELATIONS,
};
use crate::embedding::{DocFeatures, EncoderConfig, Featurizer, FrameCache, ToyEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{
    align_predictions, check_universe, corpus_pairs, from_records, label_prior, mm_baseline, prior_baseline,
    LabeledPairSet, MetricReport,
};
use crate::eventgraph::{
    filter_corpus, load_corpus, load_relations, save_corpus, save_relations, CorpusFilter,
    Document, Label, MultimodalEventGraph, PairKey, RelationRecord,
};
use crate::jsonl;
use crate::merp::{self, MerpConfig, MerpModel, TrainReport};
use crate::parallel;
use crate::pseudolabel::{generate_pseudo_labels, PseudoLabelConfig, PseudoLabelSet, TablePredictor};
use crate::synthetic::{self, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Gold text events.
    #[default]
    Te2ve,
    /// Text events from an extractor, aligned to gold triggers.
    Iete2ve,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "te2ve" => Ok(Mode::Te2ve),
            "iete2ve" => Ok(Mode::Iete2ve),
            other => Err(Error::config(format!("unknown mode {other:?}; expected te2ve or iete2ve"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Te2ve => "te2ve",
            Mode::Iete2ve => "iete2ve",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    Merp,
    /// Pseudo labels computed on the evaluation corpus.
    Mm,
    /// Random draws from the training label distribution.
    Prior,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merp" => Ok(Baseline::Merp),
            "mm" => Ok(Baseline::Mm),
            "prior" => Ok(Baseline::Prior),
            other => Err(Error::config(format!("unknown baseline {other:?}; expected merp, mm or prior"))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Merp => "merp",
            Baseline::Mm => "mm",
            Baseline::Prior => "prior",
        })
    }
}

/// File locations. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub text_hierarchy: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub pseudo_labels: Option<PathBuf>,
    /// Relation file used for training instead of the pseudo labels.
    pub train_labels: Option<PathBuf>,
    pub cs_checkpoint: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub eval_ie_corpus: Option<PathBuf>,
    pub eval_ie_hierarchy: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.frames,
            &mut self.text_hierarchy,
            &mut self.kb,
            &mut self.pseudo_labels,
            &mut self.train_labels,
            &mut self.cs_checkpoint,
            &mut self.model,
            &mut self.train_log,
            &mut self.eval_corpus,
            &mut self.eval_ie_corpus,
            &mut self.eval_ie_hierarchy,
            &mut self.gold,
            &mut self.report_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::config(format!("paths.{key} is not set")))
}

/// Toy joint encoder settings. `seed` defaults to the pipeline seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
    pub fps: f64,
    pub mask_exponent: f64,
    pub similarity_scale: f64,
    pub seed: Option<u64>,
    pub planted_tags: Vec<String>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::default();
        Self {
            dim: c.dim,
            fps: c.fps,
            mask_exponent: c.mask_exponent,
            similarity_scale: c.similarity_scale,
            seed: None,
            planted_tags: Vec::new(),
        }
    }
}

impl EncoderSection {
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            fps: self.fps,
            mask_exponent: self.mask_exponent,
            similarity_scale: self.similarity_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub baseline: Baseline,
    /// Drop low-similarity Identical predictions.
    pub prune: bool,
    /// Require identical trigger spans when aligning predicted text events.
    pub exact_span: bool,
    /// Label distribution for the prior baseline, in Hierarchical, Identical, NoRel order.
    /// Estimated from the training labels when absent.
    pub prior: Option<[f64; 3]>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            baseline: Baseline::Merp,
            prune: true,
            exact_span: false,
            prior: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub workers: usize,
    pub mode: Mode,
    pub paths: Paths,
    pub filter: CorpusFilter,
    pub encoder: EncoderSection,
    pub pseudo_label: PseudoLabelConfig,
    pub cs: CsConfig,
    pub merp: MerpConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: 1,
            mode: Mode::default(),
            paths: Paths::default(),
            filter: CorpusFilter::default(),
            encoder: EncoderSection::default(),
            pseudo_label: PseudoLabelConfig::default(),
            cs: CsConfig::default(),
            merp: MerpConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub lambda: Option<f64>,
    pub prune_threshold: Option<f64>,
    pub mode: Option<Mode>,
}

impl PipelineConfig {
    /// Parses a TOML config and resolves its relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = jsonl::read_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(l) = o.lambda {
            self.pseudo_label.lambda = l;
        }
        if let Some(t) = o.prune_threshold {
            self.merp.prune_threshold = t;
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(Error::config("workers must be >= 1"));
        }
        if !(self.pseudo_label.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite"));
        }
        if !self.merp.prune_threshold.is_finite() {
            return Err(Error::config("prune_threshold must be finite"));
        }
        self.encoder.config().validate()?;
        if self.merp.embed_dim != self.encoder.dim {
            return Err(Error::config(format!(
                "merp.embed_dim ({}) differs from encoder.dim ({})",
                self.merp.embed_dim, self.encoder.dim
            )));
        }
        self.merp.validate()
    }

    /// The seed of stochastic stages.
    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::config("seed is required for this command (set `seed` or pass --seed)"))
    }

    pub fn build_encoder(&self) -> Result<ToyEncoder> {
        let seed = match self.encoder.seed {
            Some(s) => s,
            None => self.seed()?,
        };
        if self.encoder.planted_tags.is_empty() {
            Ok(ToyEncoder::new(seed, self.encoder.dim))
        } else {
            ToyEncoder::with_planted(seed, self.encoder.dim, &self.encoder.planted_tags)
        }
    }

    pub fn load_frames(&self) -> Result<FrameCache> {
        let cache = FrameCache::load(required(&self.paths.frames, "frames")?)?;
        if let Some(d) = cache.dim() {
            if d != self.encoder.dim {
                return Err(Error::config(format!(
                    "frame cache is {d}-d but encoder.dim is {}",
                    self.encoder.dim
                )));
            }
        }
        Ok(cache)
    }

    fn corpus(&self, path: &Path) -> Result<Vec<Document>> {
        let docs = load_corpus(path)?;
        let before = docs.len();
        let kept: Vec<Document> = filter_corpus(docs, self.filter).collect();
        if kept.len() < before {
            log::info!("{}: filter kept {} of {before} documents", path.display(), kept.len());
        }
        Ok(kept)
    }
}

/// Files written by `gen-synthetic`, relative to its output directory.
pub mod files {
    pub const CONFIG: &str = "pipeline.toml";
    pub const CORPUS: &str = "corpus.jsonl";
    pub const FRAMES: &str = "frames.jsonl";
    pub const TEXT_HIERARCHY: &str = "text_hierarchy.jsonl";
    pub const KB: &str = "kb.tsv";
    pub const TRAIN_GOLD: &str = "train_gold.jsonl";
    pub const EVAL_CORPUS: &str = "eval_corpus.jsonl";
    pub const EVAL_IE_CORPUS: &str = "eval_ie_corpus.jsonl";
    pub const EVAL_IE_HIERARCHY: &str = "eval_ie_hierarchy.jsonl";
    pub const EVAL_GOLD: &str = "eval_gold.jsonl";
    pub const PSEUDO_LABELS: &str = "pseudo_labels.jsonl";
    pub const CS_CHECKPOINT: &str = "cs.json";
    pub const MODEL: &str = "merp.json";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const REPORT_DIR: &str = "reports";
}

/// Model settings written into generated configs: the small synthetic corpus
/// needs a larger step and smaller batches than full-scale training.
pub fn synthetic_merp_config(dim: usize) -> MerpConfig {
    MerpConfig {
        embed_dim: dim,
        lr: 0.05,
        batch_size: 32,
        ..MerpConfig::default()
    }
}

/// Writes a synthetic dataset and a ready-to-run `pipeline.toml` into `out`.
pub fn gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<PipelineConfig> {
    let data = synthetic::generate(spec)?;
    let cal = synthetic::calibrate(spec, &data, crate::pseudolabel::DEFAULT_LAMBDA)?;
    if spec.noise == 0.0 && (cal.identical_at_or_below_lambda > 0 || cal.other_above_lambda > 0) {
        return Err(Error::Data {
            doc_id: String::new(),
            message: format!("noiseless corpus failed calibration: {cal:?}"),
        });
    }
    log::info!(
        "calibration: identical min {:.2} ({} of {} at or below lambda), other max {:.2} ({} of {} above)",
        cal.identical_min,
        cal.identical_at_or_below_lambda,
        cal.identical_pairs,
        cal.other_max,
        cal.other_above_lambda,
        cal.other_pairs
    );
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_corpus(&data.train, &out.join(files::CORPUS))?;
    save_corpus(&data.eval, &out.join(files::EVAL_CORPUS))?;
    save_corpus(&data.eval_ie, &out.join(files::EVAL_IE_CORPUS))?;
    save_relations(&data.train_gold, &out.join(files::TRAIN_GOLD))?;
    save_relations(&data.eval_gold, &out.join(files::EVAL_GOLD))?;
    TablePredictor::save(&data.hierarchy, &out.join(files::TEXT_HIERARCHY))?;
    TablePredictor::save(&data.ie_hierarchy, &out.join(files::EVAL_IE_HIERARCHY))?;
    FrameCache::save(&data.frames, &out.join(files::FRAMES))?;
    jsonl::write_string(&out.join(files::KB), &data.kb)?;

    let rel = |s: &str| Some(PathBuf::from(s));
    let cfg = PipelineConfig {
        seed: Some(spec.seed),
        paths: Paths {
            corpus: rel(files::CORPUS),
            frames: rel(files::FRAMES),
            text_hierarchy: rel(files::TEXT_HIERARCHY),
            kb: rel(files::KB),
            pseudo_labels: rel(files::PSEUDO_LABELS),
            train_labels: None,
            cs_checkpoint: rel(files::CS_CHECKPOINT),
            model: rel(files::MODEL),
            train_log: rel(files::TRAIN_LOG),
            eval_corpus: rel(files::EVAL_CORPUS),
            eval_ie_corpus: rel(files::EVAL_IE_CORPUS),
            eval_ie_hierarchy: rel(files::EVAL_IE_HIERARCHY),
            gold: rel(files::EVAL_GOLD),
            report_dir: rel(files::REPORT_DIR),
        },
        encoder: EncoderSection {
            dim: spec.dim,
            fps: spec.fps,
            seed: Some(spec.seed),
            planted_tags: synthetic::planted_tags(),
            ..EncoderSection::default()
        },
        merp: MerpConfig {
            seed: spec.seed,
            ..synthetic_merp_config(spec.dim)
        },
        ..PipelineConfig::default()
    };
    jsonl::write_string(&out.join(files::CONFIG), &cfg.to_toml()?)?;
    let mut resolved = cfg;
    resolved.paths.resolve(out);
    Ok(resolved)
}

/// Featurizes every document with the configured encoder and frame cache.
pub fn featurize_all(cfg: &PipelineConfig, docs: &[Document]) -> Result<Vec<DocFeatures>> {
    let encoder = cfg.build_encoder()?;
    let frames = cfg.load_frames()?;
    let enc_cfg = cfg.encoder.config();
    let featurizer = Featurizer::new(&encoder, &frames, &enc_cfg)?;
    parallel::try_map(docs, cfg.workers, |d| featurizer.featurize(d))
}

pub fn pseudo_label(cfg: &PipelineConfig) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let corpus = cfg.corpus(required(&cfg.paths.corpus, "corpus")?)?;
    let predictor = TablePredictor::load(required(&cfg.paths.text_hierarchy, "text_hierarchy")?)?;
    let encoder = cfg.build_encoder()?;
    let frames = cfg.load_frames()?;
    let enc_cfg = cfg.encoder.config();
    let featurizer = Featurizer::new(&encoder, &frames, &enc_cfg)?;
    let set = generate_pseudo_labels(&corpus, &predictor, &featurizer, &cfg.pseudo_label, cfg.workers)?;
    set.save(required(&cfg.paths.pseudo_labels, "pseudo_labels")?)?;
    log::info!(
        "{} pseudo labels ({} hierarchical, {} identical)",
        set.len(),
        set.count(Label::Hierarchical),
        set.count(Label::Identical)
    );
    Ok(set)
}

pub fn train_commonsense(cfg: &PipelineConfig) -> Result<(CsExtractor, CsTrainReport)> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let edges = load_kb_edges(required(&cfg.paths.kb, "kb")?)?;
    let pairs = extract_kb_pairs(&edges, &SUBEVENT_RELATIONS, cfg.cs.neg_ratio, seed)?;
    let encoder = cfg.build_encoder()?;
    let (cs, report) = train_cs(&pairs, &encoder, &cfg.cs, seed)?;
    cs.save(required(&cfg.paths.cs_checkpoint, "cs_checkpoint")?)?;
    log::info!("commonsense extractor: {} pairs, final loss {:.4}", pairs.len(), report.final_loss);
    Ok((cs, report))
}

fn load_cs(cfg: &PipelineConfig, merp: &MerpConfig) -> Result<Option<CsExtractor>> {
    if merp.use_cs {
        Ok(Some(CsExtractor::load(required(&cfg.paths.cs_checkpoint, "cs_checkpoint")?)?))
    } else {
        Ok(None)
    }
}

fn training_labels(cfg: &PipelineConfig) -> Result<BTreeMap<PairKey, Label>> {
    match &cfg.paths.train_labels {
        Some(p) => from_records(&load_relations(p)?),
        None => Ok(PseudoLabelSet::load(required(&cfg.paths.pseudo_labels, "pseudo_labels")?)?.label_map()),
    }
}

/// Trains with `cfg.merp` on the training corpus without writing anything.
pub fn train_model(cfg: &PipelineConfig) -> Result<(MerpModel, TrainReport)> {
    cfg.validate()?;
    let mut merp_cfg = cfg.merp.clone();
    merp_cfg.seed = cfg.seed()?;
    let corpus = cfg.corpus(required(&cfg.paths.corpus, "corpus")?)?;
    let labels = training_labels(cfg)?;
    let cs = load_cs(cfg, &merp_cfg)?;
    let features = featurize_all(cfg, &corpus)?;
    merp::train(&corpus, &features, &labels, merp_cfg, cs, cfg.workers)
}

pub fn train(cfg: &PipelineConfig) -> Result<(MerpModel, TrainReport)> {
    let (model, report) = train_model(cfg)?;
    model.save(required(&cfg.paths.model, "model")?)?;
    merp::save_training_log(&report, required(&cfg.paths.train_log, "train_log")?)?;
    Ok((model, report))
}

/// Result of one evaluation run.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Predictions in the evaluated corpus's own event ids.
    pub predictions: Vec<RelationRecord>,
}

fn to_set(graphs: &[MultimodalEventGraph]) -> LabeledPairSet {
    graphs
        .iter()
        .flat_map(|g| {
            g.relations
                .iter()
                .map(move |r| (PairKey::new(&g.doc_id, &r.text_event_id, &r.video_event_id), r.label))
        })
        .collect()
}

fn set_to_records(set: &LabeledPairSet, provenance: &str) -> Vec<RelationRecord> {
    set.iter()
        .filter(|(_, l)| **l != Label::NoRel)
        .map(|(k, l)| RelationRecord {
            doc_id: k.doc_id.clone(),
            text_event_id: k.text_event_id.clone(),
            video_event_id: k.video_event_id.clone(),
            label: *l,
            confidence: None,
            provenance: provenance.to_string(),
        })
        .collect()
}

/// Predicts with an in-memory model on the corpus selected by `cfg.mode`.
pub fn predict_corpus(cfg: &PipelineConfig, model: &MerpModel, docs: &[Document]) -> Result<Vec<MultimodalEventGraph>> {
    let features = featurize_all(cfg, docs)?;
    let items: Vec<(&Document, &DocFeatures)> = docs.iter().zip(&features).collect();
    parallel::try_map(&items, cfg.workers, |(doc, f)| {
        merp::predict_with_features(doc, f, model, cfg.encoder.similarity_scale, cfg.eval.prune)
    })
}

fn eval_inputs(cfg: &PipelineConfig) -> Result<(Vec<Document>, Vec<Document>, LabeledPairSet)> {
    let gold_docs = cfg.corpus(required(&cfg.paths.eval_corpus, "eval_corpus")?)?;
    let gold = from_records(&load_relations(required(&cfg.paths.gold, "gold")?)?)?;
    check_universe(&gold_docs, &gold)?;
    let run_docs = match cfg.mode {
        Mode::Te2ve => gold_docs.clone(),
        Mode::Iete2ve => cfg.corpus(required(&cfg.paths.eval_ie_corpus, "eval_ie_corpus")?)?,
    };
    Ok((gold_docs, run_docs, gold))
}

/// Scores `pred` (keyed by the ids of `run_docs`) against gold.
fn score(
    cfg: &PipelineConfig,
    system: String,
    gold_docs: &[Document],
    run_docs: &[Document],
    gold: &LabeledPairSet,
    pred: LabeledPairSet,
) -> Result<Evaluation> {
    check_universe(run_docs, &pred)?;
    let aligned = match cfg.mode {
        Mode::Te2ve => pred.clone(),
        Mode::Iete2ve => align_predictions(gold_docs, run_docs, &pred, cfg.eval.exact_span)?,
    };
    Ok(Evaluation {
        report: MetricReport::compute(system, gold, &aligned),
        predictions: set_to_records(&pred, "prediction"),
    })
}

/// Evaluates an in-memory model; used by `eval` and by ablation runs.
pub fn evaluate_model(cfg: &PipelineConfig, model: &MerpModel, system: &str) -> Result<Evaluation> {
    let (gold_docs, run_docs, gold) = eval_inputs(cfg)?;
    let graphs = predict_corpus(cfg, model, &run_docs)?;
    score(cfg, system.to_string(), &gold_docs, &run_docs, &gold, to_set(&graphs))
}

pub fn system_name(cfg: &PipelineConfig) -> String {
    format!("{}-{}", cfg.eval.baseline, cfg.mode)
}

/// Loads the trained model, with its commonsense extractor when it uses one.
pub fn load_model(cfg: &PipelineConfig) -> Result<MerpModel> {
    let model_path = required(&cfg.paths.model, "model")?;
    let cs = if merp::checkpoint_config(model_path)?.use_cs {
        Some(CsExtractor::load(required(&cfg.paths.cs_checkpoint, "cs_checkpoint")?)?)
    } else {
        None
    };
    let model = MerpModel::load(model_path, cs)?;
    if model.config.embed_dim != cfg.encoder.dim {
        return Err(Error::config(format!(
            "model expects {}-d embeddings but encoder.dim is {}",
            model.config.embed_dim, cfg.encoder.dim
        )));
    }
    Ok(model)
}

/// Runs the configured baseline or model on the evaluation corpus.
pub fn evaluate(cfg: &PipelineConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let system = system_name(cfg);
    match cfg.eval.baseline {
        Baseline::Merp => {
            let model = load_model(cfg)?;
            evaluate_model(cfg, &model, &system)
        }
        Baseline::Mm => {
            let (gold_docs, run_docs, gold) = eval_inputs(cfg)?;
            let hierarchy = match cfg.mode {
                Mode::Te2ve => required(&cfg.paths.text_hierarchy, "text_hierarchy")?,
                Mode::Iete2ve => required(&cfg.paths.eval_ie_hierarchy, "eval_ie_hierarchy")?,
            };
            let predictor = TablePredictor::load(hierarchy)?;
            let encoder = cfg.build_encoder()?;
            let frames = cfg.load_frames()?;
            let enc_cfg = cfg.encoder.config();
            let featurizer = Featurizer::new(&encoder, &frames, &enc_cfg)?;
            let pred = mm_baseline(&run_docs, &predictor, &featurizer, &cfg.pseudo_label, cfg.workers)?;
            score(cfg, system, &gold_docs, &run_docs, &gold, pred)
        }
        Baseline::Prior => {
            let (gold_docs, run_docs, gold) = eval_inputs(cfg)?;
            let prior = match cfg.eval.prior {
                Some(p) => p,
                None => {
                    let train_docs = cfg.corpus(required(&cfg.paths.corpus, "corpus")?)?;
                    label_prior(&training_labels(cfg)?, &train_docs)?
                }
            };
            let pred = prior_baseline(prior, &corpus_pairs(&run_docs), cfg.seed()?)?;
            score(cfg, system, &gold_docs, &run_docs, &gold, pred)
        }
    }
}

/// Writes `predictions-<system>.jsonl`, `metrics-<system>.json` and `.csv` into the report directory.
pub fn write_evaluation(cfg: &PipelineConfig, eval: &Evaluation) -> Result<PathBuf> {
    let dir = required(&cfg.paths.report_dir, "report_dir")?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = &eval.report.system;
    save_relations(&eval.predictions, &dir.join(format!("predictions-{name}.jsonl")))?;
    let metrics = dir.join(format!("metrics-{name}.json"));
    eval.report.save(&metrics)?;
    jsonl::write_string(
        &dir.join(format!("metrics-{name}.csv")),
        &crate::evaluation::reports_csv(std::slice::from_ref(&eval.report)),
    )?;
    Ok(metrics)
}

/// Renders every `metrics-*.json` in `inputs` (directories are scanned, sorted by name).
pub fn report(inputs: &[PathBuf]) -> Result<(String, String)> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("metrics-") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::MissingInput {
            path: inputs.first().cloned().unwrap_or_default(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no metrics files"),
        });
    }
    let reports = files.iter().map(|f| MetricReport::load(f)).collect::<Result<Vec<_>>>()?;
    Ok((
        crate::evaluation::render_table(&reports),
        crate::evaluation::reports_csv(&reports),
    ))
}

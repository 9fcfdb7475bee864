use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{batch_weight, class_weights, DocPairs, MerpConfig, MerpModel, MerpParams};
use crate::commonsense::CsExtractor;
use crate::embedding::DocFeatures;
use crate::error::{Error, Result};
use crate::eventgraph::{pair_indices, Document, Label, PairKey};
use crate::nn::{Optimizer, Params};
use crate::parallel;
use crate::seeding::substream;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub weighted_loss: f64,
    /// Held-out accuracy per class in `Label::ALL` order; NaN when the class is absent.
    pub accuracy: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub class_counts: [usize; 3],
    pub class_weights: [f64; 3],
    pub holdout_docs: Vec<String>,
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy)]
struct Example {
    doc: usize,
    text: usize,
    video: usize,
    label: Label,
}

fn doc_examples(doc_index: usize, doc: &Document, labels: &BTreeMap<PairKey, Label>) -> Vec<Example> {
    pair_indices(doc)
        .map(|(i, j)| {
            let key = PairKey::new(&doc.doc_id, &doc.text_events[i].id, &doc.video_events[j].id);
            Example {
                doc: doc_index,
                text: i,
                video: j,
                label: labels.get(&key).copied().unwrap_or(Label::NoRel),
            }
        })
        .collect()
}

/// Every labeled pair of a known document must name events of that document.
fn check_labels(docs: &[Document], labels: &BTreeMap<PairKey, Label>) -> Result<()> {
    let by_id: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    for key in labels.keys() {
        if let Some(doc) = by_id.get(key.doc_id.as_str()) {
            if doc.text_index(&key.text_event_id).is_none() || doc.video_index(&key.video_event_id).is_none() {
                return Err(Error::Data {
                    doc_id: key.doc_id.clone(),
                    message: format!(
                        "label for unknown pair ({}, {})",
                        key.text_event_id, key.video_event_id
                    ),
                });
            }
        }
    }
    Ok(())
}

fn group_by_doc<'a>(examples: &[Example], features: &'a [DocFeatures]) -> Vec<(DocPairs<'a>, Vec<Label>)> {
    let mut grouped: BTreeMap<usize, (Vec<(usize, usize)>, Vec<Label>)> = BTreeMap::new();
    for ex in examples {
        let entry = grouped.entry(ex.doc).or_default();
        entry.0.push((ex.text, ex.video));
        entry.1.push(ex.label);
    }
    grouped
        .into_iter()
        .map(|(doc, (pairs, labels))| {
            (
                DocPairs {
                    features: &features[doc],
                    pairs,
                },
                labels,
            )
        })
        .collect()
}

fn add_into(acc: &mut MerpParams, other: &MerpParams) {
    let flat = other.flatten();
    let mut at = 0;
    acc.visit_mut(&mut |_, p| {
        for v in p.iter_mut() {
            *v += flat[at];
            at += 1;
        }
    });
}

/// Per-class accuracy of argmax predictions on `examples`.
fn accuracy(model: &MerpModel, examples: &[Example], features: &[DocFeatures], workers: usize) -> Result<[f64; 3]> {
    let groups = group_by_doc(examples, features);
    let per_doc = parallel::try_map(&groups, workers, |(doc, labels)| {
        let probs = model.score_pairs(doc.features, &doc.pairs)?;
        let mut hits = [[0usize; 2]; 3];
        for (p, label) in labels.iter().enumerate() {
            let row = probs.row(p);
            let pred = super::argmax(row);
            hits[label.index()][1] += 1;
            if pred == label.index() {
                hits[label.index()][0] += 1;
            }
        }
        Ok(hits)
    })?;
    let mut total = [[0usize; 2]; 3];
    for h in per_doc {
        for c in 0..3 {
            total[c][0] += h[c][0];
            total[c][1] += h[c][1];
        }
    }
    Ok(total.map(|[hit, n]| if n == 0 { f64::NAN } else { hit as f64 / n as f64 }))
}

/// Trains a classifier on `docs` with `features[i]` belonging to `docs[i]`.
/// Pairs missing from `labels` are NoRel.
pub fn train(
    docs: &[Document],
    features: &[DocFeatures],
    labels: &BTreeMap<PairKey, Label>,
    config: MerpConfig,
    cs: Option<CsExtractor>,
    workers: usize,
) -> Result<(MerpModel, TrainReport)> {
    if docs.len() != features.len() {
        return Err(Error::arg("need one feature set per document"));
    }
    if docs.is_empty() {
        return Err(Error::Data {
            doc_id: String::new(),
            message: "training corpus is empty".into(),
        });
    }
    check_labels(docs, labels)?;
    let mut model = MerpModel::new(config.clone(), cs)?;

    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut substream(config.seed, "merp-holdout"));
    let n_holdout = ((docs.len() as f64 * config.holdout_fraction).floor() as usize).min(docs.len() - 1);
    let holdout: HashSet<usize> = order[..n_holdout].iter().copied().collect();

    let mut train_set = Vec::new();
    let mut holdout_set = Vec::new();
    for (k, doc) in docs.iter().enumerate() {
        let ex = doc_examples(k, doc, labels);
        if holdout.contains(&k) {
            holdout_set.extend(ex);
        } else {
            train_set.extend(ex);
        }
    }
    if let Some(ratio) = config.norel_ratio {
        let (mut norel, rel): (Vec<Example>, Vec<Example>) =
            train_set.into_iter().partition(|e| e.label == Label::NoRel);
        norel.shuffle(&mut substream(config.seed, "merp-norel"));
        norel.truncate((rel.len() as f64 * ratio).round() as usize);
        train_set = rel;
        train_set.extend(norel);
        train_set.sort_by_key(|e| (e.doc, e.text, e.video));
    }

    let mut counts = [0usize; 3];
    for e in &train_set {
        counts[e.label.index()] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data {
            doc_id: String::new(),
            message: format!("training labels contain no {} pairs", Label::ALL[c]),
        });
    }
    let weights = class_weights(counts)?;
    let eval_set = if holdout_set.is_empty() { train_set.clone() } else { holdout_set };

    let mut optimizer = Optimizer::new(config.optimizer, config.lr, config.momentum)?;
    let mut shuffle_rng = substream(config.seed, "merp-shuffle");
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        train_set.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for batch in train_set.chunks(config.batch_size) {
            let groups = group_by_doc(batch, features);
            let total_weight = batch_weight(batch.iter().map(|e| &e.label), weights);
            let parts = parallel::try_map(&groups, workers, |(doc, labels)| {
                let mut g = model.params.zeros_like();
                let loss = model.doc_loss(doc, labels, weights, total_weight, Some(&mut g))?;
                Ok((loss, g))
            })?;
            let mut grad = model.params.zeros_like();
            for (loss, g) in &parts {
                loss_sum += loss;
                add_into(&mut grad, g);
            }
            weight_sum += total_weight;
            optimizer.step(&mut model.params, &grad);
        }
        let stats = EpochStats {
            epoch,
            weighted_loss: loss_sum / weight_sum,
            accuracy: accuracy(&model, &eval_set, features, workers)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, acc H {:.3} I {:.3} N {:.3}",
            stats.weighted_loss,
            stats.accuracy[0],
            stats.accuracy[1],
            stats.accuracy[2]
        );
        epochs.push(stats);
    }
    let report = TrainReport {
        class_counts: counts,
        class_weights: weights,
        holdout_docs: order[..n_holdout].iter().map(|&k| docs[k].doc_id.clone()).collect(),
        epochs,
    };
    Ok((model, report))
}

/// Writes `epoch,weighted_loss,acc_hierarchical,acc_identical,acc_norel`.
pub fn save_training_log(report: &TrainReport, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,weighted_loss,acc_hierarchical,acc_identical,acc_norel\n");
    for e in &report.epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.weighted_loss, e.accuracy[0], e.accuracy[1], e.accuracy[2]
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

//! Relation metrics, agreement, baselines and predicted-trigger alignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::embedding::Featurizer;
use crate::error::{Error, Result};
use crate::eventgraph::{pair_space, Document, Label, PairKey, RelationRecord, TextEvent};
use crate::jsonl;
use crate::pseudolabel::{generate_pseudo_labels, HierarchyPredictor, PseudoLabelConfig};
use crate::seeding::substream;

/// Label per (doc, text event, video event). Missing keys read as NoRel.
pub type LabeledPairSet = BTreeMap<PairKey, Label>;

pub fn from_records(records: &[RelationRecord]) -> Result<LabeledPairSet> {
    let mut out = LabeledPairSet::new();
    for r in records {
        if out.insert(r.key(), r.label).is_some() {
            return Err(Error::Data {
                doc_id: r.doc_id.clone(),
                message: format!("duplicate pair ({}, {})", r.text_event_id, r.video_event_id),
            });
        }
    }
    Ok(out)
}

/// Precision, recall and F1 for one relation type, with the raw counts behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn relation_prf(gold: &LabeledPairSet, pred: &LabeledPairSet, t: Label) -> Prf {
    let gold_t = gold.values().filter(|l| **l == t).count();
    let mut predicted = 0;
    let mut hits = 0;
    for (key, label) in pred {
        if *label == t {
            predicted += 1;
            if gold.get(key) == Some(&t) {
                hits += 1;
            }
        }
    }
    let precision = ratio(hits, predicted);
    let recall = ratio(hits, gold_t);
    Prf {
        true_positives: hits,
        predicted,
        gold: gold_t,
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

pub fn avg_f1(f1_h: f64, f1_i: f64) -> f64 {
    (f1_h + f1_i) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system: String,
    pub hierarchical: Prf,
    pub identical: Prf,
    pub avg_f1: f64,
}

impl MetricReport {
    pub fn compute(system: impl Into<String>, gold: &LabeledPairSet, pred: &LabeledPairSet) -> Self {
        let hierarchical = relation_prf(gold, pred, Label::Hierarchical);
        let identical = relation_prf(gold, pred, Label::Identical);
        Self {
            system: system.into(),
            avg_f1: avg_f1(hierarchical.f1, identical.f1),
            hierarchical,
            identical,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::arg(e.to_string()))?;
        jsonl::write_string(path, &(text + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = jsonl::read_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// A metric in `[0, 1]` as a percentage with one decimal, rounding halves up.
pub fn render_pct(x: f64) -> String {
    // The slack absorbs binary representation error on exact halves such as 0.1135.
    let tenths = (x * 1000.0 + 0.5 + 1e-6).floor();
    format!("{:.1}", tenths / 10.0)
}

pub const CSV_HEADER: &str = "system,h_p,h_r,h_f1,i_p,i_r,i_f1,avg_f1,h_tp,h_pred,h_gold,i_tp,i_pred,i_gold";

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let (h, i) = (&r.hierarchical, &r.identical);
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
            r.system,
            h.precision,
            h.recall,
            h.f1,
            i.precision,
            i.recall,
            i.f1,
            r.avg_f1,
            h.true_positives,
            h.predicted,
            h.gold,
            i.true_positives,
            i.predicted,
            i.gold
        );
    }
    out
}

/// Fixed-width table with P, R, F1 per type and Avg F1, all x100.
pub fn render_table(reports: &[MetricReport]) -> String {
    let name_w = reports.iter().map(|r| r.system.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$} | {:^20} | {:^20} | {:>6}",
        "", "Hierarchical", "Identical", ""
    );
    let _ = writeln!(
        out,
        "{:<name_w$} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6}",
        "Method", "P", "R", "F1", "P", "R", "F1", "Avg F1"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 56));
    for r in reports {
        let (h, i) = (&r.hierarchical, &r.identical);
        let _ = writeln!(
            out,
            "{:<name_w$} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6}",
            r.system,
            render_pct(h.precision),
            render_pct(h.recall),
            render_pct(h.f1),
            render_pct(i.precision),
            render_pct(i.recall),
            render_pct(i.f1),
            render_pct(r.avg_f1)
        );
    }
    out
}

/// Fraction of relations of type `t` (over the union of all annotators) marked by at least two.
/// An empty union gives 0.
pub fn iaa(annotations: &[LabeledPairSet], t: Label) -> Result<f64> {
    if annotations.len() < 2 {
        return Err(Error::arg("agreement needs at least two annotators"));
    }
    let mut votes: BTreeMap<&PairKey, usize> = BTreeMap::new();
    for set in annotations {
        for (key, _) in set.iter().filter(|(_, l)| **l == t) {
            *votes.entry(key).or_default() += 1;
        }
    }
    let agreed = votes.values().filter(|&&x| x >= 2).count();
    Ok(ratio(agreed, votes.len()))
}

/// Every pair of `corpus` in pair-space order.
pub fn corpus_pairs(corpus: &[Document]) -> Vec<PairKey> {
    corpus
        .iter()
        .flat_map(|doc| {
            pair_space(doc)
                .into_iter()
                .map(|(t, v)| PairKey::new(&doc.doc_id, t, v))
        })
        .collect()
}

/// Independent draws from `prior` (in `Label::ALL` order) for every pair.
pub fn prior_baseline(prior: [f64; 3], pairs: &[PairKey], seed: u64) -> Result<LabeledPairSet> {
    if prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("prior {prior:?} is not a distribution")));
    }
    let dist = WeightedIndex::new(prior).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = substream(seed, "prior-baseline");
    Ok(pairs
        .iter()
        .map(|k| (k.clone(), Label::ALL[dist.sample(&mut rng)]))
        .collect())
}

/// Empirical label distribution of `gold` over the pairs of `corpus`.
pub fn label_prior(gold: &LabeledPairSet, corpus: &[Document]) -> Result<[f64; 3]> {
    let pairs = corpus_pairs(corpus);
    if pairs.is_empty() {
        return Err(Error::arg("cannot estimate a prior from an empty corpus"));
    }
    let mut counts = [0usize; 3];
    for k in &pairs {
        counts[gold.get(k).copied().unwrap_or(Label::NoRel).index()] += 1;
    }
    Ok(counts.map(|c| c as f64 / pairs.len() as f64))
}

/// Pseudo labels computed on the evaluation corpus, with every other pair NoRel.
pub fn mm_baseline(
    corpus: &[Document],
    predictor: &dyn HierarchyPredictor,
    featurizer: &Featurizer<'_>,
    config: &PseudoLabelConfig,
    workers: usize,
) -> Result<LabeledPairSet> {
    let labels = generate_pseudo_labels(corpus, predictor, featurizer, config, workers)?.label_map();
    let mut out: LabeledPairSet = corpus_pairs(corpus).into_iter().map(|k| (k, Label::NoRel)).collect();
    out.extend(labels);
    Ok(out)
}

/// Rejects predictions on pairs outside the pair space of `corpus`.
pub fn check_universe(corpus: &[Document], pred: &LabeledPairSet) -> Result<()> {
    let universe: BTreeSet<PairKey> = corpus_pairs(corpus).into_iter().collect();
    match pred.keys().find(|k| !universe.contains(*k)) {
        None => Ok(()),
        Some(k) => Err(Error::Data {
            doc_id: k.doc_id.clone(),
            message: format!(
                "relation for pair ({}, {}) outside the evaluated corpus",
                k.text_event_id, k.video_event_id
            ),
        }),
    }
}

/// One-to-one alignment of predicted text events to gold ones (predicted id to gold id).
///
/// Two events can match only within the same sentence, and only if their
/// trigger spans overlap (or are equal when `exact_span`). Candidate pairs are
/// taken greedily by decreasing overlap, ties broken by event order.
pub fn match_predicted_text_events(
    gold: &[TextEvent],
    predicted: &[TextEvent],
    exact_span: bool,
) -> BTreeMap<String, String> {
    let mut candidates = Vec::new();
    for (pi, p) in predicted.iter().enumerate() {
        for (gi, g) in gold.iter().enumerate() {
            if p.sentence_index != g.sentence_index {
                continue;
            }
            let ok = if exact_span {
                p.trigger_span == g.trigger_span
            } else {
                p.trigger_span.overlaps(g.trigger_span)
            };
            if ok {
                let overlap = p.trigger_span.end().min(g.trigger_span.end())
                    - p.trigger_span.start().max(g.trigger_span.start());
                candidates.push((std::cmp::Reverse(overlap), pi, gi));
            }
        }
    }
    candidates.sort();
    let mut used_p = vec![false; predicted.len()];
    let mut used_g = vec![false; gold.len()];
    let mut out = BTreeMap::new();
    for (_, pi, gi) in candidates {
        if !used_p[pi] && !used_g[gi] {
            used_p[pi] = true;
            used_g[gi] = true;
            out.insert(predicted[pi].id.clone(), gold[gi].id.clone());
        }
    }
    out
}

/// Prefix that keeps unmatched predicted events apart from every gold id.
pub const UNMATCHED_PREFIX: &str = "unmatched:";

/// Rewrites predictions made on predicted text events into gold text-event ids.
/// Relations on unmatched events keep a prefixed id so they count as false positives.
pub fn align_predictions(
    gold_docs: &[Document],
    predicted_docs: &[Document],
    pred: &LabeledPairSet,
    exact_span: bool,
) -> Result<LabeledPairSet> {
    let gold_by_id: BTreeMap<&str, &Document> = gold_docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut mappings: BTreeMap<&str, BTreeMap<String, String>> = BTreeMap::new();
    for p in predicted_docs {
        let g = gold_by_id.get(p.doc_id.as_str()).ok_or_else(|| Error::Data {
            doc_id: p.doc_id.clone(),
            message: "predicted-event document has no gold counterpart".into(),
        })?;
        if g.video_events.len() != p.video_events.len()
            || g.video_events.iter().zip(&p.video_events).any(|(a, b)| a.id != b.id)
        {
            return Err(Error::Data {
                doc_id: p.doc_id.clone(),
                message: "predicted-event document has different video events".into(),
            });
        }
        mappings.insert(
            p.doc_id.as_str(),
            match_predicted_text_events(&g.text_events, &p.text_events, exact_span),
        );
    }
    let mut out = LabeledPairSet::new();
    for (key, label) in pred {
        let map = mappings.get(key.doc_id.as_str()).ok_or_else(|| Error::Data {
            doc_id: key.doc_id.clone(),
            message: "prediction for a document without predicted events".into(),
        })?;
        let text = map
            .get(&key.text_event_id)
            .cloned()
            .unwrap_or_else(|| format!("{UNMATCHED_PREFIX}{}", key.text_event_id));
        out.insert(PairKey::new(&key.doc_id, text, &key.video_event_id), *label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgraph::Span;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn key(i: usize) -> PairKey {
        PairKey::new("d", format!("e{i}"), "v")
    }

    fn set(labels: &[Label]) -> LabeledPairSet {
        labels.iter().enumerate().map(|(i, l)| (key(i), *l)).collect()
    }

    use Label::{Hierarchical as H, Identical as I, NoRel as N};

    #[test]
    fn hand_counted_example() {
        let gold = set(&[H, H, I, N]);
        let pred = set(&[H, I, I, N]);
        let h = relation_prf(&gold, &pred, H);
        assert_eq!((h.precision, h.recall), (1.0, 0.5));
        assert_abs_diff_eq!(h.f1, 2.0 / 3.0, epsilon = 1e-15);
        let i = relation_prf(&gold, &pred, I);
        assert_eq!((i.precision, i.recall), (0.5, 1.0));
        let same = MetricReport::compute("x", &gold, &gold);
        assert_eq!((same.hierarchical.f1, same.identical.f1, same.avg_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominators() {
        let empty = LabeledPairSet::new();
        let p = relation_prf(&empty, &empty, H);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        let gold = set(&[H]);
        let pred = set(&[I]);
        let p = relation_prf(&gold, &pred, H);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert_eq!(avg_f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn rendering_fixed_points() {
        assert_eq!(render_pct(f1_score(0.357, 0.050)), "8.8");
        assert_eq!(render_pct(avg_f1(0.088, 0.139)), "11.4");
        assert_eq!(render_pct(f1_score(0.219, 0.221)), "22.0");
        assert_eq!(render_pct(0.0), "0.0");
        assert_eq!(render_pct(1.0), "100.0");
    }

    #[test]
    fn iaa_examples() {
        let s1 = set(&[H, H]);
        let s2 = set(&[H]);
        assert_eq!(iaa(&[s1.clone(), s2.clone()], H).unwrap(), 0.5);
        assert_eq!(iaa(&[s1.clone(), s1.clone(), s1.clone()], H).unwrap(), 1.0);
        let disjoint: LabeledPairSet = [(key(5), H)].into();
        assert_eq!(iaa(&[s2, disjoint], H).unwrap(), 0.0);
        assert!(iaa(std::slice::from_ref(&s1), H).is_err());
        // No relations of the type at all.
        assert_eq!(iaa(&[s1.clone(), s1], I).unwrap(), 0.0);
    }

    #[test]
    fn prior_baseline_examples() {
        let pairs: Vec<PairKey> = (0..100).map(key).collect();
        let all_norel = prior_baseline([0.0, 0.0, 1.0], &pairs, 3).unwrap();
        assert!(all_norel.values().all(|l| *l == N));
        assert_eq!(prior_baseline([0.2, 0.3, 0.5], &pairs, 3).unwrap(), prior_baseline([0.2, 0.3, 0.5], &pairs, 3).unwrap());
        assert!(prior_baseline([0.5, 0.6, 0.0], &pairs, 3).is_err());
        assert!(prior_baseline([-0.1, 0.1, 1.0], &pairs, 3).is_err());

        let many: Vec<PairKey> = (0..100_000).map(key).collect();
        let prior = [0.02, 0.01, 0.97];
        let draws = prior_baseline(prior, &many, 9).unwrap();
        for (c, p) in prior.iter().enumerate() {
            let freq = draws.values().filter(|l| l.index() == c).count() as f64 / many.len() as f64;
            assert!((freq - p).abs() < 0.005, "class {c}: {freq}");
        }
    }

    fn ev(id: &str, sentence: usize, a: usize, b: usize) -> TextEvent {
        TextEvent {
            id: id.into(),
            sentence_index: sentence,
            trigger_span: Span(a, b),
            surface: String::new(),
        }
    }

    #[test]
    fn matching_examples() {
        let gold = vec![ev("g1", 0, 2, 4), ev("g2", 1, 0, 1)];
        let m = match_predicted_text_events(&gold, &[ev("p1", 0, 2, 4)], false);
        assert_eq!(m["p1"], "g1");
        let m = match_predicted_text_events(&gold, &[ev("p1", 0, 3, 5)], false);
        assert_eq!(m["p1"], "g1");
        assert!(match_predicted_text_events(&gold, &[ev("p1", 0, 3, 5)], true).is_empty());
        assert!(match_predicted_text_events(&gold, &[ev("p1", 2, 2, 4)], false).is_empty());
        // One-to-one: the larger overlap wins the gold event.
        let m = match_predicted_text_events(&gold, &[ev("p1", 0, 3, 5), ev("p2", 0, 2, 4)], false);
        assert_eq!(m.len(), 1);
        assert_eq!(m["p2"], "g1");
    }

    #[test]
    fn unmatched_predictions_are_false_positives() {
        let mut gold_doc = crate::eventgraph::tests::sample_doc();
        gold_doc.text_events = vec![ev("e1", 0, 3, 4)];
        let mut pred_doc = gold_doc.clone();
        pred_doc.text_events = vec![ev("p1", 0, 3, 5), ev("p2", 1, 0, 1)];
        let pred: LabeledPairSet = [
            (PairKey::new("d1", "p1", "v1"), I),
            (PairKey::new("d1", "p2", "v2"), H),
        ]
        .into();
        let aligned = align_predictions(&[gold_doc.clone()], &[pred_doc], &pred, false).unwrap();
        assert_eq!(aligned[&PairKey::new("d1", "e1", "v1")], I);
        assert_eq!(aligned[&PairKey::new("d1", "unmatched:p2", "v2")], H);
        let gold: LabeledPairSet = [
            (PairKey::new("d1", "e1", "v1"), I),
            (PairKey::new("d1", "e1", "v2"), H),
        ]
        .into();
        let r = MetricReport::compute("ie", &gold, &aligned);
        assert_eq!(r.identical.f1, 1.0);
        assert_eq!((r.hierarchical.true_positives, r.hierarchical.predicted, r.hierarchical.gold), (0, 1, 1));
    }

    #[test]
    fn universe_check() {
        let doc = crate::eventgraph::tests::sample_doc();
        let ok: LabeledPairSet = [(PairKey::new("d1", "e1", "v2"), H)].into();
        check_universe(std::slice::from_ref(&doc), &ok).unwrap();
        let bad: LabeledPairSet = [(PairKey::new("d1", "e1", "v7"), H)].into();
        assert!(matches!(check_universe(&[doc], &bad), Err(Error::Data { .. })));
    }

    #[test]
    fn table_and_csv_layout() {
        let gold = set(&[H, H, I, N]);
        let pred = set(&[H, I, I, N]);
        let r = MetricReport::compute("toy", &gold, &pred);
        let table = render_table(std::slice::from_ref(&r));
        let row = table.lines().nth(3).unwrap();
        assert_eq!(row, "toy    |  100.0   50.0   66.7 |   50.0  100.0   66.7 |   66.7");
        let csv = reports_csv(&[r]);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }

    fn brute_force(gold: &[(usize, Label)], pred: &[(usize, Label)], t: Label) -> (usize, usize, usize) {
        let mut hits = 0;
        for (pk, pl) in pred {
            for (gk, gl) in gold {
                if pk == gk && *pl == t && *gl == t {
                    hits += 1;
                }
            }
        }
        (
            hits,
            pred.iter().filter(|(_, l)| *l == t).count(),
            gold.iter().filter(|(_, l)| *l == t).count(),
        )
    }

    fn arb_set() -> impl Strategy<Value = BTreeMap<usize, Label>> {
        prop::collection::btree_map(0usize..300, (0usize..3).prop_map(|i| Label::ALL[i]), 0..200)
    }

    proptest! {
        #[test]
        fn prf_matches_brute_force(gold in arb_set(), pred in arb_set()) {
            let g: Vec<(usize, Label)> = gold.iter().map(|(k, l)| (*k, *l)).collect();
            let p: Vec<(usize, Label)> = pred.iter().map(|(k, l)| (*k, *l)).collect();
            let gs: LabeledPairSet = gold.iter().map(|(k, l)| (key(*k), *l)).collect();
            let ps: LabeledPairSet = pred.iter().map(|(k, l)| (key(*k), *l)).collect();
            for t in [H, I] {
                let prf = relation_prf(&gs, &ps, t);
                prop_assert_eq!((prf.true_positives, prf.predicted, prf.gold), brute_force(&g, &p, t));
            }
        }

        #[test]
        fn iaa_bounded_and_monotone(a in arb_set(), b in arb_set(), pick in prop::collection::vec(any::<prop::sample::Index>(), 0..20)) {
            let sa: LabeledPairSet = a.iter().map(|(k, l)| (key(*k), *l)).collect();
            let sb: LabeledPairSet = b.iter().map(|(k, l)| (key(*k), *l)).collect();
            let base = iaa(&[sa.clone(), sb.clone()], H).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            // An annotator drawn from the existing union never lowers agreement.
            let union: Vec<PairKey> = sa.iter().chain(&sb).filter(|(_, l)| **l == H).map(|(k, _)| k.clone()).collect();
            let extra: LabeledPairSet = if union.is_empty() {
                LabeledPairSet::new()
            } else {
                pick.iter().map(|i| (union[i.index(union.len())].clone(), H)).collect()
            };
            prop_assert!(iaa(&[sa, sb, extra], H).unwrap() >= base);
        }
    }
}

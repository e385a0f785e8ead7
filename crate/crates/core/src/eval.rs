//! Span extraction, episode-grouped F1 and label bigram analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::LabeledSequence;
use crate::error::{Error, Result};
use crate::model::{Decoder, Model, PreparedEpisode};
use crate::tags::{Label, Tag, TagKind};

/// A labeled span with inclusive token bounds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub label: Label,
    pub start: usize,
    pub end: usize,
}

/// Spans under conlleval's chunking rules: a chunk starts at any `B`, and at
/// an `I` whose predecessor is `O` or carries another label; it ends before
/// `O`, a `B`, or a tag of another label.
pub fn extract_spans(tags: &[Tag]) -> BTreeSet<Span> {
    let mut spans = BTreeSet::new();
    let mut open: Option<(&Label, usize)> = None;
    for (j, tag) in tags.iter().enumerate() {
        let continues = matches!(
            (tag, open),
            (Tag::Inside(l), Some((cur, _))) if l == cur
        );
        if continues {
            continue;
        }
        if let Some((label, start)) = open.take() {
            spans.insert(Span {
                label: label.clone(),
                start,
                end: j - 1,
            });
        }
        if let Some(label) = tag.label() {
            open = Some((label, j));
        }
    }
    if let Some((label, start)) = open {
        spans.insert(Span {
            label: label.clone(),
            start,
            end: tags.len() - 1,
        });
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

fn ratio(hits: usize, total: usize, other_total: usize) -> f64 {
    if total == 0 {
        if other_total == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        hits as f64 / total as f64
    }
}

/// `(gold spans, predicted spans, correct spans)` of one sample.
pub fn span_counts(gold: &[Tag], pred: &[Tag]) -> Result<(usize, usize, usize)> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            tokens: gold.len(),
            tags: pred.len(),
        });
    }
    let g = extract_spans(gold);
    let p = extract_spans(pred);
    Ok((g.len(), p.len(), g.intersection(&p).count()))
}

/// Per-sample precision and recall. An empty prediction has precision 1
/// only when the gold is also empty; recall is symmetric.
pub fn sample_pr(gold: &[Tag], pred: &[Tag]) -> Result<(f64, f64)> {
    let (ng, np, nc) = span_counts(gold, pred)?;
    Ok((ratio(nc, np, ng), ratio(nc, ng, np)))
}

/// Precision and recall averaged over the samples, then combined.
pub fn episode_f1(samples: &[(&[Tag], &[Tag])]) -> Result<Prf> {
    if samples.is_empty() {
        return Err(Error::Config("an episode needs at least one sample".into()));
    }
    let (mut p, mut r) = (0.0, 0.0);
    for (gold, pred) in samples {
        let (pk, rk) = sample_pr(gold, pred)?;
        p += pk;
        r += rk;
    }
    let k = samples.len() as f64;
    Ok(Prf::from_pr(p / k, r / k))
}

/// Span counts summed over the samples before dividing.
pub fn pooled_f1(samples: &[(&[Tag], &[Tag])]) -> Result<Prf> {
    let (mut ng, mut np, mut nc) = (0, 0, 0);
    for (gold, pred) in samples {
        let (g, p, c) = span_counts(gold, pred)?;
        ng += g;
        np += p;
        nc += c;
    }
    Ok(Prf::from_pr(ratio(nc, np, ng), ratio(nc, ng, np)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BigramCategory {
    #[serde(rename = "O-O")]
    OutsideOutside,
    #[serde(rename = "O-B")]
    OutsideBegin,
    #[serde(rename = "B-O")]
    BeginOutside,
    #[serde(rename = "I-O")]
    InsideOutside,
    /// `B`/`I` followed by a `B`, or by an `I` of another label.
    #[serde(rename = "B-I/I-B")]
    CrossSpan,
    #[serde(rename = "Inner B-I")]
    InnerBeginInside,
    #[serde(rename = "Inner I-I")]
    InnerInsideInside,
    #[serde(rename = "S-B")]
    StartBegin,
    #[serde(rename = "S-O")]
    StartOutside,
    /// Only reachable with BIO-invalid gold.
    #[serde(rename = "O-I")]
    OutsideInside,
    #[serde(rename = "S-I")]
    StartInside,
}

impl BigramCategory {
    pub const ALL: [BigramCategory; 11] = [
        BigramCategory::OutsideOutside,
        BigramCategory::OutsideBegin,
        BigramCategory::BeginOutside,
        BigramCategory::InsideOutside,
        BigramCategory::CrossSpan,
        BigramCategory::InnerBeginInside,
        BigramCategory::InnerInsideInside,
        BigramCategory::StartBegin,
        BigramCategory::StartOutside,
        BigramCategory::OutsideInside,
        BigramCategory::StartInside,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BigramCategory::OutsideOutside => "O-O",
            BigramCategory::OutsideBegin => "O-B",
            BigramCategory::BeginOutside => "B-O",
            BigramCategory::InsideOutside => "I-O",
            BigramCategory::CrossSpan => "B-I/I-B",
            BigramCategory::InnerBeginInside => "Inner B-I",
            BigramCategory::InnerInsideInside => "Inner I-I",
            BigramCategory::StartBegin => "S-B",
            BigramCategory::StartOutside => "S-O",
            BigramCategory::OutsideInside => "O-I",
            BigramCategory::StartInside => "S-I",
        }
    }

    pub fn group(self) -> &'static str {
        match self {
            BigramCategory::InnerBeginInside | BigramCategory::InnerInsideInside => "Inner",
            BigramCategory::StartBegin | BigramCategory::StartOutside | BigramCategory::StartInside => "Start",
            _ => "Border",
        }
    }

    /// Category of the gold pair `(prev, cur)`; `prev = None` is the start.
    pub fn classify(prev: Option<&Tag>, cur: &Tag) -> BigramCategory {
        use BigramCategory::*;
        let Some(prev) = prev else {
            return match cur.kind() {
                TagKind::Outside => StartOutside,
                TagKind::Begin => StartBegin,
                TagKind::Inside => StartInside,
            };
        };
        match (prev.kind(), cur.kind()) {
            (TagKind::Outside, TagKind::Outside) => OutsideOutside,
            (TagKind::Outside, TagKind::Begin) => OutsideBegin,
            (TagKind::Outside, TagKind::Inside) => OutsideInside,
            (TagKind::Begin, TagKind::Outside) => BeginOutside,
            (TagKind::Inside, TagKind::Outside) => InsideOutside,
            (_, TagKind::Begin) => CrossSpan,
            (kind, TagKind::Inside) if prev.label() == cur.label() => {
                if kind == TagKind::Begin {
                    InnerBeginInside
                } else {
                    InnerInsideInside
                }
            }
            (_, TagKind::Inside) => CrossSpan,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BigramStat {
    pub count: usize,
    pub correct: usize,
    pub proportion: f64,
    pub accuracy: f64,
}

/// Proportion and accuracy of every bigram category that occurs in the gold
/// sequences. A bigram is correct when both of its positions are predicted
/// correctly (only position 0 for start bigrams).
pub fn bigram_accuracy(samples: &[(&[Tag], &[Tag])]) -> BTreeMap<BigramCategory, BigramStat> {
    let mut counts: BTreeMap<BigramCategory, (usize, usize)> = BTreeMap::new();
    let mut total = 0usize;
    for (gold, pred) in samples {
        for j in 0..gold.len() {
            let prev = j.checked_sub(1).map(|i| &gold[i]);
            let cat = BigramCategory::classify(prev, &gold[j]);
            let ok = gold[j] == pred[j] && (j == 0 || gold[j - 1] == pred[j - 1]);
            let entry = counts.entry(cat).or_default();
            entry.0 += 1;
            entry.1 += usize::from(ok);
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|(cat, (count, correct))| {
            (
                cat,
                BigramStat {
                    count,
                    correct,
                    proportion: count as f64 / total as f64,
                    accuracy: correct as f64 / count as f64,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Mode {
    /// Per-sample precision/recall averaged within the episode.
    #[default]
    Formula,
    /// Span counts pooled over the episode's samples.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub support_id: String,
    pub domain: String,
    pub samples: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramRow {
    pub group: String,
    pub category: BigramCategory,
    pub count: usize,
    pub proportion: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decoder: Decoder,
    pub mode: F1Mode,
    pub episodes: Vec<EpisodeScore>,
    pub mean_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bigrams: Option<Vec<BigramRow>>,
    /// Configuration echo supplied by the caller.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn per_episode_f1(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.f1).collect()
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .episodes
            .iter()
            .map(|e| e.support_id.len())
            .max()
            .unwrap_or(0)
            .max("support_id".len());
        let _ = writeln!(out, "decoder: {}  mode: {:?}", self.decoder, self.mode);
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>9}  {:>6}  {:>6}",
            "support_id", "samples", "precision", "recall", "f1"
        );
        for e in &self.episodes {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>9.4}  {:>6.4}  {:>6.4}",
                e.support_id, e.samples, e.precision, e.recall, e.f1
            );
        }
        let _ = writeln!(
            out,
            "mean f1: {:.4} over {} episodes",
            self.mean_f1,
            self.episodes.len()
        );
        if let Some(rows) = &self.bigrams {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<7} {:<10} {:>7} {:>10} {:>9}",
                "group", "bigram", "count", "proportion", "accuracy"
            );
            for r in rows {
                let _ = writeln!(
                    out,
                    "{:<7} {:<10} {:>7} {:>9.2}% {:>8.2}%",
                    r.group,
                    r.category.name(),
                    r.count,
                    100.0 * r.proportion,
                    100.0 * r.accuracy
                );
            }
        }
        out
    }
}

pub fn bigram_rows(samples: &[(&[Tag], &[Tag])]) -> Vec<BigramRow> {
    bigram_accuracy(samples)
        .into_iter()
        .map(|(category, s)| BigramRow {
            group: category.group().to_string(),
            category,
            count: s.count,
            proportion: s.proportion,
            accuracy: s.accuracy,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub mode: F1Mode,
    pub bigrams: bool,
}

/// Gold and predicted tags of one decoded query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub support_id: String,
    pub domain: String,
    pub gold: LabeledSequence,
    pub predicted: Vec<Tag>,
}

/// Decodes every query in parallel.
pub fn predict(model: &Model, episodes: &[PreparedEpisode], decoder: Decoder) -> Vec<Prediction> {
    episodes
        .par_iter()
        .map(|ep| Prediction {
            support_id: ep.episode.support_id.clone(),
            domain: ep.episode.domain.clone(),
            gold: ep.episode.query.clone(),
            predicted: model.decode(ep, decoder),
        })
        .collect()
}

/// Checks that each support id names a single support set.
pub fn check_support_linkage(episodes: &[PreparedEpisode]) -> Result<()> {
    let mut seen: BTreeMap<&str, &[LabeledSequence]> = BTreeMap::new();
    for ep in episodes {
        let id = ep.episode.support_id.as_str();
        if id.is_empty() {
            return Err(Error::SupportLinkage(format!(
                "query `{}` has an empty support_id",
                ep.episode.query_id
            )));
        }
        let pairs = ep.episode.support.pairs.as_slice();
        match seen.get(id) {
            Some(prev) if *prev != pairs => {
                return Err(Error::SupportLinkage(format!(
                    "support_id `{id}` is attached to different support sets"
                )))
            }
            Some(_) => {}
            None => {
                seen.insert(id, pairs);
            }
        }
    }
    Ok(())
}

/// Groups predictions by support id (in order of first appearance) and
/// scores each group as one episode.
pub fn report(
    predictions: &[Prediction],
    decoder: Decoder,
    options: EvalOptions,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        let g = groups.entry(p.support_id.as_str()).or_default();
        if g.is_empty() {
            order.push(p.support_id.as_str());
        }
        g.push(p);
    }
    let mut episodes = Vec::with_capacity(order.len());
    for id in order {
        let group = &groups[id];
        let samples: Vec<(&[Tag], &[Tag])> = group.iter().map(|p| (p.gold.tags(), p.predicted.as_slice())).collect();
        let prf = match options.mode {
            F1Mode::Formula => episode_f1(&samples)?,
            F1Mode::Pooled => pooled_f1(&samples)?,
        };
        episodes.push(EpisodeScore {
            support_id: id.to_string(),
            domain: group[0].domain.clone(),
            samples: samples.len(),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        });
    }
    let mean_f1 = if episodes.is_empty() {
        0.0
    } else {
        episodes.iter().map(|e| e.f1).sum::<f64>() / episodes.len() as f64
    };
    let bigrams = options.bigrams.then(|| {
        let samples: Vec<(&[Tag], &[Tag])> = predictions
            .iter()
            .map(|p| (p.gold.tags(), p.predicted.as_slice()))
            .collect();
        bigram_rows(&samples)
    });
    Ok(EvalReport {
        decoder,
        mode: options.mode,
        episodes,
        mean_f1,
        bigrams,
        config,
    })
}

/// Decodes and scores prepared episodes.
pub fn evaluate(
    model: &Model,
    episodes: &[PreparedEpisode],
    decoder: Decoder,
    options: EvalOptions,
    config: serde_json::Value,
) -> Result<(EvalReport, Vec<Prediction>)> {
    check_support_linkage(episodes)?;
    let predictions = predict(model, episodes, decoder);
    let rep = report(&predictions, decoder, options, config)?;
    Ok((rep, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    fn span(l: &str, start: usize, end: usize) -> Span {
        Span {
            label: Label::new(l).unwrap(),
            start,
            end,
        }
    }

    #[test]
    fn span_examples() {
        assert_eq!(extract_spans(&tags("B-a I-a O")), [span("a", 0, 1)].into());
        assert_eq!(extract_spans(&tags("O I-a I-a")), [span("a", 1, 2)].into());
        assert_eq!(
            extract_spans(&tags("B-a B-a")),
            [span("a", 0, 0), span("a", 1, 1)].into()
        );
        assert_eq!(
            extract_spans(&tags("B-a I-b I-b")),
            [span("a", 0, 0), span("b", 1, 2)].into()
        );
        assert!(extract_spans(&tags("O O")).is_empty());
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = tags("B-a I-a O B-b");
        assert_eq!(episode_f1(&[(&g, &g)]).unwrap().f1, 1.0);
    }

    #[test]
    fn partial_recall() {
        let g = tags("B-a O B-b");
        let p = tags("B-a O O");
        let prf = episode_f1(&[(&g, &p)]).unwrap();
        assert_eq!((prf.precision, prf.recall), (1.0, 0.5));
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn averaging_precedes_harmonic_mean() {
        let g = tags("B-a O");
        let miss = tags("O B-a");
        let prf = episode_f1(&[(&g, &g), (&g, &miss)]).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn degenerate_conventions() {
        let empty = tags("O O");
        let one = tags("B-a O");
        assert_eq!(sample_pr(&empty, &empty).unwrap(), (1.0, 1.0));
        assert_eq!(sample_pr(&one, &empty).unwrap(), (0.0, 0.0));
        assert_eq!(sample_pr(&empty, &one).unwrap(), (0.0, 0.0));
        assert_eq!(episode_f1(&[(&one, &empty)]).unwrap().f1, 0.0);
        assert!(sample_pr(&one, &tags("O")).is_err());
        assert!(episode_f1(&[]).is_err());
    }

    #[test]
    fn pooled_mode_differs_from_formula() {
        let g1 = tags("B-a O B-b O");
        let p1 = g1.clone();
        let g2 = tags("B-a O");
        let p2 = tags("O O");
        let s: [(&[Tag], &[Tag]); 2] = [(&g1, &p1), (&g2, &p2)];
        let pooled = pooled_f1(&s).unwrap();
        assert_eq!(pooled.precision, 1.0);
        assert!((pooled.recall - 2.0 / 3.0).abs() < 1e-12);
        let formula = episode_f1(&s).unwrap();
        assert_eq!((formula.precision, formula.recall), (0.5, 0.5));
    }

    #[test]
    fn bigram_perfect_example() {
        let g = tags("O B-a I-a");
        let stats = bigram_accuracy(&[(&g, &g)]);
        assert_eq!(stats[&BigramCategory::StartOutside].correct, 1);
        assert_eq!(stats[&BigramCategory::OutsideBegin].correct, 1);
        assert_eq!(stats[&BigramCategory::InnerBeginInside].correct, 1);
        assert_eq!(stats.len(), 3);
    }

    #[test]
    fn different_label_inside_is_cross_span() {
        assert_eq!(
            BigramCategory::classify(Some(&"B-a".parse().unwrap()), &"I-b".parse().unwrap()),
            BigramCategory::CrossSpan
        );
        assert_eq!(
            BigramCategory::classify(Some(&"I-a".parse().unwrap()), &"B-a".parse().unwrap()),
            BigramCategory::CrossSpan
        );
    }

    #[test]
    fn bigram_hand_counts_on_small_corpus() {
        let corpus = [
            ("O O B-a", "O O B-a"),
            ("B-a I-a O", "B-a B-a O"),
            ("O B-b I-b I-b", "O B-b I-b O"),
            ("B-a B-b", "B-a B-b"),
            ("O", "B-a"),
        ];
        let parsed: Vec<(Vec<Tag>, Vec<Tag>)> = corpus.iter().map(|(g, p)| (tags(g), tags(p))).collect();
        let samples: Vec<(&[Tag], &[Tag])> = parsed.iter().map(|(g, p)| (g.as_slice(), p.as_slice())).collect();
        let s = bigram_accuracy(&samples);
        // 13 tokens: S-O 3, S-B 2, O-O 1, O-B 2, B-I 2, I-I 1, I-O 1, cross 1.
        let expect = [
            (BigramCategory::StartOutside, 3, 2),
            (BigramCategory::StartBegin, 2, 2),
            (BigramCategory::OutsideOutside, 1, 1),
            (BigramCategory::OutsideBegin, 2, 2),
            (BigramCategory::InnerBeginInside, 2, 1),
            (BigramCategory::InnerInsideInside, 1, 0),
            (BigramCategory::InsideOutside, 1, 0),
            (BigramCategory::CrossSpan, 1, 1),
        ];
        for (cat, count, correct) in expect {
            assert_eq!((s[&cat].count, s[&cat].correct), (count, correct), "{}", cat.name());
            assert!((s[&cat].proportion - count as f64 / 13.0).abs() < 1e-12);
        }
        assert_eq!(s.len(), expect.len());
    }

    fn tag_seq(n: usize) -> impl Strategy<Value = Vec<Tag>> {
        proptest::collection::vec(0usize..5, n).prop_map(|ix| {
            ix.into_iter()
                .map(|i| ["O", "B-a", "I-a", "B-b", "I-b"][i].parse().unwrap())
                .collect()
        })
    }

    fn pairs() -> impl Strategy<Value = Vec<(Vec<Tag>, Vec<Tag>)>> {
        proptest::collection::vec((1usize..8).prop_flat_map(|n| (tag_seq(n), tag_seq(n))), 1..6)
    }

    proptest! {
        #[test]
        fn episode_f1_is_permutation_invariant(mut samples in pairs(), seed in any::<u64>()) {
            let view = |s: &[(Vec<Tag>, Vec<Tag>)]| -> Prf {
                let v: Vec<(&[Tag], &[Tag])> = s.iter().map(|(g, p)| (g.as_slice(), p.as_slice())).collect();
                episode_f1(&v).unwrap()
            };
            let a = view(&samples);
            let r = (seed % samples.len() as u64) as usize;
            samples.rotate_left(r);
            samples.reverse();
            let b = view(&samples);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }

        #[test]
        fn f1_between_precision_and_recall(samples in pairs()) {
            let v: Vec<(&[Tag], &[Tag])> = samples.iter().map(|(g, p)| (g.as_slice(), p.as_slice())).collect();
            let prf = episode_f1(&v).unwrap();
            if prf.precision > 0.0 && prf.recall > 0.0 {
                prop_assert!(prf.f1 <= prf.precision.max(prf.recall) + 1e-12);
                prop_assert!(prf.f1 >= prf.precision.min(prf.recall) - 1e-12);
            }
        }

        #[test]
        fn bigram_proportions_sum_to_one(samples in pairs()) {
            let v: Vec<(&[Tag], &[Tag])> = samples.iter().map(|(g, p)| (g.as_slice(), p.as_slice())).collect();
            let total: f64 = bigram_accuracy(&v).values().map(|s| s.proportion).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

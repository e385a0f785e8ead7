//! Similarity-based emission scores.
//!
//! Every scorer compares query token vectors with labeled support token
//! vectors by dot product. Scores for a tag never seen in the support set are
//! set to [`NEG_INF_SCORE`]. In pair-wise mode a support token is always
//! compared with the query contextualization produced by its own sentence's
//! pairing; the prototype scorer uses the mean over all pairings.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::PairEmbedding;
use crate::error::{Error, Result};

/// Score given to tags with no support evidence.
pub const NEG_INF_SCORE: f64 = -1e9;

/// `n x (2m+1)` emission scores of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionMatrix {
    pub scores: Array2<f64>,
}

impl EmissionMatrix {
    pub fn new(scores: Array2<f64>) -> Self {
        EmissionMatrix { scores }
    }

    /// Number of query positions.
    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }

    pub fn num_tags(&self) -> usize {
        self.scores.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// Sum of similarities to the support tokens of each tag.
    Mn,
    /// Mean of similarities to the support tokens of each tag.
    Nmn,
    /// Similarity to the mean support vector of each tag.
    Proto,
    /// Similarity to the closest support token of each tag.
    Nearest,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [Scorer::Mn, Scorer::Nmn, Scorer::Proto, Scorer::Nearest];

    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Mn => "mn",
            Scorer::Nmn => "nmn",
            Scorer::Proto => "proto",
            Scorer::Nearest => "nearest",
        }
    }

    pub fn score(self, emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> EmissionMatrix {
        match self {
            Scorer::Mn => matching_score(emb, support_tags, num_tags),
            Scorer::Nmn => normalized_matching_score(emb, support_tags, num_tags),
            Scorer::Proto => prototypical_score(emb, support_tags, num_tags),
            Scorer::Nearest => nearest_token_score(emb, support_tags, num_tags),
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scorer `{s}` (mn, nmn, proto, nearest)")))
    }
}

fn one_hot(tags: &[usize], num_tags: usize) -> Array2<f64> {
    let mut y = Array2::zeros((tags.len(), num_tags));
    for (k, &t) in tags.iter().enumerate() {
        y[[k, t]] = 1.0;
    }
    y
}

/// Support tokens per tag, `M_t`.
pub fn support_counts(support_tags: &[Vec<usize>], num_tags: usize) -> Vec<usize> {
    let mut counts = vec![0; num_tags];
    for &t in support_tags.iter().flatten() {
        counts[t] += 1;
    }
    counts
}

fn check(emb: &PairEmbedding, support_tags: &[Vec<usize>]) {
    assert_eq!(emb.support.len(), support_tags.len(), "support sentence count");
    assert_eq!(emb.query.len(), support_tags.len(), "query pairing count");
    for (s, t) in emb.support.iter().zip(support_tags) {
        assert_eq!(s.nrows(), t.len(), "support tokens and tags are misaligned");
    }
}

fn mask_absent(mut scores: Array2<f64>, counts: &[usize]) -> EmissionMatrix {
    for (mut col, &c) in scores.columns_mut().into_iter().zip(counts) {
        if c == 0 {
            col.fill(NEG_INF_SCORE);
        }
    }
    EmissionMatrix::new(scores)
}

fn summed_similarity(emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> Array2<f64> {
    check(emb, support_tags);
    let mut acc = Array2::zeros((emb.query_len(), num_tags));
    for ((q, s), tags) in emb.query.iter().zip(&emb.support).zip(support_tags) {
        // (n x h) . (h x |s|) . (|s| x T)
        acc += &q.dot(&s.t().dot(&one_hot(tags, num_tags)));
    }
    acc
}

pub fn matching_score(emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> EmissionMatrix {
    let counts = support_counts(support_tags, num_tags);
    mask_absent(summed_similarity(emb, support_tags, num_tags), &counts)
}

pub fn normalized_matching_score(emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> EmissionMatrix {
    let counts = support_counts(support_tags, num_tags);
    let mut scores = summed_similarity(emb, support_tags, num_tags);
    for (mut col, &c) in scores.columns_mut().into_iter().zip(&counts) {
        if c > 0 {
            col /= c as f64;
        }
    }
    mask_absent(scores, &counts)
}

/// Per-tag mean support vector (`T x h`); rows of absent tags are zero.
pub fn prototypes(emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> Array2<f64> {
    check(emb, support_tags);
    let h = emb.dim();
    let mut sums = Array2::zeros((num_tags, h));
    for (s, tags) in emb.support.iter().zip(support_tags) {
        sums += &one_hot(tags, num_tags).t().dot(s);
    }
    let counts = support_counts(support_tags, num_tags);
    for (mut row, &c) in sums.rows_mut().into_iter().zip(&counts) {
        if c > 0 {
            row /= c as f64;
        }
    }
    sums
}

pub fn prototypical_score(emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> EmissionMatrix {
    let counts = support_counts(support_tags, num_tags);
    let protos = prototypes(emb, support_tags, num_tags);
    mask_absent(emb.mean_query().dot(&protos.t()), &counts)
}

/// `(pairing, support token)` of a best match, per position and tag.
type Argbest = Vec<Vec<Option<(usize, usize)>>>;

/// For each (position, tag): `(pairing, support token)` of the most similar
/// support token, first occurrence on ties.
fn nearest_pairs(emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> (Array2<f64>, Argbest) {
    check(emb, support_tags);
    let n = emb.query_len();
    let mut best = Array2::from_elem((n, num_tags), NEG_INF_SCORE);
    let mut which = vec![vec![None; num_tags]; n];
    for (i, ((q, s), tags)) in emb.query.iter().zip(&emb.support).zip(support_tags).enumerate() {
        let sims = q.dot(&s.t());
        for j in 0..n {
            for (k, &t) in tags.iter().enumerate() {
                let v = sims[[j, k]];
                if which[j][t].is_none() || v > best[[j, t]] {
                    best[[j, t]] = v;
                    which[j][t] = Some((i, k));
                }
            }
        }
    }
    (best, which)
}

pub fn nearest_token_score(emb: &PairEmbedding, support_tags: &[Vec<usize>], num_tags: usize) -> EmissionMatrix {
    EmissionMatrix::new(nearest_pairs(emb, support_tags, num_tags).0)
}

/// Gradient of a loss w.r.t. the projection `w`, given the loss gradient
/// `grad` w.r.t. the emission scores computed from `raw.project(w)`.
///
/// Each score is a sum of terms `coef * (a w) . (b w)` with `a`, `b`
/// unprojected vectors, whose derivative is `coef * (a^T b + b^T a) w`.
/// The terms are accumulated into `C = sum coef * a^T b` and the result is
/// `(C + C^T) w`.
pub fn projection_gradient(
    scorer: Scorer,
    raw: &PairEmbedding,
    w: &Array2<f64>,
    support_tags: &[Vec<usize>],
    num_tags: usize,
    grad: &Array2<f64>,
) -> Array2<f64> {
    check(raw, support_tags);
    let counts = support_counts(support_tags, num_tags);
    let h = raw.dim();
    let mut g = grad.clone();
    for (mut col, &c) in g.columns_mut().into_iter().zip(&counts) {
        if c == 0 {
            col.fill(0.0);
        } else if scorer == Scorer::Nmn {
            col /= c as f64;
        }
    }
    let mut c = Array2::<f64>::zeros((h, h));
    match scorer {
        Scorer::Mn | Scorer::Nmn => {
            for ((q, s), tags) in raw.query.iter().zip(&raw.support).zip(support_tags) {
                let pair_weights = g.dot(&one_hot(tags, num_tags).t());
                c += &q.t().dot(&pair_weights).dot(s);
            }
        }
        Scorer::Proto => {
            let protos = prototypes(raw, support_tags, num_tags);
            c += &raw.mean_query().t().dot(&g).dot(&protos);
        }
        Scorer::Nearest => {
            let (_, which) = nearest_pairs(&raw.project(w), support_tags, num_tags);
            for (j, row) in which.iter().enumerate() {
                for (t, hit) in row.iter().enumerate() {
                    if let Some((i, k)) = *hit {
                        let a: Array1<f64> = raw.query[i].row(j).to_owned();
                        let b = raw.support[i].row(k);
                        let outer = a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)));
                        c.scaled_add(g[[j, t]], &outer);
                    }
                }
            }
        }
    }
    (&c + &c.t()).dot(w)
}

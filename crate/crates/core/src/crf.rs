//! Linear-chain CRF over a domain's concrete tags, with transitions shared
//! across domains through a table of abstract label transitions.
//!
//! The table has one score per (source kind, target class) pair, where the
//! source kind is `O`, `B` or `I` and the target class is `O`, same-label `B`
//! (`sB`), different-label `B` (`dB`), same-label `I` (`sI`) or
//! different-label `I` (`dI`). From `O` there is no "same" or "different"
//! label, so only `O`, `sB` and `sI` exist in that row: 13 entries in total.
//! [`expand`] copies these scores into the `(2m+1) x (2m+1)` matrix of any
//! label set.
//!
//! All lattice computations run in log space. A sequence `y` of length `n`
//! scores
//!
//! ```text
//! start(y_0) + sum_{j>=1} M[y_{j-1}][y_j] + lambda * sum_j E[j][y_j]
//! ```
//!
//! and `p(y) = exp(score(y) - log Z)`.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::emission::{EmissionMatrix, NEG_INF_SCORE};
use crate::error::{Error, Result};
use crate::math::{argmax, logsumexp};
use crate::tags::{kind_of_index, label_slot_of_index, LabelSet, TagKind};

/// One trainable cell of the abstract transition table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transition {
    OutsideToOutside,
    OutsideToBegin,
    OutsideToInside,
    BeginToOutside,
    BeginToSameBegin,
    BeginToOtherBegin,
    BeginToSameInside,
    BeginToOtherInside,
    InsideToOutside,
    InsideToSameBegin,
    InsideToOtherBegin,
    InsideToSameInside,
    InsideToOtherInside,
}

pub const NUM_TRANSITIONS: usize = 13;
pub const NUM_START: usize = 3;

impl Transition {
    pub const ALL: [Transition; NUM_TRANSITIONS] = [
        Transition::OutsideToOutside,
        Transition::OutsideToBegin,
        Transition::OutsideToInside,
        Transition::BeginToOutside,
        Transition::BeginToSameBegin,
        Transition::BeginToOtherBegin,
        Transition::BeginToSameInside,
        Transition::BeginToOtherInside,
        Transition::InsideToOutside,
        Transition::InsideToSameBegin,
        Transition::InsideToOtherBegin,
        Transition::InsideToSameInside,
        Transition::InsideToOtherInside,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Row/column name pair, e.g. `("B", "dI")`.
    pub fn name(self) -> (&'static str, &'static str) {
        use Transition::*;
        match self {
            OutsideToOutside => ("O", "O"),
            OutsideToBegin => ("O", "sB"),
            OutsideToInside => ("O", "sI"),
            BeginToOutside => ("B", "O"),
            BeginToSameBegin => ("B", "sB"),
            BeginToOtherBegin => ("B", "dB"),
            BeginToSameInside => ("B", "sI"),
            BeginToOtherInside => ("B", "dI"),
            InsideToOutside => ("I", "O"),
            InsideToSameBegin => ("I", "sB"),
            InsideToOtherBegin => ("I", "dB"),
            InsideToSameInside => ("I", "sI"),
            InsideToOtherInside => ("I", "dI"),
        }
    }

    /// Table cell that scores the move between two concrete tag indices.
    pub fn between(from: usize, to: usize) -> Transition {
        use Transition::*;
        let same = label_slot_of_index(from) == label_slot_of_index(to);
        match (kind_of_index(from), kind_of_index(to)) {
            (TagKind::Outside, TagKind::Outside) => OutsideToOutside,
            (TagKind::Outside, TagKind::Begin) => OutsideToBegin,
            (TagKind::Outside, TagKind::Inside) => OutsideToInside,
            (TagKind::Begin, TagKind::Outside) => BeginToOutside,
            (TagKind::Begin, TagKind::Begin) if same => BeginToSameBegin,
            (TagKind::Begin, TagKind::Begin) => BeginToOtherBegin,
            (TagKind::Begin, TagKind::Inside) if same => BeginToSameInside,
            (TagKind::Begin, TagKind::Inside) => BeginToOtherInside,
            (TagKind::Inside, TagKind::Outside) => InsideToOutside,
            (TagKind::Inside, TagKind::Begin) if same => InsideToSameBegin,
            (TagKind::Inside, TagKind::Begin) => InsideToOtherBegin,
            (TagKind::Inside, TagKind::Inside) if same => InsideToSameInside,
            (TagKind::Inside, TagKind::Inside) => InsideToOtherInside,
        }
    }
}

fn start_slot(kind: TagKind) -> usize {
    match kind {
        TagKind::Outside => 0,
        TagKind::Begin => 1,
        TagKind::Inside => 2,
    }
}

/// Abstract transition scores (unconstrained log-potentials) plus optional
/// start scores for `{O, B, I}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    /// Scores in [`Transition::ALL`] order.
    pub entries: [f64; NUM_TRANSITIONS],
    /// Start scores for `[O, B, I]`; `None` disables start handling.
    #[serde(default)]
    pub start: Option<[f64; NUM_START]>,
}

impl TransitionTable {
    pub fn zeros(with_start: bool) -> Self {
        TransitionTable {
            entries: [0.0; NUM_TRANSITIONS],
            start: with_start.then_some([0.0; NUM_START]),
        }
    }

    pub fn get(&self, t: Transition) -> f64 {
        self.entries[t.index()]
    }

    pub fn set(&mut self, t: Transition, value: f64) {
        self.entries[t.index()] = value;
    }

    pub fn num_params(&self) -> usize {
        NUM_TRANSITIONS + if self.start.is_some() { NUM_START } else { 0 }
    }

    /// Entries followed by start scores, if enabled.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.entries.to_vec();
        if let Some(s) = self.start {
            v.extend_from_slice(&s);
        }
        v
    }

    pub fn assign(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        self.entries.copy_from_slice(&params[..NUM_TRANSITIONS]);
        if let Some(s) = self.start.as_mut() {
            s.copy_from_slice(&params[NUM_TRANSITIONS..]);
        }
    }
}

/// Concrete transition scores for one label set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub scores: Array2<f64>,
    pub start: Option<Array1<f64>>,
}

impl TransitionMatrix {
    pub fn zeros(num_tags: usize) -> Self {
        TransitionMatrix {
            scores: Array2::zeros((num_tags, num_tags)),
            start: None,
        }
    }

    pub fn num_tags(&self) -> usize {
        self.scores.nrows()
    }

    fn start_score(&self, tag: usize) -> f64 {
        self.start.as_ref().map_or(0.0, |s| s[tag])
    }
}

/// Fills the concrete matrix of `labels` from the abstract table.
pub fn expand(table: &TransitionTable, labels: &LabelSet) -> TransitionMatrix {
    let n = labels.num_tags();
    let scores = Array2::from_shape_fn((n, n), |(from, to)| table.get(Transition::between(from, to)));
    let start = table
        .start
        .map(|s| Array1::from_shape_fn(n, |t| s[start_slot(kind_of_index(t))]));
    TransitionMatrix { scores, start }
}

fn check_shapes(emissions: &EmissionMatrix, matrix: &TransitionMatrix) {
    assert_eq!(
        emissions.num_tags(),
        matrix.num_tags(),
        "emission and transition tag counts differ"
    );
    assert!(!emissions.is_empty(), "empty emission matrix");
}

pub fn sequence_score(tags: &[usize], emissions: &EmissionMatrix, matrix: &TransitionMatrix, lambda: f64) -> f64 {
    assert_eq!(tags.len(), emissions.len(), "sequence length mismatch");
    let e = &emissions.scores;
    let mut trans = matrix.start_score(tags[0]);
    let mut emit = e[[0, tags[0]]];
    for j in 1..tags.len() {
        trans += matrix.scores[[tags[j - 1], tags[j]]];
        emit += e[[j, tags[j]]];
    }
    trans + lambda * emit
}

fn forward(emissions: &EmissionMatrix, matrix: &TransitionMatrix, lambda: f64) -> Array2<f64> {
    let (n, k) = emissions.scores.dim();
    let e = &emissions.scores;
    let m = &matrix.scores;
    let mut alpha = Array2::zeros((n, k));
    for t in 0..k {
        alpha[[0, t]] = matrix.start_score(t) + lambda * e[[0, t]];
    }
    for j in 1..n {
        for t in 0..k {
            let prev = alpha.row(j - 1);
            alpha[[j, t]] = logsumexp((0..k).map(|s| prev[s] + m[[s, t]])) + lambda * e[[j, t]];
        }
    }
    alpha
}

fn backward(emissions: &EmissionMatrix, matrix: &TransitionMatrix, lambda: f64) -> Array2<f64> {
    let (n, k) = emissions.scores.dim();
    let e = &emissions.scores;
    let m = &matrix.scores;
    let mut beta = Array2::zeros((n, k));
    for j in (0..n - 1).rev() {
        for s in 0..k {
            let next = beta.row(j + 1);
            beta[[j, s]] = logsumexp((0..k).map(|t| m[[s, t]] + lambda * e[[j + 1, t]] + next[t]));
        }
    }
    beta
}

/// `log Z`: log-sum-exp of [`sequence_score`] over every tag sequence.
pub fn log_partition(emissions: &EmissionMatrix, matrix: &TransitionMatrix, lambda: f64) -> f64 {
    check_shapes(emissions, matrix);
    let alpha = forward(emissions, matrix, lambda);
    logsumexp(alpha.row(alpha.nrows() - 1).iter().copied())
}

/// Posterior node and edge marginals.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub log_partition: f64,
    /// `n x K`, row `j` is the distribution of `y_j`.
    pub node: Array2<f64>,
    /// `(n-1) x K x K`, slice `j` is the joint of `(y_j, y_{j+1})`.
    pub edge: Array3<f64>,
}

pub fn marginals(emissions: &EmissionMatrix, matrix: &TransitionMatrix, lambda: f64) -> Marginals {
    check_shapes(emissions, matrix);
    let (n, k) = emissions.scores.dim();
    let e = &emissions.scores;
    let alpha = forward(emissions, matrix, lambda);
    let beta = backward(emissions, matrix, lambda);
    let log_z = logsumexp(alpha.row(n - 1).iter().copied());
    let node = Array2::from_shape_fn((n, k), |(j, t)| (alpha[[j, t]] + beta[[j, t]] - log_z).exp());
    let edge = Array3::from_shape_fn((n.saturating_sub(1), k, k), |(j, s, t)| {
        (alpha[[j, s]] + matrix.scores[[s, t]] + lambda * e[[j + 1, t]] + beta[[j + 1, t]] - log_z).exp()
    });
    Marginals {
        log_partition: log_z,
        node,
        edge,
    }
}

/// Gradient of the negative log-likelihood with respect to the table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGradient {
    pub entries: [f64; NUM_TRANSITIONS],
    pub start: Option<[f64; NUM_START]>,
}

impl TableGradient {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.entries.to_vec();
        if let Some(s) = self.start {
            v.extend_from_slice(&s);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct NllGradients {
    pub loss: f64,
    pub table: TableGradient,
    pub lambda: f64,
    /// `n x K`, gradient with respect to the unscaled emission scores.
    pub emissions: Array2<f64>,
}

/// `-log p(gold)` and its gradients with respect to the abstract table,
/// `lambda` and the emission matrix.
pub fn nll_and_gradients(
    gold: &[usize],
    emissions: &EmissionMatrix,
    table: &TransitionTable,
    labels: &LabelSet,
    lambda: f64,
) -> Result<NllGradients> {
    let k = labels.num_tags();
    if gold.len() != emissions.len() {
        return Err(Error::LengthMismatch {
            tokens: emissions.len(),
            tags: gold.len(),
        });
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= k) {
        return Err(Error::TagIndexOutOfRange {
            index: bad,
            num_tags: k,
        });
    }
    let matrix = expand(table, labels);
    let marg = marginals(emissions, &matrix, lambda);
    let loss = marg.log_partition - sequence_score(gold, emissions, &matrix, lambda);
    let e = &emissions.scores;
    let n = gold.len();

    // Concrete cell gradients: expected counts minus gold counts.
    let mut cell = marg.edge.sum_axis(ndarray::Axis(0));
    if n == 1 {
        cell = Array2::zeros((k, k));
    }
    for j in 1..n {
        cell[[gold[j - 1], gold[j]]] -= 1.0;
    }
    let mut entries = [0.0; NUM_TRANSITIONS];
    for from in 0..k {
        for to in 0..k {
            entries[Transition::between(from, to).index()] += cell[[from, to]];
        }
    }
    let start = table.start.map(|_| {
        let mut s = [0.0; NUM_START];
        for t in 0..k {
            s[start_slot(kind_of_index(t))] += marg.node[[0, t]];
        }
        s[start_slot(kind_of_index(gold[0]))] -= 1.0;
        s
    });

    let mut grad_lambda = 0.0;
    let mut grad_emissions = Array2::zeros((n, k));
    for j in 0..n {
        for t in 0..k {
            let p = marg.node[[j, t]];
            if p > 0.0 {
                grad_lambda += e[[j, t]] * p;
            }
            grad_emissions[[j, t]] = lambda * p;
        }
        grad_lambda -= e[[j, gold[j]]];
        grad_emissions[[j, gold[j]]] -= lambda;
    }

    Ok(NllGradients {
        loss,
        table: TableGradient { entries, start },
        lambda: grad_lambda,
        emissions: grad_emissions,
    })
}

/// Highest-scoring tag sequence and its score. Ties go to the lower tag index.
pub fn viterbi(emissions: &EmissionMatrix, matrix: &TransitionMatrix, lambda: f64) -> (Vec<usize>, f64) {
    check_shapes(emissions, matrix);
    let (n, k) = emissions.scores.dim();
    let e = &emissions.scores;
    let mut delta = Array2::<f64>::zeros((n, k));
    let mut back = Array2::<usize>::zeros((n, k));
    for t in 0..k {
        delta[[0, t]] = matrix.start_score(t) + lambda * e[[0, t]];
    }
    for j in 1..n {
        for t in 0..k {
            let mut best = 0;
            let mut best_score = delta[[j - 1, 0]] + matrix.scores[[0, t]];
            for s in 1..k {
                let cand = delta[[j - 1, s]] + matrix.scores[[s, t]];
                if cand > best_score {
                    best = s;
                    best_score = cand;
                }
            }
            delta[[j, t]] = best_score + lambda * e[[j, t]];
            back[[j, t]] = best;
        }
    }
    let last: Vec<f64> = delta.row(n - 1).to_vec();
    let mut tag = argmax(&last);
    let score = last[tag];
    let mut path = vec![0; n];
    path[n - 1] = tag;
    for j in (1..n).rev() {
        tag = back[[j, tag]];
        path[j - 1] = tag;
    }
    (path, score)
}

/// Per-position argmax of the emission scores.
pub fn argmax_decode(emissions: &EmissionMatrix) -> Vec<usize> {
    emissions
        .scores
        .rows()
        .into_iter()
        .map(|row| argmax(row.as_slice().expect("standard layout")))
        .collect()
}

/// Greedy left-to-right decoding that never emits `I-l` unless the previous
/// tag is `B-l` or `I-l`. Falls back to `O` when every legal tag carries the
/// absent-tag sentinel.
pub fn rule_decode(emissions: &EmissionMatrix) -> Vec<usize> {
    let k = emissions.num_tags();
    let mut out: Vec<usize> = Vec::with_capacity(emissions.len());
    for row in emissions.scores.rows() {
        let prev = out.last().copied();
        let legal = |t: usize| match kind_of_index(t) {
            TagKind::Inside => prev.is_some_and(|p| p != 0 && label_slot_of_index(p) == label_slot_of_index(t)),
            _ => true,
        };
        let mut best: Option<usize> = None;
        for t in (0..k).filter(|&t| legal(t)) {
            if best.is_none_or(|b| row[t] > row[b]) {
                best = Some(t);
            }
        }
        let pick = match best {
            Some(b) if row[b] > NEG_INF_SCORE => b,
            _ => 0,
        };
        out.push(pick);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::{validate_bio, Label};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(m: usize) -> LabelSet {
        LabelSet::new((0..m).map(|i| Label::new(format!("l{}", i + 1)).unwrap())).unwrap()
    }

    fn distinct_table() -> TransitionTable {
        let mut t = TransitionTable::zeros(false);
        for (i, e) in t.entries.iter_mut().enumerate() {
            *e = (i + 1) as f64;
        }
        t
    }

    fn all_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |t| {
                        let mut q = p.clone();
                        q.push(t);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (EmissionMatrix, TransitionTable, LabelSet) {
        let ls = labels(m);
        let k = ls.num_tags();
        let e = Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0));
        let mut table = TransitionTable::zeros(rng.random_bool(0.5));
        let params: Vec<f64> = (0..table.num_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
        table.assign(&params);
        (EmissionMatrix::new(e), table, ls)
    }

    #[test]
    fn paper_two_label_filling() {
        let t = distinct_table();
        let m = expand(&t, &labels(2));
        let (b1, b2) = (1, 3);
        assert_eq!(m.scores[[b1, b2]], t.get(Transition::BeginToOtherBegin));
        assert_eq!(m.scores[[b2, b1]], t.get(Transition::BeginToOtherBegin));
        assert_eq!(m.scores[[b1, b1]], t.get(Transition::BeginToSameBegin));
        assert_eq!(m.scores[[b2, b2]], t.get(Transition::BeginToSameBegin));
    }

    #[test]
    fn single_label_never_uses_other_columns() {
        let ls = labels(1);
        for from in 0..ls.num_tags() {
            for to in 0..ls.num_tags() {
                let (_, col) = Transition::between(from, to).name();
                assert!(!col.starts_with('d'));
            }
        }
    }

    #[test]
    fn three_labels_cell_counts() {
        let ls = labels(3);
        let count = |want: Transition| {
            (0..ls.num_tags())
                .flat_map(|f| (0..ls.num_tags()).map(move |t| (f, t)))
                .filter(|&(f, t)| Transition::between(f, t) == want)
                .count()
        };
        assert_eq!(count(Transition::BeginToOtherBegin), 6);
        assert_eq!(count(Transition::BeginToSameBegin), 3);
    }

    #[test]
    fn start_vector_expansion() {
        let mut t = TransitionTable::zeros(true);
        t.start = Some([0.5, -1.0, -7.0]);
        let m = expand(&t, &labels(2));
        assert_eq!(m.start.unwrap().to_vec(), vec![0.5, -1.0, -7.0, -1.0, -7.0]);
    }

    #[test]
    fn sequence_score_examples() {
        let e = EmissionMatrix::new(array![[1.0, 2.0, 3.0]]);
        let m = expand(&distinct_table(), &labels(1));
        assert_eq!(sequence_score(&[2], &e, &m, 0.5), 1.5);
        let e2 = EmissionMatrix::new(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(sequence_score(&[1, 2], &e2, &m, 0.0), m.scores[[1, 2]]);
        let z = EmissionMatrix::new(Array2::zeros((3, 3)));
        assert_eq!(sequence_score(&[0, 1, 2], &z, &TransitionMatrix::zeros(3), 1.3), 0.0);
    }

    #[test]
    fn log_partition_examples() {
        let z = EmissionMatrix::new(Array2::zeros((2, 2)));
        assert!((log_partition(&z, &TransitionMatrix::zeros(2), 1.0) - 4f64.ln()).abs() < 1e-12);
        let e = EmissionMatrix::new(array![[0.3, -1.0, 2.0]]);
        let expected = logsumexp([0.6, -2.0, 4.0]);
        assert!((log_partition(&e, &TransitionMatrix::zeros(3), 2.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn enumeration_oracle_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (e, table, ls) = random_instance(&mut rng, 4, 1);
            let m = expand(&table, &ls);
            let lambda = rng.random_range(0.1..2.0);
            let seqs = all_sequences(4, 3);
            assert_eq!(seqs.len(), 81);
            let scores: Vec<f64> = seqs.iter().map(|s| sequence_score(s, &e, &m, lambda)).collect();
            let log_z = logsumexp(scores.iter().copied());
            assert!((log_partition(&e, &m, lambda) - log_z).abs() < 1e-9);

            let marg = marginals(&e, &m, lambda);
            let mut node = Array2::<f64>::zeros((4, 3));
            let mut edge = Array3::<f64>::zeros((3, 3, 3));
            for (s, sc) in seqs.iter().zip(&scores) {
                let p = (sc - log_z).exp();
                for j in 0..4 {
                    node[[j, s[j]]] += p;
                    if j > 0 {
                        edge[[j - 1, s[j - 1], s[j]]] += p;
                    }
                }
            }
            assert!((&marg.node - &node).iter().all(|d| d.abs() < 1e-9));
            assert!((&marg.edge - &edge).iter().all(|d| d.abs() < 1e-9));

            let best = argmax(&scores);
            let (path, score) = viterbi(&e, &m, lambda);
            assert_eq!(path, seqs[best]);
            assert!((score - scores[best]).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_normalize_and_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (e, table, ls) = random_instance(&mut rng, 5, 2);
        let marg = marginals(&e, &expand(&table, &ls), 0.8);
        for row in marg.node.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        for j in 0..4 {
            let slice = marg.edge.index_axis(ndarray::Axis(0), j);
            let left = slice.sum_axis(ndarray::Axis(1));
            let right = slice.sum_axis(ndarray::Axis(0));
            assert!((&left - &marg.node.row(j)).iter().all(|d| d.abs() < 1e-9));
            assert!((&right - &marg.node.row(j + 1)).iter().all(|d| d.abs() < 1e-9));
        }
    }

    #[test]
    fn saturated_gold_has_tiny_loss() {
        let ls = labels(1);
        let e = EmissionMatrix::new(array![[0.0, 30.0, 0.0], [0.0, 0.0, 30.0], [30.0, 0.0, 0.0]]);
        let g = nll_and_gradients(&[1, 2, 0], &e, &TransitionTable::zeros(false), &ls, 1.0).unwrap();
        assert!(g.loss >= 0.0 && g.loss < 1e-6);
        assert!(g.emissions.iter().all(|v| v.abs() < 1e-6));
        assert!(g.lambda.abs() < 1e-6);
        assert!(g.table.entries.iter().all(|v| v.abs() < 1e-6));
        let (path, _) = viterbi(&e, &TransitionMatrix::zeros(3), 1.0);
        assert_eq!(path, vec![1, 2, 0]);
    }

    #[test]
    fn zero_lambda_zero_emission_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (e, table, ls) = random_instance(&mut rng, 4, 2);
        let g = nll_and_gradients(&[0, 1, 2, 0], &e, &table, &ls, 0.0).unwrap();
        assert!(g.emissions.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gold_outside_tag_list_errors() {
        let e = EmissionMatrix::new(Array2::zeros((2, 3)));
        assert!(nll_and_gradients(&[0, 5], &e, &TransitionTable::zeros(false), &labels(1), 1.0).is_err());
        assert!(nll_and_gradients(&[0], &e, &TransitionTable::zeros(false), &labels(1), 1.0).is_err());
    }

    #[test]
    fn finite_difference_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 1e-4;
        for _ in 0..10 {
            let (e, table, ls) = random_instance(&mut rng, 5, 2);
            let gold: Vec<usize> = (0..5).map(|_| rng.random_range(0..ls.num_tags())).collect();
            let lambda = rng.random_range(0.2..1.5);
            let loss =
                |t: &TransitionTable, e: &EmissionMatrix, l: f64| nll_and_gradients(&gold, e, t, &ls, l).unwrap().loss;
            let g = nll_and_gradients(&gold, &e, &table, &ls, lambda).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            let p = table.to_vec();
            let analytic = g.table.to_vec();
            for i in 0..p.len() {
                let (mut up, mut down) = (table.clone(), table.clone());
                let mut pu = p.clone();
                pu[i] += eps;
                up.assign(&pu);
                let mut pd = p.clone();
                pd[i] -= eps;
                down.assign(&pd);
                let fd = (loss(&up, &e, lambda) - loss(&down, &e, lambda)) / (2.0 * eps);
                assert!(rel(fd, analytic[i]) < 1e-4, "table {i}: {fd} vs {}", analytic[i]);
            }
            let fd = (loss(&table, &e, lambda + eps) - loss(&table, &e, lambda - eps)) / (2.0 * eps);
            assert!(rel(fd, g.lambda) < 1e-4);
            for j in 0..5 {
                for t in 0..ls.num_tags() {
                    let mut up = e.clone();
                    up.scores[[j, t]] += eps;
                    let mut down = e.clone();
                    down.scores[[j, t]] -= eps;
                    let fd = (loss(&table, &up, lambda) - loss(&table, &down, lambda)) / (2.0 * eps);
                    assert!(rel(fd, g.emissions[[j, t]]) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn illegal_inside_is_avoided_by_strong_transitions() {
        let ls = labels(2);
        let mut t = TransitionTable::zeros(false);
        t.set(Transition::OutsideToInside, -1e9);
        t.set(Transition::BeginToOtherInside, -1e9);
        t.set(Transition::InsideToOtherInside, -1e9);
        t.start = Some([0.0, 0.0, -1e9]);
        let m = expand(&t, &ls);
        // Emissions favour I-l1 after O and I-l2 after B-l1.
        let e = EmissionMatrix::new(array![
            [5.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 9.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 9.0],
            [0.0, 0.0, 0.0, 0.0, 9.0],
        ]);
        let (path, score) = viterbi(&e, &m, 1.0);
        let tags = ls.tags_of(&path).unwrap();
        assert!(validate_bio(&tags).is_empty(), "{tags:?}");
        let best = all_sequences(4, 5)
            .into_iter()
            .map(|s| sequence_score(&s, &e, &m, 1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(score, best);
    }

    #[test]
    fn viterbi_single_position_is_argmax() {
        let e = EmissionMatrix::new(array![[0.1, 0.7, 0.7, -3.0, 0.2]]);
        let (path, _) = viterbi(&e, &TransitionMatrix::zeros(5), 2.0);
        assert_eq!(path, vec![1]);
    }

    #[test]
    fn rule_decoder_blocks_inside_after_outside() {
        // Position 1 prefers I-l1 (2) but follows O; next best legal is B-l2 (3).
        let e = EmissionMatrix::new(array![[3.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.5, 4.0, 1.0, 0.0]]);
        assert_eq!(rule_decode(&e), vec![0, 3]);
        let legal = EmissionMatrix::new(array![[0.0, 3.0, 0.0], [0.0, 0.0, 3.0], [1.0, 0.0, 0.0]]);
        assert_eq!(rule_decode(&legal), argmax_decode(&legal));
    }

    #[test]
    fn rule_decoder_falls_back_to_outside() {
        let s = NEG_INF_SCORE;
        let e = EmissionMatrix::new(array![[s, s, 5.0]]);
        assert_eq!(rule_decode(&e), vec![0]);
    }

    proptest! {
        #[test]
        fn rule_decoder_output_is_bio_valid(
            m in 1usize..4,
            n in 1usize..10,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ls = labels(m);
            let e = EmissionMatrix::new(Array2::from_shape_fn((n, ls.num_tags()), |_| {
                if rng.random_bool(0.1) { NEG_INF_SCORE } else { rng.random_range(-3.0..3.0) }
            }));
            let tags = ls.tags_of(&rule_decode(&e)).unwrap();
            prop_assert!(validate_bio(&tags).is_empty());
        }

        #[test]
        fn label_permutation_symmetry(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut table = TransitionTable::zeros(false);
            let p: Vec<f64> = (0..13).map(|_| rng.random_range(-1.0..1.0)).collect();
            table.assign(&p);
            let forward = labels(3);
            let reversed = LabelSet::new(forward.labels().iter().rev().cloned()).unwrap();
            let a = expand(&table, &forward);
            let b = expand(&table, &reversed);
            for from in forward.tags() {
                for to in forward.tags() {
                    let (fa, ta) = (forward.tag_index(&from).unwrap(), forward.tag_index(&to).unwrap());
                    let (fb, tb) = (reversed.tag_index(&from).unwrap(), reversed.tag_index(&to).unwrap());
                    prop_assert_eq!(a.scores[[fa, ta]], b.scores[[fb, tb]]);
                }
            }
        }

        #[test]
        fn emission_shift_invariance(seed in any::<u64>(), c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, table, ls) = random_instance(&mut rng, 4, 2);
            let m = expand(&table, &ls);
            let lambda = 0.7;
            let shifted = EmissionMatrix::new(e.scores.mapv(|v| v + c));
            let y = [0usize, 1, 2, 3];
            let d = sequence_score(&y, &shifted, &m, lambda) - sequence_score(&y, &e, &m, lambda);
            prop_assert!((d - lambda * 4.0 * c).abs() < 1e-9);
            prop_assert_eq!(viterbi(&e, &m, lambda).0, viterbi(&shifted, &m, lambda).0);
            let (ma, mb) = (marginals(&e, &m, lambda), marginals(&shifted, &m, lambda));
            prop_assert!((&ma.node - &mb.node).iter().all(|d| d.abs() < 1e-9));
        }

        #[test]
        fn viterbi_dominates_random_sequences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, table, ls) = random_instance(&mut rng, 8, 3);
            let m = expand(&table, &ls);
            let (_, best) = viterbi(&e, &m, 1.1);
            for _ in 0..1000 {
                let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..ls.num_tags())).collect();
                prop_assert!(sequence_score(&y, &e, &m, 1.1) <= best + 1e-9);
            }
        }
    }
}

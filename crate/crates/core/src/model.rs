//! Trainable parameters, emission scoring and decoding for prepared episodes.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{
    argmax_decode, expand, log_partition, nll_and_gradients, rule_decode, sequence_score, viterbi, TransitionTable,
};
use crate::embedding::{Embedder, PairEmbedding};
use crate::emission::{projection_gradient, EmissionMatrix, Scorer};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::sampler::FewShotDataset;
use crate::tags::{LabelSet, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Viterbi,
    Rule,
    Argmax,
}

impl Decoder {
    pub const ALL: [Decoder; 3] = [Decoder::Viterbi, Decoder::Rule, Decoder::Argmax];

    pub fn as_str(self) -> &'static str {
        match self {
            Decoder::Viterbi => "viterbi",
            Decoder::Rule => "rule",
            Decoder::Argmax => "argmax",
        }
    }
}

impl fmt::Display for Decoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Decoder::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown decoder `{s}` (viterbi, rule, argmax)")))
    }
}

/// An episode with its tag indices and unprojected embeddings resolved.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub episode: Episode,
    pub labels: LabelSet,
    pub gold: Vec<usize>,
    pub support_tags: Vec<Vec<usize>>,
    pub raw: PairEmbedding,
}

impl PreparedEpisode {
    pub fn num_tags(&self) -> usize {
        self.labels.num_tags()
    }

    /// Whether every gold tag of the query has support evidence.
    pub fn gold_supported(&self) -> bool {
        let mut seen = vec![false; self.num_tags()];
        for &t in self.support_tags.iter().flatten() {
            seen[t] = true;
        }
        self.gold.iter().all(|&t| seen[t])
    }
}

/// Resolves label sets (one per domain) and embeddings for every episode.
pub fn prepare(dataset: &FewShotDataset, embedder: &Embedder) -> Result<Vec<PreparedEpisode>> {
    let label_sets: HashMap<String, LabelSet> = dataset.domain_label_sets();
    dataset
        .episodes
        .par_iter()
        .map(|ep| {
            let labels = label_sets[&ep.domain].clone();
            let gold = labels.indices_of(ep.query.tags())?;
            let support_tags = ep.support_tag_indices(&labels)?;
            let raw = embedder.encode(ep)?;
            Ok(PreparedEpisode {
                episode: ep.clone(),
                labels,
                gold,
                support_tags,
                raw,
            })
        })
        .collect()
}

/// Which parameter groups receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub table: bool,
    pub lambda: bool,
    pub projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub scorer: Scorer,
    pub table: TransitionTable,
    pub lambda: f64,
    pub projection: Option<Array2<f64>>,
    /// When false the table stays at zero and decoding is per-position argmax.
    pub use_transition: bool,
    pub learnable_lambda: bool,
}

impl Model {
    pub fn new(
        scorer: Scorer,
        use_transition: bool,
        use_start: bool,
        lambda: f64,
        learnable_lambda: bool,
        projection_dim: Option<usize>,
    ) -> Self {
        Model {
            scorer,
            table: TransitionTable::zeros(use_start && use_transition),
            lambda,
            projection: projection_dim.map(Array2::eye),
            use_transition,
            learnable_lambda,
        }
    }

    pub fn trainable(&self) -> Trainable {
        Trainable {
            table: self.use_transition,
            lambda: self.learnable_lambda,
            projection: self.projection.is_some(),
        }
    }

    pub fn default_decoder(&self) -> Decoder {
        if self.use_transition {
            Decoder::Viterbi
        } else {
            Decoder::Argmax
        }
    }

    pub fn num_params(&self) -> usize {
        let t = self.trainable();
        let mut n = 0;
        if t.table {
            n += self.table.num_params();
        }
        if t.lambda {
            n += 1;
        }
        if let Some(w) = &self.projection {
            n += w.len();
        }
        n
    }

    /// Trainable parameters as one flat vector: table, lambda, projection.
    pub fn params(&self) -> Vec<f64> {
        let t = self.trainable();
        let mut out = Vec::with_capacity(self.num_params());
        if t.table {
            out.extend(self.table.to_vec());
        }
        if t.lambda {
            out.push(self.lambda);
        }
        if let Some(w) = &self.projection {
            out.extend(w.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let t = self.trainable();
        let mut rest = params;
        if t.table {
            let k = self.table.num_params();
            self.table.assign(&rest[..k]);
            rest = &rest[k..];
        }
        if t.lambda {
            self.lambda = rest[0];
            rest = &rest[1..];
        }
        if let Some(w) = &mut self.projection {
            for (dst, src) in w.iter_mut().zip(rest) {
                *dst = *src;
            }
        }
    }

    pub fn embedding(&self, raw: &PairEmbedding) -> PairEmbedding {
        match &self.projection {
            Some(w) => raw.project(w),
            None => raw.clone(),
        }
    }

    pub fn emissions(&self, ep: &PreparedEpisode) -> EmissionMatrix {
        self.scorer
            .score(&self.embedding(&ep.raw), &ep.support_tags, ep.num_tags())
    }

    pub fn decode_emissions(&self, emissions: &EmissionMatrix, labels: &LabelSet, decoder: Decoder) -> Vec<usize> {
        match decoder {
            Decoder::Viterbi => {
                let matrix = expand(&self.table, labels);
                viterbi(emissions, &matrix, self.lambda).0
            }
            Decoder::Rule => rule_decode(emissions),
            Decoder::Argmax => argmax_decode(emissions),
        }
    }

    pub fn decode(&self, ep: &PreparedEpisode, decoder: Decoder) -> Vec<Tag> {
        let path = self.decode_emissions(&self.emissions(ep), &ep.labels, decoder);
        ep.labels.tags_of(&path).expect("decoded indices lie in the label set")
    }

    /// Negative log-likelihood of the gold query tags. `emissions` may be
    /// passed when already computed for the current parameters.
    pub fn loss(&self, ep: &PreparedEpisode, emissions: Option<&EmissionMatrix>) -> f64 {
        let owned;
        let e = match emissions {
            Some(e) => e,
            None => {
                owned = self.emissions(ep);
                &owned
            }
        };
        let matrix = expand(&self.table, &ep.labels);
        log_partition(e, &matrix, self.lambda) - sequence_score(&ep.gold, e, &matrix, self.lambda)
    }

    /// Loss and its gradient w.r.t. [`Model::params`].
    pub fn loss_and_gradient(
        &self,
        ep: &PreparedEpisode,
        emissions: Option<&EmissionMatrix>,
    ) -> Result<(f64, Vec<f64>)> {
        let owned;
        let e = match emissions {
            Some(e) => e,
            None => {
                owned = self.emissions(ep);
                &owned
            }
        };
        let g = nll_and_gradients(&ep.gold, e, &self.table, &ep.labels, self.lambda)?;
        let t = self.trainable();
        let mut out = Vec::with_capacity(self.num_params());
        if t.table {
            out.extend(g.table.to_vec());
        }
        if t.lambda {
            out.push(g.lambda);
        }
        if let Some(w) = &self.projection {
            let grad_w = projection_gradient(self.scorer, &ep.raw, w, &ep.support_tags, ep.num_tags(), &g.emissions);
            out.extend(grad_w.iter());
        }
        Ok((g.loss, out))
    }
}

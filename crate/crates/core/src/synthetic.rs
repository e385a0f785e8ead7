//! Synthetic multi-domain slot-filling corpora with known word clusters, and
//! a harness comparing decoders, scorers and embedding modes on them.
//!
//! Every label owns a cluster of words whose vectors scatter around a label
//! center. `B` and `I` tokens of a label are drawn from the same cluster, so
//! emissions alone cannot tell a span's first token from its continuation;
//! spans of two to four tokens are common. `O` tokens come from filler
//! clusters shared by all domains.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conll::Domain;
use crate::embedding::{Embedder, EmbeddingConfig, EmbeddingMode, EmbeddingSource, Lexicon};
use crate::emission::Scorer;
use crate::episode::LabeledSequence;
use crate::error::Result;
use crate::eval::{evaluate, EvalOptions};
use crate::model::{prepare, Decoder, Model, PreparedEpisode};
use crate::sampler::{build_dataset_with, split_domains, FewShotDataset, SamplerConfig};
use crate::tags::{Label, Tag};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub domains: usize,
    pub labels_per_domain: usize,
    pub words_per_label: usize,
    pub outside_clusters: usize,
    pub words_per_outside_cluster: usize,
    pub sentences_per_domain: usize,
    pub dim: usize,
    /// Standard deviation of a word around its cluster center, per unit norm.
    pub noise: f64,
    /// Share of a label center taken from a center common to the domain's
    /// labels; higher values make labels of one domain easier to confuse.
    pub label_overlap: f64,
    pub max_spans: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            domains: 7,
            labels_per_domain: 4,
            words_per_label: 8,
            outside_clusters: 4,
            words_per_outside_cluster: 16,
            sentences_per_domain: 120,
            dim: 32,
            noise: 0.6,
            label_overlap: 0.0,
            max_spans: 3,
            seed: 0,
        }
    }
}

pub struct SyntheticCorpus {
    pub domains: Vec<Domain>,
    pub lexicon: Lexicon,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v = gaussian(rng, dim);
    let n = v.dot(&v).sqrt();
    v / n
}

fn cluster(
    rng: &mut ChaCha8Rng,
    lex: &mut Lexicon,
    prefix: &str,
    words: usize,
    noise: f64,
    shared: Option<(&Array1<f64>, f64)>,
) -> Vec<String> {
    let dim = lex.dim();
    let own = unit(rng, dim);
    let center = match shared {
        Some((common, w)) => common * w.sqrt() + &own * (1.0 - w).sqrt(),
        None => own,
    };
    (0..words)
        .map(|w| {
            let name = format!("{prefix}_{w}");
            let v = &center + &(gaussian(rng, dim) * (noise / (dim as f64).sqrt()));
            lex.insert(name.clone(), v);
            name
        })
        .collect()
}

/// Span length: 1 to 4 tokens, mostly 2 or 3.
fn span_len(rng: &mut ChaCha8Rng) -> usize {
    match rng.random_range(0..20) {
        0..=4 => 1,
        5..=11 => 2,
        12..=17 => 3,
        _ => 4,
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lexicon = Lexicon::new(cfg.dim);
    let fillers: Vec<Vec<String>> = (0..cfg.outside_clusters)
        .map(|c| {
            cluster(
                &mut rng,
                &mut lexicon,
                &format!("o{c}"),
                cfg.words_per_outside_cluster,
                cfg.noise,
                None,
            )
        })
        .collect();

    let mut domains = Vec::with_capacity(cfg.domains);
    for d in 0..cfg.domains {
        let common = unit(&mut rng, cfg.dim);
        let labels: Vec<(Label, Vec<String>)> = (0..cfg.labels_per_domain)
            .map(|l| {
                let name = format!("d{d}{}", char::from(b'a' + l as u8));
                let words = cluster(
                    &mut rng,
                    &mut lexicon,
                    &name,
                    cfg.words_per_label,
                    cfg.noise,
                    Some((&common, cfg.label_overlap)),
                );
                (Label::new(name).expect("valid label"), words)
            })
            .collect();
        let filler = |rng: &mut ChaCha8Rng| {
            let c = &fillers[rng.random_range(0..fillers.len())];
            c[rng.random_range(0..c.len())].clone()
        };

        let sentences = (0..cfg.sentences_per_domain)
            .map(|_| {
                let mut tokens = Vec::new();
                let mut tags = Vec::new();
                for _ in 0..rng.random_range(0..3) {
                    tokens.push(filler(&mut rng));
                    tags.push(Tag::Outside);
                }
                let spans = rng.random_range(1..=cfg.max_spans);
                for s in 0..spans {
                    if s > 0 && !rng.random_bool(0.15) {
                        for _ in 0..rng.random_range(1..4) {
                            tokens.push(filler(&mut rng));
                            tags.push(Tag::Outside);
                        }
                    }
                    let (label, words) = &labels[rng.random_range(0..labels.len())];
                    for k in 0..span_len(&mut rng) {
                        tokens.push(words[rng.random_range(0..words.len())].clone());
                        tags.push(if k == 0 {
                            Tag::Begin(label.clone())
                        } else {
                            Tag::Inside(label.clone())
                        });
                    }
                }
                for _ in 0..rng.random_range(0..3) {
                    tokens.push(filler(&mut rng));
                    tags.push(Tag::Outside);
                }
                LabeledSequence::new(tokens, tags).expect("non-empty sentence")
            })
            .collect();
        domains.push(Domain {
            name: format!("dom{d}"),
            sentences,
        });
    }
    SyntheticCorpus { domains, lexicon }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub corpus: SyntheticConfig,
    pub shot: usize,
    pub train_support_sets: usize,
    pub dev_support_sets: usize,
    pub test_support_sets: usize,
    pub queries_per_support: usize,
    pub train: TrainConfig,
    pub attention_sharpness: f64,
    pub attention_mix: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            corpus: SyntheticConfig::default(),
            shot: 1,
            train_support_sets: 12,
            dev_support_sets: 8,
            test_support_sets: 40,
            queries_per_support: 4,
            train: TrainConfig {
                learning_rate: 0.05,
                max_epochs: 8,
                ..TrainConfig::default()
            },
            attention_sharpness: 1.0,
            attention_mix: 2.0,
        }
    }
}

/// Mean target-domain F1 of each compared system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    /// NMN, pair-wise, trained table, Viterbi.
    pub viterbi: f64,
    /// NMN, pair-wise, no table, greedy BIO-blocking decoder.
    pub rule: f64,
    /// NMN, pair-wise, no table, per-position argmax.
    pub argmax: f64,
    /// MN, pair-wise, trained table, Viterbi.
    pub mn: f64,
    /// NMN, independent embeddings, trained table, Viterbi.
    pub independent: f64,
}

impl BenchmarkResult {
    pub fn nmn(&self) -> f64 {
        self.viterbi
    }

    pub fn pairwise(&self) -> f64 {
        self.viterbi
    }
}

struct Splits {
    train: FewShotDataset,
    dev: FewShotDataset,
    test: FewShotDataset,
}

fn sample_splits(cfg: &BenchmarkConfig, corpus: &SyntheticCorpus) -> Result<Splits> {
    let names: Vec<&str> = corpus.domains.iter().map(|d| d.name.as_str()).collect();
    let target = names[names.len() - 1];
    let dev = names[names.len() - 2];
    let split = split_domains(&corpus.domains, target, dev)?;
    let sampler = SamplerConfig {
        shot: cfg.shot,
        rng_seed: cfg.corpus.seed,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.corpus.seed ^ 0x5eed);
    let mut build = |domains: &[&Domain], n: usize| -> Result<FewShotDataset> {
        let parts = domains
            .iter()
            .map(|d| build_dataset_with(d, &d.label_set(), &sampler, n, n * cfg.queries_per_support, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(FewShotDataset::concat(parts))
    };
    Ok(Splits {
        train: build(&split.train, cfg.train_support_sets)?,
        dev: build(&[split.dev], cfg.dev_support_sets)?,
        test: build(&[split.test], cfg.test_support_sets)?,
    })
}

struct Prepared {
    train: Vec<PreparedEpisode>,
    dev: Vec<PreparedEpisode>,
    test: Vec<PreparedEpisode>,
    embedding: EmbeddingConfig,
}

fn prepare_all(
    cfg: &BenchmarkConfig,
    corpus: &SyntheticCorpus,
    splits: &Splits,
    mode: EmbeddingMode,
) -> Result<Prepared> {
    let embedding = EmbeddingConfig {
        dim: cfg.corpus.dim,
        mode,
        source: EmbeddingSource::ToyAttention,
        projection: false,
        attention_sharpness: cfg.attention_sharpness,
        attention_mix: cfg.attention_mix,
    };
    let embedder = Embedder::new(embedding.clone(), corpus.lexicon.clone())?;
    Ok(Prepared {
        train: prepare(&splits.train, &embedder)?,
        dev: prepare(&splits.dev, &embedder)?,
        test: prepare(&splits.test, &embedder)?,
        embedding,
    })
}

fn fit(p: &Prepared, cfg: &TrainConfig) -> Result<Model> {
    Ok(train(&p.train, &p.dev, cfg, &p.embedding, None, &mut |_| Ok(()))?.model)
}

fn mean_f1(model: &Model, p: &Prepared, decoder: Decoder) -> Result<f64> {
    Ok(
        evaluate(model, &p.test, decoder, EvalOptions::default(), serde_json::Value::Null)?
            .0
            .mean_f1,
    )
}

/// Trains the compared systems on the source domains of one seeded corpus and
/// scores them on its target domain.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkResult> {
    let corpus = generate(&cfg.corpus);
    let splits = sample_splits(cfg, &corpus)?;
    let pairwise = prepare_all(cfg, &corpus, &splits, EmbeddingMode::Pairwise)?;
    let independent = prepare_all(cfg, &corpus, &splits, EmbeddingMode::Independent)?;

    let base = TrainConfig {
        rng_seed: cfg.corpus.seed,
        ..cfg.train.clone()
    };
    let nmn_dt = fit(
        &pairwise,
        &TrainConfig {
            scorer: Scorer::Nmn,
            ..base.clone()
        },
    )?;
    let nmn_plain = fit(
        &pairwise,
        &TrainConfig {
            scorer: Scorer::Nmn,
            use_dependency_transfer: false,
            ..base.clone()
        },
    )?;
    let mn_dt = fit(
        &pairwise,
        &TrainConfig {
            scorer: Scorer::Mn,
            ..base.clone()
        },
    )?;
    let ind_dt = fit(
        &independent,
        &TrainConfig {
            scorer: Scorer::Nmn,
            ..base
        },
    )?;

    Ok(BenchmarkResult {
        viterbi: mean_f1(&nmn_dt, &pairwise, Decoder::Viterbi)?,
        rule: mean_f1(&nmn_plain, &pairwise, Decoder::Rule)?,
        argmax: mean_f1(&nmn_plain, &pairwise, Decoder::Argmax)?,
        mn: mean_f1(&mn_dt, &pairwise, Decoder::Viterbi)?,
        independent: mean_f1(&ind_dt, &independent, Decoder::Viterbi)?,
    })
}

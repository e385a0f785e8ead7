//! Minimal k-shot support set construction and episode assembly.
//!
//! A k-shot support set `S` drawn from a domain satisfies:
//!
//! 1. every label of the domain is included in at least `k` sentences of `S`;
//! 2. removing any sentence from `S` drops some label below `k`.
//!
//! [`sample_support_set`] first greedily adds random carriers for each label
//! until it reaches `k`, then walks the members in insertion order and drops
//! every sentence whose removal keeps all counts at or above `k`. With a
//! non-zero retention probability each such droppable sentence survives with
//! that probability, which trades strict minimality (2) for a less skewed
//! sample; criterion (1) always holds.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conll::Domain;
use crate::episode::{Episode, LabeledSequence, SupportSet};
use crate::error::{Error, Result};
use crate::tags::LabelSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub shot: usize,
    #[serde(default = "default_retention")]
    pub retention_probability: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_retention() -> f64 {
    0.2
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            shot: 1,
            retention_probability: default_retention(),
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shot == 0 {
            return Err(Error::Config("shot must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.retention_probability) {
            return Err(Error::Config(format!(
                "retention_probability {} outside [0, 1]",
                self.retention_probability
            )));
        }
        Ok(())
    }
}

/// Samples one k-shot support set with a generator seeded from `config.rng_seed`.
pub fn sample_support_set(domain: &Domain, labels: &LabelSet, config: &SamplerConfig) -> Result<SupportSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    sample_support_set_with(domain, labels, config, &mut rng)
}

/// Like [`sample_support_set`] but draws from a caller-supplied generator.
pub fn sample_support_set_with<R: Rng + ?Sized>(
    domain: &Domain,
    labels: &LabelSet,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<SupportSet> {
    let members = sample_support_indices(domain, labels, config, rng)?;
    Ok(SupportSet {
        pairs: members.iter().map(|&i| domain.sentences[i].clone()).collect(),
        shot: config.shot,
    })
}

fn sample_support_indices<R: Rng + ?Sized>(
    domain: &Domain,
    labels: &LabelSet,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    config.validate()?;
    let k = config.shot;
    let m = labels.len();
    // includes[i] lists the label slots sentence i carries, once per sentence.
    let includes: Vec<Vec<usize>> = domain
        .sentences
        .iter()
        .map(|s| {
            labels
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, l)| s.includes(l))
                .map(|(slot, _)| slot)
                .collect()
        })
        .collect();

    for (slot, label) in labels.labels().iter().enumerate() {
        let available = includes.iter().filter(|inc| inc.contains(&slot)).count();
        if available < k {
            return Err(Error::InsufficientSupport {
                domain: domain.name.clone(),
                label: label.to_string(),
                available,
                required: k,
            });
        }
    }

    let mut in_support = vec![false; domain.sentences.len()];
    let mut counts = vec![0usize; m];
    let mut members = Vec::new();

    for slot in 0..m {
        while counts[slot] < k {
            let candidates: Vec<usize> = (0..domain.sentences.len())
                .filter(|&i| !in_support[i] && includes[i].contains(&slot))
                .collect();
            // Non-empty: every carrier already in S contributes to counts[slot].
            let pick = candidates[rng.random_range(0..candidates.len())];
            in_support[pick] = true;
            members.push(pick);
            for &s in &includes[pick] {
                counts[s] += 1;
            }
        }
    }

    let mut kept = Vec::with_capacity(members.len());
    for &idx in &members {
        for &s in &includes[idx] {
            counts[s] -= 1;
        }
        let needed = includes[idx].iter().any(|&s| counts[s] < k);
        let retained = !needed && config.retention_probability > 0.0 && rng.random_bool(config.retention_probability);
        if needed || retained {
            for &s in &includes[idx] {
                counts[s] += 1;
            }
            kept.push(idx);
        }
    }
    Ok(kept)
}

/// Episodes grouped by support set, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    pub episodes: Vec<Episode>,
    pub queries_per_support: usize,
}

/// Builds `n_queries` episodes attached to `n_support_sets` independently
/// sampled support sets, `ceil(n_queries / n_support_sets)` queries per set
/// (the final group may be smaller). Queries are drawn without replacement
/// within a group from the sentences outside that group's support set.
pub fn build_dataset(
    domain: &Domain,
    labels: &LabelSet,
    config: &SamplerConfig,
    n_support_sets: usize,
    n_queries: usize,
) -> Result<FewShotDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    build_dataset_with(domain, labels, config, n_support_sets, n_queries, &mut rng)
}

pub fn build_dataset_with<R: Rng + ?Sized>(
    domain: &Domain,
    labels: &LabelSet,
    config: &SamplerConfig,
    n_support_sets: usize,
    n_queries: usize,
    rng: &mut R,
) -> Result<FewShotDataset> {
    if n_support_sets == 0 || n_queries == 0 {
        return Err(Error::Config("n_support_sets and n_queries must be positive".into()));
    }
    let per_group = n_queries.div_ceil(n_support_sets);
    let mut episodes = Vec::with_capacity(n_queries);
    for group in 0..n_support_sets {
        let size = per_group.min(n_queries - episodes.len());
        if size == 0 {
            break;
        }
        let members = sample_support_indices(domain, labels, config, rng)?;
        let support = SupportSet {
            pairs: members.iter().map(|&i| domain.sentences[i].clone()).collect(),
            shot: config.shot,
        };
        let pool: Vec<usize> = (0..domain.sentences.len()).filter(|i| !members.contains(i)).collect();
        if pool.len() < size {
            return Err(Error::DomainTooSmall {
                domain: domain.name.clone(),
                message: format!(
                    "{} sentences outside the support set, {} queries requested",
                    pool.len(),
                    size
                ),
            });
        }
        let support_id = format!("{}#{}", domain.name, group);
        for (j, pick) in rand::seq::index::sample(rng, pool.len(), size).into_iter().enumerate() {
            episodes.push(Episode {
                domain: domain.name.clone(),
                query: domain.sentences[pool[pick]].clone(),
                support: support.clone(),
                query_id: format!("{support_id}/{j}"),
                support_id: support_id.clone(),
            });
        }
    }
    Ok(FewShotDataset {
        episodes,
        queries_per_support: per_group,
    })
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    domain: String,
    query: LabeledSequence,
    support: Vec<LabeledSequence>,
    support_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shot: Option<usize>,
}

impl FewShotDataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Episodes grouped by `support_id`, groups in order of first appearance.
    pub fn groups(&self) -> Vec<(&str, Vec<&Episode>)> {
        let mut order: Vec<(&str, Vec<&Episode>)> = Vec::new();
        let mut position: HashMap<&str, usize> = HashMap::new();
        for ep in &self.episodes {
            let idx = *position.entry(ep.support_id.as_str()).or_insert_with(|| {
                order.push((ep.support_id.as_str(), Vec::new()));
                order.len() - 1
            });
            order[idx].1.push(ep);
        }
        order
    }

    /// Sorted label set per domain, from every episode of that domain.
    pub fn domain_label_sets(&self) -> HashMap<String, LabelSet> {
        let mut by_domain: HashMap<&str, Vec<&Episode>> = HashMap::new();
        for ep in &self.episodes {
            by_domain.entry(ep.domain.as_str()).or_default().push(ep);
        }
        by_domain
            .into_iter()
            .map(|(d, eps)| {
                let set = LabelSet::from_tags(eps.iter().flat_map(|e| {
                    e.support
                        .pairs
                        .iter()
                        .chain(std::iter::once(&e.query))
                        .map(|s| s.tags())
                }));
                (d.to_string(), set)
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        for ep in &self.episodes {
            let record = EpisodeRecord {
                domain: ep.domain.clone(),
                query: ep.query.clone(),
                support: ep.support.pairs.clone(),
                support_id: ep.support_id.clone(),
                query_id: Some(ep.query_id.clone()),
                shot: Some(ep.support.shot),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io("<episodes>", e))?;
        }
        out.flush().map_err(|e| Error::io("<episodes>", e))?;
        Ok(())
    }

    pub fn write_jsonl_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(file)
    }

    /// Reads an episode file; gold sentences must be BIO-valid.
    pub fn read_jsonl<R: BufRead>(reader: R, source_name: &str) -> Result<Self> {
        let mut episodes = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source_name, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let format_err = |message: String| Error::Format {
                source_name: source_name.to_string(),
                line: lineno + 1,
                message,
            };
            let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
            for s in std::iter::once(&record.query).chain(&record.support) {
                let bad = s.bio_violations();
                if !bad.is_empty() {
                    return Err(format_err(format!("BIO violations at positions {bad:?}")));
                }
            }
            let query_id = record
                .query_id
                .unwrap_or_else(|| format!("{}/{}", record.support_id, lineno));
            episodes.push(Episode {
                domain: record.domain,
                query: record.query,
                support: SupportSet {
                    pairs: record.support,
                    shot: record.shot.unwrap_or(1),
                },
                support_id: record.support_id,
                query_id,
            });
        }
        let mut dataset = FewShotDataset {
            episodes,
            queries_per_support: 1,
        };
        dataset.queries_per_support = dataset.groups().iter().map(|(_, g)| g.len()).max().unwrap_or(1);
        Ok(dataset)
    }

    pub fn read_jsonl_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file), &path.display().to_string())
    }

    pub fn concat(parts: Vec<FewShotDataset>) -> FewShotDataset {
        let queries_per_support = parts.iter().map(|p| p.queries_per_support).max().unwrap_or(1);
        FewShotDataset {
            episodes: parts.into_iter().flat_map(|p| p.episodes).collect(),
            queries_per_support,
        }
    }
}

/// Leave-one-out split over domains: one target, one dev, the rest for training.
#[derive(Debug, Clone)]
pub struct CrossValidationSplit<'a> {
    pub train: Vec<&'a Domain>,
    pub dev: &'a Domain,
    pub test: &'a Domain,
}

pub fn split_domains<'a>(domains: &'a [Domain], target: &str, dev: &str) -> Result<CrossValidationSplit<'a>> {
    if target == dev {
        return Err(Error::Config(format!("target and dev domain are both `{target}`")));
    }
    let find = |name: &str| {
        domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain `{name}`")))
    };
    let test = find(target)?;
    let dev = find(dev)?;
    let train = domains
        .iter()
        .filter(|d| d.name != test.name && d.name != dev.name)
        .collect::<Vec<_>>();
    if train.is_empty() {
        return Err(Error::Config("no domains left for training".into()));
    }
    Ok(CrossValidationSplit { train, dev, test })
}

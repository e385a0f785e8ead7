//! Token representations for query/support pairs.
//!
//! Three sources are supported:
//!
//! * `static_lookup`: context-free vectors from a [`Lexicon`];
//! * `toy_attention`: lexicon vectors passed through one residual
//!   single-head self-attention layer ([`toy_pair_encode`]);
//! * `external_dump`: vectors precomputed by an offline encoder and stored
//!   in the dump format read by [`EmbeddingDump`].
//!
//! In pairwise mode the query is encoded once per support sentence,
//! concatenated as `[query ; separator ; support]`, so both sides depend on
//! the pairing. In independent mode every sentence is encoded alone and the
//! `N_S` query copies are identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::{Episode, LabeledSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    Pairwise,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    StaticLookup,
    ToyAttention,
    ExternalDump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub mode: EmbeddingMode,
    pub source: EmbeddingSource,
    /// Apply a trainable `dim x dim` linear map after the encoder.
    #[serde(default)]
    pub projection: bool,
    /// Toy attention: logit multiplier on token dot products.
    #[serde(default = "default_sharpness")]
    pub attention_sharpness: f64,
    /// Toy attention: weight of the attended values in the residual sum.
    #[serde(default = "default_mix")]
    pub attention_mix: f64,
}

fn default_sharpness() -> f64 {
    4.0
}

fn default_mix() -> f64 {
    1.0
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 32,
            mode: EmbeddingMode::Pairwise,
            source: EmbeddingSource::ToyAttention,
            projection: false,
            attention_sharpness: default_sharpness(),
            attention_mix: default_mix(),
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be at least 1".into()));
        }
        if self.source == EmbeddingSource::ExternalDump && self.mode == EmbeddingMode::Independent {
            return Err(Error::Config(
                "external_dump vectors are pair-wise; use mode = \"pairwise\"".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pairing token vectors of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbedding {
    /// One `n x h` array per support sentence.
    pub query: Vec<Array2<f64>>,
    /// One `|s| x h` array per support sentence, conditioned on the query.
    pub support: Vec<Array2<f64>>,
}

impl PairEmbedding {
    pub fn dim(&self) -> usize {
        self.query.first().map_or(0, |q| q.ncols())
    }

    pub fn query_len(&self) -> usize {
        self.query.first().map_or(0, |q| q.nrows())
    }

    /// Mean of the query's pairings, `n x h`.
    pub fn mean_query(&self) -> Array2<f64> {
        let mut acc = self.query[0].clone();
        for q in &self.query[1..] {
            acc += q;
        }
        acc / self.query.len() as f64
    }

    /// Right-multiplies every token vector by `weights` (`h x h`).
    pub fn project(&self, weights: &Array2<f64>) -> PairEmbedding {
        PairEmbedding {
            query: self.query.iter().map(|q| q.dot(weights)).collect(),
            support: self.support.iter().map(|s| s.dot(weights)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.query
            .iter()
            .chain(&self.support)
            .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Deterministic unit vector seeded by the SHA-256 of the lowercased token.
pub fn hash_embedding(token: &str, dim: usize) -> Array1<f64> {
    let digest = Sha256::digest(token.to_lowercase().as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v / norm
    } else {
        v
    }
}

/// Static token vectors with a hash fallback for unknown tokens.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    dim: usize,
    table: HashMap<String, Array1<f64>>,
}

impl Lexicon {
    pub fn new(dim: usize) -> Self {
        Lexicon {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Array1<f64>) {
        assert_eq!(vector.len(), self.dim, "lexicon vector has wrong dimension");
        self.table.insert(token.into(), vector);
    }

    pub fn get(&self, token: &str) -> Option<&Array1<f64>> {
        self.table.get(token)
    }

    pub fn vector(&self, token: &str) -> Array1<f64> {
        match self.table.get(token) {
            Some(v) => v.clone(),
            None => hash_embedding(token, self.dim),
        }
    }

    pub fn sentence(&self, tokens: &[String]) -> Array2<f64> {
        let mut out = Array2::zeros((tokens.len(), self.dim));
        for (i, tok) in tokens.iter().enumerate() {
            out.row_mut(i).assign(&self.vector(tok));
        }
        out
    }

    /// Reads `token v1 v2 ... vh` lines (GloVe text layout).
    pub fn load_text(path: &Path, dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lex = Lexicon::new(dim);
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
            let bad = |message: String| Error::Format {
                source_name: path.display().to_string(),
                line: lineno + 1,
                message,
            };
            let values = values.map_err(|e| bad(e.to_string()))?;
            if values.len() != dim {
                return Err(bad(format!("expected {dim} values, found {}", values.len())));
            }
            lex.insert(token, Array1::from(values));
        }
        Ok(lex)
    }
}

/// Parameters of the single-head residual attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub separator: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            query: Array2::zeros((dim, dim)),
            key: Array2::zeros((dim, dim)),
            value: Array2::zeros((dim, dim)),
            separator: hash_embedding("[SEP]", dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        AttentionParams {
            query: Array2::eye(dim),
            key: Array2::eye(dim),
            value: Array2::eye(dim),
            separator: hash_embedding("[SEP]", dim),
        }
    }

    /// Attention whose logits are `sharpness * (x_i . x_j)` and whose output
    /// adds `mix` times the attended input vectors.
    pub fn similarity(dim: usize, sharpness: f64, mix: f64) -> Self {
        let qk = (sharpness.max(0.0) * (dim as f64).sqrt()).sqrt();
        AttentionParams {
            query: Array2::eye(dim) * qk,
            key: Array2::eye(dim) * qk,
            value: Array2::eye(dim) * mix,
            separator: hash_embedding("[SEP]", dim),
        }
    }
}

/// Residual scaled dot-product self-attention over the rows of `x`.
/// Returns the outputs and the attention weights.
pub fn self_attention(x: ArrayView2<f64>, params: &AttentionParams) -> (Array2<f64>, Array2<f64>) {
    let h = x.ncols() as f64;
    let q = x.dot(&params.query);
    let k = x.dot(&params.key);
    let v = x.dot(&params.value);
    let mut weights = q.dot(&k.t()) / h.sqrt();
    for mut row in weights.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    let out = &x + &weights.dot(&v);
    (out, weights)
}

/// Encodes `[query ; separator ; support]` jointly and splits the result.
pub fn toy_pair_encode(
    query: ArrayView2<f64>,
    support: ArrayView2<f64>,
    params: &AttentionParams,
) -> (Array2<f64>, Array2<f64>) {
    let n = query.nrows();
    let sep = params.separator.view().insert_axis(Axis(0));
    let joint = concatenate(Axis(0), &[query, sep, support]).expect("matching widths");
    let (out, _) = self_attention(joint.view(), params);
    (out.slice(s![..n, ..]).to_owned(), out.slice(s![n + 1.., ..]).to_owned())
}

/// Produces pair embeddings for episodes from a configured source.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub config: EmbeddingConfig,
    pub lexicon: Lexicon,
    pub attention: AttentionParams,
    pub dump: Option<EmbeddingDump>,
}

impl Embedder {
    /// Lexicon-backed embedder; the attention layer uses the similarity
    /// initialization from the config.
    pub fn new(config: EmbeddingConfig, lexicon: Lexicon) -> Result<Self> {
        config.validate()?;
        if lexicon.dim() != config.dim {
            return Err(Error::Config(format!(
                "lexicon dim {} differs from embedding dim {}",
                lexicon.dim(),
                config.dim
            )));
        }
        let attention = AttentionParams::similarity(config.dim, config.attention_sharpness, config.attention_mix);
        Ok(Embedder {
            config,
            lexicon,
            attention,
            dump: None,
        })
    }

    pub fn with_dump(mut self, dump: EmbeddingDump) -> Result<Self> {
        if dump.manifest.dim != self.config.dim {
            return Err(Error::Config(format!(
                "dump dim {} differs from embedding dim {}",
                dump.manifest.dim, self.config.dim
            )));
        }
        self.dump = Some(dump);
        Ok(self)
    }

    fn encode_alone(&self, sentence: &LabeledSequence) -> Array2<f64> {
        let base = self.lexicon.sentence(sentence.tokens());
        match self.config.source {
            EmbeddingSource::ToyAttention => self_attention(base.view(), &self.attention).0,
            _ => base,
        }
    }

    /// Encoder output before any projection.
    pub fn encode(&self, episode: &Episode) -> Result<PairEmbedding> {
        let pairs = &episode.support.pairs;
        if self.config.source == EmbeddingSource::ExternalDump {
            let dump = self
                .dump
                .as_ref()
                .ok_or_else(|| Error::Config("external_dump source without a loaded dump".into()))?;
            return dump.load(episode);
        }
        match (self.config.mode, self.config.source) {
            (EmbeddingMode::Pairwise, EmbeddingSource::ToyAttention) => {
                let q = self.lexicon.sentence(episode.query.tokens());
                let (query, support) = pairs
                    .iter()
                    .map(|s| {
                        let sv = self.lexicon.sentence(s.tokens());
                        toy_pair_encode(q.view(), sv.view(), &self.attention)
                    })
                    .unzip();
                Ok(PairEmbedding { query, support })
            }
            _ => {
                let q = self.encode_alone(&episode.query);
                Ok(PairEmbedding {
                    query: vec![q; pairs.len()],
                    support: pairs.iter().map(|s| self.encode_alone(s)).collect(),
                })
            }
        }
    }

    /// Encoder output followed by the optional projection.
    pub fn embed_episode(&self, episode: &Episode, projection: Option<&Array2<f64>>) -> Result<PairEmbedding> {
        let raw = self.encode(episode)?;
        Ok(match projection {
            Some(w) => raw.project(w),
            None => raw,
        })
    }
}

pub const DUMP_INDEX_FILE: &str = "index.jsonl";
pub const DUMP_VECTORS_FILE: &str = "vectors.f32";
pub const DUMP_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub encoder: String,
    pub revision: String,
    pub dim: usize,
    pub episode_count: usize,
    /// Hex SHA-256 of the vector file.
    pub checksum: String,
    #[serde(default)]
    pub pair_convention: Option<String>,
}

/// One line of the dump index. Offsets are in bytes into the vector file;
/// the record holds `n_support * query_len * dim` query values followed by
/// `support_lens[i] * dim` values per support sentence, all little-endian f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpIndexEntry {
    pub query_id: String,
    pub support_id: String,
    pub offset: u64,
    pub dim: usize,
    pub n_support: usize,
    pub query_len: usize,
    pub support_lens: Vec<usize>,
}

impl DumpIndexEntry {
    fn num_values(&self) -> usize {
        self.dim * (self.n_support * self.query_len + self.support_lens.iter().sum::<usize>())
    }
}

/// An in-memory view of an embedding dump directory.
#[derive(Debug, Clone)]
pub struct EmbeddingDump {
    pub manifest: DumpManifest,
    entries: HashMap<String, DumpIndexEntry>,
    values: Vec<f32>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl EmbeddingDump {
    /// Loads and verifies a dump: checksum, record shapes, finiteness.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(DUMP_MANIFEST_FILE);
        let manifest: DumpManifest = serde_json::from_reader(BufReader::new(
            File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        ))?;

        let vec_path = dir.join(DUMP_VECTORS_FILE);
        let mut bytes = Vec::new();
        File::open(&vec_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&vec_path, e))?;
        let checksum = hex(&Sha256::digest(&bytes));
        if checksum != manifest.checksum {
            return Err(Error::Dump(format!(
                "checksum mismatch: manifest {}, file {}",
                manifest.checksum, checksum
            )));
        }
        if bytes.len() % 4 != 0 {
            return Err(Error::Dump("vector file length is not a multiple of 4".into()));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let index_path = dir.join(DUMP_INDEX_FILE);
        let index = File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut entries = HashMap::new();
        for line in BufReader::new(index).lines() {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: DumpIndexEntry = serde_json::from_str(&line)?;
            if entry.dim != manifest.dim {
                return Err(Error::Dump(format!(
                    "record `{}` has dim {}, manifest says {}",
                    entry.query_id, entry.dim, manifest.dim
                )));
            }
            if entry.support_lens.len() != entry.n_support || !entry.offset.is_multiple_of(4) {
                return Err(Error::Dump(format!("malformed header for `{}`", entry.query_id)));
            }
            let start = (entry.offset / 4) as usize;
            let end = start + entry.num_values();
            if end > values.len() {
                return Err(Error::Dump(format!(
                    "record `{}` runs past end of file",
                    entry.query_id
                )));
            }
            if values[start..end].iter().any(|v| !v.is_finite()) {
                return Err(Error::Dump(format!(
                    "record `{}` has non-finite values",
                    entry.query_id
                )));
            }
            entries.insert(entry.query_id.clone(), entry);
        }
        if entries.len() != manifest.episode_count {
            return Err(Error::Dump(format!(
                "manifest lists {} episodes, index has {}",
                manifest.episode_count,
                entries.len()
            )));
        }
        Ok(EmbeddingDump {
            manifest,
            entries,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, query_id: &str) -> Option<&DumpIndexEntry> {
        self.entries.get(query_id)
    }

    /// Vectors for `episode`, checked against its sentence lengths.
    pub fn load(&self, episode: &Episode) -> Result<PairEmbedding> {
        let entry = self
            .entries
            .get(&episode.query_id)
            .ok_or_else(|| Error::MissingDumpRecord(episode.query_id.clone()))?;
        let lens: Vec<usize> = episode.support.pairs.iter().map(|s| s.len()).collect();
        if entry.query_len != episode.query.len() || entry.support_lens != lens {
            return Err(Error::Dump(format!(
                "record `{}` shape does not match the episode",
                entry.query_id
            )));
        }
        let h = entry.dim;
        let mut cursor = (entry.offset / 4) as usize;
        let mut take = |rows: usize| {
            let slice = &self.values[cursor..cursor + rows * h];
            cursor += rows * h;
            Array2::from_shape_fn((rows, h), |(r, c)| f64::from(slice[r * h + c]))
        };
        let query = (0..entry.n_support).map(|_| take(entry.query_len)).collect();
        let support = entry.support_lens.iter().map(|&l| take(l)).collect();
        Ok(PairEmbedding { query, support })
    }
}

/// Writes the dump layout read by [`EmbeddingDump::open`].
pub struct DumpWriter {
    dir: PathBuf,
    encoder: String,
    revision: String,
    dim: usize,
    index: BufWriter<File>,
    vectors: BufWriter<File>,
    hasher: Sha256,
    offset: u64,
    count: usize,
}

impl DumpWriter {
    pub fn create(dir: &Path, encoder: &str, revision: &str, dim: usize) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        Ok(DumpWriter {
            dir: dir.to_path_buf(),
            encoder: encoder.to_string(),
            revision: revision.to_string(),
            dim,
            index: open(DUMP_INDEX_FILE)?,
            vectors: open(DUMP_VECTORS_FILE)?,
            hasher: Sha256::new(),
            offset: 0,
            count: 0,
        })
    }

    pub fn write(&mut self, query_id: &str, support_id: &str, emb: &PairEmbedding) -> Result<()> {
        let entry = DumpIndexEntry {
            query_id: query_id.to_string(),
            support_id: support_id.to_string(),
            offset: self.offset,
            dim: self.dim,
            n_support: emb.query.len(),
            query_len: emb.query_len(),
            support_lens: emb.support.iter().map(|s| s.nrows()).collect(),
        };
        for arr in emb.query.iter().chain(&emb.support) {
            if arr.ncols() != self.dim {
                return Err(Error::Dump(format!("vector width {} != dim {}", arr.ncols(), self.dim)));
            }
            for &v in arr.iter() {
                let b = (v as f32).to_le_bytes();
                self.hasher.update(b);
                self.vectors.write_all(&b).map_err(|e| Error::io(&self.dir, e))?;
            }
            self.offset += 4 * arr.len() as u64;
        }
        serde_json::to_writer(&mut self.index, &entry)?;
        self.index.write_all(b"\n").map_err(|e| Error::io(&self.dir, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DumpManifest> {
        self.index.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.vectors.flush().map_err(|e| Error::io(&self.dir, e))?;
        let manifest = DumpManifest {
            encoder: self.encoder,
            revision: self.revision,
            dim: self.dim,
            episode_count: self.count,
            checksum: hex(&self.hasher.finalize()),
            pair_convention: Some("[query ; separator ; support]".into()),
        };
        let path = self.dir.join(DUMP_MANIFEST_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(file, &manifest)?;
        Ok(manifest)
    }
}

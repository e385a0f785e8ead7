//! CoNLL-column ingestion: `token<TAB>tag` per line, blank line between sentences.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::episode::LabeledSequence;
use crate::error::{Error, Result};
use crate::tags::{LabelSet, Tag};

/// A named collection of gold sentences (one corpus file).
#[derive(Debug, Clone)]
pub struct Domain {
    pub name: String,
    pub sentences: Vec<LabeledSequence>,
}

impl Domain {
    /// Sorted labels occurring anywhere in the domain.
    pub fn label_set(&self) -> LabelSet {
        LabelSet::from_tags(self.sentences.iter().map(|s| s.tags()))
    }
}

/// Parses gold sentences. Sentences with BIO violations are rejected.
pub fn read_conll<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<LabeledSequence>> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let seq = LabeledSequence::new(std::mem::take(tokens), std::mem::take(tags))?;
        let violations = seq.bio_violations();
        if !violations.is_empty() {
            return Err(Error::BioViolation {
                source_name: source_name.to_string(),
                sentence: sentences.len(),
                positions: violations,
            });
        }
        sentences.push(seq);
        Ok(())
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        let (token, tag) = line
            .rsplit_once('\t')
            .or_else(|| line.trim().rsplit_once(char::is_whitespace))
            .ok_or_else(|| Error::Format {
                source_name: source_name.to_string(),
                line: lineno + 1,
                message: "expected `token<TAB>tag`".into(),
            })?;
        let tag: Tag = tag.trim().parse().map_err(|e: Error| Error::Format {
            source_name: source_name.to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        tokens.push(token.trim().to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags)?;
    Ok(sentences)
}

pub fn read_conll_file(path: &Path) -> Result<Vec<LabeledSequence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_conll(BufReader::new(file), &path.display().to_string())
}

/// Loads every `*.conll` / `*.txt` file of `dir` as a domain named after the file stem,
/// sorted by name.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<Domain>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if path.is_file() && matches!(ext, Some("conll" | "txt" | "bio")) {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            Ok(Domain {
                name,
                sentences: read_conll_file(&path)?,
            })
        })
        .collect()
}

pub fn write_conll<W: Write>(mut out: W, sentences: &[LabeledSequence]) -> std::io::Result<()> {
    for s in sentences {
        for (tok, tag) in s.tokens().iter().zip(s.tags()) {
            writeln!(out, "{tok}\t{tag}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Three-column `token gold predicted` lines, the input layout of conlleval.
pub fn write_conlleval<W: Write>(mut out: W, rows: &[(&LabeledSequence, &[Tag])]) -> std::io::Result<()> {
    for (gold, pred) in rows {
        for ((tok, g), p) in gold.tokens().iter().zip(gold.tags()).zip(pred.iter()) {
            writeln!(out, "{tok} {g} {p}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

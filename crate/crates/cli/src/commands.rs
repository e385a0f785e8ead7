use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use fewshot_crf::conll::{read_corpus_dir, write_conlleval};
use fewshot_crf::embedding::{Embedder, EmbeddingConfig, EmbeddingDump, EmbeddingSource, Lexicon};
use fewshot_crf::emission::Scorer;
use fewshot_crf::error::Error;
use fewshot_crf::eval::{evaluate, EvalOptions, EvalReport, F1Mode, Prediction};
use fewshot_crf::model::{prepare, Decoder, PreparedEpisode};
use fewshot_crf::sampler::{build_dataset_with, split_domains, FewShotDataset};
use fewshot_crf::trainer::{train, write_loss_csv, Checkpoint};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::CliError;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write(&mut out).and_then(|_| out.flush()).map_err(io_err(path))
}

/// Samples train/dev/test episode files from the corpus split.
pub fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus_dir = cfg
        .paths
        .corpus_dir
        .clone()
        .ok_or_else(|| CliError::Usage("paths.corpus_dir is not set".into()))?;
    cfg.validate(&[&corpus_dir])?;
    let domains = read_corpus_dir(&corpus_dir)?;
    let split = split_domains(&domains, &cfg.split.target, &cfg.split.dev)?;

    let dir = cfg.episodes_dir();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let groups = [split.train, vec![split.dev], vec![split.test]];
    for (name, group) in SPLITS.iter().zip(groups) {
        let parts = group
            .iter()
            .map(|d| {
                // One stream per domain keeps a domain's episodes independent of its neighbours.
                let stream = domains.iter().position(|x| x.name == d.name).unwrap_or(0) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.rng_seed);
                rng.set_stream(stream);
                build_dataset_with(
                    d,
                    &d.label_set(),
                    &cfg.sampler,
                    cfg.split.support_sets,
                    cfg.split.queries,
                    &mut rng,
                )
            })
            .collect::<fewshot_crf::error::Result<Vec<_>>>()?;
        let dataset = FewShotDataset::concat(parts);
        let path = cfg.episode_file(name);
        dataset.write_jsonl_file(&path)?;
        let names: Vec<&str> = group.iter().map(|d| d.name.as_str()).collect();
        info!(
            "{name}: {} episodes from {names:?} -> {}",
            dataset.len(),
            path.display()
        );
    }
    Ok(())
}

fn embedder(cfg: &RunConfig, embedding: &EmbeddingConfig) -> Result<Embedder, CliError> {
    let lexicon = match &cfg.paths.lexicon {
        Some(p) => Lexicon::load_text(p, embedding.dim)?,
        None => Lexicon::new(embedding.dim),
    };
    let embedder = Embedder::new(embedding.clone(), lexicon)?;
    if embedding.source == EmbeddingSource::ExternalDump {
        let dir = cfg.paths.dump.as_ref().expect("validated");
        return Ok(embedder.with_dump(EmbeddingDump::open(dir)?)?);
    }
    Ok(embedder)
}

fn load_split(cfg: &RunConfig, name: &str, embedder: &Embedder) -> Result<Vec<PreparedEpisode>, CliError> {
    let dataset = FewShotDataset::read_jsonl_file(&cfg.episode_file(name))?;
    Ok(prepare(&dataset, embedder)?)
}

pub struct TrainOverrides {
    pub no_transition: bool,
    pub scorer: Option<Scorer>,
    pub resume: Option<std::path::PathBuf>,
}

/// Trains on the train episodes with early stopping on dev; writes the
/// checkpoint after every epoch and the loss history at the end.
pub fn train_cmd(cfg: &RunConfig, overrides: &TrainOverrides) -> Result<Checkpoint, CliError> {
    let mut cfg = cfg.clone();
    if overrides.no_transition {
        cfg.train.use_dependency_transfer = false;
    }
    if let Some(s) = overrides.scorer {
        cfg.train.scorer = s;
    }
    let inputs = [cfg.episode_file("train"), cfg.episode_file("dev")];
    let mut needed: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    if let Some(r) = &overrides.resume {
        needed.push(r);
    }
    cfg.validate(&needed)?;

    let resume = overrides.resume.as_deref().map(Checkpoint::load).transpose()?;
    let embedding = resume
        .as_ref()
        .map_or_else(|| cfg.embedding.clone(), |c| c.embedding.clone());
    let embedder = embedder(&cfg, &embedding)?;
    let train_set = load_split(&cfg, "train", &embedder)?;
    let dev_set = load_split(&cfg, "dev", &embedder)?;
    info!("{} train / {} dev episodes", train_set.len(), dev_set.len());

    let ckpt_path = cfg.checkpoint();
    let ckpt = train(&train_set, &dev_set, &cfg.train, &embedding, resume, &mut |c| {
        if let Some(last) = c.history.last() {
            info!(
                "epoch {}: train {:.6} dev {:.6}",
                last.epoch, last.train_loss, last.dev_loss
            );
        }
        c.save(&ckpt_path)
    })?;
    ckpt.save(&ckpt_path)?;
    let csv = cfg.paths.output_dir.join("loss.csv");
    write_file(&csv, |out| write_loss_csv(out, &ckpt.history))?;
    info!("checkpoint -> {}", ckpt_path.display());
    Ok(ckpt)
}

pub struct EvalOverrides {
    pub decoder: Option<Decoder>,
    pub bigrams: bool,
    pub pooled: bool,
}

fn write_report(cfg: &RunConfig, report: &EvalReport, predictions: &[Prediction]) -> Result<(), CliError> {
    let dir = &cfg.paths.output_dir;
    let stem = format!("report_{}", report.decoder);
    let json = dir.join(format!("{stem}.json"));
    write_file(&json, |out| {
        serde_json::to_writer_pretty(&mut *out, report).map_err(std::io::Error::other)?;
        writeln!(out)
    })?;
    let table = dir.join(format!("{stem}.txt"));
    write_file(&table, |out| out.write_all(report.to_table().as_bytes()))?;
    if cfg.eval.conlleval_dump {
        let path = dir.join(format!("predictions_{}.conll", report.decoder));
        let rows: Vec<_> = predictions.iter().map(|p| (&p.gold, p.predicted.as_slice())).collect();
        write_file(&path, |out| write_conlleval(out, &rows))?;
    }
    info!(
        "{}: mean F1 {:.4} -> {}",
        report.decoder,
        report.mean_f1,
        json.display()
    );
    Ok(())
}

fn load_for_eval(cfg: &RunConfig) -> Result<(Checkpoint, Vec<PreparedEpisode>), CliError> {
    let ckpt_path = cfg.checkpoint();
    let test = cfg.episode_file("test");
    cfg.validate(&[&ckpt_path, &test])?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let embedder = embedder(cfg, &ckpt.embedding)?;
    let episodes = load_split(cfg, "test", &embedder)?;
    Ok((ckpt, episodes))
}

fn echo(cfg: &RunConfig, ckpt: &Checkpoint) -> serde_json::Value {
    serde_json::json!({
        "target": cfg.split.target,
        "dev": cfg.split.dev,
        "train": ckpt.train_config,
        "embedding": ckpt.embedding,
    })
}

/// Decodes the test episodes with one decoder and writes its report.
pub fn eval_cmd(cfg: &RunConfig, overrides: &EvalOverrides) -> Result<EvalReport, CliError> {
    let (ckpt, episodes) = load_for_eval(cfg)?;
    let decoder = overrides
        .decoder
        .or(cfg.eval.decoder)
        .unwrap_or_else(|| ckpt.model.default_decoder());
    let options = EvalOptions {
        mode: if overrides.pooled {
            F1Mode::Pooled
        } else {
            cfg.eval.mode
        },
        bigrams: overrides.bigrams || cfg.eval.bigrams,
    };
    let (report, predictions) = evaluate(&ckpt.model, &episodes, decoder, options, echo(cfg, &ckpt))?;
    write_report(cfg, &report, &predictions)?;
    println!("{}", report.to_table());
    Ok(report)
}

/// Every decoder with the bigram breakdown, plus a one-line-per-decoder summary.
pub fn analyze_cmd(cfg: &RunConfig, pooled: bool) -> Result<Vec<EvalReport>, CliError> {
    let (ckpt, episodes) = load_for_eval(cfg)?;
    let options = EvalOptions {
        mode: if pooled { F1Mode::Pooled } else { cfg.eval.mode },
        bigrams: true,
    };
    let mut reports = Vec::new();
    let mut summary = String::from("decoder\tmean_f1\n");
    for decoder in Decoder::ALL {
        let (report, predictions) = evaluate(&ckpt.model, &episodes, decoder, options, echo(cfg, &ckpt))?;
        write_report(cfg, &report, &predictions)?;
        summary.push_str(&format!("{decoder}\t{:.4}\n", report.mean_f1));
        reports.push(report);
    }
    let path = cfg.paths.output_dir.join("decoders.tsv");
    write_file(&path, |out| out.write_all(summary.as_bytes()))?;
    print!("{summary}");
    Ok(reports)
}

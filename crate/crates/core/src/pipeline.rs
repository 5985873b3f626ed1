//! Corpus loading, training runs and metrics files driven by a [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{
    build_vocabulary, encode_sets, generate_synthetic_corpus, load_dataset, split_sets, CandidateSet,
    DatasetFormat, RawCandidateSet, Vocabulary,
};
use crate::encoder::{load_pretrained, read_pretrained};
use crate::error::{CsnError, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::CsnModel;
use crate::seeding::{stream_rng, Stream};
use crate::train::{train, EpochRecord, TrainOutcome};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const VOCAB_FILE: &str = "vocab.txt";

/// File name of one split for a file-based format.
pub fn split_file(format: DatasetFormat, split: &str) -> String {
    match format {
        DatasetFormat::Persona => format!("{split}_self_original.txt"),
        DatasetFormat::Cmudog => format!("{split}.tsv"),
        DatasetFormat::Records => format!("{split}.jsonl"),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RawSplits {
    pub train: Vec<RawCandidateSet>,
    pub valid: Vec<RawCandidateSet>,
    pub test: Vec<RawCandidateSet>,
}

impl RawSplits {
    pub fn get(&self, split: &str) -> Option<&[RawCandidateSet]> {
        match split {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Generates a synthetic corpus and cuts it into consecutive splits.
pub fn synthetic_splits(config: &RunConfig) -> RawSplits {
    let seed = config.data.seed.unwrap_or(config.seed);
    let sets = generate_synthetic_corpus(seed, config.data.sets, &config.corpus);
    let (train, valid, test) = split_sets(&sets, config.data.valid_fraction, config.data.test_fraction);
    RawSplits { train, valid, test }
}

/// Reads the three split files of `format` from `dir`.
pub fn read_splits(dir: &Path, format: DatasetFormat, config: &RunConfig) -> Result<RawSplits> {
    let read = |split: &str| load_dataset(&dir.join(split_file(format, split)), format, &config.corpus);
    Ok(RawSplits {
        train: read("train")?,
        valid: read("valid")?,
        test: read("test")?,
    })
}

pub fn load_raw(config: &RunConfig) -> Result<RawSplits> {
    match (config.data.source.format(), &config.data.dir) {
        (None, _) => Ok(synthetic_splits(config)),
        (Some(format), Some(dir)) => read_splits(dir, format, config),
        (Some(_), None) => Err(CsnError::Config("data.dir is required for file-based sources".into())),
    }
}

/// Encoded splits with the vocabulary they were encoded with.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<CandidateSet>,
    pub valid: Vec<CandidateSet>,
    pub test: Vec<CandidateSet>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[CandidateSet]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(CsnError::Config(format!("unknown split {other:?} (expected train, valid or test)"))),
        }
    }
}

/// Uses `vocab.txt` from the data directory when present, else builds the
/// vocabulary from the training split.
pub fn load_corpus(config: &RunConfig) -> Result<Corpus> {
    let raw = load_raw(config)?;
    let stored = config
        .data
        .dir
        .as_ref()
        .filter(|_| config.data.source != DataSource::Synthetic)
        .map(|d| d.join(VOCAB_FILE))
        .filter(|p| p.exists());
    let vocab = match stored {
        Some(path) => Vocabulary::load(&path)?,
        None => build_vocabulary(&raw.train, config.corpus.min_count, config.corpus.max_vocab)?,
    };
    encode_corpus(&raw, vocab, config)
}

pub fn encode_corpus(raw: &RawSplits, vocab: Vocabulary, config: &RunConfig) -> Result<Corpus> {
    let enc = |sets: &[RawCandidateSet]| encode_sets(sets, &vocab, &config.corpus);
    let (train, valid, test) = (enc(&raw.train)?, enc(&raw.valid)?, enc(&raw.test)?);
    if train.is_empty() || valid.is_empty() {
        return Err(CsnError::EmptyCorpus);
    }
    Ok(Corpus {
        vocab,
        train,
        valid,
        test,
    })
}

/// Fresh model for `config`, with pretrained vectors copied in when listed.
pub fn build_model(config: &RunConfig, vocab: &Vocabulary) -> Result<CsnModel> {
    let mut model = CsnModel::new(config.model_config(vocab.size()), &mut stream_rng(config.seed, Stream::Init))?;
    if !config.model.pretrained.is_empty() {
        let tables = config
            .model
            .pretrained
            .iter()
            .map(|p| read_pretrained(p))
            .collect::<Result<Vec<_>>>()?;
        let table = model.encoder.embedding;
        load_pretrained(&mut model.store, table, vocab, &tables)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_5: f64,
    pub n_sets: usize,
    pub config_hash: String,
    pub seed: u64,
    pub ranks: Vec<usize>,
}

impl MetricsReport {
    pub fn new(split: &str, report: &EvalReport, config: &RunConfig) -> Self {
        Self {
            split: split.to_string(),
            r_at_1: report.r_at_1,
            r_at_2: report.r_at_2,
            r_at_5: report.r_at_5,
            n_sets: report.n_sets,
            config_hash: config.hash(),
            seed: config.seed,
            ranks: report.ranks.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("metrics serialize");
        fs::write(path, json + "\n").map_err(|e| CsnError::io(path, e))
    }

    pub fn summary(&self) -> String {
        format!(
            "{} R@1 {:.4} R@2 {:.4} R@5 {:.4} ({} sets)",
            self.split, self.r_at_1, self.r_at_2, self.r_at_5, self.n_sets
        )
    }
}

pub fn metrics_file(split: &str) -> String {
    format!("metrics_{split}.json")
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output_dir: PathBuf,
    pub outcome: TrainOutcome,
    pub valid: MetricsReport,
    pub test: Option<MetricsReport>,
    pub checkpoint: Checkpoint,
}

/// Trains on `corpus` and writes the checkpoint, epoch history and metrics
/// files into `output_dir`.
pub fn run_training(
    config: &RunConfig,
    corpus: &Corpus,
    output_dir: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunResult> {
    config.validate()?;
    fs::create_dir_all(output_dir).map_err(|e| CsnError::io(output_dir, e))?;
    let mut model = build_model(config, &corpus.vocab)?;
    let outcome = train(&mut model, &corpus.train, &corpus.valid, &config.train, config.seed, on_epoch)?;

    let history: String = outcome
        .history
        .iter()
        .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
        .collect();
    let history_path = output_dir.join(HISTORY_FILE);
    fs::write(&history_path, history).map_err(|e| CsnError::io(&history_path, e))?;

    // Metrics are computed on the weights as stored, so that evaluating the
    // saved checkpoint reproduces them.
    for id in model.store.ids().collect::<Vec<_>>() {
        for x in model.store.value_mut(id).data_mut() {
            *x = *x as f32 as f64;
        }
    }
    let checkpoint = Checkpoint {
        config: config.clone(),
        vocab: corpus.vocab.clone(),
        model,
    };
    checkpoint.save(&output_dir.join(CHECKPOINT_FILE))?;

    let valid = MetricsReport::new("valid", &evaluate(&checkpoint.model, &corpus.valid)?, config);
    valid.write(&output_dir.join(metrics_file("valid")))?;
    let test = if corpus.test.is_empty() {
        None
    } else {
        let report = MetricsReport::new("test", &evaluate(&checkpoint.model, &corpus.test)?, config);
        report.write(&output_dir.join(metrics_file("test")))?;
        Some(report)
    };
    Ok(RunResult {
        output_dir: output_dir.to_path_buf(),
        outcome,
        valid,
        test,
        checkpoint,
    })
}

//! Stage plans: a JSON file naming the datasets and configs of each stage,
//! executed in order with every stage checkpoint persisted.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use domainsim_core::datasets::{question_set, DatasetError, PairRecord, PairSource};
use domainsim_core::encoder::{Checkpoint, HeadPolicy, StageRecord};
use domainsim_core::tokenizer::{encode_single, EncodedPair, TokenizerError, Vocabulary};
use domainsim_core::training::{train_stage, EpochEvent, Objective, Stage, StageData, TrainConfig, TrainError};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::experiment::{encode_all, EncoderShape};
use crate::files::{self, FileError};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error("stage {stage}: dataset {path} does not exist")]
    MissingDataset { stage: String, path: PathBuf },
    #[error("stage {stage}: {source}")]
    Leakage { stage: String, source: DatasetError },
    #[error("stage {stage}: config: {source}")]
    Config { stage: String, source: serde_json::Error },
    #[error("resume: {path} does not continue this plan: {reason}")]
    ResumeMismatch { path: PathBuf, reason: String },
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    /// Pair JSONL for pair classification; for masked-token stages either
    /// plain text (one sentence per line) or pair JSONL (both sides used).
    pub train: PathBuf,
    pub validation: PathBuf,
    /// Final stage only: held-out pairs, never trained on but covered by
    /// the leakage gate.
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Overrides merged over the plan defaults.
    #[serde(default)]
    pub config: serde_json::Map<String, Value>,
    #[serde(default)]
    pub head_policy: HeadPolicy,
}

fn default_objective() -> Objective {
    Objective::PairClassification
}

fn default_min_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    /// Seed of the initial weights.
    pub seed: u64,
    pub encoder: EncoderShape,
    /// Existing vocabulary; when absent one is built from every stage's
    /// train and validation data.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default)]
    pub defaults: serde_json::Map<String, Value>,
    pub stages: Vec<StageSpec>,
}

/// A plan with paths resolved against its file's directory and every
/// stage config merged.
#[derive(Debug, Clone)]
pub struct Plan {
    pub file: PlanFile,
    pub stages: Vec<Stage>,
}

fn merge(defaults: &serde_json::Map<String, Value>, overrides: &serde_json::Map<String, Value>) -> Value {
    let mut m = defaults.clone();
    for (k, v) in overrides {
        m.insert(k.clone(), v.clone());
    }
    Value::Object(m)
}

impl Plan {
    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let file: PlanFile = files::read_json(path)?;
        Self::new(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn new(mut file: PlanFile, base: &Path) -> Result<Self, PlanError> {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(v) = file.vocab.as_mut() {
            resolve(v);
        }
        for s in &mut file.stages {
            resolve(&mut s.train);
            resolve(&mut s.validation);
            if let Some(t) = s.test.as_mut() {
                resolve(t);
            }
        }
        let Some(last) = file.stages.last() else {
            return Err(PlanError::Invalid("no stages".into()));
        };
        if last.objective != Objective::PairClassification {
            return Err(PlanError::Invalid(format!("final stage {} must be pair-classification", last.name)));
        }
        let mut names = BTreeSet::new();
        for (i, s) in file.stages.iter().enumerate() {
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(PlanError::Invalid(format!("stage {i}: bad name {:?}", s.name)));
            }
            if !names.insert(s.name.as_str()) {
                return Err(PlanError::Invalid(format!("duplicate stage name {}", s.name)));
            }
            if s.test.is_some() && i + 1 != file.stages.len() {
                return Err(PlanError::Invalid(format!("stage {}: only the final stage may name a test set", s.name)));
            }
        }
        let stages = file
            .stages
            .iter()
            .map(|s| {
                let config: TrainConfig =
                    serde_json::from_value(merge(&file.defaults, &s.config)).map_err(|source| PlanError::Config { stage: s.name.clone(), source })?;
                config.validate().map_err(|e| PlanError::Invalid(format!("stage {}: {e}", s.name)))?;
                Ok(Stage { name: s.name.clone(), objective: s.objective, config, head_policy: s.head_policy })
            })
            .collect::<Result<_, PlanError>>()?;
        Ok(Self { file, stages })
    }

    /// File name of stage `i`'s checkpoint.
    pub fn checkpoint_name(&self, i: usize) -> String {
        format!("{:02}-{}.ckpt", i + 1, self.stages[i].name)
    }
}

enum StageInput {
    Pairs(Vec<PairRecord>),
    Lines(Vec<String>),
}

impl StageInput {
    fn lines(&self) -> Vec<String> {
        match self {
            StageInput::Pairs(p) => files::corpus_lines(p),
            StageInput::Lines(l) => l.clone(),
        }
    }
}

fn read_input(spec: &StageSpec, path: &Path) -> Result<StageInput, PlanError> {
    if !path.exists() {
        return Err(PlanError::MissingDataset { stage: spec.name.clone(), path: path.to_path_buf() });
    }
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    Ok(match spec.objective {
        Objective::PairClassification => StageInput::Pairs(files::load_pairs_strict(path, PairSource::External)?),
        Objective::MaskedToken if jsonl => StageInput::Pairs(files::load_pairs_strict(path, PairSource::External)?),
        Objective::MaskedToken => StageInput::Lines(files::read_lines(path)?.into_iter().filter(|l| !l.trim().is_empty()).collect()),
    })
}

struct LoadedStage {
    train: StageInput,
    validation: StageInput,
}

fn encode_input(vocab: &Vocabulary, input: &StageInput, max_len: usize, objective: Objective) -> Result<Vec<EncodedPair>, TokenizerError> {
    match (input, objective) {
        (StageInput::Pairs(p), Objective::PairClassification) => encode_all(vocab, p, max_len),
        (i, _) => i.lines().iter().map(|l| encode_single(vocab, l, max_len)).collect(),
    }
}

/// Checks every stage dataset exists and that no intermediate data contains
/// a question of the final task. Runs before any training.
fn load_and_gate(plan: &Plan) -> Result<Vec<LoadedStage>, PlanError> {
    let loaded: Vec<LoadedStage> = plan
        .file
        .stages
        .iter()
        .map(|s| Ok(LoadedStage { train: read_input(s, &s.train)?, validation: read_input(s, &s.validation)? }))
        .collect::<Result<_, PlanError>>()?;
    let final_spec = plan.file.stages.last().expect("validated non-empty");
    let mut final_questions = BTreeSet::new();
    let last = loaded.last().expect("non-empty");
    for input in [&last.train, &last.validation] {
        if let StageInput::Pairs(p) = input {
            final_questions.extend(question_set(p));
        }
    }
    if let Some(t) = &final_spec.test {
        let test = read_input(final_spec, t)?;
        final_questions.extend(test.lines());
    }
    for (spec, stage) in plan.file.stages.iter().zip(&loaded).take(loaded.len() - 1) {
        let mut leaked: Vec<String> = Vec::new();
        for input in [&stage.train, &stage.validation] {
            leaked.extend(input.lines().into_iter().filter(|l| final_questions.contains(l)));
        }
        if let Some(example) = leaked.first() {
            let count = leaked.iter().collect::<BTreeSet<_>>().len();
            return Err(PlanError::Leakage { stage: spec.name.clone(), source: DatasetError::Leakage { count, example: example.clone() } });
        }
    }
    Ok(loaded)
}

/// Compares a stored record with what the plan would record now.
fn matches_stage(rec: &StageRecord, stage: &Stage, config_fp: u64, data_fp: u64) -> Result<(), String> {
    if rec.name != stage.name {
        return Err(format!("stage name {} != {}", rec.name, stage.name));
    }
    if rec.objective != stage.objective.as_str() {
        return Err(format!("objective {} != {}", rec.objective, stage.objective.as_str()));
    }
    if rec.data_fingerprint != data_fp {
        return Err("dataset changed".into());
    }
    if rec.config_fingerprint != config_fp {
        return Err("train or encoder config changed".into());
    }
    Ok(())
}

/// Runs `plan`, writing `NN-name.ckpt` per stage, `vocab.txt` and
/// `events.jsonl` into `out_dir`. With `resume`, stages whose checkpoint
/// exists are verified against the plan and skipped.
pub fn run_plan(plan: &Plan, out_dir: &Path, resume: bool, on_event: &mut dyn FnMut(&EpochEvent)) -> Result<Vec<Checkpoint>, PlanError> {
    let loaded = load_and_gate(plan)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| FileError::Io { path: p, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let vocab_path = out_dir.join("vocab.txt");
    let vocab = match &plan.file.vocab {
        Some(p) => files::load_vocab(p)?,
        None => {
            let mut lines = Vec::new();
            for s in &loaded {
                lines.extend(s.train.lines());
                lines.extend(s.validation.lines());
            }
            Vocabulary::build(&lines, plan.file.min_count)?
        }
    };
    if resume && vocab_path.exists() {
        let old = files::load_vocab(&vocab_path)?;
        if old.fingerprint() != vocab.fingerprint() {
            return Err(PlanError::ResumeMismatch { path: vocab_path, reason: "vocabulary changed".into() });
        }
    } else {
        files::save_vocab(&vocab_path, &vocab)?;
    }

    let events_path = out_dir.join("events.jsonl");
    let mut events = OpenOptions::new().create(true).append(true).open(&events_path).map_err(io(&events_path))?;
    if !resume {
        events.set_len(0).map_err(io(&events_path))?;
    }

    let config = plan.file.encoder.with_vocab(vocab.size());
    let mut current = Checkpoint::init(config, plan.file.seed, vocab.fingerprint()).map_err(|e| PlanError::Invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(plan.stages.len());
    for (i, (stage, data)) in plan.stages.iter().zip(&loaded).enumerate() {
        let max_len = stage.config.max_len;
        let train = encode_input(&vocab, &data.train, max_len, stage.objective)?;
        let validation = encode_input(&vocab, &data.validation, max_len, stage.objective)?;
        let stage_data = StageData { train: &train, validation: &validation };
        let path = out_dir.join(plan.checkpoint_name(i));
        if resume && path.exists() {
            let ck = checkpoint::load(&path)?;
            let mismatch = |reason: String| PlanError::ResumeMismatch { path: path.clone(), reason };
            if ck.provenance.len() != i + 1 || ck.provenance[..i] != current.provenance[..] {
                return Err(mismatch("stage history differs".into()));
            }
            if ck.vocab_fingerprint != vocab.fingerprint() || ck.config != current.config {
                return Err(mismatch("vocabulary or encoder config differs".into()));
            }
            matches_stage(&ck.provenance[i], stage, stage.config_fingerprint(&current.config), stage_data.fingerprint()).map_err(mismatch)?;
            info!("stage {}: resumed from {}", stage.name, path.display());
            current = ck;
        } else {
            info!("stage {}: {} train, {} validation", stage.name, train.len(), validation.len());
            let mut write_err = None;
            current = train_stage(current, stage, &stage_data, &mut |e| {
                on_event(e);
                let line = serde_json::to_string(e).expect("event serializes");
                if let Err(err) = writeln!(events, "{line}") {
                    write_err.get_or_insert(err);
                }
            })?;
            if let Some(source) = write_err {
                return Err(FileError::Io { path: events_path, source }.into());
            }
            checkpoint::save(&path, &current)?;
        }
        out.push(current.clone());
    }
    Ok(out)
}

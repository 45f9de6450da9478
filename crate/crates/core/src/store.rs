//! Dataset store: persists dialogues, derives the three supervision formats
//! (code pair, dialogue, QS pair), and implements the splitting strategies.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceLanguage;
use crate::pipeline::Stage;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("schema version {found} on line {line}, expected {expected}")]
    VersionError { line: usize, found: u32, expected: u32 },
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("accepted dialogue {0} is missing final programs")]
    CorruptDialogue(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub question: String,
    pub solution: String,
}

/// One full pipeline dialogue: an ordered list of (question, solution) turns. Serialized with
/// a chat-SFT style "conversations" array of human/assistant messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub origin_index: u64,
    pub direction: (SourceLanguage, SourceLanguage),
    pub turns: Vec<DialogueTurn>,
    pub accepted: bool,
    pub rounds_used: BTreeMap<Stage, u32>,
    pub failure_stage: Option<Stage>,
    /// Final verified (source, target) programs; accepted dialogues only.
    pub final_source: Option<String>,
    pub final_target: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversationMessage {
    from: String,
    value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DialogueWire {
    schema_version: u32,
    id: String,
    origin_index: u64,
    source_language: SourceLanguage,
    target_language: SourceLanguage,
    accepted: bool,
    rounds_used: BTreeMap<Stage, u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure_stage: Option<Stage>,
    conversations: Vec<ConversationMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_target: Option<String>,
}

impl Serialize for Dialogue {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut conversations = Vec::with_capacity(self.turns.len() * 2);
        for t in &self.turns {
            conversations.push(ConversationMessage { from: "human".into(), value: t.question.clone() });
            conversations.push(ConversationMessage { from: "assistant".into(), value: t.solution.clone() });
        }
        DialogueWire {
            schema_version: SCHEMA_VERSION,
            id: self.id.clone(),
            origin_index: self.origin_index,
            source_language: self.direction.0,
            target_language: self.direction.1,
            accepted: self.accepted,
            rounds_used: self.rounds_used.clone(),
            failure_stage: self.failure_stage,
            conversations,
            final_source: self.final_source.clone(),
            final_target: self.final_target.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Dialogue {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = DialogueWire::deserialize(deserializer)?;
        if wire.conversations.len() % 2 != 0 {
            return Err(serde::de::Error::custom("conversations must pair human/assistant messages"));
        }
        let turns = wire
            .conversations
            .chunks(2)
            .map(|pair| DialogueTurn { question: pair[0].value.clone(), solution: pair[1].value.clone() })
            .collect();
        Ok(Dialogue {
            id: wire.id,
            origin_index: wire.origin_index,
            direction: (wire.source_language, wire.target_language),
            turns,
            accepted: wire.accepted,
            rounds_used: wire.rounds_used,
            failure_stage: wire.failure_stage,
            final_source: wire.final_source,
            final_target: wire.final_target,
        })
    }
}

/// The verified (source, target) pair distilled from an accepted dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodePair {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub source_code: String,
    pub target_code: String,
    pub dialogue_id: String,
}

/// One (question, solution) turn plus its cumulative prior context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QSPair {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub context: Vec<DialogueTurn>,
    pub question: String,
    pub solution: String,
    pub dialogue_id: String,
    /// 1-based turn index within the dialogue.
    pub turn_index: usize,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

pub fn to_code_pair(d: &Dialogue) -> Result<Option<CodePair>, StoreError> {
    if !d.accepted {
        return Ok(None);
    }
    match (&d.final_source, &d.final_target) {
        (Some(src), Some(tgt)) => Ok(Some(CodePair {
            schema_version: SCHEMA_VERSION,
            source_code: src.clone(),
            target_code: tgt.clone(),
            dialogue_id: d.id.clone(),
        })),
        _ => Err(StoreError::CorruptDialogue(d.id.clone())),
    }
}

/// Decomposes a T-turn dialogue into T cumulative QS pairs; pair i carries
/// the first i−1 turns as context.
pub fn explode_qs(d: &Dialogue) -> Vec<QSPair> {
    d.turns
        .iter()
        .enumerate()
        .map(|(i, turn)| QSPair {
            schema_version: SCHEMA_VERSION,
            context: d.turns[..i].to_vec(),
            question: turn.question.clone(),
            solution: turn.solution.clone(),
            dialogue_id: d.id.clone(),
            turn_index: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Seeded shuffle, then whole-dialogue ratio partition.
    DialogueLevel { ratios: Vec<(String, f64)>, seed: u64 },
    /// Explode to QS pairs first, then seeded shuffle of pairs across
    /// dialogues. Sibling-pair leakage across splits is possible and
    /// intentional.
    QsPairLevel { ratios: Vec<(String, f64)>, seed: u64 },
    /// Partition by origin index over half-open ranges.
    IndexRange { ranges: Vec<(String, u64, u64)> },
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), StoreError> {
        match self {
            SplitSpec::DialogueLevel { ratios, .. } | SplitSpec::QsPairLevel { ratios, .. } => {
                let sum: f64 = ratios.iter().map(|(_, r)| r).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(StoreError::InvalidSplit(format!("ratios sum to {sum}, expected 1")));
                }
                if ratios.iter().any(|(_, r)| *r < 0.0) {
                    return Err(StoreError::InvalidSplit("negative ratio".into()));
                }
            }
            SplitSpec::IndexRange { ranges } => {
                for (name, start, end) in ranges {
                    if start > end {
                        return Err(StoreError::InvalidSplit(format!("range {name} inverted: [{start}, {end})")));
                    }
                }
                for (i, a) in ranges.iter().enumerate() {
                    for b in &ranges[i + 1..] {
                        if a.1 < b.2 && b.1 < a.2 {
                            return Err(StoreError::InvalidSplit(format!("ranges {} and {} overlap", a.0, b.0)));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum SplitOutput {
    Dialogues(BTreeMap<String, Vec<Dialogue>>),
    QsPairs(BTreeMap<String, Vec<QSPair>>),
}

fn ratio_partition<T>(mut items: Vec<T>, ratios: &[(String, f64)], seed: u64) -> BTreeMap<String, Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let total = items.len();
    let mut out = BTreeMap::new();
    let mut taken = 0usize;
    for (i, (name, ratio)) in ratios.iter().enumerate() {
        let count = if i + 1 == ratios.len() {
            total - taken
        } else {
            ((total as f64) * ratio).round() as usize
        }
        .min(total - taken);
        let rest = items.split_off(count);
        out.insert(name.clone(), items);
        items = rest;
        taken += count;
    }
    out
}

pub fn split_dialogues(dialogues: &[Dialogue], spec: &SplitSpec) -> Result<SplitOutput, StoreError> {
    spec.validate()?;
    match spec {
        SplitSpec::DialogueLevel { ratios, seed } => {
            Ok(SplitOutput::Dialogues(ratio_partition(dialogues.to_vec(), ratios, *seed)))
        }
        SplitSpec::QsPairLevel { ratios, seed } => {
            let pairs: Vec<QSPair> = dialogues.iter().flat_map(explode_qs).collect();
            Ok(SplitOutput::QsPairs(ratio_partition(pairs, ratios, *seed)))
        }
        SplitSpec::IndexRange { ranges } => {
            let mut out = BTreeMap::new();
            for (name, start, end) in ranges {
                let chunk: Vec<Dialogue> = dialogues
                    .iter()
                    .filter(|d| d.origin_index >= *start && d.origin_index < *end)
                    .cloned()
                    .collect();
                out.insert(name.clone(), chunk);
            }
            Ok(SplitOutput::Dialogues(out))
        }
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

/// Writes records as line-delimited JSON, one per line.
pub fn write_store<T: Serialize>(records: &[T], path: &Path) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).map_err(|e| StoreError::ParseError { line: 0, message: e.to_string() })?);
        out.push('\n');
    }
    // atomic finalize: write to a temp sibling then rename
    let tmp = path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_store<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let probe: VersionProbe = serde_json::from_str(&line)
            .map_err(|e| StoreError::ParseError { line: lineno, message: e.to_string() })?;
        if probe.schema_version != SCHEMA_VERSION {
            return Err(StoreError::VersionError { line: lineno, found: probe.schema_version, expected: SCHEMA_VERSION });
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| StoreError::ParseError { line: lineno, message: e.to_string() })?,
        );
    }
    Ok(records)
}

/// Append-only JSONL writer used by the single-writer results channel.
pub struct StoreWriter {
    file: File,
    pub path: PathBuf,
}

impl StoreWriter {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(StoreWriter { file, path: path.to_path_buf() })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), StoreError> {
        let line = serde_json::to_string(record).map_err(|e| StoreError::ParseError { line: 0, message: e.to_string() })?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Standard file names within a run directory.
pub mod files {
    pub const CODE_PAIRS: &str = "code_pairs.jsonl";
    pub const DIALOGUES: &str = "dialogues.jsonl";
    pub const QS_PAIRS: &str = "qs_pairs.jsonl";
    pub const REJECTED: &str = "dialogues.rejected.jsonl";
    pub const MANIFEST: &str = "manifest.json";
}

/// Derives and writes the three supervision formats (plus the rejected
/// population) from a dialogue list.
pub fn export_all(dialogues: &[Dialogue], dir: &Path) -> Result<(usize, usize, usize, usize), StoreError> {
    let accepted: Vec<&Dialogue> = dialogues.iter().filter(|d| d.accepted).collect();
    let rejected: Vec<Dialogue> = dialogues.iter().filter(|d| !d.accepted).cloned().collect();
    let mut pairs = Vec::new();
    for d in &accepted {
        if let Some(p) = to_code_pair(d)? {
            pairs.push(p);
        }
    }
    let qs: Vec<QSPair> = accepted.iter().flat_map(|d| explode_qs(d)).collect();
    let accepted_owned: Vec<Dialogue> = accepted.into_iter().cloned().collect();
    write_store(&pairs, &dir.join(files::CODE_PAIRS))?;
    write_store(&accepted_owned, &dir.join(files::DIALOGUES))?;
    write_store(&qs, &dir.join(files::QS_PAIRS))?;
    write_store(&rejected, &dir.join(files::REJECTED))?;
    Ok((pairs.len(), accepted_owned.len(), qs.len(), rejected.len()))
}

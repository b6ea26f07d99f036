//! Versioned JSON files for item banks, learner states and response logs,
//! and CSV output of per-step experiment records.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{GenerationConstraints, MisconceptionRule};
use crate::model::{Item, LearnerState, Observation};
use crate::sim::StepRecord;

pub const FORMAT_VERSION: u32 = 1;

/// Column order of the per-step CSV output.
pub const CSV_HEADER: [&str; 7] = ["replication", "step", "arm", "item", "y", "pi", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemBankFile {
    pub version: u32,
    pub topics: Vec<String>,
    pub items: Vec<Item>,
    #[serde(default)]
    pub rules: Vec<MisconceptionRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<GenerationConstraints>,
}

impl ItemBankFile {
    pub fn new(topics: Vec<String>, items: Vec<Item>) -> Self {
        ItemBankFile {
            version: FORMAT_VERSION,
            topics,
            items,
            rules: Vec::new(),
            constraints: None,
        }
    }

    /// Unique ids, concept indices in range, one embedding width per kind.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut stem_dim = None;
        let mut distractor_dim = None;
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return Err(Error::Data(format!("duplicate item id {}", item.id)));
            }
            item.validate(self.topics.len())
                .map_err(|e| Error::Data(format!("item {}: {e}", item.id)))?;
            if !item.stem_embedding.is_empty() {
                let dim = *stem_dim.get_or_insert(item.stem_embedding.len());
                if dim != item.stem_embedding.len() {
                    return Err(Error::Data(format!(
                        "item {}: stem embedding has {} entries, bank uses {dim}",
                        item.id,
                        item.stem_embedding.len()
                    )));
                }
            }
            for d in &item.distractors {
                let dim = *distractor_dim.get_or_insert(d.embedding.len());
                if dim != d.embedding.len() {
                    return Err(Error::Data(format!(
                        "item {}: distractor embedding has {} entries, bank uses {dim}",
                        item.id,
                        d.embedding.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn item(&self, id: &str) -> Result<&Item> {
        self.items
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Data(format!("unknown item id {id}")))
    }

    pub fn rule(&self, name: &str) -> Result<&MisconceptionRule> {
        self.rules
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Data(format!("unknown rule {name}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerStateFile {
    pub version: u32,
    pub learner: LearnerState,
}

impl LearnerStateFile {
    pub fn new(learner: LearnerState) -> Self {
        LearnerStateFile {
            version: FORMAT_VERSION,
            learner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedResponse {
    pub learner: String,
    pub item_id: String,
    pub obs: Observation,
    #[serde(default)]
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLogFile {
    pub version: u32,
    pub responses: Vec<LoggedResponse>,
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Data(format!(
        "{}: line {} column {}: {e}",
        path.display(),
        e.line(),
        e.column()
    ))
}

/// Reads a versioned JSON document. The version field is checked before the
/// body is decoded so an old or future file is reported as such.
pub fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(Error::Data(format!(
                "{}: missing integer field `version`",
                path.display()
            )))
        }
    }
    serde_json::from_str(&text).map_err(|e| parse_error(path, e))
}

pub fn load_bank(path: &Path) -> Result<ItemBankFile> {
    let bank: ItemBankFile = load_versioned(path)?;
    bank.validate()?;
    Ok(bank)
}

pub fn load_state(path: &Path) -> Result<LearnerStateFile> {
    let file: LearnerStateFile = load_versioned(path)?;
    file.learner
        .validate()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(file)
}

pub fn load_log(path: &Path) -> Result<ResponseLogFile> {
    load_versioned(path)
}

/// Pretty JSON with a trailing newline. Field order follows the type
/// definitions and maps are ordered, so equal values give equal bytes.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_state(path: &Path, state: &LearnerStateFile) -> Result<()> {
    save_json(path, state)
}

pub fn write_records<W: Write>(out: W, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in records {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

pub fn records_to_csv(records: &[StepRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

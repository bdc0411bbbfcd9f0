//! Dataset directories: every `.json` file holds `{"type": ..., "instances": [...]}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::json::{blank_trailing_commas, byte_offset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    TextOnly,
    Text2Text,
}

impl DatasetKind {
    pub fn type_name(self) -> &'static str {
        match self {
            DatasetKind::TextOnly => "text_only",
            DatasetKind::Text2Text => "text2text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstance {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Text2TextInstance {
    pub input: String,
    pub output: String,
}

/// One human-preference comparison for reward modeling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dataset {
    TextOnly(Vec<TextInstance>),
    Text2Text(Vec<Text2TextInstance>),
}

impl Dataset {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Dataset::TextOnly(_) => DatasetKind::TextOnly,
            Dataset::Text2Text(_) => DatasetKind::Text2Text,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::TextOnly(v) => v.len(),
            Dataset::Text2Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_only(texts: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Dataset::TextOnly(texts.into_iter().map(|t| TextInstance { text: t.into() }).collect())
    }

    pub fn text2text<I, O>(pairs: impl IntoIterator<Item = (I, O)>) -> Self
    where
        I: Into<String>,
        O: Into<String>,
    {
        Dataset::Text2Text(
            pairs.into_iter().map(|(i, o)| Text2TextInstance { input: i.into(), output: o.into() }).collect(),
        )
    }

    pub fn texts(&self) -> Option<Vec<&str>> {
        match self {
            Dataset::TextOnly(v) => Some(v.iter().map(|i| i.text.as_str()).collect()),
            Dataset::Text2Text(_) => None,
        }
    }

    pub fn pairs(&self) -> Option<&[Text2TextInstance]> {
        match self {
            Dataset::Text2Text(v) => Some(v),
            Dataset::TextOnly(_) => None,
        }
    }

    pub fn to_json(&self) -> String {
        let instances = match self {
            Dataset::TextOnly(v) => serde_json::to_value(v),
            Dataset::Text2Text(v) => serde_json::to_value(v),
        }
        .expect("instances serialize");
        let doc = serde_json::json!({ "type": self.kind().type_name(), "instances": instances });
        serde_json::to_string_pretty(&doc).expect("dataset serializes")
    }

    /// Writes the dataset as a single file inside `dir`.
    pub fn save(&self, dir: &Path, file_name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(file_name);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Parsed content of one file, before kinds are reconciled across a directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FileRecords {
    TextOnly(Vec<TextInstance>),
    Text2Text(Vec<Text2TextInstance>),
    Preference(Vec<PreferencePair>),
}

impl FileRecords {
    pub fn type_name(&self) -> &'static str {
        match self {
            FileRecords::TextOnly(_) => "text_only",
            FileRecords::Text2Text(_) => "text2text",
            FileRecords::Preference(_) => "preference",
        }
    }

    fn len(&self) -> usize {
        match self {
            FileRecords::TextOnly(v) => v.len(),
            FileRecords::Text2Text(v) => v.len(),
            FileRecords::Preference(v) => v.len(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    #[serde(rename = "type")]
    kind: String,
    instances: Vec<Map<String, Value>>,
}

fn take_fields<const N: usize>(
    file: &str,
    index: usize,
    mut inst: Map<String, Value>,
    keys: [&str; N],
) -> Result<[String; N]> {
    let mut found: Vec<&String> = inst.keys().collect();
    found.sort();
    let mut expected = keys.to_vec();
    expected.sort();
    if found.len() != N || found.iter().zip(&expected).any(|(a, b)| a.as_str() != *b) {
        return Err(Error::format(file, format!("instance {index}: expected keys {expected:?}, found {found:?}")));
    }
    let mut out: [String; N] = std::array::from_fn(|_| String::new());
    for (slot, key) in out.iter_mut().zip(keys) {
        match inst.remove(key) {
            Some(Value::String(s)) => *slot = s,
            _ => return Err(Error::format(file, format!("instance {index}: `{key}` must be a string"))),
        }
    }
    Ok(out)
}

/// Parses one dataset file. `file` names the source in error messages.
pub fn parse_file(file: &str, text: &str) -> Result<FileRecords> {
    let clean = blank_trailing_commas(text);
    let raw: RawFile = serde_json::from_str(&clean).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        Error::format(file, format!("{e} (byte offset {offset})"))
    })?;
    let records = match raw.kind.as_str() {
        "text_only" => FileRecords::TextOnly(
            raw.instances
                .into_iter()
                .enumerate()
                .map(|(i, inst)| take_fields(file, i, inst, ["text"]).map(|[text]| TextInstance { text }))
                .collect::<Result<_>>()?,
        ),
        "text2text" => FileRecords::Text2Text(
            raw.instances
                .into_iter()
                .enumerate()
                .map(|(i, inst)| {
                    take_fields(file, i, inst, ["input", "output"])
                        .map(|[input, output]| Text2TextInstance { input, output })
                })
                .collect::<Result<_>>()?,
        ),
        "preference" => FileRecords::Preference(
            raw.instances
                .into_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let [prompt, chosen, rejected] = take_fields(file, i, inst, ["prompt", "chosen", "rejected"])?;
                    if chosen == rejected {
                        return Err(Error::format(
                            file,
                            format!("instance {i}: `chosen` and `rejected` are identical"),
                        ));
                    }
                    Ok(PreferencePair { prompt, chosen, rejected })
                })
                .collect::<Result<_>>()?,
        ),
        other => {
            return Err(Error::format(
                file,
                format!(
                    "unsupported dataset type `{other}` (supported: text_only, text2text; \
                     preference for reward data)"
                ),
            ))
        }
    };
    Ok(records)
}

/// Parses a single-file dataset (`text_only` or `text2text`).
pub fn parse_dataset(file: &str, text: &str) -> Result<Dataset> {
    let records = parse_file(file, text)?;
    let ds = match records {
        FileRecords::TextOnly(v) => Dataset::TextOnly(v),
        FileRecords::Text2Text(v) => Dataset::Text2Text(v),
        FileRecords::Preference(_) => {
            return Err(Error::format(file, "`preference` files are reward data, not a dataset"))
        }
    };
    if ds.is_empty() {
        return Err(Error::format(file, "dataset has no instances"));
    }
    Ok(ds)
}

/// Reads every `.json` file of `dir` in lexicographic filename order.
fn load_dir(dir: &Path) -> Result<Vec<(String, FileRecords)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|ext| ext == "json") {
            paths.push(path);
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(Error::format(dir.display().to_string(), "directory contains no .json files"));
    }
    let mut files: Vec<(String, FileRecords)> = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path.file_name().expect("file").to_string_lossy().into_owned();
        let text = crate::error::read_text(&path)?;
        let records = parse_file(&name, &text)?;
        if let Some((first, first_records)) = files.first() {
            if first_records.type_name() != records.type_name() {
                return Err(Error::format(
                    name.clone(),
                    format!(
                        "mixed dataset types: `{first}` is {} but `{name}` is {}",
                        first_records.type_name(),
                        records.type_name()
                    ),
                ));
            }
        }
        files.push((name, records));
    }
    if files.iter().all(|(_, r)| r.len() == 0) {
        return Err(Error::format(dir.display().to_string(), "dataset has no instances"));
    }
    Ok(files)
}

/// Loads a `text_only` or `text2text` dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let files = load_dir(dir)?;
    let mut out = match &files[0].1 {
        FileRecords::TextOnly(_) => Dataset::TextOnly(Vec::new()),
        FileRecords::Text2Text(_) => Dataset::Text2Text(Vec::new()),
        FileRecords::Preference(_) => {
            return Err(Error::format(files[0].0.clone(), "`preference` files are reward data, not a dataset"))
        }
    };
    for (_, records) in files {
        match (&mut out, records) {
            (Dataset::TextOnly(acc), FileRecords::TextOnly(v)) => acc.extend(v),
            (Dataset::Text2Text(acc), FileRecords::Text2Text(v)) => acc.extend(v),
            _ => unreachable!("kinds were reconciled by load_dir"),
        }
    }
    Ok(out)
}

/// Loads a directory of `preference` files.
pub fn load_preferences(dir: &Path) -> Result<Vec<PreferencePair>> {
    let files = load_dir(dir)?;
    let mut out = Vec::new();
    for (name, records) in files {
        match records {
            FileRecords::Preference(v) => out.extend(v),
            other => {
                return Err(Error::format(name, format!("expected type `preference`, found `{}`", other.type_name())))
            }
        }
    }
    Ok(out)
}

pub fn preferences_to_json(pairs: &[PreferencePair]) -> String {
    let doc = serde_json::json!({ "type": "preference", "instances": pairs });
    serde_json::to_string_pretty(&doc).expect("preferences serialize")
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Document, Vocabulary, DEFAULT_MAX_SEQ_LEN};
use crate::{Error, Result};

/// Column layout of a labelled-text CSV. Defaults match AG News
/// (`label,title,description`, labels 1..=4, no header row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub label_column: usize,
    #[serde(default = "default_text_columns")]
    pub text_columns: Vec<usize>,
    #[serde(default = "default_true")]
    pub one_based_labels: bool,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

fn default_text_columns() -> Vec<usize> {
    vec![1, 2]
}
fn default_true() -> bool {
    true
}
fn default_num_classes() -> usize {
    4
}
fn default_max_vocab() -> usize {
    30_000
}
fn default_max_seq_len() -> usize {
    DEFAULT_MAX_SEQ_LEN
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: 0,
            text_columns: default_text_columns(),
            one_based_labels: true,
            has_header: false,
            num_classes: default_num_classes(),
            max_vocab: default_max_vocab(),
            max_seq_len: default_max_seq_len(),
        }
    }
}

impl CsvSchema {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.text_columns.is_empty() {
            return Err(Error::config(format!("{path}.text_columns"), "must be nonempty"));
        }
        if self.num_classes == 0 {
            return Err(Error::config(format!("{path}.num_classes"), "must be >= 1"));
        }
        if self.max_vocab == 0 {
            return Err(Error::config(format!("{path}.max_vocab"), "must be >= 1"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config(format!("{path}.max_seq_len"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

struct RawDoc {
    label: usize,
    words: Vec<String>,
}

fn read_rows(path: &Path, schema: &CsvSchema) -> Result<Vec<RawDoc>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(file);
    let needed = schema
        .text_columns
        .iter()
        .chain([&schema.label_column])
        .max()
        .copied()
        .unwrap_or(0);
    let mut docs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let fail = |msg: String| Error::Parse {
            path: path.to_owned(),
            line,
            msg,
        };
        if record.len() <= needed {
            return Err(fail(format!(
                "expected at least {} columns, found {}",
                needed + 1,
                record.len()
            )));
        }
        let raw = record[schema.label_column].trim();
        let value: i64 = raw
            .parse()
            .map_err(|_| fail(format!("label `{raw}` is not an integer")))?;
        let label = value - i64::from(schema.one_based_labels);
        if label < 0 || label >= schema.num_classes as i64 {
            return Err(fail(format!(
                "label {value} outside the {} declared classes",
                schema.num_classes
            )));
        }
        let text = schema
            .text_columns
            .iter()
            .map(|&c| &record[c])
            .collect::<Vec<_>>()
            .join(" ");
        docs.push(RawDoc {
            label: label as usize,
            words: tokenize(&text),
        });
    }
    if docs.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 0,
            msg: "file contains no rows".into(),
        });
    }
    Ok(docs)
}

fn encode(raw: Vec<RawDoc>, vocab: &Vocabulary, max_len: usize) -> Vec<Document> {
    raw.into_iter()
        .map(|d| Document {
            label: d.label,
            raw_len: d.words.len(),
            tokens: d.words.iter().take(max_len).map(|w| vocab.id(w)).collect(),
        })
        .collect()
}

/// Loads a train/test pair. The vocabulary comes from the training file only.
pub fn load_csv(train: &Path, test: &Path, schema: &CsvSchema) -> Result<Dataset> {
    schema.validate("schema")?;
    let train_raw = read_rows(train, schema)?;
    let test_raw = read_rows(test, schema)?;
    let vocab = Vocabulary::build(train_raw.iter().map(|d| d.words.as_slice()), schema.max_vocab);
    let name = train
        .file_stem()
        .map_or_else(|| "csv".to_owned(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset {
        name,
        num_classes: schema.num_classes,
        max_seq_len: schema.max_seq_len,
        train: encode(train_raw, &vocab, schema.max_seq_len),
        test: encode(test_raw, &vocab, schema.max_seq_len),
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_strips() {
        assert_eq!(tokenize("Stocks rally, U.S. Markets-rose!"), [
            "stocks", "rally", "us", "marketsrose"
        ]);
    }
}

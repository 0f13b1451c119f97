//! On-disk datasets: `manifest.json` (metadata, vocabulary, per-document
//! label and lengths) plus `tokens.bin`, every token id as a little-endian
//! `u32`, train documents first, in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Document, Vocabulary};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TOKENS: &str = "tokens.bin";

#[derive(Serialize, Deserialize)]
struct DocEntry {
    label: usize,
    raw_len: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    num_classes: usize,
    max_seq_len: usize,
    vocab: Vocabulary,
    train: Vec<DocEntry>,
    test: Vec<DocEntry>,
}

fn entries(docs: &[Document]) -> Vec<DocEntry> {
    docs.iter()
        .map(|d| DocEntry {
            label: d.label,
            raw_len: d.raw_len,
            len: d.tokens.len(),
        })
        .collect()
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        max_seq_len: dataset.max_seq_len,
        vocab: dataset.vocab.clone(),
        train: entries(&dataset.train),
        test: entries(&dataset.test),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    let bytes: Vec<u8> = dataset
        .train
        .iter()
        .chain(&dataset.test)
        .flat_map(|d| d.tokens.iter().flat_map(|t| t.to_le_bytes()))
        .collect();
    let path = dir.join(TOKENS);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let path = dir.join(TOKENS);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{}: length not a multiple of 4", path.display())));
    }
    let mut ids = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let vocab_len = manifest.vocab.len() as u32;
    let mut decode = |list: &[DocEntry]| -> Result<Vec<Document>> {
        list.iter()
            .map(|e| {
                let tokens: Vec<u32> = ids.by_ref().take(e.len).collect();
                if tokens.len() != e.len {
                    return Err(Error::Data("token file shorter than manifest".into()));
                }
                if tokens.iter().any(|&t| t >= vocab_len) || e.label >= manifest.num_classes {
                    return Err(Error::Data("token id or label out of range".into()));
                }
                Ok(Document {
                    label: e.label,
                    tokens,
                    raw_len: e.raw_len,
                })
            })
            .collect()
    };
    let train = decode(&manifest.train)?;
    let test = decode(&manifest.test)?;
    if ids.next().is_some() {
        return Err(Error::Data("token file longer than manifest".into()));
    }
    Ok(Dataset {
        name: manifest.name,
        num_classes: manifest.num_classes,
        max_seq_len: manifest.max_seq_len,
        train,
        test,
        vocab: manifest.vocab,
    })
}

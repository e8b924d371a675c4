//! FinMAP JSON documents and the newline-delimited vocabulary file.

use std::path::Path;

use tfcodit_core::finmap::{validate, FinMapDocument, Vocabulary};

use crate::error::{json_err, Error, Result};
use crate::records::{read_text, write_text};

/// Reads either a single document or a JSON array of documents. Unknown
/// fields, categories or items are errors.
pub fn read_documents(path: &Path) -> Result<Vec<FinMapDocument>> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err(path))?;
    let docs: Vec<FinMapDocument> =
        if value.is_array() { serde_json::from_value(value).map_err(json_err(path))? } else { vec![serde_json::from_value(value).map_err(json_err(path))?] };
    for (i, doc) in docs.iter().enumerate() {
        let report = validate(doc);
        if !report.is_valid() {
            let list: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::InvalidDocument { path: path.to_path_buf(), reason: format!("entry {i}: {}", list.join("; ")) });
        }
    }
    Ok(docs)
}

pub fn read_document(path: &Path) -> Result<FinMapDocument> {
    let mut docs = read_documents(path)?;
    if docs.len() != 1 {
        return Err(Error::MissingData(format!("{} holds {} documents, expected one", path.display(), docs.len())));
    }
    Ok(docs.remove(0))
}

pub fn write_document(path: &Path, doc: &FinMapDocument) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).map_err(json_err(path))?;
    write_text(path, &(text + "\n"))
}

pub fn write_documents(path: &Path, docs: &[FinMapDocument]) -> Result<()> {
    let text = serde_json::to_string_pretty(docs).map_err(json_err(path))?;
    write_text(path, &(text + "\n"))
}

/// One token per line; the line number is the id.
pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let tokens = read_text(path)?.lines().map(str::to_string).collect();
    Ok(Vocabulary::from_tokens(tokens)?)
}

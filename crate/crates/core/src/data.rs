//! Demonstration examples and their JSONL files.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("example {id:?} has empty input")]
    EmptyInput { id: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
}

/// One `(input, output)` demonstration pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    #[serde(default)]
    pub output: String,
}

impl Example {
    pub fn new(id: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            output: output.into(),
        }
    }
}

/// Rejects empty inputs and repeated ids.
pub fn validate_examples(examples: &[Example]) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for e in examples {
        if e.input.trim().is_empty() {
            return Err(DataError::EmptyInput { id: e.id.clone() });
        }
        if !seen.insert(e.id.as_str()) {
            return Err(DataError::DuplicateId(e.id.clone()));
        }
    }
    Ok(())
}

/// Reads one JSON object per nonblank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: impl AsRef<Path>,
) -> Result<Vec<T>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| DataError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// Loads and validates an example file.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<Example>, DataError> {
    let examples: Vec<Example> = read_jsonl(path)?;
    validate_examples(&examples)?;
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"input\":\"q\",\"output\":\"r\"}\n\n{\"id\":\"b\",\"input\":\"q2\"}\n",
        )
        .unwrap();
        let ex = load_examples(&p).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].output, "");

        std::fs::write(
            &p,
            "{\"id\":\"a\",\"input\":\"q\"}\n{\"id\":\"a\",\"input\":\"q\"}\n",
        )
        .unwrap();
        assert!(matches!(load_examples(&p), Err(DataError::DuplicateId(_))));
        std::fs::write(&p, "{\"id\":\"a\",\"input\":\" \"}\n").unwrap();
        assert!(matches!(
            load_examples(&p),
            Err(DataError::EmptyInput { .. })
        ));
        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(
            load_examples(&p),
            Err(DataError::Parse { line: 1, .. })
        ));
    }
}

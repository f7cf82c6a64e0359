//! File formats: CSV data directories, the label mapping, synthetic data.
//!
//! A data directory holds any of
//!
//! * `counts.csv`  `object_id,column_id,count` (absent cells are 0)
//! * `values.csv`  `object_id,column_id,value` (every cell required)
//! * `words.csv`   `object_id,word,count` (absent cells are 0)
//! * `coords.csv`  `object_id,lat,lon` in degrees, or `object_id,x,y,z`
//! * `vocab.csv`   `kind,index,label`, fixing the index of each label
//!
//! plus, for generated data, `truth.json` with the parameters used.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub mod ingest;
pub mod synthetic;

pub use ingest::{ingest, write_dataset, IngestOptions, Ingested, LabelKind, Vocab};
pub use synthetic::{generate, LoadingStructure, SyntheticSpec};

pub const COUNTS_FILE: &str = "counts.csv";
pub const VALUES_FILE: &str = "values.csv";
pub const WORDS_FILE: &str = "words.csv";
pub const COORDS_FILE: &str = "coords.csv";
pub const VOCAB_FILE: &str = "vocab.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serializes CSV records into memory, then writes them atomically.
pub(crate) fn write_csv<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

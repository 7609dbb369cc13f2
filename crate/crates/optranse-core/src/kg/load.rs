//! Tab-separated triple file loading.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::Result;

/// A triple as read from disk, normalized to (head, relation, tail).
pub type RawTriple = (String, String, String);

/// Column layout of a triple file. Benchmark distributions disagree, so the
/// order is configurable per file; the load report makes a wrong guess
/// visible through the vocabulary counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnOrder {
    /// head \t relation \t tail
    #[default]
    Hrt,
    /// head \t tail \t relation
    Htr,
}

impl std::str::FromStr for ColumnOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hrt" => Ok(ColumnOrder::Hrt),
            "htr" => Ok(ColumnOrder::Htr),
            other => Err(Error::Config(format!(
                "unknown column order '{other}' (expected hrt or htr)"
            ))),
        }
    }
}

/// Reads one triple per non-empty line; no deduplication at this stage.
pub fn load_triples(path: &Path, order: ColumnOrder) -> Result<Vec<RawTriple>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(a), Some(b), Some(c), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!(
                    "expected exactly 3 tab-separated fields, got {}",
                    line.split('\t').count()
                ),
            });
        };
        let (h, r, t) = match order {
            ColumnOrder::Hrt => (a, b, c),
            ColumnOrder::Htr => (a, c, b),
        };
        triples.push((h.to_owned(), r.to_owned(), t.to_owned()));
    }
    Ok(triples)
}

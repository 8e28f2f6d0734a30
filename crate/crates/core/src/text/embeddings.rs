use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::vocab::{Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Word vectors read from a text file with one `token v1 .. vd` line per token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: IndexMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = WordVectors::default();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let bad = |reason: String| Error::FormatLine {
                path: path.display().to_string(),
                line: i + 1,
                reason,
            };
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|_| bad(format!("not a number: {p:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(bad(format!("token {token:?} has no values")));
            }
            if out.vectors.is_empty() {
                out.dim = values.len();
            } else if values.len() != out.dim {
                return Err(bad(format!(
                    "expected {} values, found {}",
                    out.dim,
                    values.len()
                )));
            }
            out.vectors.insert(token.to_string(), values);
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (tok, v) in &self.vectors {
            write!(buf, "{tok}").expect("write to vec");
            for x in v {
                write!(buf, " {x}").expect("write to vec");
            }
            buf.push(b'\n');
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Copies vectors into the rows of `table` for every vocabulary token
    /// present, leaving reserved ids and absent tokens untouched. Returns the
    /// number of rows written.
    pub fn apply(&self, vocab: &Vocabulary, table: &mut Tensor) -> Result<usize> {
        if self.vectors.is_empty() {
            return Ok(0);
        }
        if table.rank() != 2 || table.shape()[0] != vocab.len() || table.cols() != self.dim {
            return Err(Error::Config(format!(
                "word vectors of dim {} do not fit embedding table {:?} for {} tokens",
                self.dim,
                table.shape(),
                vocab.len()
            )));
        }
        let mut matched = 0;
        for (id, tok) in vocab.tokens().iter().enumerate().skip(RESERVED.len()) {
            if let Some(v) = self.vectors.get(tok) {
                table.row_mut(id).copy_from_slice(v);
                matched += 1;
            }
        }
        Ok(matched)
    }
}

/// Reads `path` and writes matching rows into `table`.
pub fn load_word_embeddings(path: &Path, vocab: &Vocabulary, table: &mut Tensor) -> Result<usize> {
    WordVectors::read(path)?.apply(vocab, table)
}

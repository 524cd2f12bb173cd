//! Pair files and the sentence corpus they induce.
//!
//! A pair file holds tab-separated rows `id1 id2 sentence1 sentence2 label`; the label
//! column may be omitted for unlabeled data and a leading header row is skipped. Rows
//! are addressed by their 0-based position among data rows, which serves as pair id.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use film::vectorizer::tokenize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id1: String,
    pub id2: String,
    pub text1: String,
    pub text2: String,
    pub label: Option<u8>,
}

/// Parsed pair file with its raw lines kept for verbatim re-emission.
#[derive(Debug, Clone, Default)]
pub struct PairFile {
    pub header: Option<String>,
    pub records: Vec<PairRecord>,
    pub lines: Vec<String>,
}

impl PairFile {
    pub fn read(path: &Path) -> CliResult<Self> {
        let file = File::open(path).map_err(CliError::io(path))?;
        Self::parse(BufReader::new(file), path)
    }

    pub fn parse<R: BufRead>(r: R, path: &Path) -> CliResult<Self> {
        let mut out = Self::default();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(CliError::io(path))?;
            let line = line.strip_suffix('\r').unwrap_or(&line).to_owned();
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| CliError::Data { path: path.to_owned(), line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 && fields.len() != 5 {
                return Err(bad(format!("expected 4 or 5 tab-separated fields, found {}", fields.len())));
            }
            let label = match fields.get(4).map(|s| s.trim()) {
                None => None,
                Some("0") => Some(0),
                Some("1") => Some(1),
                Some(other) if out.records.is_empty() && out.header.is_none() && other.eq_ignore_ascii_case("label") => {
                    out.header = Some(line.clone());
                    continue;
                }
                Some(other) => return Err(bad(format!("label must be 0 or 1, found {other:?}"))),
            };
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(bad("empty sentence id".into()));
            }
            out.records.push(PairRecord {
                id1: fields[0].to_owned(),
                id2: fields[1].to_owned(),
                text1: fields[2].to_owned(),
                text2: fields[3].to_owned(),
                label,
            });
            out.lines.push(line);
        }
        Ok(out)
    }

    /// Labels of every record; an error names the first unlabeled row.
    pub fn labels(&self, path: &Path) -> CliResult<Vec<u8>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.label.ok_or_else(|| CliError::Data {
                    path: path.to_owned(),
                    line: i + 1,
                    message: "row has no label".into(),
                })
            })
            .collect()
    }

    pub fn write(&self, path: &Path, rows: &[usize]) -> CliResult<()> {
        write_atomic(path, |w| {
            if let Some(h) = &self.header {
                writeln!(w, "{h}")?;
            }
            for &i in rows {
                writeln!(w, "{}", self.lines[i])?;
            }
            Ok(())
        })
    }
}

/// Unique sentences of a pair set in order of first appearance.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    pub tokens: Vec<Vec<String>>,
    /// Sentence indices of every pair.
    pub pairs: Vec<(usize, usize)>,
}

impl Corpus {
    pub fn from_records(records: &[PairRecord]) -> Self {
        let mut corpus = Self::default();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |corpus: &mut Self, id: &str, text: &str| -> usize {
            if let Some(&i) = index.get(id) {
                if corpus.texts[i] != text {
                    log::warn!("sentence {id} appears with different texts; keeping the first");
                }
                return i;
            }
            let i = corpus.ids.len();
            index.insert(id.to_owned(), i);
            corpus.ids.push(id.to_owned());
            corpus.texts.push(text.to_owned());
            corpus.tokens.push(tokenize(text));
            i
        };
        for r in records {
            let a = intern(&mut corpus, &r.id1, &r.text1);
            let b = intern(&mut corpus, &r.id2, &r.text2);
            corpus.pairs.push((a, b));
        }
        corpus
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Writes through a temporary file in the target directory and renames it into
/// place, so a failed command leaves no partial output behind.
pub fn write_atomic<F>(path: &Path, body: F) -> CliResult<()>
where
    F: FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> std::result::Result<(), film::FilmError>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => std::path::PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(CliError::io(&dir))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        body(&mut w)?;
        w.flush().map_err(CliError::io(path))?;
    }
    tmp.persist(path).map_err(|e| CliError::Io { path: path.to_owned(), source: e.error })?;
    Ok(())
}

//! TF-IDF vectorization of tokenized sentences.
//!
//! Weights are `tf · idf` with raw term counts and smoothed
//! `idf = ln((1 + N) / (1 + df)) + 1`; every nonzero column is ℓ₂-normalized.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{FilmError, Result};
use crate::scalar::Real;
use crate::sparse::CscMatrix;

/// Sparse `D × n` feature-by-sample matrix; column `j` is sentence `j`.
pub type FeatureMatrix<T> = CscMatrix<T>;

const VOCAB_MAGIC: &str = "FILMVOCAB";
const VOCAB_VERSION: u32 = 1;

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VectorizerConfig {
    /// Minimum number of documents a term must occur in to be retained.
    pub min_df: usize,
}

impl Default for VectorizerConfig {
    fn default() -> Self {
        Self { min_df: 1 }
    }
}

/// Fitted term table. Feature indices follow lexicographic term order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    idf: Vec<f64>,
    doc_count: usize,
}

impl Vocabulary {
    /// Fits the vocabulary and idf table on a corpus of token sequences.
    pub fn fit<S: AsRef<str>>(corpus: &[Vec<S>], config: VectorizerConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(FilmError::Config("cannot fit a vocabulary on an empty corpus".into()));
        }
        if config.min_df == 0 {
            return Err(FilmError::Config("min_df must be at least 1".into()));
        }
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in corpus {
            let mut seen: Vec<&str> = doc.iter().map(AsRef::as_ref).collect();
            if seen.iter().any(|t| t.is_empty()) {
                return Err(FilmError::Config("tokens must be nonempty strings".into()));
            }
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = corpus.len() as f64;
        let mut terms = Vec::new();
        let mut idf = Vec::new();
        for (term, count) in df {
            if count >= config.min_df {
                terms.push(term.to_owned());
                idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
            }
        }
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { terms, index, idf, doc_count: corpus.len() })
    }

    /// Number of features `D`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn feature(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, feature: usize) -> &str {
        &self.terms[feature]
    }

    pub fn idf(&self, feature: usize) -> f64 {
        self.idf[feature]
    }

    pub fn idf_of(&self, term: &str) -> Option<f64> {
        self.feature(term).map(|f| self.idf[f])
    }

    /// Vectorizes sentences into an ℓ₂-normalized `D × n` matrix.
    /// Out-of-vocabulary tokens are dropped; a sentence with none left is a zero column.
    pub fn transform<T: Real, S: AsRef<str> + Sync>(&self, sentences: &[Vec<S>]) -> FeatureMatrix<T> {
        let columns: Vec<Vec<(usize, T)>> = sentences
            .par_iter()
            .map(|tokens| {
                let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
                for t in tokens {
                    if let Some(f) = self.feature(t.as_ref()) {
                        *counts.entry(f).or_insert(0) += 1;
                    }
                }
                let weights: Vec<(usize, f64)> =
                    counts.into_iter().map(|(f, c)| (f, c as f64 * self.idf[f])).collect();
                let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
                weights.into_iter().map(|(f, w)| (f, T::lit(w / norm))).collect()
            })
            .collect();
        CscMatrix::from_columns(self.len(), columns).expect("feature indices come from the vocabulary")
    }

    /// Writes the versioned text form: a header line followed by
    /// `term \t index \t idf` records in index order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{VOCAB_MAGIC}\t{VOCAB_VERSION}\t{}\t{}", self.len(), self.doc_count)?;
        for (i, (term, idf)) in self.terms.iter().zip(&self.idf).enumerate() {
            writeln!(w, "{term}\t{i}\t{idf:.16e}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| FilmError::Format("empty vocabulary file".into()))??;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 4 || fields[0] != VOCAB_MAGIC {
            return Err(FilmError::Format("missing vocabulary header".into()));
        }
        let version: u32 = parse_field(fields[1], 1)?;
        if version != VOCAB_VERSION {
            return Err(FilmError::Format(format!("unsupported vocabulary version {version}")));
        }
        let dim: usize = parse_field(fields[2], 1)?;
        let doc_count: usize = parse_field(fields[3], 1)?;
        let mut terms = Vec::with_capacity(dim);
        let mut idf = Vec::with_capacity(dim);
        for (i, line) in lines.take(dim).enumerate() {
            let line = line?;
            let lineno = i + 2;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(FilmError::Format(format!("line {lineno}: expected 3 fields")));
            }
            let index: usize = parse_field(parts[1], lineno)?;
            if index != i {
                return Err(FilmError::Format(format!("line {lineno}: index {index} out of order")));
            }
            let value: f64 = parse_field(parts[2], lineno)?;
            if !(value.is_finite() && value > 0.0) {
                return Err(FilmError::Format(format!("line {lineno}: idf must be positive")));
            }
            terms.push(parts[0].to_owned());
            idf.push(value);
        }
        if terms.len() != dim {
            return Err(FilmError::Format(format!("expected {dim} terms, found {}", terms.len())));
        }
        let index: HashMap<String, usize> = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != dim {
            return Err(FilmError::Format("duplicate terms in vocabulary".into()));
        }
        Ok(Self { terms, index, idf, doc_count })
    }
}

fn parse_field<F: std::str::FromStr>(s: &str, line: usize) -> Result<F> {
    s.trim().parse().map_err(|_| FilmError::Format(format!("line {line}: cannot parse {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(raw: &[&[&str]]) -> Vec<Vec<String>> {
        raw.iter().map(|d| d.iter().map(|s| s.to_string()).collect()).collect()
    }

    #[test]
    fn smoothed_idf_values() {
        let v = Vocabulary::fit(&docs(&[&["a", "b"], &["a"]]), Default::default()).unwrap();
        assert_eq!(v.len(), 2);
        assert!((v.idf_of("a").unwrap() - 1.0).abs() < 1e-15);
        // ln(3/2) + 1
        assert!((v.idf_of("b").unwrap() - 1.405_465_108_108_164_4).abs() < 1e-12);

        let single = Vocabulary::fit(&docs(&[&["x"]]), Default::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.idf_of("x"), Some(1.0));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus: Vec<Vec<String>> = vec![];
        assert!(matches!(Vocabulary::fit(&corpus, Default::default()), Err(FilmError::Config(_))));
    }

    #[test]
    fn min_df_prunes_rare_terms() {
        let v = Vocabulary::fit(&docs(&[&["a", "b"], &["a", "c"]]), VectorizerConfig { min_df: 2 }).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.feature("a"), Some(0));
    }

    #[test]
    fn transform_single_and_oov() {
        let v = Vocabulary::fit(&docs(&[&["a", "b"], &["a"]]), Default::default()).unwrap();
        let x = v.transform::<f64, _>(&docs(&[&["a"], &["z"]]));
        assert_eq!((x.nrows(), x.ncols()), (2, 2));
        assert_eq!(x.get(v.feature("a").unwrap(), 0), 1.0);
        assert_eq!(x.column(1).0.len(), 0);
    }

    #[test]
    fn transform_weight_ratio() {
        let v = Vocabulary::fit(&docs(&[&["a", "b"], &["a"]]), Default::default()).unwrap();
        let x = v.transform::<f64, _>(&docs(&[&["a", "b", "a"]]));
        let (fa, fb) = (v.feature("a").unwrap(), v.feature("b").unwrap());
        let ratio = x.get(fa, 0) / x.get(fb, 0);
        assert!((ratio - 2.0 / 1.405_465_108_108_164_4).abs() < 1e-12);
        assert!((x.column_norm(0) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("What's the BEST way-to learn C++?"), vec![
            "what", "s", "the", "best", "way", "to", "learn", "c"
        ]);
        assert!(tokenize("  ?! ").is_empty());
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let v = Vocabulary::fit(&docs(&[&["a", "b"], &["a"], &["c", "b"]]), Default::default()).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("FILMVOCAB\t1\t3\t3\n"));
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_file_is_rejected() {
        assert!(Vocabulary::read_from(&b"NOPE\t1\t0\t0\n"[..]).is_err());
        assert!(Vocabulary::read_from(&b"FILMVOCAB\t1\t2\t1\na\t0\t1.0\n"[..]).is_err());
        assert!(Vocabulary::read_from(&b"FILMVOCAB\t1\t1\t1\na\t0\t-1.0\n"[..]).is_err());
    }
}

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::data::TextSample;
use crate::error::{Error, Result};

/// Per-token inverse document frequency over the text corpus, with one text
/// sample as the document unit. Smoothed so unseen tokens get the maximal
/// idf: `idf(t) = ln((1+N)/(1+df(t))) + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfTable {
    idf: HashMap<u32, f64>,
    n_docs: usize,
}

impl TfIdfTable {
    pub fn compute(texts: &[TextSample]) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Data(
                "cannot compute tf-idf on an empty text corpus".into(),
            ));
        }
        let mut df: HashMap<u32, usize> = HashMap::new();
        for doc in texts {
            let uniq: HashSet<u32> = doc.text.iter().copied().collect();
            for tok in uniq {
                *df.entry(tok).or_insert(0) += 1;
            }
        }
        let n = texts.len();
        let idf = df
            .into_iter()
            .map(|(tok, d)| (tok, Self::idf_formula(n, d)))
            .collect();
        Ok(TfIdfTable { idf, n_docs: n })
    }

    fn idf_formula(n_docs: usize, df: usize) -> f64 {
        ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// idf for a token; tokens absent from the table get the unseen (df = 0)
    /// value, which is the maximum.
    pub fn idf(&self, token: u32) -> f64 {
        self.idf
            .get(&token)
            .copied()
            .unwrap_or_else(|| Self::idf_formula(self.n_docs, 0))
    }

    /// tf·idf weight of a token inside one document, with raw-count tf.
    pub fn weight(&self, token: u32, tf_in_doc: usize) -> f64 {
        tf_in_doc as f64 * self.idf(token)
    }

    /// Raw counts of every token in one document.
    pub fn doc_tf(doc: &[u32]) -> HashMap<u32, usize> {
        let mut tf = HashMap::new();
        for &tok in doc {
            *tf.entry(tok).or_insert(0) += 1;
        }
        tf
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let idf: BTreeMap<String, f64> = self
            .idf
            .iter()
            .map(|(&tok, &v)| (vocab.token(tok).to_string(), v))
            .collect();
        let file = TfIdfFile {
            format_version: 1,
            n_docs: self.n_docs,
            idf,
        };
        let body = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Data(format!("tf-idf serialization: {e}")))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TfIdfFile = serde_json::from_str(&body)
            .map_err(|e| Error::Data(format!("tf-idf file {}: {e}", path.display())))?;
        let idf = file
            .idf
            .into_iter()
            .map(|(tok, v)| (vocab.id(&tok), v))
            .collect();
        Ok(TfIdfTable {
            idf,
            n_docs: file.n_docs,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TfIdfFile {
    format_version: u32,
    n_docs: usize,
    idf: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(condition_id: u32, text: Vec<u32>) -> TextSample {
        TextSample { condition_id, text }
    }

    #[test]
    fn idf_examples() {
        // 4 documents; token 10 in all, token 11 in one.
        let texts = vec![
            doc(0, vec![10, 11]),
            doc(0, vec![10]),
            doc(0, vec![10]),
            doc(0, vec![10]),
        ];
        let table = TfIdfTable::compute(&texts).unwrap();
        assert!(
            (table.idf(10) - 1.0).abs() < 1e-12,
            "ubiquitous token idf 1.0"
        );
        assert!((table.idf(11) - ((5.0f64 / 2.0).ln() + 1.0)).abs() < 1e-12);
        // unseen token: df = 0
        assert!((table.idf(99) - ((5.0f64).ln() + 1.0)).abs() < 1e-12);
        assert!(table.idf(99) > table.idf(11));
    }

    #[test]
    fn weight_uses_raw_tf() {
        let texts = vec![doc(0, vec![10, 10, 11]), doc(0, vec![11])];
        let table = TfIdfTable::compute(&texts).unwrap();
        let tf = TfIdfTable::doc_tf(&[10, 10, 11]);
        assert_eq!(tf[&10], 2);
        assert!((table.weight(10, tf[&10]) - 2.0 * table.idf(10)).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(TfIdfTable::compute(&[]).is_err());
    }
}

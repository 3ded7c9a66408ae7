//! Okapi BM25 over integer-token documents.

use std::collections::HashMap;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_lens: Vec<usize>,
    avg_len: f64,
    /// term -> [(doc, term frequency)]
    postings: HashMap<u32, Vec<(usize, u32)>>,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn new<T: AsRef<[u32]>>(docs: &[T]) -> Self {
        Self::with_params(docs, K1, B)
    }

    pub fn with_params<T: AsRef<[u32]>>(docs: &[T], k1: f64, b: f64) -> Self {
        let mut postings: HashMap<u32, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let doc = doc.as_ref();
            doc_lens.push(doc.len());
            let mut tf: HashMap<u32, u32> = HashMap::new();
            for t in doc {
                *tf.entry(*t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((i, n));
            }
        }
        let total: usize = doc_lens.iter().sum();
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        Bm25Index {
            doc_lens,
            avg_len,
            postings,
            k1,
            b,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    /// Score of every document; repeated query terms count once per occurrence.
    pub fn scores(&self, query: &[u32]) -> Vec<f64> {
        let n = self.len() as f64;
        let mut out = vec![0.0; self.len()];
        for term in query {
            let Some(list) = self.postings.get(term) else { continue };
            let df = list.len() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - self.b + self.b * self.doc_lens[doc] as f64 / self.avg_len;
                out[doc] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        out
    }

    /// Indices of the `k` best documents, best first; ties go to the lower index.
    pub fn top_k(&self, query: &[u32], k: usize) -> Vec<usize> {
        let scores = self.scores(query);
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_score() {
        let docs = vec![vec![1u32, 2, 2], vec![3u32], vec![1u32, 3, 4, 5]];
        let idx = Bm25Index::new(&docs);
        let s = idx.scores(&[2]);
        // df = 1, N = 3, avg len = 8/3, doc 0 len 3, tf 2
        let idf = ((3.0 - 1.0 + 0.5) / 1.5 + 1.0f64).ln();
        let norm = 1.0 - 0.75 + 0.75 * 3.0 / (8.0 / 3.0);
        let want = idf * 2.0 * 2.2 / (2.0 + 1.2 * norm);
        assert!((s[0] - want).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert_eq!(idx.top_k(&[2], 2), vec![0, 1]);
    }

    #[test]
    fn rarer_terms_weigh_more() {
        let docs = vec![vec![1u32, 9], vec![1u32, 8], vec![1u32, 7]];
        let idx = Bm25Index::new(&docs);
        let s = idx.scores(&[1, 9]);
        assert!(s[0] > s[1]);
        assert_eq!(s[1], s[2]);
    }
}

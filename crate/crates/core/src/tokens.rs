//! Padded token-id batches.

use crate::error::{Error, Result};

/// Padding id. Padding is always trailing within a row.
pub const PAD_ID: u32 = 0;
/// Replacement id used by token dropout.
pub const MASK_ID: u32 = 1;
/// Sentence-start slot whose final hidden state is the sentence embedding.
pub const CLS_ID: u32 = 2;
/// First id available to ordinary tokens.
pub const FIRST_WORD_ID: u32 = 3;

/// Row-major `[batch x seq]` matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::Input(format!(
                "token batch {batch}x{seq} needs {} ids, got {}",
                batch * seq,
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    /// Builds a batch with a leading CLS slot on every sentence, padded to
    /// the longest row.
    pub fn from_sentences<S: AsRef<[u32]>>(sentences: &[S]) -> Self {
        let seq = sentences.iter().map(|s| s.as_ref().len() + 1).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(sentences.len() * seq);
        for s in sentences {
            let s = s.as_ref();
            ids.push(CLS_ID);
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD_ID, seq - 1 - s.len()));
        }
        Self { batch: sentences.len(), seq, ids }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("token rows have unequal lengths".into()));
        }
        Ok(Self { batch: rows.len(), seq, ids: rows.concat() })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq..(i + 1) * self.seq]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u32] {
        &mut self.ids[i * self.seq..(i + 1) * self.seq]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.ids.chunks_exact(self.seq.max(1)).take(self.batch)
    }

    /// Number of non-padding positions in each row.
    pub fn lengths(&self) -> Vec<usize> {
        self.rows().map(|r| r.iter().take_while(|&&t| t != PAD_ID).count()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_get_cls_and_padding() {
        let b = TokenBatch::from_sentences(&[vec![5, 6, 7], vec![9]]);
        assert_eq!(b.seq(), 4);
        assert_eq!(b.row(0), &[CLS_ID, 5, 6, 7]);
        assert_eq!(b.row(1), &[CLS_ID, 9, PAD_ID, PAD_ID]);
        assert_eq!(b.lengths(), vec![4, 2]);
    }
}

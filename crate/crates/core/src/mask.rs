//! Binary attention masks over a packed sequence.

use crate::error::{Error, Result};

/// `L x L` visibility matrix: entry `(i, j)` is set iff position `i` may
/// attend to position `j`. Never anticausal; the diagonal is always set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    /// Lower-triangular all-ones mask.
    pub fn causal(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("causal mask needs L >= 1"));
        }
        let bits = (0..len)
            .flat_map(|i| (0..len).map(move |j| j <= i))
            .collect();
        Ok(AttentionMask { len, bits })
    }

    /// Validates and wraps an explicit 0/1 matrix.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let len = rows.len();
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(Error::invalid("mask must be a non-empty square matrix"));
        }
        let mut bits = Vec::with_capacity(len * len);
        for (i, row) in rows.iter().enumerate() {
            for &v in row {
                bits.push(v != 0);
            }
            if row[i] == 0 {
                return Err(Error::invalid(format!("mask diagonal unset at row {i}")));
            }
        }
        let mask = AttentionMask { len, bits };
        mask.check_causal()?;
        Ok(mask)
    }

    fn check_causal(&self) -> Result<()> {
        for i in 0..self.len {
            if let Some(j) = (i + 1..self.len).find(|&j| self.get(i, j)) {
                return Err(Error::invalid(format!(
                    "anticausal mask: row {i} attends to later position {j}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.len + j]
    }

    /// Clears entry `(i, j)`; the diagonal cannot be cleared.
    pub fn block(&mut self, i: usize, j: usize) -> Result<()> {
        if i == j {
            return Err(Error::invalid("cannot block the mask diagonal"));
        }
        self.bits[i * self.len + j] = false;
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.len..(i + 1) * self.len]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|b| **b).count()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.len)
            .map(|i| self.row(i).iter().map(|&b| b as u8).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_examples() {
        assert_eq!(
            AttentionMask::causal(3).unwrap().to_rows(),
            vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]
        );
        assert_eq!(AttentionMask::causal(1).unwrap().to_rows(), vec![vec![1]]);
        let m = AttentionMask::causal(9).unwrap();
        for i in 0..9 {
            assert_eq!(m.row_count(i), i + 1);
        }
        assert!(AttentionMask::causal(0).is_err());
    }

    #[test]
    fn rejects_anticausal_and_empty_diagonal() {
        assert!(AttentionMask::from_rows(&[vec![1, 1], vec![1, 1]]).is_err());
        assert!(AttentionMask::from_rows(&[vec![1, 0], vec![1, 0]]).is_err());
        assert!(AttentionMask::from_rows(&[vec![1, 0], vec![0, 1]]).is_ok());
    }
}

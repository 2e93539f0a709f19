use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParityRecord, RqError};
use crate::nn::Tensor2;

/// `L` codebooks of strictly increasing size sharing one row width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqCodebooks {
    levels: Vec<Tensor2>,
}

impl RqCodebooks {
    pub fn new(levels: Vec<Tensor2>) -> Result<Self, RqError> {
        let Some(first) = levels.first() else {
            return Err(RqError::Config("no codebook levels".into()));
        };
        let dim = first.cols();
        for (l, t) in levels.iter().enumerate() {
            if t.rows() == 0 || t.cols() != dim {
                return Err(RqError::Config(format!("codebook {l} has shape {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(RqError::Config(format!("codebook {l} has non-finite rows")));
            }
        }
        if levels.windows(2).any(|w| w[0].rows() >= w[1].rows()) {
            return Err(RqError::Config("codebook sizes must be strictly increasing".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor2] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Tensor2::rows).collect()
    }

    pub fn quantize(&self, h: &Tensor2) -> Result<Quantized, RqError> {
        let refs: Vec<&Tensor2> = self.levels.iter().collect();
        residual_quantize(h, &refs)
    }

    /// `Σ_l E_l[indices[l][j]]` for every position `j`.
    pub fn lookup_sum(&self, code: &PatternCode) -> Result<Tensor2, RqError> {
        code.check_ranges(&self.sizes())?;
        let m = code.len();
        let mut out = Tensor2::zeros(m, self.dim());
        for (book, idx) in self.levels.iter().zip(&code.indices) {
            for (j, &k) in idx.iter().enumerate() {
                for (o, e) in out.row_mut(j).iter_mut().zip(book.row(k)) {
                    *o += e;
                }
            }
        }
        Ok(out)
    }
}

/// Nearest codebook row to `h` by Euclidean distance; ties go to the
/// smaller index. Returns the index and the squared distance.
pub fn vq_lookup(h: &[f64], book: &Tensor2) -> Result<(usize, f64), RqError> {
    if book.rows() == 0 {
        return Err(RqError::Config("empty codebook".into()));
    }
    if book.cols() != h.len() {
        return Err(RqError::Config(format!(
            "query width {} does not match codebook width {}",
            h.len(),
            book.cols()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for k in 0..book.rows() {
        let d: f64 = h.iter().zip(book.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best)
}

/// Result of quantizing an `m × d_q` sequence level by level.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// `indices[l][j]`: level-`l` code at position `j`.
    pub indices: Vec<Vec<usize>>,
    /// Selected rows per level, `m × d_q` each.
    pub selected: Vec<Tensor2>,
    /// Input to each level: `residuals[0]` is the input itself.
    pub residuals: Vec<Tensor2>,
    /// What remains after the last level.
    pub final_residual: Tensor2,
    /// Sum of the selected rows over levels.
    pub sum: Tensor2,
}

pub fn residual_quantize(h: &Tensor2, books: &[&Tensor2]) -> Result<Quantized, RqError> {
    let (m, d) = h.shape();
    let mut r = h.clone();
    let mut out = Quantized {
        indices: Vec::with_capacity(books.len()),
        selected: Vec::with_capacity(books.len()),
        residuals: Vec::with_capacity(books.len()),
        final_residual: Tensor2::zeros(m, d),
        sum: Tensor2::zeros(m, d),
    };
    for book in books {
        let mut idx = Vec::with_capacity(m);
        let mut sel = Tensor2::zeros(m, d);
        for j in 0..m {
            let (k, _) = vq_lookup(r.row(j), book)?;
            idx.push(k);
            sel.row_mut(j).copy_from_slice(book.row(k));
        }
        out.residuals.push(r.clone());
        for (a, b) in r.data_mut().iter_mut().zip(sel.data()) {
            *a -= b;
        }
        out.sum.add_assign(&sel);
        out.indices.push(idx);
        out.selected.push(sel);
    }
    out.final_residual = r;
    Ok(out)
}

/// Discrete code of one trajectory: `L × m` indices plus its parity record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternCode {
    pub indices: Vec<Vec<usize>>,
    pub parity: ParityRecord,
}

impl PatternCode {
    /// Encoded length `m`.
    pub fn len(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn levels(&self) -> usize {
        self.indices.len()
    }

    pub fn check_ranges(&self, sizes: &[usize]) -> Result<(), RqError> {
        if self.indices.len() != sizes.len() {
            return Err(RqError::Config(format!(
                "code has {} levels, codebooks have {}",
                self.indices.len(),
                sizes.len()
            )));
        }
        let m = self.len();
        for (level, (idx, &size)) in self.indices.iter().zip(sizes).enumerate() {
            if idx.len() != m {
                return Err(RqError::Config(format!("level {level} has {} codes, expected {m}", idx.len())));
            }
            if let Some(&index) = idx.iter().find(|&&k| k >= size) {
                return Err(RqError::CodeRange { level, index, size });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn nearest_row_and_exact_hit() {
        let b = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(vq_lookup(&[0.2, 0.1], &b).unwrap().0, 0);
        let (k, d) = vq_lookup(&[1.0, 1.0], &b).unwrap();
        assert_eq!((k, d), (1, 0.0));
    }

    #[test]
    fn ties_pick_smaller_index() {
        let b = book(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(vq_lookup(&[0.0, 0.0], &b).unwrap().0, 0);
    }

    #[test]
    fn empty_codebook_is_config_error() {
        let b = Tensor2::zeros(0, 2);
        assert!(matches!(vq_lookup(&[0.0, 0.0], &b), Err(RqError::Config(_))));
    }

    #[test]
    fn single_level_is_plain_lookup() {
        let b = book(&[&[0.0, 0.0], &[2.0, 0.0], &[0.0, 3.0]]);
        let h = book(&[&[1.9, 0.2], &[0.1, 2.0], &[-1.0, -1.0]]);
        let q = residual_quantize(&h, &[&b]).unwrap();
        for j in 0..3 {
            assert_eq!(q.indices[0][j], vq_lookup(h.row(j), &b).unwrap().0);
        }
    }

    #[test]
    fn constructed_sum_is_recovered_exactly() {
        let b1 = book(&[&[8.0, 0.0], &[0.0, 8.0]]);
        let b2 = book(&[&[0.0, 0.0], &[2.0, 0.0], &[0.0, 2.0]]);
        let b3 = book(&[&[0.0, 0.0], &[0.5, 0.0], &[0.0, 0.5], &[-0.5, 0.0]]);
        let h = book(&[&[8.0 + 0.0 + 0.5, 2.0], &[2.0 - 0.5, 8.0]]);
        let q = residual_quantize(&h, &[&b1, &b2, &b3]).unwrap();
        assert_eq!(q.indices, alloc::vec![alloc::vec![0, 1], alloc::vec![2, 1], alloc::vec![1, 3]]);
        assert!(q.final_residual.data().iter().all(|&v| v == 0.0));
        assert_eq!(q.sum, h);
    }

    #[test]
    fn codebook_ordering_enforced() {
        let a = Tensor2::zeros(4, 2);
        let b = Tensor2::zeros(3, 2);
        assert!(RqCodebooks::new(alloc::vec![a.clone(), b]).is_err());
        assert!(RqCodebooks::new(alloc::vec![a.clone(), a]).is_err());
    }

    #[test]
    fn range_check_names_level() {
        let code = PatternCode {
            indices: alloc::vec![alloc::vec![0, 1], alloc::vec![5, 0]],
            parity: ParityRecord { bits: [false; 3] },
        };
        assert_eq!(
            code.check_ranges(&[2, 4]).unwrap_err(),
            RqError::CodeRange { level: 1, index: 5, size: 4 }
        );
    }
}

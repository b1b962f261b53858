use super::Tensor;
use crate::error::{Error, Result};

/// Row-major `rows×cols` matrix of indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl IndexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "index matrix {rows}×{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(IndexMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }
}

/// Indices of the `k` largest entries of every row of an `m×n` matrix.
///
/// Each row is ordered by descending score; equal scores keep ascending index
/// order.
pub fn top_k_rows(scores: &Tensor, k: usize) -> Result<IndexMatrix> {
    let [m, n] = scores.shape()[..] else {
        return Err(Error::InvalidArgument(format!(
            "top_k_rows expects a matrix, got {:?}",
            scores.shape()
        )));
    };
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top-k needs 1 ≤ k ≤ {n}, got k = {k}")));
    }
    let mut data = Vec::with_capacity(m * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for row in scores.data().chunks(n) {
        order.clear();
        order.extend(0..n);
        // stable sort keeps ascending index among ties
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        data.extend_from_slice(&order[..k]);
    }
    Ok(IndexMatrix { rows: m, cols: k, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn unique_max() {
        assert_eq!(top_k_rows(&row(&[1.0, 9.0, 3.0]), 1).unwrap().row(0), &[1]);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        assert_eq!(top_k_rows(&row(&[5.0, 5.0, 3.0]), 2).unwrap().row(0), &[0, 1]);
        assert_eq!(top_k_rows(&row(&[3.0, 5.0, 5.0]), 2).unwrap().row(0), &[1, 2]);
    }

    #[test]
    fn full_k_is_a_descending_permutation() {
        let t = row(&[0.2, -1.0, 4.0, 0.2, 7.0]);
        assert_eq!(top_k_rows(&t, 5).unwrap().row(0), &[4, 2, 0, 3, 1]);
    }

    #[test]
    fn rejects_k_out_of_range() {
        assert!(top_k_rows(&row(&[1.0, 2.0]), 3).is_err());
        assert!(top_k_rows(&row(&[1.0, 2.0]), 0).is_err());
    }
}

//! Banded storage and LU factorization with partial pivoting.
//!
//! Raster numbering of a structured grid keeps every element's DOFs within
//! a fixed distance of each other, so the global tangent is banded and a
//! band LU is a sparse direct solve with no fill outside the envelope.

use crate::{FemError, Result};

/// Square matrix with `bw` sub- and super-diagonals. Rows reserve an extra
/// `bw` columns on the right for fill created by row interchanges.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let width = 3 * bw + 1;
        Self {
            n,
            bw,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, row: usize, col: usize) -> Option<usize> {
        // Row `row` stores columns row - bw ..= row + 2 bw.
        let off = (col + self.bw).checked_sub(row)?;
        (off < self.width && row < self.n && col < self.n).then(|| row * self.width + off)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        match self.slot(row, col) {
            Some(s) if col + self.bw >= row && col <= row + self.bw => self.data[s],
            _ => 0.0,
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if row.abs_diff(col) > self.bw {
            return Err(FemError::IndexOutOfRange(format!(
                "entry ({row}, {col}) outside bandwidth {}",
                self.bw
            )));
        }
        let s = self.slot(row, col).ok_or_else(|| {
            FemError::IndexOutOfRange(format!("entry ({row}, {col}) outside {0}x{0}", self.n))
        })?;
        self.data[s] += value;
        Ok(())
    }

    /// Replaces row and column `d` by the identity.
    pub fn constrain(&mut self, d: usize) {
        let lo = d.saturating_sub(self.bw);
        let hi = (d + self.bw).min(self.n - 1);
        for k in lo..=hi {
            if let Some(s) = self.slot(d, k) {
                self.data[s] = 0.0;
            }
            if let Some(s) = self.slot(k, d) {
                self.data[s] = 0.0;
            }
        }
        let s = self.slot(d, d).expect("diagonal is in band");
        self.data[s] = 1.0;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let lo = r.saturating_sub(self.bw);
                let hi = (r + self.bw).min(self.n - 1);
                (lo..=hi).map(|c| self.get(r, c) * x[c]).sum()
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let bw = self.bw;
        let w = self.width;
        let mut pivots = vec![0usize; n];
        for k in 0..n {
            let last_row = (k + bw).min(n - 1);
            let last_col = (k + 2 * bw).min(n - 1);
            let mut p = k;
            let mut best = 0.0f64;
            for r in k..=last_row {
                let v = self.data[r * w + k + bw - r].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(FemError::SingularTangent(k));
            }
            pivots[k] = p;
            if p != k {
                for c in k..=last_col {
                    let a = k * w + c + bw - k;
                    let b = p * w + c + bw - p;
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[k * w + bw];
            let (head, tail) = self.data.split_at_mut((k + 1) * w);
            let pivot_row = &head[k * w..];
            for r in k + 1..=last_row {
                let row = &mut tail[(r - k - 1) * w..(r - k) * w];
                let lk = k + bw - r;
                let l = row[lk] / pivot;
                row[lk] = l;
                if l != 0.0 {
                    for c in k + 1..=last_col {
                        row[c + bw - r] -= l * pivot_row[c + bw - k];
                    }
                }
            }
        }
        Ok(BandLu {
            matrix: self,
            pivots,
        })
    }
}

/// Factorized band matrix, ready for repeated solves.
#[derive(Debug, Clone)]
pub struct BandLu {
    matrix: BandMatrix,
    pivots: Vec<usize>,
}

impl BandLu {
    pub fn size(&self) -> usize {
        self.matrix.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let m = &self.matrix;
        let (n, bw, w) = (m.n, m.bw, m.width);
        assert_eq!(b.len(), n, "right-hand side length");
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for r in k + 1..=(k + bw).min(n - 1) {
                    b[r] -= m.data[r * w + k + bw - r] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let row = &m.data[k * w..(k + 1) * w];
            let mut acc = b[k];
            for c in k + 1..=(k + 2 * bw).min(n - 1) {
                acc -= row[c + bw - k] * b[c];
            }
            b[k] = acc / row[bw];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

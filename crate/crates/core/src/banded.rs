//! Banded matrices and LU factorization with partial pivoting.
//!
//! Storage follows the LAPACK `gbtrf` layout: column-major band with `kl`
//! extra rows on top to hold fill-in from row interchanges.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    ab: Vec<T>,
}

impl<T: Real> BandMatrix<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        Self { n, kl, ku, ld, ab: vec![T::zero(); ld * n] }
    }

    pub fn identity(n: usize, kl: usize, ku: usize) -> Self {
        let mut m = Self::zeros(n, kl, ku);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i <= j + self.kl && j <= i + self.ku
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        // row kl + ku + i - j within column j
        j * self.ld + self.kl + self.ku + i - j
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if self.in_band(i, j) {
            self.ab[self.idx(i, j)]
        } else {
            T::zero()
        }
    }

    /// Panics if `(i, j)` lies outside the declared band.
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band kl={} ku={}", self.kl, self.ku);
        let k = self.idx(i, j);
        self.ab[k] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band kl={} ku={}", self.kl, self.ku);
        let k = self.idx(i, j);
        self.ab[k] += v;
    }

    /// Zeroes row `i` within the band.
    pub fn clear_row(&mut self, i: usize) {
        let lo = i.saturating_sub(self.kl);
        let hi = (i + self.ku).min(self.n - 1);
        for j in lo..=hi {
            let k = self.idx(i, j);
            self.ab[k] = T::zero();
        }
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![T::zero(); self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut acc = T::zero();
            for (j, &xj) in x.iter().enumerate().take(hi + 1).skip(lo) {
                acc += self.ab[self.idx(i, j)] * xj;
            }
            *yi = acc;
        }
    }

    /// `a·self + b·other` for matrices with identical shape and bandwidths.
    pub fn combine(&self, a: T, other: &Self, b: T) -> Self {
        assert_eq!((self.n, self.kl, self.ku), (other.n, other.kl, other.ku));
        let ab = self.ab.iter().zip(&other.ab).map(|(&x, &y)| a * x + b * y).collect();
        Self { ab, ..*self }
    }

    pub fn scaled(mut self, a: T) -> Self {
        for v in self.ab.iter_mut() {
            *v *= a;
        }
        self
    }

    /// Copy into a matrix with wider bands.
    pub fn widened(&self, kl: usize, ku: usize) -> Self {
        assert!(kl >= self.kl && ku >= self.ku);
        let mut m = Self::zeros(self.n, kl, ku);
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    /// `selfᵀ · self`, which is banded with half-width `kl + ku`.
    pub fn gram(&self) -> Self {
        let w = self.kl + self.ku;
        let mut g = Self::zeros(self.n, w, w);
        for k in 0..self.n {
            let lo = k.saturating_sub(self.kl);
            let hi = (k + self.ku).min(self.n - 1);
            for i in lo..=hi {
                let a = self.get(k, i);
                if a == T::zero() {
                    continue;
                }
                for j in lo..=hi {
                    g.add(i, j, a * self.get(k, j));
                }
            }
        }
        g
    }

    /// LU factorization with partial pivoting; consumes the matrix.
    pub fn factor(mut self) -> Result<BandLu<T>> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut piv = vec![0usize; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = 0;
            let mut best = self.ab[self.idx(j, j)].abs();
            for r in 1..=km {
                let v = self.ab[self.idx(j + r, j)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            piv[j] = j + p;
            if best == T::zero() || !best.is_finite() {
                return Err(Error::Singular);
            }
            ju = ju.max((j + ku + p).min(n - 1));
            if p != 0 {
                for c in j..=ju {
                    let a = self.idx(j, c);
                    let b = self.idx(j + p, c);
                    self.ab.swap(a, b);
                }
            }
            let pivot = self.ab[self.idx(j, j)];
            for r in 1..=km {
                let k = self.idx(j + r, j);
                self.ab[k] /= pivot;
            }
            for c in j + 1..=ju {
                let u = self.ab[self.idx(j, c)];
                if u == T::zero() {
                    continue;
                }
                for r in 1..=km {
                    let l = self.ab[self.idx(j + r, j)];
                    let k = self.idx(j + r, c);
                    self.ab[k] -= l * u;
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }

    pub fn solve(self, b: &[T]) -> Result<Vec<T>> {
        let lu = self.factor()?;
        let mut x = b.to_vec();
        lu.solve_in_place(&mut x);
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct BandLu<T> {
    m: BandMatrix<T>,
    piv: Vec<usize>,
}

impl<T: Real> BandLu<T> {
    pub fn solve_in_place(&self, b: &mut [T]) {
        let m = &self.m;
        let n = m.n;
        assert_eq!(b.len(), n);
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = m.kl.min(n - 1 - j);
            let bj = b[j];
            for r in 1..=km {
                b[j + r] -= m.ab[m.idx(j + r, j)] * bj;
            }
        }
        let kband = m.kl + m.ku;
        for j in (0..n).rev() {
            b[j] /= m.ab[m.idx(j, j)];
            let bj = b[j];
            for i in j.saturating_sub(kband)..j {
                b[i] -= m.ab[m.idx(i, j)] * bj;
            }
        }
    }
}

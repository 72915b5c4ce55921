//! Masks and per-environment coefficient sets.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::library::{logit, sigmoid, MaskWeights};

/// A 0/1 selection over the n×p (equation, feature) grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| false)
    }

    /// Support (nonzero pattern) of a coefficient matrix.
    pub fn support_of(coeffs: &DMatrix<f64>) -> Self {
        Self::from_fn(coeffs.nrows(), coeffs.ncols(), |r, c| coeffs[(r, c)] != 0.0)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Positions of the ones, row-major.
    pub fn ones_positions(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.get(r, c))
            .collect()
    }

    /// Entrywise ≤.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn rows_as_vecs(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c) as u8).collect())
            .collect()
    }
}

impl MaskWeights for BinaryMask {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn factor(&self, row: usize, col: usize) -> f64 {
        if self.get(row, col) {
            1.0
        } else {
            0.0
        }
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows_as_vecs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<u8>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols || r.iter().any(|&v| v > 1)) {
            return Err(serde::de::Error::custom("mask rows must be equal-length 0/1 lists"));
        }
        Ok(BinaryMask::from_fn(rows.len(), cols, |r, c| rows[r][c] == 1))
    }
}

/// Continuous mask logits M̃; pruned entries are −∞ and stay there.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMask(pub DMatrix<f64>);

impl RelaxedMask {
    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn is_pruned(&self, r: usize, c: usize) -> bool {
        self.0[(r, c)] == f64::NEG_INFINITY
    }

    /// σ(M̃) entrywise.
    pub fn probabilities(&self) -> DMatrix<f64> {
        self.0.map(sigmoid)
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != f64::NEG_INFINITY).count()
    }

    /// Σ σ(M̃ᵢⱼ) over non-pruned entries.
    pub fn l1(&self) -> f64 {
        self.0
            .iter()
            .filter(|&&v| v != f64::NEG_INFINITY)
            .map(|&v| sigmoid(v))
            .sum()
    }
}

impl MaskWeights for RelaxedMask {
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    fn factor(&self, row: usize, col: usize) -> f64 {
        sigmoid(self.0[(row, col)])
    }
}

impl Serialize for RelaxedMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Option<f64>>> = (0..self.0.nrows())
            .map(|r| {
                (0..self.0.ncols())
                    .map(|c| {
                        let v = self.0[(r, c)];
                        v.is_finite().then_some(v)
                    })
                    .collect()
            })
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RelaxedMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("relaxed mask rows differ in length"));
        }
        Ok(RelaxedMask(DMatrix::from_fn(rows.len(), cols, |r, c| {
            rows[r][c].unwrap_or(f64::NEG_INFINITY)
        })))
    }
}

/// Per-environment coefficient matrices Ξ^(e), each n×p.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet(pub Vec<DMatrix<f64>>);

impl CoefficientSet {
    pub fn envs(&self) -> usize {
        self.0.len()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.0.first().map(|m| m.shape())
    }

    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.0.iter().any(|m| m.shape() != (rows, cols)) {
            return Err(Error::invalid(format!(
                "coefficient matrices must all be {rows}x{cols}"
            )));
        }
        Ok(())
    }

    /// Number of environments in which entry (r, c) is nonzero.
    pub fn nonzero_count(&self, r: usize, c: usize) -> usize {
        self.0.iter().filter(|m| m[(r, c)] != 0.0).count()
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

impl Serialize for CoefficientSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let all: Vec<Vec<Vec<f64>>> = self.0.iter().map(matrix_rows).collect();
        all.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CoefficientSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let all: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        all.iter()
            .map(|rows| {
                matrix_from_rows(rows)
                    .ok_or_else(|| serde::de::Error::custom("ragged coefficient matrix"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(CoefficientSet)
    }
}

/// M̃ᵢⱼ = σ⁻¹(α · #{e : Ξ^(e)ᵢⱼ ≠ 0} / E); entries zero in every environment
/// start pruned (−∞).
pub fn init_relaxed_mask(coeffs: &CoefficientSet, init_alpha: f64) -> Result<RelaxedMask> {
    if !(init_alpha > 0.0 && init_alpha < 1.0) {
        return Err(Error::invalid(format!("init_alpha must be in (0, 1), got {init_alpha}")));
    }
    let (n, p) = coeffs
        .shape()
        .ok_or_else(|| Error::invalid("need at least one environment"))?;
    coeffs.check_shape(n, p)?;
    let e = coeffs.envs() as f64;
    Ok(RelaxedMask(DMatrix::from_fn(n, p, |r, c| {
        logit(init_alpha * coeffs.nonzero_count(r, c) as f64 / e)
    })))
}

/// Mᵢⱼ = 0 iff the entry has been pruned to −∞.
pub fn quantize_mask(relaxed: &RelaxedMask) -> BinaryMask {
    let (n, p) = relaxed.shape();
    BinaryMask::from_fn(n, p, |r, c| !relaxed.is_pruned(r, c))
}

/// Sets coefficients with |ξ| < `kappa` to exactly zero.
pub fn prune_coefficients(coeffs: &mut CoefficientSet, kappa: f64) {
    for m in coeffs.0.iter_mut() {
        for v in m.iter_mut() {
            if v.abs() < kappa {
                *v = 0.0;
            }
        }
    }
}

/// Prunes mask entries with σ(M̃ᵢⱼ) < `kappa` and entries whose coefficients
/// are zero in every environment. Returns how many entries were newly pruned.
pub fn prune_relaxed_mask(relaxed: &mut RelaxedMask, coeffs: &CoefficientSet, kappa: f64) -> usize {
    let (n, p) = relaxed.shape();
    let mut pruned = 0;
    for r in 0..n {
        for c in 0..p {
            if relaxed.is_pruned(r, c) {
                continue;
            }
            let dead = coeffs.envs() > 0 && coeffs.nonzero_count(r, c) == 0;
            if sigmoid(relaxed.0[(r, c)]) < kappa || dead {
                relaxed.0[(r, c)] = f64::NEG_INFINITY;
                pruned += 1;
            }
        }
    }
    pruned
}

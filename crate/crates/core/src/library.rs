//! Candidate feature functions and the masked linear right-hand side
//! `x ↦ (M ∘ Ξ) Φ(x)`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::Rhs;

/// Trigonometric candidates, only defined for two-dimensional states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigTerm {
    SinX1,
    SinX2,
    SinX1PlusX2,
}

impl TrigTerm {
    pub const ALL: [TrigTerm; 3] = [TrigTerm::SinX1, TrigTerm::SinX2, TrigTerm::SinX1PlusX2];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTerm {
    /// Product of powers; the all-zero exponent vector is the constant 1.
    Monomial(Vec<u32>),
    Trig(TrigTerm),
}

impl FeatureTerm {
    pub fn degree(&self) -> Option<u32> {
        match self {
            FeatureTerm::Monomial(e) => Some(e.iter().sum()),
            FeatureTerm::Trig(_) => None,
        }
    }

    /// Scalar evaluation, independent of the batched paths in
    /// [`FeatureLibrary`].
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            FeatureTerm::Monomial(e) => e
                .iter()
                .zip(x)
                .map(|(&p, &v)| v.powi(p as i32))
                .product(),
            FeatureTerm::Trig(TrigTerm::SinX1) => x[0].sin(),
            FeatureTerm::Trig(TrigTerm::SinX2) => x[1].sin(),
            FeatureTerm::Trig(TrigTerm::SinX1PlusX2) => (x[0] + x[1]).sin(),
        }
    }
}

/// Human-readable name: `"x*z^2"`, `"1"`, `"sin(x1+x2)"`.
pub fn term_name(term: &FeatureTerm, var_names: &[&str]) -> String {
    match term {
        FeatureTerm::Monomial(e) => {
            let parts: Vec<String> = e
                .iter()
                .zip(var_names)
                .filter(|(&p, _)| p > 0)
                .map(|(&p, name)| {
                    if p == 1 {
                        name.to_string()
                    } else {
                        format!("{name}^{p}")
                    }
                })
                .collect();
            if parts.is_empty() {
                "1".to_string()
            } else {
                parts.join("*")
            }
        }
        FeatureTerm::Trig(TrigTerm::SinX1) => "sin(x1)".to_string(),
        FeatureTerm::Trig(TrigTerm::SinX2) => "sin(x2)".to_string(),
        FeatureTerm::Trig(TrigTerm::SinX1PlusX2) => "sin(x1+x2)".to_string(),
    }
}

/// An ordered, immutable list of candidate features over an `n`-dimensional
/// state. Monomials come first in graded-lexicographic order (constant
/// first), followed by the trig terms when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LibraryDescriptor", into = "LibraryDescriptor")]
pub struct FeatureLibrary {
    n: usize,
    degree: u32,
    include_trig: bool,
    terms: Vec<FeatureTerm>,
}

/// Serialized form of a library: its build parameters plus the explicit term
/// list, which must agree on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryDescriptor {
    n: usize,
    degree: u32,
    include_trig: bool,
    terms: Vec<FeatureTerm>,
}

impl From<FeatureLibrary> for LibraryDescriptor {
    fn from(lib: FeatureLibrary) -> Self {
        LibraryDescriptor {
            n: lib.n,
            degree: lib.degree,
            include_trig: lib.include_trig,
            terms: lib.terms,
        }
    }
}

impl TryFrom<LibraryDescriptor> for FeatureLibrary {
    type Error = Error;

    fn try_from(d: LibraryDescriptor) -> Result<Self> {
        let lib = FeatureLibrary::new(d.n, d.degree, d.include_trig)?;
        if lib.terms != d.terms {
            return Err(Error::invalid(
                "library term list does not match its build parameters",
            ));
        }
        Ok(lib)
    }
}

/// All exponent vectors of length `n` with total degree exactly `d`, in
/// lexicographically descending order.
fn exponents_of_degree(n: usize, d: u32) -> Vec<Vec<u32>> {
    if n == 1 {
        return vec![vec![d]];
    }
    let mut out = Vec::new();
    for first in (0..=d).rev() {
        for mut rest in exponents_of_degree(n - 1, d - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

impl FeatureLibrary {
    /// All monomials of total degree ≤ `degree`, plus the three trig terms if
    /// `include_trig` (only allowed for n = 2).
    pub fn new(n: usize, degree: u32, include_trig: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        if degree < 1 {
            return Err(Error::invalid("library degree must be at least 1"));
        }
        if include_trig && n != 2 {
            return Err(Error::invalid(format!(
                "trigonometric features need a 2-dimensional state, got n = {n}"
            )));
        }
        let mut terms: Vec<FeatureTerm> = (0..=degree)
            .flat_map(|d| exponents_of_degree(n, d))
            .map(FeatureTerm::Monomial)
            .collect();
        if include_trig {
            terms.extend(TrigTerm::ALL.iter().map(|&t| FeatureTerm::Trig(t)));
        }
        Ok(Self {
            n,
            degree,
            include_trig,
            terms,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.terms.len()
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn include_trig(&self) -> bool {
        self.include_trig
    }

    pub fn terms(&self) -> &[FeatureTerm] {
        &self.terms
    }

    pub fn index_of(&self, term: &FeatureTerm) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    /// Index of the monomial with the given exponents.
    pub fn monomial_index(&self, exponents: &[u32]) -> Option<usize> {
        self.index_of(&FeatureTerm::Monomial(exponents.to_vec()))
    }

    pub fn var_names(&self) -> Vec<&'static str> {
        match self.n {
            2 => vec!["x1", "x2"],
            3 => vec!["x", "y", "z"],
            _ => ["x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8"][..self.n.min(8)].to_vec(),
        }
    }

    pub fn term_names(&self) -> Vec<String> {
        let names = self.var_names();
        self.terms.iter().map(|t| term_name(t, &names)).collect()
    }

    /// Powers table: `pow[k * (degree + 1) + d] = x_k^d`.
    fn powers(&self, x: &[f64], pow: &mut [f64]) {
        let stride = self.degree as usize + 1;
        for k in 0..self.n {
            let base = k * stride;
            pow[base] = 1.0;
            for d in 1..stride {
                pow[base + d] = pow[base + d - 1] * x[k];
            }
        }
    }

    fn pow_table<'b>(&self, x: &[f64], buf: &'b mut [f64; 64], owned: &'b mut Vec<f64>) -> &'b [f64] {
        let len = self.n * (self.degree as usize + 1);
        let pow: &mut [f64] = if len <= 64 {
            &mut buf[..len]
        } else {
            owned.resize(len, 0.0);
            owned
        };
        self.powers(x, pow);
        pow
    }

    fn term_value(&self, term: &FeatureTerm, x: &[f64], pow: &[f64]) -> f64 {
        let stride = self.degree as usize + 1;
        match term {
            FeatureTerm::Monomial(e) => {
                let mut v = 1.0;
                for (k, &ek) in e.iter().enumerate() {
                    v *= pow[k * stride + ek as usize];
                }
                v
            }
            trig => trig.eval(x),
        }
    }

    /// Value of `term` at `x`, writing its gradient into `row` (length n).
    fn term_with_gradient(&self, term: &FeatureTerm, x: &[f64], pow: &[f64], row: &mut [f64]) -> f64 {
        let stride = self.degree as usize + 1;
        match term {
            FeatureTerm::Monomial(e) => {
                for k in 0..self.n {
                    let ek = e[k] as usize;
                    if ek == 0 {
                        row[k] = 0.0;
                        continue;
                    }
                    let mut d = ek as f64 * pow[k * stride + ek - 1];
                    for (j, &ej) in e.iter().enumerate() {
                        if j != k {
                            d *= pow[j * stride + ej as usize];
                        }
                    }
                    row[k] = d;
                }
                self.term_value(term, x, pow)
            }
            FeatureTerm::Trig(t) => {
                row.fill(0.0);
                match t {
                    TrigTerm::SinX1 => {
                        row[0] = x[0].cos();
                        x[0].sin()
                    }
                    TrigTerm::SinX2 => {
                        row[1] = x[1].cos();
                        x[1].sin()
                    }
                    TrigTerm::SinX1PlusX2 => {
                        let s = x[0] + x[1];
                        row[0] = s.cos();
                        row[1] = s.cos();
                        s.sin()
                    }
                }
            }
        }
    }

    /// Writes Φ(x) into `out` (length p).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let (mut buf, mut owned) = ([0.0; 64], Vec::new());
        let pow = self.pow_table(x, &mut buf, &mut owned);
        for (term, o) in self.terms.iter().zip(out.iter_mut()) {
            *o = self.term_value(term, x, pow);
        }
    }

    /// Writes the features with indices `cols` into `out` (length
    /// `cols.len()`).
    pub fn eval_columns_into(&self, x: &[f64], cols: &[usize], out: &mut [f64]) {
        let (mut buf, mut owned) = ([0.0; 64], Vec::new());
        let pow = self.pow_table(x, &mut buf, &mut owned);
        for (&c, o) in cols.iter().zip(out.iter_mut()) {
            *o = self.term_value(&self.terms[c], x, pow);
        }
    }

    /// Φ(x) as a new vector.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::invalid(format!(
                "state has dimension {}, library expects {}",
                x.len(),
                self.n
            )));
        }
        let mut out = vec![0.0; self.p()];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    /// Writes Φ(x) into `phi` and its Jacobian into `jac` (row-major p×n,
    /// `jac[i * n + k] = ∂φ_i/∂x_k`).
    pub fn eval_with_jacobian(&self, x: &[f64], phi: &mut [f64], jac: &mut [f64]) {
        let n = self.n;
        let (mut buf, mut owned) = ([0.0; 64], Vec::new());
        let pow = self.pow_table(x, &mut buf, &mut owned);
        for (i, term) in self.terms.iter().enumerate() {
            phi[i] = self.term_with_gradient(term, x, pow, &mut jac[i * n..(i + 1) * n]);
        }
    }

    /// [`Self::eval_with_jacobian`] restricted to the features `cols`; `jac`
    /// is row-major `cols.len()`×n.
    pub fn eval_columns_with_jacobian(&self, x: &[f64], cols: &[usize], phi: &mut [f64], jac: &mut [f64]) {
        let n = self.n;
        let (mut buf, mut owned) = ([0.0; 64], Vec::new());
        let pow = self.pow_table(x, &mut buf, &mut owned);
        for (j, &c) in cols.iter().enumerate() {
            phi[j] = self.term_with_gradient(&self.terms[c], x, pow, &mut jac[j * n..(j + 1) * n]);
        }
    }

    /// Feature matrix Φ(X) for the rows of `states` (m×n) → m×p.
    pub fn feature_matrix(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if states.ncols() != self.n {
            return Err(Error::invalid("state matrix width does not match library"));
        }
        let p = self.p();
        let mut out = DMatrix::zeros(states.nrows(), p);
        let mut x = vec![0.0; self.n];
        let mut phi = vec![0.0; p];
        for r in 0..states.nrows() {
            for k in 0..self.n {
                x[k] = states[(r, k)];
            }
            self.eval_into(&x, &mut phi);
            for i in 0..p {
                out[(r, i)] = phi[i];
            }
        }
        Ok(out)
    }
}

impl fmt::Display for FeatureLibrary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.term_names().join(", "))
    }
}

/// The linear model `x ↦ W Φ(x)` with an effective weight matrix
/// `W = mask ∘ Ξ` stored row-major (n×p).
#[derive(Debug, Clone)]
pub struct LinearRhs<'a> {
    lib: &'a FeatureLibrary,
    weights: Vec<f64>,
}

impl<'a> LinearRhs<'a> {
    /// Builds the right-hand side from a row-major n×p weight vector.
    pub fn from_weights(lib: &'a FeatureLibrary, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != lib.n() * lib.p() {
            return Err(Error::invalid(format!(
                "weight vector has length {}, expected {}x{}",
                weights.len(),
                lib.n(),
                lib.p()
            )));
        }
        Ok(Self { lib, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn library(&self) -> &FeatureLibrary {
        self.lib
    }
}

impl Rhs for LinearRhs<'_> {
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        let p = self.lib.p();
        let mut buf = [0.0f64; 64];
        let mut owned;
        let phi: &mut [f64] = if p <= 64 {
            &mut buf[..p]
        } else {
            owned = vec![0.0; p];
            &mut owned
        };
        self.lib.eval_into(x, phi);
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * p..(k + 1) * p];
            *o = row.iter().zip(phi.iter()).map(|(w, f)| w * f).sum();
        }
    }
}

/// Logistic sigmoid; σ(−∞) = 0 and σ(+∞) = 1 exactly.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid; logit(0) = −∞.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A mask view that yields the multiplicative factor for each (row, col).
pub trait MaskWeights {
    fn shape(&self) -> (usize, usize);
    fn factor(&self, row: usize, col: usize) -> f64;
}

/// `model_rhs`: the masked right-hand side `x ↦ (M ∘ Ξ) Φ(x)`.
pub fn model_rhs<'a, M: MaskWeights + ?Sized>(
    mask: &M,
    coeffs: &DMatrix<f64>,
    lib: &'a FeatureLibrary,
) -> Result<LinearRhs<'a>> {
    let (n, p) = (lib.n(), lib.p());
    if mask.shape() != (n, p) || coeffs.shape() != (n, p) {
        return Err(Error::invalid(format!(
            "mask {:?} / coefficients {:?} do not match library shape ({n}, {p})",
            mask.shape(),
            coeffs.shape()
        )));
    }
    let mut w = vec![0.0; n * p];
    for k in 0..n {
        for i in 0..p {
            w[k * p + i] = mask.factor(k, i) * coeffs[(k, i)];
        }
    }
    LinearRhs::from_weights(lib, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binom(n: u64, k: u64) -> u64 {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn candidate_counts() {
        assert_eq!(FeatureLibrary::new(3, 5, false).unwrap().p(), 56);
        assert_eq!(FeatureLibrary::new(2, 5, false).unwrap().p(), 21);
        assert_eq!(FeatureLibrary::new(2, 5, true).unwrap().p(), 24);
    }

    #[test]
    fn counts_match_binomial() {
        for n in 1..=4 {
            for d in 1..=6u32 {
                let lib = FeatureLibrary::new(n, d, false).unwrap();
                assert_eq!(lib.p() as u64, binom(n as u64 + d as u64, d as u64));
                let mut uniq = lib.terms().to_vec();
                uniq.dedup();
                assert_eq!(uniq.len(), lib.p());
            }
        }
    }

    #[test]
    fn trig_requires_two_dims() {
        assert!(matches!(
            FeatureLibrary::new(3, 5, true),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn graded_lex_order() {
        let lib = FeatureLibrary::new(3, 2, false).unwrap();
        assert_eq!(
            lib.term_names(),
            vec!["1", "x", "y", "z", "x^2", "x*y", "x*z", "y^2", "y*z", "z^2"]
        );
        let lib = FeatureLibrary::new(2, 1, true).unwrap();
        assert_eq!(
            lib.term_names(),
            vec!["1", "x1", "x2", "sin(x1)", "sin(x2)", "sin(x1+x2)"]
        );
    }

    #[test]
    fn names() {
        let names = ["x", "y", "z"];
        assert_eq!(term_name(&FeatureTerm::Monomial(vec![1, 0, 2]), &names), "x*z^2");
        assert_eq!(term_name(&FeatureTerm::Monomial(vec![0, 0, 0]), &names), "1");
        assert_eq!(
            term_name(&FeatureTerm::Trig(TrigTerm::SinX1PlusX2), &names[..2]),
            "sin(x1+x2)"
        );
    }

    #[test]
    fn eval_at_origin() {
        let lib = FeatureLibrary::new(2, 5, true).unwrap();
        let phi = lib.eval(&[0.0, 0.0]).unwrap();
        assert_eq!(phi[0], 1.0);
        assert!(phi[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_single_monomial() {
        let lib = FeatureLibrary::new(2, 5, false).unwrap();
        let i = lib.monomial_index(&[2, 1]).unwrap();
        assert_eq!(lib.eval(&[2.0, 3.0]).unwrap()[i], 12.0);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let lib = FeatureLibrary::new(2, 2, false).unwrap();
        assert!(lib.eval(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        let lib = FeatureLibrary::new(2, 5, true).unwrap();
        let json = serde_json::to_string(&lib).unwrap();
        let back: FeatureLibrary = serde_json::from_str(&json).unwrap();
        assert_eq!(lib, back);

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["terms"].as_array_mut().unwrap().swap(1, 2);
        assert!(serde_json::from_value::<FeatureLibrary>(value).is_err());
    }

    #[test]
    fn sigmoid_limits() {
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(logit(0.0), f64::NEG_INFINITY);
        assert!((logit(sigmoid(0.3)) - 0.3).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn eval_matches_termwise(x in prop::collection::vec(-2.0f64..2.0, 2)) {
            let lib = FeatureLibrary::new(2, 5, true).unwrap();
            let phi = lib.eval(&x).unwrap();
            for (term, v) in lib.terms().iter().zip(&phi) {
                let direct = term.eval(&x);
                prop_assert!((direct - v).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }

        #[test]
        fn jacobian_matches_finite_differences(x in prop::collection::vec(-1.5f64..1.5, 3)) {
            let lib = FeatureLibrary::new(3, 4, false).unwrap();
            let (n, p) = (3, lib.p());
            let mut phi = vec![0.0; p];
            let mut jac = vec![0.0; p * n];
            lib.eval_with_jacobian(&x, &mut phi, &mut jac);
            let h = 1e-6;
            for k in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fp = lib.eval(&xp).unwrap();
                let fm = lib.eval(&xm).unwrap();
                for i in 0..p {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    prop_assert!((fd - jac[i * n + k]).abs() < 1e-6 * fd.abs().max(1.0));
                }
            }
        }

        #[test]
        fn rhs_is_linear_in_coefficients(
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let lib = FeatureLibrary::new(2, 3, true).unwrap();
            let (n, p) = (2, lib.p());
            let xi1 = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
            let xi2 = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
            let mask = crate::spreme::BinaryMask::from_fn(n, p, |_, _| rng.random_bool(0.5));
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eval = |xi: &DMatrix<f64>| {
                let mut out = vec![0.0; n];
                model_rhs(&mask, xi, &lib).unwrap().eval(&x, 0.0, &mut out);
                out
            };
            let combo = eval(&(&xi1 * a + &xi2 * b));
            let (r1, r2) = (eval(&xi1), eval(&xi2));
            for k in 0..n {
                prop_assert!((combo[k] - (a * r1[k] + b * r2[k])).abs() < 1e-12);
            }
        }
    }
}

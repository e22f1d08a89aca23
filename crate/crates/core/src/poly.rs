//! Polynomial incidence relations `π : ℝⁿ × ℝ^{n'} → ℝᵏ`.
//!
//! Every relation implements [`DefiningMap`]; sparse polynomials are the
//! serialized form, and x-reparametrizations or side swaps wrap an existing map
//! instead of expanding it.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// A smooth incidence relation with exact Jacobians.
pub trait DefiningMap: Debug + Send + Sync {
    /// Dimension of the `x` side.
    fn n(&self) -> usize;
    /// Dimension of the `y` side.
    fn n_y(&self) -> usize;
    /// Number of equations.
    fn k(&self) -> usize;
    fn eval(&self, x: &[f64], y: &[f64]) -> Vector;
    /// `(D_x π, D_y π)`, of shapes `k × n` and `k × n'`.
    fn jacobians(&self, x: &[f64], y: &[f64]) -> (Matrix, Matrix);
    /// Degree in `y` if known (used for bookkeeping only).
    fn y_degree(&self) -> Option<u32> {
        None
    }
}

pub type SharedMap = Arc<dyn DefiningMap>;

/// A sparse polynomial in `nvars` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: Vec<(f64, Vec<u32>)>,
}

impl Polynomial {
    pub fn new(nvars: usize, terms: Vec<(f64, Vec<u32>)>) -> Result<Self> {
        if let Some((_, e)) = terms.iter().find(|(_, e)| e.len() != nvars) {
            return Err(Error::DimensionMismatch(format!(
                "exponent vector of length {} in a polynomial of {nvars} variables",
                e.len()
            )));
        }
        if terms.iter().any(|(c, _)| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficient".into()));
        }
        Ok(Self { nvars, terms })
    }

    pub fn zero(nvars: usize) -> Self {
        Self { nvars, terms: Vec::new() }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self { nvars, terms: vec![(c, vec![0; nvars])] }
    }

    /// The single variable `v_i` times `c`.
    pub fn var(nvars: usize, i: usize, c: f64) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Self { nvars, terms: vec![(c, e)] }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &[(f64, Vec<u32>)] {
        &self.terms
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, e)| c * e.iter().zip(v).map(|(&k, &x)| x.powi(k as i32)).product::<f64>())
            .sum()
    }

    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.nvars];
        for (c, e) in &self.terms {
            for i in 0..self.nvars {
                if e[i] == 0 {
                    continue;
                }
                let mut t = c * e[i] as f64;
                for (j, (&k, &x)) in e.iter().zip(v).enumerate() {
                    let k = if j == i { k - 1 } else { k };
                    t *= x.powi(k as i32);
                }
                g[i] += t;
            }
        }
        g
    }

    /// Total degree in the variables `range`.
    pub fn degree_in(&self, range: std::ops::Range<usize>) -> u32 {
        self.terms
            .iter()
            .filter(|(c, _)| *c != 0.0)
            .map(|(_, e)| e[range.clone()].iter().sum())
            .max()
            .unwrap_or(0)
    }

    pub fn add(&self, o: &Polynomial) -> Polynomial {
        let mut terms = self.terms.clone();
        terms.extend(o.terms.iter().cloned());
        Polynomial { nvars: self.nvars, terms }.simplified()
    }

    pub fn mul(&self, o: &Polynomial) -> Polynomial {
        let mut terms = Vec::with_capacity(self.terms.len() * o.terms.len());
        for (a, ea) in &self.terms {
            for (b, eb) in &o.terms {
                terms.push((a * b, ea.iter().zip(eb).map(|(x, y)| x + y).collect()));
            }
        }
        Polynomial { nvars: self.nvars, terms }.simplified()
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        Polynomial { nvars: self.nvars, terms: self.terms.iter().map(|(a, e)| (a * c, e.clone())).collect() }
    }

    /// Merges equal monomials and drops zeros.
    pub fn simplified(mut self) -> Polynomial {
        self.terms.sort_by(|a, b| a.1.cmp(&b.1));
        let mut out: Vec<(f64, Vec<u32>)> = Vec::with_capacity(self.terms.len());
        for (c, e) in self.terms {
            match out.last_mut() {
                Some((c0, e0)) if *e0 == e => *c0 += c,
                _ => out.push((c, e)),
            }
        }
        out.retain(|(c, _)| *c != 0.0);
        Polynomial { nvars: self.nvars, terms: out }
    }
}

/// `π` given by `k` polynomials in the variables `(x₁..xₙ, y₁..y_{n'})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMap {
    n: usize,
    n_y: usize,
    comps: Vec<Polynomial>,
}

impl PolyMap {
    pub fn new(n: usize, n_y: usize, comps: Vec<Polynomial>) -> Result<Self> {
        if comps.is_empty() {
            return Err(Error::InvalidArgument("defining map needs at least one component".into()));
        }
        if comps.iter().any(|p| p.nvars() != n + n_y) {
            return Err(Error::DimensionMismatch(format!(
                "components must be polynomials in {} = {n} + {n_y} variables",
                n + n_y
            )));
        }
        Ok(Self { n, n_y, comps })
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.comps
    }

    /// Maximum total degree of any component in `x` and in `y`.
    pub fn degrees(&self) -> (u32, u32) {
        let dx = self.comps.iter().map(|p| p.degree_in(0..self.n)).max().unwrap_or(0);
        let dy = self.comps.iter().map(|p| p.degree_in(self.n..self.n + self.n_y)).max().unwrap_or(0);
        (dx, dy)
    }

    /// `π(x, y) = y - A x - b`.
    pub fn linear(a: &Matrix, b: Option<&Vector>) -> Self {
        let (k, n) = a.shape();
        let nv = n + k;
        let comps = (0..k)
            .map(|i| {
                let mut p = Polynomial::var(nv, n + i, 1.0);
                for j in 0..n {
                    if a[(i, j)] != 0.0 {
                        p = p.add(&Polynomial::var(nv, j, -a[(i, j)]));
                    }
                }
                if let Some(b) = b {
                    p = p.add(&Polynomial::constant(nv, -b[i]));
                }
                p
            })
            .collect();
        Self { n, n_y: k, comps }
    }

    /// `π(x, y) = y - xʲ` with `y ∈ ℝ`.
    pub fn coordinate(n: usize, j: usize) -> Self {
        let mut a = Matrix::zeros(1, n);
        a[(0, j)] = 1.0;
        Self::linear(&a, None)
    }

    /// `π(x, y) = (|x - y|² - R²) / 2` in `ℝⁿ × ℝⁿ`.
    pub fn sphere(n: usize, radius: f64) -> Self {
        let nv = 2 * n;
        let mut p = Polynomial::constant(nv, -radius * radius / 2.0);
        for i in 0..n {
            let d = Polynomial::var(nv, i, 1.0).add(&Polynomial::var(nv, n + i, -1.0));
            p = p.add(&d.mul(&d).scale(0.5));
        }
        Self { n, n_y: n, comps: vec![p] }
    }

    /// Factor `j` (0-based) of the cyclic paraboloid system in `ℝⁿ`:
    /// `π(x, y) = x^{j+ℓ} - y^ℓ + Σ_{i<ℓ} (x^{j+i} - yⁱ)²` with `y ∈ ℝ^ℓ`,
    /// indices of `x` taken mod `n`.
    pub fn paraboloid(n: usize, l: usize, j: usize) -> Self {
        let nv = n + l;
        let xi = |i: usize| Polynomial::var(nv, (j + i) % n, 1.0);
        let mut p = xi(l - 1).add(&Polynomial::var(nv, n + l - 1, -1.0));
        for i in 0..l - 1 {
            let d = xi(i).add(&Polynomial::var(nv, n + i, -1.0));
            p = p.add(&d.mul(&d));
        }
        Self { n, n_y: l, comps: vec![p] }
    }
}

impl DefiningMap for PolyMap {
    fn n(&self) -> usize {
        self.n
    }
    fn n_y(&self) -> usize {
        self.n_y
    }
    fn k(&self) -> usize {
        self.comps.len()
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> Vector {
        let v: Vec<f64> = x.iter().chain(y).copied().collect();
        Vector::from_iterator(self.comps.len(), self.comps.iter().map(|p| p.eval(&v)))
    }
    fn jacobians(&self, x: &[f64], y: &[f64]) -> (Matrix, Matrix) {
        let v: Vec<f64> = x.iter().chain(y).copied().collect();
        let k = self.comps.len();
        let mut dx = Matrix::zeros(k, self.n);
        let mut dy = Matrix::zeros(k, self.n_y);
        for (r, p) in self.comps.iter().enumerate() {
            let g = p.gradient(&v);
            for c in 0..self.n {
                dx[(r, c)] = g[c];
            }
            for c in 0..self.n_y {
                dy[(r, c)] = g[self.n + c];
            }
        }
        (dx, dy)
    }
    fn y_degree(&self) -> Option<u32> {
        Some(self.degrees().1)
    }
}

/// `π_M(x, y) = π(x₀ + M (x - x₀), y)`.
#[derive(Debug, Clone)]
pub struct XReparam {
    inner: SharedMap,
    x0: Vector,
    m: Matrix,
}

impl XReparam {
    pub fn new(inner: SharedMap, x0: Vector, m: Matrix) -> Result<Self> {
        let n = inner.n();
        if x0.len() != n || m.shape() != (n, n) {
            return Err(Error::DimensionMismatch("reparametrization does not match x dimension".into()));
        }
        Ok(Self { inner, x0, m })
    }

    pub fn map_x(&self, x: &[f64]) -> Vector {
        let x = Vector::from_column_slice(x);
        &self.x0 + &self.m * (x - &self.x0)
    }
}

impl DefiningMap for XReparam {
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn n_y(&self) -> usize {
        self.inner.n_y()
    }
    fn k(&self) -> usize {
        self.inner.k()
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> Vector {
        self.inner.eval(self.map_x(x).as_slice(), y)
    }
    fn jacobians(&self, x: &[f64], y: &[f64]) -> (Matrix, Matrix) {
        let (dx, dy) = self.inner.jacobians(self.map_x(x).as_slice(), y);
        (dx * &self.m, dy)
    }
    fn y_degree(&self) -> Option<u32> {
        self.inner.y_degree()
    }
}

/// `π'(y, x) = π(x, y)`: the same relation read from the other side.
#[derive(Debug, Clone)]
pub struct Swapped {
    inner: SharedMap,
}

impl Swapped {
    pub fn new(inner: SharedMap) -> Self {
        Self { inner }
    }
}

impl DefiningMap for Swapped {
    fn n(&self) -> usize {
        self.inner.n_y()
    }
    fn n_y(&self) -> usize {
        self.inner.n()
    }
    fn k(&self) -> usize {
        self.inner.k()
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> Vector {
        self.inner.eval(y, x)
    }
    fn jacobians(&self, x: &[f64], y: &[f64]) -> (Matrix, Matrix) {
        let (dx, dy) = self.inner.jacobians(y, x);
        (dy, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jacobians(m: &dyn DefiningMap, x: &[f64], y: &[f64]) -> (Matrix, Matrix) {
        let h = 1e-6;
        let k = m.k();
        let mut dx = Matrix::zeros(k, m.n());
        let mut dy = Matrix::zeros(k, m.n_y());
        for i in 0..m.n() {
            let (mut a, mut b) = (x.to_vec(), x.to_vec());
            a[i] += h;
            b[i] -= h;
            let d = (m.eval(&a, y) - m.eval(&b, y)) / (2.0 * h);
            dx.set_column(i, &d);
        }
        for i in 0..m.n_y() {
            let (mut a, mut b) = (y.to_vec(), y.to_vec());
            a[i] += h;
            b[i] -= h;
            let d = (m.eval(x, &a) - m.eval(x, &b)) / (2.0 * h);
            dy.set_column(i, &d);
        }
        (dx, dy)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let maps: Vec<Box<dyn DefiningMap>> = vec![
            Box::new(PolyMap::sphere(3, 1.5)),
            Box::new(PolyMap::paraboloid(4, 3, 2)),
            Box::new(PolyMap::linear(&Matrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]), None)),
        ];
        for m in maps {
            let x: Vec<f64> = (0..m.n()).map(|i| 0.3 * i as f64 - 0.2).collect();
            let y: Vec<f64> = (0..m.n_y()).map(|i| 0.7 - 0.4 * i as f64).collect();
            let (dx, dy) = m.jacobians(&x, &y);
            let (fx, fy) = fd_jacobians(m.as_ref(), &x, &y);
            assert!((dx - fx).norm() < 1e-7);
            assert!((dy - fy).norm() < 1e-7);
        }
    }

    #[test]
    fn sphere_gradient_in_y_has_length_radius_on_slice() {
        let s = PolyMap::sphere(2, 2.0);
        let x = [0.5, -1.0];
        let y = [0.5 + 2.0 * 0.6, -1.0 + 2.0 * 0.8];
        assert!(s.eval(&x, &y)[0].abs() < 1e-14);
        let (_, dy) = s.jacobians(&x, &y);
        assert!((dy.norm() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn paraboloid_identity_dx_norm() {
        // ‖d_xπ‖ = sqrt(1 + 4‖x - y‖²) for the ℓ = 2 paraboloid in the plane
        let p = PolyMap::paraboloid(2, 2, 0);
        let x = [0.3, 0.1];
        let y = [1.1, 0.0];
        let (dx, _) = p.jacobians(&x, &y);
        let oracle = (1.0f64 + 4.0 * 0.8 * 0.8).sqrt();
        assert!((dx.norm() - oracle).abs() < 1e-14);
    }

    #[test]
    fn degree_bookkeeping() {
        assert_eq!(PolyMap::sphere(3, 1.0).degrees(), (2, 2));
        assert_eq!(PolyMap::paraboloid(3, 2, 0).degrees(), (2, 2));
        assert_eq!(PolyMap::coordinate(3, 1).degrees(), (1, 1));
    }

    #[test]
    fn simplify_merges_like_terms() {
        let p = Polynomial::new(2, vec![(1.0, vec![1, 0]), (2.0, vec![1, 0]), (-3.0, vec![1, 0])]).unwrap();
        assert!(p.simplified().terms().is_empty());
    }

    #[test]
    fn reparam_composes_jacobian() {
        let inner: SharedMap = Arc::new(PolyMap::paraboloid(2, 2, 0));
        let m = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let x0 = Vector::from_vec(vec![0.1, 0.2]);
        let r = XReparam::new(inner.clone(), x0.clone(), m.clone()).unwrap();
        let x = [0.4, -0.3];
        let y = [0.9, 0.5];
        let (dx, _) = r.jacobians(&x, &y);
        let (fx, _) = fd_jacobians(&r, &x, &y);
        assert!((dx - fx).norm() < 1e-7);
        // at x0 the value is unchanged
        assert_eq!(r.eval(x0.as_slice(), &y), inner.eval(x0.as_slice(), &y));
    }

    #[test]
    fn swapped_exchanges_roles() {
        let inner: SharedMap = Arc::new(PolyMap::paraboloid(2, 2, 0));
        let s = Swapped::new(inner.clone());
        let (x, y) = ([0.1, 0.7], [0.4, -0.2]);
        assert_eq!(s.eval(&y, &x), inner.eval(&x, &y));
        let (dx, dy) = inner.jacobians(&x, &y);
        let (sx, sy) = s.jacobians(&y, &x);
        assert_eq!(dx, sy);
        assert_eq!(dy, sx);
    }

    #[test]
    fn rejects_bad_exponent_lengths() {
        assert!(Polynomial::new(2, vec![(1.0, vec![1])]).is_err());
    }
}

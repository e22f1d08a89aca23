//! Gram determinants, minor norms and unimodular bases.
//!
//! A basis `ω₁..ωₙ` of `ℝⁿ` is stored as the matrix `M` whose columns are the
//! `ωᵢ`. Decomposable `k`-vectors never appear explicitly: every norm of a
//! wedge product is computed as a Gram determinant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative tolerance on `|det M| = 1` accepted by [`UnimodularBasis::new`].
pub const UNIMODULAR_TOL: f64 = 1e-8;

/// Largest ambient dimension for which the sum over `k × k` minors is evaluated.
pub const MAX_MINOR_DIM: usize = 12;

/// A basis of `ℝⁿ` with `|det| = 1`, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodularBasis {
    m: Matrix,
}

impl UnimodularBasis {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "basis matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let d = m.determinant();
        if !d.is_finite() || (d.abs() - 1.0).abs() > UNIMODULAR_TOL {
            return Err(Error::NotUnimodular(d.abs()));
        }
        Ok(Self { m })
    }

    /// Rescales an invertible matrix to `|det| = 1`.
    pub fn normalized(m: Matrix) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::DimensionMismatch("basis matrix must be square".into()));
        }
        let n = m.nrows() as f64;
        let d = m.determinant().abs();
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::DependentVectors(d));
        }
        Ok(Self { m: m / d.powf(1.0 / n) })
    }

    pub fn identity(n: usize) -> Self {
        Self { m: Matrix::identity(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix {
        self.m
    }

    /// The basis vectors `ω₁..ωₙ`.
    pub fn vectors(&self) -> Vec<Vector> {
        self.m.column_iter().map(|c| c.into_owned()).collect()
    }

    /// Rows of `M`, i.e. `(eᵢ·ω₁, ..., eᵢ·ωₙ)`.
    pub fn rows(&self) -> Vec<Vector> {
        self.m.row_iter().map(|r| r.transpose()).collect()
    }

    /// The basis `ω ∘ A`, with columns `Σⱼ Aⱼᵢ ωⱼ`.
    pub fn compose(&self, a: &UnimodularBasis) -> Result<Self> {
        if a.dim() != self.dim() {
            return Err(Error::DimensionMismatch("composing bases of different size".into()));
        }
        Ok(Self { m: &self.m * &a.m })
    }

    /// Sum of the euclidean lengths of the basis vectors.
    pub fn length_sum(&self) -> f64 {
        self.m.column_iter().map(|c| c.norm()).sum()
    }
}

/// Matrix of inner products `⟨vᵢ, vⱼ⟩`.
pub fn gram_matrix(vs: &[Vector]) -> Result<Matrix> {
    common_dim(vs)?;
    let l = vs.len();
    Ok(Matrix::from_fn(l, l, |i, j| vs[i].dot(&vs[j])))
}

fn common_dim(vs: &[Vector]) -> Result<usize> {
    let n = vs.first().map(|v| v.len()).unwrap_or(0);
    if vs.iter().any(|v| v.len() != n) {
        return Err(Error::DimensionMismatch("vectors of different lengths".into()));
    }
    Ok(n)
}

/// `ln G(v₁..v_ℓ)`, or `-∞` for dependent vectors.
///
/// Computed from a Householder QR of the column matrix rather than from the
/// explicit inner products, so that nearly parallel long vectors keep their
/// relative accuracy.
pub fn log_gram(vs: &[Vector]) -> Result<f64> {
    let n = common_dim(vs)?;
    let l = vs.len();
    if l == 0 {
        return Ok(0.0);
    }
    if l > n {
        return Ok(f64::NEG_INFINITY);
    }
    if vs.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Overflow("gram"));
    }
    let v = Matrix::from_columns(vs);
    let r = v.qr().r();
    Ok((0..l).map(|i| 2.0 * r[(i, i)].abs().ln()).sum())
}

/// Gram determinant `G(v₁..v_ℓ) = |v₁ ∧ ... ∧ v_ℓ|²`. The empty family has `G = 1`.
pub fn gram(vs: &[Vector]) -> Result<f64> {
    let lg = log_gram(vs)?;
    let g = lg.exp();
    if g.is_infinite() {
        return Err(Error::Overflow("gram"));
    }
    Ok(g)
}

/// `‖dπ‖_ω = sqrt(det(D M Mᵀ Dᵀ))` for a `k × n` matrix `D`.
///
/// Evaluated both from the matrix form and from the sum of squared `k × k`
/// minors of `DM`; the routes must agree before a value is returned.
pub fn minor_norm(d: &Matrix, basis: &UnimodularBasis) -> Result<f64> {
    let a = minor_norm_matrix_form(d, basis.matrix())?;
    if basis.dim() > MAX_MINOR_DIM {
        return Ok(a);
    }
    let b = minor_norm_sum_of_minors(d, basis.matrix())?;
    let dm = d * basis.matrix();
    let hadamard: f64 = dm.row_iter().map(|r| r.norm()).product();
    if (a - b).abs() > 1e-9 * a.max(b) + 1e-10 * hadamard {
        return Err(Error::RouteMismatch { what: "minor_norm", a, b });
    }
    Ok(a)
}

fn check_form(d: &Matrix, m: &Matrix) -> Result<()> {
    let (k, n) = d.shape();
    if k > n {
        return Err(Error::DegreeTooLarge { k, n });
    }
    if m.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "form acts on R^{n} but basis is {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `sqrt(G(rows of D M))`.
pub fn minor_norm_matrix_form(d: &Matrix, m: &Matrix) -> Result<f64> {
    check_form(d, m)?;
    let dm = d * m;
    let rows: Vec<Vector> = dm.row_iter().map(|r| r.transpose()).collect();
    Ok(gram(&rows)?.sqrt())
}

/// `sqrt(Σ_{i₁<..<i_k} det(D ω_{i₁} .. D ω_{i_k})²)`.
pub fn minor_norm_sum_of_minors(d: &Matrix, m: &Matrix) -> Result<f64> {
    check_form(d, m)?;
    let (k, n) = d.shape();
    if n > MAX_MINOR_DIM {
        return Err(Error::InvalidArgument(format!(
            "minor enumeration supports n <= {MAX_MINOR_DIM}"
        )));
    }
    let dm = d * m;
    let mut total = 0.0;
    for idx in Combinations::new(n, k) {
        let sub = dm.select_columns(idx.iter());
        let det = if k == 0 { 1.0 } else { sub.determinant() };
        total += det * det;
    }
    if !total.is_finite() {
        return Err(Error::Overflow("minor_norm"));
    }
    Ok(total.sqrt())
}

/// Increasing index tuples `0 ≤ i₁ < .. < i_k < n`.
pub struct Combinations {
    n: usize,
    cur: Option<Vec<usize>>,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        let cur = if k <= n { Some((0..k).collect()) } else { None };
        Self { n, cur }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.cur.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                self.cur = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.cur = Some(next);
                break;
            }
        }
        Some(out)
    }
}

/// The cyclic products `I_ℓ = Πⱼ G(vⱼ, .., v_{j+ℓ-1})` (indices mod n), `ℓ = 0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSequence {
    /// `ln I_ℓ` for `ℓ = 0..=n`.
    pub log_values: Vec<f64>,
}

impl GramSequence {
    pub fn n(&self) -> usize {
        self.log_values.len() - 1
    }

    pub fn value(&self, l: usize) -> f64 {
        self.log_values[l].exp()
    }

    pub fn log_value(&self, l: usize) -> f64 {
        self.log_values[l]
    }
}

/// Periodic window `v_j, .., v_{j+l-1}`.
pub fn cyclic_window(vs: &[Vector], j: usize, l: usize) -> Vec<Vector> {
    let n = vs.len();
    (0..l).map(|i| vs[(j + i) % n].clone()).collect()
}

pub fn cyclic_gram_sequence(vs: &[Vector]) -> Result<GramSequence> {
    let n = common_dim(vs)?;
    if vs.len() != n {
        return Err(Error::WrongCount { expected: n, got: vs.len() });
    }
    let mut log_values = vec![0.0; n + 1];
    for (l, slot) in log_values.iter_mut().enumerate().skip(1) {
        let mut acc = 0.0;
        for j in 0..n {
            acc += log_gram(&cyclic_window(vs, j, l))?;
        }
        *slot = acc;
    }
    Ok(GramSequence { log_values })
}

/// Orthogonal projection of `v` onto the complement of `span(u₁..u_ℓ)`.
pub fn project_complement(span: &[Vector], v: &Vector) -> Result<Vector> {
    if span.is_empty() {
        return Ok(v.clone());
    }
    let n = common_dim(span)?;
    if v.len() != n {
        return Err(Error::DimensionMismatch("projected vector has wrong length".into()));
    }
    if span.len() > n {
        return Err(Error::DependentVectors(0.0));
    }
    let u = Matrix::from_columns(span);
    let qr = u.qr();
    let r = qr.r();
    let rel: f64 = (0..span.len())
        .map(|i| r[(i, i)].abs() / span[i].norm())
        .product();
    if !(rel > 1e-12) {
        return Err(Error::DependentVectors(rel));
    }
    let q = qr.q();
    let mut out = v - &q * (q.transpose() * v);
    // second pass restores orthogonality lost to cancellation
    out -= &q * (q.transpose() * &out);
    Ok(out)
}

/// `exp(spread · Z)` for a trace-free Gaussian `Z`; always has `det = 1`.
pub fn random_unimodular<R: Rng + ?Sized>(n: usize, spread: f64, rng: &mut R) -> UnimodularBasis {
    let mut z = Matrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal) * spread);
    let tr = z.trace() / n as f64;
    for i in 0..n {
        z[(i, i)] -= tr;
    }
    let m = z.exp();
    UnimodularBasis::normalized(m).expect("matrix exponential is invertible")
}

/// Gaussian vector with iid standard entries.
pub fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vector {
    Vector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

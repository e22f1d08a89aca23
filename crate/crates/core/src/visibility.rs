//! Fading zones and visibility of finite discrete measures.
//!
//! For `μ = Σ wᵢ δ_{yᵢ*}` the fading zone `F(μ) = {u : Σ wᵢ |u·yᵢ*| ≤ 1}` is a
//! symmetric polytope. `‖·‖_μ` is linear on each cone of the arrangement
//! `{u·yᵢ* = 0}`, so the vertices of `F` sit on the rays orthogonal to `n - 1`
//! independent atoms. Everything below is built on that vertex list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Combinations, Matrix, Vector};

/// `Σ wᵢ δ_{yᵢ*}` with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<(Vector, f64)>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<(Vector, f64)>) -> Result<Self> {
        let Some(first) = atoms.first() else {
            return Err(Error::InvalidArgument("measure needs at least one atom".into()));
        };
        let n = first.0.len();
        if n == 0 {
            return Err(Error::DimensionMismatch("atoms must have positive dimension".into()));
        }
        for (y, w) in &atoms {
            if y.len() != n {
                return Err(Error::DimensionMismatch("atoms have different dimensions".into()));
            }
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("atom weights must be positive, got {w}")));
            }
        }
        Ok(Self { atoms })
    }

    /// `Σ δ_{eᵢ}`, whose fading zone is the cross-polytope.
    pub fn cross_polytope(n: usize) -> Self {
        let atoms = (0..n)
            .map(|i| {
                let mut e = Vector::zeros(n);
                e[i] = 1.0;
                (e, 1.0)
            })
            .collect();
        Self { atoms }
    }

    /// `m` Gaussian atoms with weights uniform in `[0.2, 2]`.
    pub fn random<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Self {
        let atoms = (0..m)
            .map(|_| (crate::linalg::random_vector(n, rng), rng.random_range(0.2..2.0)))
            .collect();
        Self { atoms }
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].0.len()
    }

    pub fn atoms(&self) -> &[(Vector, f64)] {
        &self.atoms
    }

    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        Self::new(self.atoms.iter().map(|(y, w)| (y.clone(), w * lambda)).collect())
    }

    pub fn with_atom(&self, y: Vector, w: f64) -> Result<Self> {
        let mut atoms = self.atoms.clone();
        atoms.push((y, w));
        Self::new(atoms)
    }

    /// Applies `y ↦ Q y` to every atom.
    pub fn transformed(&self, q: &Matrix) -> Result<Self> {
        Self::new(self.atoms.iter().map(|(y, w)| (q * y, *w)).collect())
    }

    /// Smallest over largest singular value of the atom matrix.
    pub fn span_ratio(&self) -> f64 {
        let cols: Vec<Vector> = self.atoms.iter().map(|(y, w)| y * *w).collect();
        let m = Matrix::from_columns(&cols);
        let sv = m.singular_values();
        let n = self.dim();
        if sv.len() < n {
            return 0.0;
        }
        let max = sv.max();
        if max == 0.0 {
            return 0.0;
        }
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[n - 1] / max
    }

    pub fn spans(&self) -> bool {
        self.span_ratio() >= SPAN_TOL
    }
}

/// Relative singular value below which the atoms count as non-spanning.
pub const SPAN_TOL: f64 = 1e-8;

/// `‖u‖_μ = Σ wᵢ |u·yᵢ*|`.
pub fn mu_norm(mu: &DiscreteMeasure, u: &Vector) -> Result<f64> {
    if u.len() != mu.dim() {
        return Err(Error::DimensionMismatch(format!("vector of length {} for a measure on R^{}", u.len(), mu.dim())));
    }
    Ok(mu.atoms.iter().map(|(y, w)| w * u.dot(y).abs()).sum())
}

/// Generalized cross product: the vector `c` with `c·v = det(v, a₁, .., a_{n-1})`.
fn cross(vs: &[&Vector], n: usize) -> Vector {
    let mut m = Matrix::zeros(n, n);
    for (j, v) in vs.iter().enumerate() {
        m.set_column(j + 1, v);
    }
    Vector::from_fn(n, |i, _| {
        m.column_mut(0).fill(0.0);
        m[(i, 0)] = 1.0;
        m.determinant()
    })
}

/// Vertices of `F(μ)`, one of each `±` pair.
pub fn fading_zone_vertices(mu: &DiscreteMeasure) -> Result<Vec<Vector>> {
    if !mu.spans() {
        return Err(Error::NonSpanning);
    }
    let n = mu.dim();
    let mut out: Vec<Vector> = Vec::new();
    if n == 1 {
        let v = Vector::from_vec(vec![1.0]);
        let s = mu_norm(mu, &v)?;
        return Ok(vec![v / s]);
    }
    let ys: Vec<&Vector> = mu.atoms.iter().map(|(y, _)| y).collect();
    for idx in Combinations::new(ys.len(), n - 1) {
        let sub: Vec<&Vector> = idx.iter().map(|&i| ys[i]).collect();
        let c = cross(&sub, n);
        let scale: f64 = sub.iter().map(|v| v.norm()).product();
        if c.norm() <= 1e-10 * scale {
            continue;
        }
        let s = mu_norm(mu, &c)?;
        let v = c / s;
        let dup = out.iter().any(|o| (o - &v).norm() <= 1e-9 * v.norm() || (o + &v).norm() <= 1e-9 * v.norm());
        if !dup {
            out.push(v);
        }
    }
    Ok(out)
}

/// Volume of `F(μ)` and the visibility `1/|F|`.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingVolume {
    /// `+∞` when the atoms do not span.
    pub volume: f64,
    pub visibility: f64,
    pub exact: bool,
    /// Monte Carlo standard error, zero when exact.
    pub std_error: f64,
    pub degenerate: bool,
}

fn shoelace(vertices: &[Vector]) -> f64 {
    let mut pts: Vec<(f64, f64)> = vertices.iter().flat_map(|v| [(v[0], v[1]), (-v[0], -v[1])]).collect();
    pts.sort_by(|a, b| a.1.atan2(a.0).total_cmp(&b.1.atan2(b.0)));
    let m = pts.len();
    (0..m).map(|i| {
        let (a, b) = (pts[i], pts[(i + 1) % m]);
        a.0 * b.1 - a.1 * b.0
    })
    .sum::<f64>()
        / 2.0
}

/// Sum of pyramid volumes over the facets of the hull of `±vertices` in `ℝ³`.
fn hull_volume_3d(vertices: &[Vector]) -> f64 {
    let pts: Vec<Vector> = vertices.iter().flat_map(|v| [v.clone(), -v]).collect();
    let scale = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let tol = 1e-9 * scale;
    // facets as planes a·v = 1 (the origin is interior)
    let mut planes: Vec<Vector> = Vec::new();
    let m = pts.len();
    for i in 0..m {
        for j in i + 1..m {
            for k in j + 1..m {
                let nrm = (&pts[j] - &pts[i]).cross(&(&pts[k] - &pts[i]));
                if nrm.norm() <= 1e-12 * scale * scale {
                    continue;
                }
                let h = nrm.dot(&pts[i]);
                if h.abs() <= tol * nrm.norm() {
                    continue;
                }
                let a = nrm / h;
                if pts.iter().all(|p| a.dot(p) <= 1.0 + 1e-9) && !planes.iter().any(|q| (q - &a).norm() <= 1e-9 * a.norm()) {
                    planes.push(a);
                }
            }
        }
    }
    let mut vol = 0.0;
    for a in &planes {
        let on: Vec<&Vector> = pts.iter().filter(|p| (a.dot(p) - 1.0).abs() <= 1e-9).collect();
        let centre = on.iter().fold(Vector::zeros(3), |s, p| s + *p) / on.len() as f64;
        let e1 = (on[0] - &centre).normalize();
        let e2 = a.normalize().cross(&e1);
        let mut ring: Vec<(f64, &Vector)> = on
            .iter()
            .map(|p| {
                let d = *p - &centre;
                (d.dot(&e2).atan2(d.dot(&e1)), *p)
            })
            .collect();
        ring.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut area = Vector::zeros(3);
        for i in 0..ring.len() {
            let (p, q) = (ring[i].1 - &centre, ring[(i + 1) % ring.len()].1 - &centre);
            area += p.cross(&q);
        }
        vol += area.norm() / 2.0 / a.norm() / 3.0;
    }
    vol
}

/// Exact volume for `n ≤ 3`, Monte Carlo in the bounding box otherwise.
pub fn fading_zone_volume(mu: &DiscreteMeasure, mc_samples: usize, seed: u64) -> Result<FadingVolume> {
    if !mu.spans() {
        return Ok(FadingVolume { volume: f64::INFINITY, visibility: 0.0, exact: true, std_error: 0.0, degenerate: true });
    }
    let n = mu.dim();
    let vertices = fading_zone_vertices(mu)?;
    let (volume, exact, std_error) = match n {
        1 => (2.0 * vertices[0][0].abs(), true, 0.0),
        2 => (shoelace(&vertices), true, 0.0),
        3 => (hull_volume_3d(&vertices), true, 0.0),
        _ => {
            let (v, e) = monte_carlo_volume(mu, &vertices, mc_samples, seed)?;
            (v, false, e)
        }
    };
    Ok(FadingVolume { volume, visibility: 1.0 / volume, exact, std_error, degenerate: false })
}

fn monte_carlo_volume(mu: &DiscreteMeasure, vertices: &[Vector], samples: usize, seed: u64) -> Result<(f64, f64)> {
    let n = mu.dim();
    if samples == 0 {
        return Err(Error::InvalidArgument("Monte Carlo needs samples".into()));
    }
    let half: Vec<f64> = (0..n).map(|i| vertices.iter().map(|v| v[i].abs()).fold(0.0, f64::max)).collect();
    let boxvol: f64 = half.iter().map(|h| 2.0 * h).product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let u = Vector::from_fn(n, |i, _| rng.random_range(-half[i]..=half[i]));
        if mu_norm(mu, &u)? <= 1.0 {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok((boxvol * p, boxvol * (p * (1.0 - p) / samples as f64).sqrt()))
}

/// Monte Carlo volume for any `n`, for cross-checks of the exact routes.
pub fn fading_zone_volume_mc(mu: &DiscreteMeasure, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let vertices = fading_zone_vertices(mu)?;
    monte_carlo_volume(mu, &vertices, samples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremalConfig {
    pub multistarts: usize,
    pub seed: u64,
    pub mc_samples: usize,
}

impl Default for ExtremalConfig {
    fn default() -> Self {
        Self { multistarts: 16, seed: 0x715, mc_samples: 200_000 }
    }
}

/// A tuple maximizing `|det(u₁..u_n)|` over `F(μ)ⁿ` coordinate by coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalBasisResult {
    /// Columns `u₁..u_n`.
    pub u: Matrix,
    /// Columns `uᵢ*` with `uᵢ*·u_j = δᵢⱼ`.
    pub u_dual: Matrix,
    pub omega: Matrix,
    pub omega_dual: Matrix,
    pub det_u: f64,
    pub fading: FadingVolume,
    /// `2ⁿ|det u|/n! ≤ |F| ≤ 2ⁿ|det u|`.
    pub sandwich_holds: bool,
    pub start_index: usize,
}

impl ExtremalBasisResult {
    /// The visibility bounds `2^{-n}|det u*| ≤ Vis ≤ n! 2^{-n} |det u*|`.
    pub fn visibility_bounds(&self) -> (f64, f64) {
        let n = self.u.nrows();
        let d = 1.0 / self.det_u.abs();
        let f = factorial(n);
        (d / 2f64.powi(n as i32), f * d / 2f64.powi(n as i32))
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn det_with(u: &Matrix, i: usize, v: &Vector) -> f64 {
    let mut m = u.clone();
    m.set_column(i, v);
    m.determinant()
}

fn climb(u: &mut Matrix, vertices: &[Vector]) -> f64 {
    let n = u.ncols();
    let mut best = u.determinant().abs();
    for _ in 0..200 {
        let mut improved = false;
        for i in 0..n {
            let mut arg = None;
            for (vi, v) in vertices.iter().enumerate() {
                let d = det_with(u, i, v).abs();
                if d > best * (1.0 + 1e-12) {
                    best = d;
                    arg = Some(vi);
                }
            }
            if let Some(vi) = arg {
                u.set_column(i, &vertices[vi]);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    best
}

/// Best extremal tuple over the multistarts.
///
/// The volume sandwich serves as an a posteriori certificate: when it fails,
/// the search is repeated twice with four times as many starts.
pub fn extremal_basis(mu: &DiscreteMeasure, cfg: &ExtremalConfig) -> Result<ExtremalBasisResult> {
    let mut r = extremal_search(mu, cfg)?;
    let mut cfg = *cfg;
    for _ in 0..2 {
        if r.sandwich_holds {
            break;
        }
        cfg.multistarts *= 4;
        cfg.seed = cfg.seed.wrapping_add(1);
        r = extremal_search(mu, &cfg)?;
    }
    Ok(r)
}

fn extremal_search(mu: &DiscreteMeasure, cfg: &ExtremalConfig) -> Result<ExtremalBasisResult> {
    let n = mu.dim();
    let vertices = fading_zone_vertices(mu)?;
    let starts = cfg.multistarts.max(1);
    let run = |s: usize| -> (f64, Matrix) {
        let mut u = Matrix::zeros(n, n);
        if s == 0 {
            // greedy: each column the vertex farthest from the span of the previous ones
            let mut chosen: Vec<Vector> = Vec::new();
            for i in 0..n {
                let pick = vertices
                    .iter()
                    .max_by(|a, b| {
                        let pa = crate::linalg::project_complement(&chosen, a).map(|v| v.norm()).unwrap_or(0.0);
                        let pb = crate::linalg::project_complement(&chosen, b).map(|v| v.norm()).unwrap_or(0.0);
                        pa.total_cmp(&pb)
                    })
                    .expect("vertices exist for spanning measures");
                u.set_column(i, pick);
                chosen.push(pick.clone());
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s as u64);
            for _ in 0..50 {
                for i in 0..n {
                    let v = &vertices[rng.random_range(0..vertices.len())];
                    u.set_column(i, v);
                }
                if u.determinant().abs() > 0.0 {
                    break;
                }
            }
        }
        let d = climb(&mut u, &vertices);
        (d, u)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<(f64, Matrix)> = {
        use rayon::prelude::*;
        (0..starts).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(f64, Matrix)> = (0..starts).map(run).collect();
    let mut start_index = 0;
    for (i, r) in results.iter().enumerate() {
        if r.0 > results[start_index].0 * (1.0 + 1e-10) {
            start_index = i;
        }
    }
    let (det_abs, u) = results[start_index].clone();
    if !(det_abs > 0.0) {
        return Err(Error::NonSpanning);
    }
    let det_u = u.determinant();
    let inv = u.clone().try_inverse().ok_or(Error::NonSpanning)?;
    let u_dual = inv.transpose();
    let s = det_abs.powf(1.0 / n as f64);
    let omega = &u / s;
    let omega_dual = &u_dual * s;
    let fading = fading_zone_volume(mu, cfg.mc_samples, cfg.seed)?;
    let scale = 2f64.powi(n as i32) * det_abs;
    let slack = if fading.exact { 1e-9 * fading.volume } else { 3.0 * fading.std_error };
    let sandwich_holds = scale / factorial(n) <= fading.volume + slack && fading.volume <= scale + slack;
    Ok(ExtremalBasisResult { u, u_dual, omega, omega_dual, det_u, fading, sandwich_holds, start_index })
}

/// The three terms of the norm sandwich at one `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichSample {
    pub lower: f64,
    pub norm: f64,
    pub upper: f64,
    pub holds: bool,
}

/// `(2/(n!)^{1/n}) Vis^{1/n} maxᵢ|ωᵢ*·v| ≤ ‖v‖_μ ≤ 2 Vis^{1/n} Σᵢ|ωᵢ*·v|`.
pub fn sandwich_check(mu: &DiscreteMeasure, r: &ExtremalBasisResult, vs: &[Vector]) -> Result<Vec<SandwichSample>> {
    let n = mu.dim() as f64;
    let vis_root = r.fading.visibility.powf(1.0 / n);
    vs.iter()
        .map(|v| {
            let c: Vec<f64> = r.omega_dual.column_iter().map(|w| w.dot(v).abs()).collect();
            let lower = 2.0 / factorial(mu.dim()).powf(1.0 / n) * vis_root * c.iter().copied().fold(0.0, f64::max);
            let upper = 2.0 * vis_root * c.iter().sum::<f64>();
            let norm = mu_norm(mu, v)?;
            let tol = 1e-9 * (norm + upper) + 1e-15;
            Ok(SandwichSample { lower, norm, upper, holds: lower <= norm + tol && norm <= upper + tol })
        })
        .collect()
}

/// An alternating `k`-form, by its coefficients on `dx^{i₁} ∧ .. ∧ dx^{i_k}`,
/// `i₁ < .. < i_k`, in [`Combinations`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct KForm {
    pub n: usize,
    pub k: usize,
    pub coeffs: Vec<f64>,
}

impl KForm {
    pub fn new(n: usize, k: usize, coeffs: Vec<f64>) -> Result<Self> {
        let count = Combinations::new(n, k).count();
        if coeffs.len() != count {
            return Err(Error::WrongCount { expected: count, got: coeffs.len() });
        }
        Ok(Self { n, k, coeffs })
    }

    /// `dx^{i}` as a 1-form.
    pub fn coordinate(n: usize, i: usize) -> Self {
        let mut c = vec![0.0; n];
        c[i] = 1.0;
        Self { n, k: 1, coeffs: c }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Self {
        let count = Combinations::new(n, k).count();
        let coeffs = crate::linalg::random_vector(count, rng).iter().copied().collect();
        Self { n, k, coeffs }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { coeffs: self.coeffs.iter().map(|v| v * c).collect(), ..self.clone() }
    }

    /// `A*(v₁, .., v_k)`.
    pub fn eval(&self, vs: &[Vector]) -> f64 {
        Combinations::new(self.n, self.k)
            .zip(&self.coeffs)
            .map(|(idx, a)| {
                if *a == 0.0 {
                    return 0.0;
                }
                let m = Matrix::from_fn(self.k, self.k, |r, c| vs[c][idx[r]]);
                a * m.determinant()
            })
            .sum()
    }

    /// `(A* ∧ β₁ ∧ .. ∧ β_{n-k})(e₁, .., e_n)` for 1-forms `βⱼ` given as vectors.
    pub fn wedge_top(&self, betas: &[&Vector]) -> f64 {
        let n = self.n;
        Combinations::new(n, self.k)
            .zip(&self.coeffs)
            .map(|(idx, a)| {
                if *a == 0.0 {
                    return 0.0;
                }
                let rest: Vec<usize> = (0..n).filter(|i| !idx.contains(i)).collect();
                let m = Matrix::from_fn(rest.len(), rest.len(), |r, c| betas[c][rest[r]]);
                a * permutation_sign(&idx, &rest) * m.determinant()
            })
            .sum()
    }
}

/// Sign of the permutation listing `first` then `second`.
fn permutation_sign(first: &[usize], second: &[usize]) -> f64 {
    let seq: Vec<usize> = first.iter().chain(second).copied().collect();
    let mut inversions = 0;
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            if seq[i] > seq[j] {
                inversions += 1;
            }
        }
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WedgeReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `(2/n)^{n-k} Vis^{(n-k)/n} max |A*(ω_{i₁}, .., ω_{i_k})|
/// ≤ Σ_{atom tuples} w.. |A* ∧ y₁* ∧ .. ∧ y_{n-k}*|`.
pub fn wedge_lower_bound_check(mu: &DiscreteMeasure, form: &KForm, r: &ExtremalBasisResult) -> Result<WedgeReport> {
    let n = mu.dim();
    if form.n != n {
        return Err(Error::DimensionMismatch("form and measure dimensions differ".into()));
    }
    if form.k < 1 || form.k >= n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= n - 1, got k = {}", form.k)));
    }
    let m = n - form.k;
    let atoms = mu.atoms();
    let mut rhs = 0.0;
    let mut idx = vec![0usize; m];
    loop {
        let betas: Vec<&Vector> = idx.iter().map(|&i| &atoms[i].0).collect();
        let w: f64 = idx.iter().map(|&i| atoms[i].1).product();
        rhs += w * form.wedge_top(&betas).abs();
        // odometer over all m-tuples of atoms
        let mut pos = m;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < atoms.len() {
                break;
            }
            idx[pos] = 0;
        }
        if idx.iter().all(|&i| i == 0) {
            break;
        }
    }
    let omegas: Vec<Vector> = r.omega.column_iter().map(|c| c.into_owned()).collect();
    let best = Combinations::new(n, form.k)
        .map(|sel| {
            let vs: Vec<Vector> = sel.iter().map(|&i| omegas[i].clone()).collect();
            form.eval(&vs).abs()
        })
        .fold(0.0, f64::max);
    let lhs = (2.0 / n as f64).powi(m as i32) * r.fading.visibility.powf(m as f64 / n as f64) * best;
    Ok(WedgeReport { lhs, rhs, holds: lhs <= rhs * (1.0 + 1e-9) + 1e-15 })
}

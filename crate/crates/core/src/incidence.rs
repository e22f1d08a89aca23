//! Slices `Σ_x = {y : π(x, y) = 0}`, their charts and coarea integrals.
//!
//! The coarea measure on a slice is `dσ = dH / ‖d_yπ‖`, where `H` is Hausdorff
//! measure of dimension `n' - k` and `‖d_yπ‖` the `k`-volume of the rows of
//! `D_yπ`. Slices are integrated through explicit charts only.

use std::f64::consts::PI;

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::linalg::{gram, minor_norm, Matrix, UnimodularBasis, Vector};
use crate::poly::DefiningMap;
use crate::quad;

/// `x ↦ A x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    pub fn new(matrix: Matrix, offset: Vector) -> Result<Self> {
        if matrix.nrows() != offset.len() {
            return Err(Error::DimensionMismatch("affine map offset has wrong length".into()));
        }
        Ok(Self { matrix, offset })
    }

    pub fn identity(n: usize) -> Self {
        Self { matrix: Matrix::identity(n, n), offset: Vector::zeros(n) }
    }

    pub fn constant(offset: Vector, n: usize) -> Self {
        Self { matrix: Matrix::zeros(offset.len(), n), offset }
    }

    /// `x ↦ (x_{i₁}, .., x_{i_m})`.
    pub fn select(indices: &[usize], n: usize) -> Self {
        let mut a = Matrix::zeros(indices.len(), n);
        for (r, &i) in indices.iter().enumerate() {
            a[(r, i)] = 1.0;
        }
        Self { matrix: a, offset: Vector::zeros(indices.len()) }
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eval(&self, x: &[f64]) -> Vector {
        &self.matrix * Vector::from_column_slice(x) + &self.offset
    }

    /// `x ↦ A (x₀ + M (x - x₀)) + b`.
    pub fn reparametrize_x(&self, x0: &Vector, m: &Matrix) -> AffineMap {
        let am = &self.matrix * m;
        let offset = &self.matrix * x0 - &am * x0 + &self.offset;
        AffineMap { matrix: am, offset }
    }
}

/// Parameter domain of a graph chart, centred at the chart origin.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Box { half_widths: Vec<f64> },
    Ball { radius: f64 },
    /// All of parameter space; integrated over doubling shells starting from
    /// a ball of the given radius, with a tail estimate.
    Unbounded { radius: f64 },
}

/// How to parametrize the slice `Σ_x` for each `x`.
#[derive(Debug, Clone, PartialEq)]
pub enum ChartSpec {
    /// `Σ_x` is a single point (`k = n'`), found by Newton from `guess(x)`.
    Point { guess: AffineMap },
    /// `Σ_x` is a graph over the free `y` coordinates; coordinates in `solved`
    /// are found by Newton. Free coordinates are `origin(x) + t`, `t ∈ domain`.
    Graph { solved: Vec<usize>, origin: AffineMap, guess: AffineMap, domain: Domain },
    /// Round sphere `|y - center(x)| = radius` in hyperspherical angles.
    Sphere { center: AffineMap, radius: f64 },
}

impl ChartSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ChartSpec::Point { .. } => "point",
            ChartSpec::Graph { .. } => "graph",
            ChartSpec::Sphere { .. } => "sphere",
        }
    }

    /// Point slice of `y = A x + b`.
    pub fn linear_point(a: &Matrix, b: Option<&Vector>) -> Self {
        let offset = b.cloned().unwrap_or_else(|| Vector::zeros(a.nrows()));
        ChartSpec::Point { guess: AffineMap { matrix: a.clone(), offset } }
    }

    /// Chart of factor `j` of the cyclic paraboloid system: graph over
    /// `y¹..y^{ℓ-1}` centred at `(x^{j+1}, .., x^{j+ℓ-1})`.
    pub fn paraboloid(n: usize, l: usize, j: usize, radius: f64) -> Self {
        let idx: Vec<usize> = (0..l - 1).map(|i| (j + i) % n).collect();
        ChartSpec::Graph {
            solved: vec![l - 1],
            origin: AffineMap::select(&idx, n),
            guess: AffineMap::constant(Vector::zeros(1), n),
            domain: Domain::Unbounded { radius },
        }
    }

    pub fn sphere(n: usize, radius: f64) -> Self {
        ChartSpec::Sphere { center: AffineMap::identity(n), radius }
    }

    pub fn param_dim(&self, n_y: usize) -> usize {
        match self {
            ChartSpec::Point { .. } => 0,
            ChartSpec::Graph { solved, .. } => n_y - solved.len(),
            ChartSpec::Sphere { .. } => n_y - 1,
        }
    }

    /// Checks dimensions against a defining map.
    pub fn validate(&self, map: &dyn DefiningMap) -> Result<()> {
        let (n, n_y, k) = (map.n(), map.n_y(), map.k());
        let bad = |msg: String| Err(Error::DimensionMismatch(msg));
        match self {
            ChartSpec::Point { guess } => {
                if k != n_y {
                    return bad(format!("point chart needs k = n' but k = {k}, n' = {n_y}"));
                }
                if guess.in_dim() != n || guess.out_dim() != n_y {
                    return bad("point chart guess has wrong shape".into());
                }
            }
            ChartSpec::Graph { solved, origin, guess, domain } => {
                if solved.len() != k || solved.iter().any(|&i| i >= n_y) {
                    return bad(format!("graph chart must solve {k} distinct coordinates below {n_y}"));
                }
                let mut s = solved.clone();
                s.sort_unstable();
                s.dedup();
                if s.len() != k {
                    return bad("graph chart solved coordinates repeat".into());
                }
                let d = n_y - k;
                if origin.in_dim() != n || origin.out_dim() != d {
                    return bad("graph chart origin has wrong shape".into());
                }
                if guess.in_dim() != n || guess.out_dim() != k {
                    return bad("graph chart guess has wrong shape".into());
                }
                match domain {
                    Domain::Box { half_widths } if half_widths.len() != d => {
                        return bad("box domain has wrong dimension".into())
                    }
                    Domain::Box { half_widths } if half_widths.iter().any(|h| !(*h > 0.0)) => {
                        return Err(Error::InvalidArgument("box half widths must be positive".into()))
                    }
                    Domain::Ball { radius } | Domain::Unbounded { radius } if !(*radius > 0.0) => {
                        return Err(Error::InvalidArgument("domain radius must be positive".into()))
                    }
                    _ => {}
                }
            }
            ChartSpec::Sphere { center, radius } => {
                if k != 1 || n_y < 2 {
                    return bad("sphere chart needs k = 1 and n' >= 2".into());
                }
                if center.in_dim() != n || center.out_dim() != n_y {
                    return bad("sphere chart center has wrong shape".into());
                }
                if !(*radius > 0.0) {
                    return Err(Error::InvalidArgument("sphere radius must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// The chart of `π_M(x, y) = π(x₀ + M(x - x₀), y)`.
    pub fn reparametrize_x(&self, x0: &Vector, m: &Matrix) -> Self {
        match self {
            ChartSpec::Point { guess } => ChartSpec::Point { guess: guess.reparametrize_x(x0, m) },
            ChartSpec::Graph { solved, origin, guess, domain } => ChartSpec::Graph {
                solved: solved.clone(),
                origin: origin.reparametrize_x(x0, m),
                guess: guess.reparametrize_x(x0, m),
                domain: domain.clone(),
            },
            ChartSpec::Sphere { center, radius } => {
                ChartSpec::Sphere { center: center.reparametrize_x(x0, m), radius: *radius }
            }
        }
    }

    /// The same chart with a different graph domain (no effect on other kinds).
    pub fn with_domain(&self, domain: Domain) -> Self {
        match self {
            ChartSpec::Graph { solved, origin, guess, .. } => ChartSpec::Graph {
                solved: solved.clone(),
                origin: origin.clone(),
                guess: guess.clone(),
                domain,
            },
            other => other.clone(),
        }
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, ChartSpec::Graph { domain: Domain::Unbounded { .. }, .. })
    }

    pub fn at<'a>(&'a self, map: &'a dyn DefiningMap, x: &[f64]) -> Result<SliceChart<'a>> {
        self.validate(map)?;
        if x.len() != map.n() {
            return Err(Error::DimensionMismatch(format!("x has length {}, expected {}", x.len(), map.n())));
        }
        Ok(SliceChart { spec: self, map, x: x.to_vec() })
    }
}

/// Quadrature settings for slice integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureConfig {
    /// Gauss nodes per panel (and per angle for spheres).
    pub nodes: usize,
    pub panels: usize,
    /// Maximum number of doubling shells for unbounded domains.
    pub max_doublings: usize,
    /// Assumed decay exponent `α` of shell integrals `~ r^{-α}`, if known.
    pub tail_exponent_hint: Option<f64>,
    /// Relative size of the tail estimate at which shell summation stops.
    pub rel_tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { nodes: 16, panels: 4, max_doublings: 48, tail_exponent_hint: None, rel_tol: 1e-10 }
    }
}

/// Shell-to-shell growth ratio at or above which an integral is declared infinite.
pub const DIVERGENCE_RATIO: f64 = 0.97;

/// A node on the slice with everything integrands need.
#[derive(Debug, Clone)]
pub struct SlicePoint {
    pub t: Vec<f64>,
    pub y: Vector,
    /// `D_xπ(x, y)`, `k × n`.
    pub dx: Matrix,
    /// `D_yπ(x, y)`, `k × n'`.
    pub dy: Matrix,
    /// `‖d_yπ‖`.
    pub dy_norm: f64,
    /// Area element `sqrt(det(∂y/∂tᵀ ∂y/∂t))` of the chart.
    pub area: f64,
}

impl SlicePoint {
    /// Density of the coarea measure with respect to `dt`.
    pub fn density(&self) -> f64 {
        self.area / self.dy_norm
    }
}

/// A chart evaluated at a fixed `x`.
#[derive(Debug, Clone)]
pub struct SliceChart<'a> {
    spec: &'a ChartSpec,
    map: &'a dyn DefiningMap,
    x: Vec<f64>,
}

fn solve_dense(a: &Matrix, b: &Vector) -> Option<Vector> {
    a.clone().lu().solve(b)
}

/// Hyperspherical coordinates on `S^d ⊂ ℝ^{d+1}` and their derivatives.
fn hypersphere(t: &[f64]) -> (Vector, Matrix) {
    let d = t.len();
    let comp = |i: usize, diff: Option<usize>| -> f64 {
        // u_i = Π_{j<i} sin t_j · (cos t_i if i < d)
        let mut v = 1.0;
        for (j, &tj) in t.iter().enumerate().take(i.min(d)) {
            v *= if diff == Some(j) { tj.cos() } else { tj.sin() };
        }
        if i < d {
            v *= if diff == Some(i) { -t[i].sin() } else { t[i].cos() };
        } else if diff.is_some_and(|m| m >= d) {
            v = 0.0;
        }
        if diff.is_some_and(|m| m > i) {
            0.0
        } else {
            v
        }
    };
    let u = Vector::from_fn(d + 1, |i, _| comp(i, None));
    let du = Matrix::from_fn(d + 1, d, |i, m| comp(i, Some(m)));
    (u, du)
}

impl<'a> SliceChart<'a> {
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn param_dim(&self) -> usize {
        self.spec.param_dim(self.map.n_y())
    }

    fn newton(&self, y: &mut Vector, idx: &[usize]) -> Result<()> {
        let fail = || Error::NewtonFailed { x: self.x.clone() };
        let mut r = self.map.eval(&self.x, y.as_slice());
        let mut rn = r.norm();
        for _ in 0..80 {
            let (_, dy) = self.map.jacobians(&self.x, y.as_slice());
            let scale = 1.0 + dy.norm() * (1.0 + y.norm());
            if rn <= 1e-14 * scale {
                return Ok(());
            }
            let j = dy.select_columns(idx.iter());
            let step = solve_dense(&j, &r).ok_or_else(fail)?;
            let mut lambda = 1.0;
            loop {
                let mut trial = y.clone();
                for (c, &i) in idx.iter().enumerate() {
                    trial[i] -= lambda * step[c];
                }
                let tr = self.map.eval(&self.x, trial.as_slice());
                if tr.norm() < rn || lambda < 1e-9 {
                    let small = lambda * step.norm() <= 1e-15 * (1.0 + y.norm());
                    *y = trial;
                    r = tr;
                    rn = r.norm();
                    if small {
                        return if rn <= 1e-8 * scale { Ok(()) } else { Err(fail()) };
                    }
                    break;
                }
                lambda *= 0.5;
            }
        }
        let (_, dy) = self.map.jacobians(&self.x, y.as_slice());
        if rn <= 1e-10 * (1.0 + dy.norm() * (1.0 + y.norm())) {
            Ok(())
        } else {
            Err(fail())
        }
    }

    fn finish(&self, t: Vec<f64>, y: Vector, area: f64) -> Result<SlicePoint> {
        let (dx, dy) = self.map.jacobians(&self.x, y.as_slice());
        let rows: Vec<Vector> = dy.row_iter().map(|r| r.transpose()).collect();
        let dy_norm = gram(&rows)?.sqrt();
        let res = self.map.eval(&self.x, y.as_slice()).norm();
        if res > 1e-6 * dy_norm.max(1e-300) * (1.0 + y.norm()) {
            return Err(Error::ChartInconsistent { residual: res / dy_norm.max(1e-300), x: self.x.clone() });
        }
        if dy_norm < 1e-12 {
            return Err(Error::DegenerateSlice { norm: dy_norm, x: self.x.clone(), y: y.as_slice().to_vec() });
        }
        Ok(SlicePoint { t, y, dx, dy, dy_norm, area })
    }

    /// The slice point with parameter `t`.
    pub fn point(&self, t: &[f64]) -> Result<SlicePoint> {
        let n_y = self.map.n_y();
        match self.spec {
            ChartSpec::Point { guess } => {
                let mut y = guess.eval(&self.x);
                let idx: Vec<usize> = (0..n_y).collect();
                self.newton(&mut y, &idx)?;
                self.finish(Vec::new(), y, 1.0)
            }
            ChartSpec::Graph { solved, origin, guess, .. } => {
                let free: Vec<usize> = (0..n_y).filter(|i| !solved.contains(i)).collect();
                let o = origin.eval(&self.x);
                let g = guess.eval(&self.x);
                let mut y = Vector::zeros(n_y);
                for (c, &i) in free.iter().enumerate() {
                    y[i] = o[c] + t[c];
                }
                for (c, &i) in solved.iter().enumerate() {
                    y[i] = g[c];
                }
                self.newton(&mut y, solved)?;
                // implicit function theorem: ∂y_s/∂t = -(D_sπ)⁻¹ D_fπ
                let (_, dy) = self.map.jacobians(&self.x, y.as_slice());
                let ds = dy.select_columns(solved.iter());
                let df = dy.select_columns(free.iter());
                let lu = ds.lu();
                let sol = lu.solve(&df).ok_or_else(|| Error::DegenerateSlice {
                    norm: 0.0,
                    x: self.x.clone(),
                    y: y.as_slice().to_vec(),
                })?;
                let mut jac = Matrix::zeros(n_y, free.len());
                for (c, &i) in free.iter().enumerate() {
                    jac[(i, c)] = 1.0;
                }
                for (r, &i) in solved.iter().enumerate() {
                    for c in 0..free.len() {
                        jac[(i, c)] = -sol[(r, c)];
                    }
                }
                let area = (jac.transpose() * &jac).determinant().max(0.0).sqrt();
                self.finish(t.to_vec(), y, area)
            }
            ChartSpec::Sphere { center, radius } => {
                let (u, du) = hypersphere(t);
                let y = center.eval(&self.x) + u * *radius;
                let j = du * *radius;
                let area = (j.transpose() * &j).determinant().max(0.0).sqrt();
                self.finish(t.to_vec(), y, area)
            }
        }
    }

    /// Point of the tube around the slice: `t` along the slice, `z ∈ ℝᵏ`
    /// transversal. Returns `y` and `|det ∂y/∂(t, z)|`.
    pub fn tube_point(&self, base: &SlicePoint, z: &[f64]) -> Result<(Vector, f64)> {
        match self.spec {
            ChartSpec::Point { .. } => Ok((&base.y + Vector::from_column_slice(z), 1.0)),
            ChartSpec::Graph { solved, .. } => {
                let mut y = base.y.clone();
                for (c, &i) in solved.iter().enumerate() {
                    y[i] += z[c];
                }
                // (t, z) ↦ y is unipotent in these coordinates
                Ok((y, 1.0))
            }
            ChartSpec::Sphere { center, radius } => {
                let c = center.eval(&self.x);
                let rr = radius + z[0];
                let u = (&base.y - &c) / *radius;
                let d = self.param_dim() as i32;
                Ok((c + u * rr, base.area * (rr / radius).powi(d)))
            }
        }
    }

    /// Quadrature nodes of shell `i` with weights in `dt`, or `None` past the
    /// last shell. Finite domains have a single shell.
    pub fn shell_nodes(&self, i: usize, m: usize, panels: usize) -> Option<Vec<(Vec<f64>, f64)>> {
        match self.spec {
            ChartSpec::Point { .. } => (i == 0).then(|| vec![(Vec::new(), 1.0)]),
            ChartSpec::Sphere { .. } => {
                if i > 0 {
                    return None;
                }
                let d = self.param_dim();
                let mut axes: Vec<Vec<(f64, f64)>> = (0..d - 1).map(|_| quad::composite(0.0, PI, m, 2)).collect();
                axes.push(quad::periodic(0.0, 2.0 * PI, 2 * m * panels.max(1)));
                Some(quad::tensor(&axes))
            }
            ChartSpec::Graph { domain, .. } => {
                let d = self.param_dim();
                match domain {
                    Domain::Box { half_widths } => (i == 0).then(|| {
                        let axes: Vec<Vec<(f64, f64)>> =
                            half_widths.iter().map(|h| quad::composite(-h, *h, m, panels)).collect();
                        quad::tensor(&axes)
                    }),
                    Domain::Ball { radius } => (i == 0).then(|| quad::shell_rule(d, 0.0, *radius, m, panels)),
                    Domain::Unbounded { radius } => {
                        if d == 0 {
                            return (i == 0).then(|| vec![(Vec::new(), 1.0)]);
                        }
                        Some(if i == 0 {
                            quad::shell_rule(d, 0.0, *radius, m, panels)
                        } else {
                            let a = radius * 2f64.powi(i as i32 - 1);
                            quad::shell_rule(d, a, 2.0 * a, m, panels)
                        })
                    }
                }
            }
        }
    }

    /// Slice points of shell `i` with coarea weights (quadrature weight times density).
    pub fn shell_points(&self, i: usize, m: usize, panels: usize) -> Result<Option<Vec<(SlicePoint, f64)>>> {
        let Some(nodes) = self.shell_nodes(i, m, panels) else {
            return Ok(None);
        };
        let mut out = Vec::with_capacity(nodes.len());
        for (t, w) in nodes {
            let p = self.point(&t)?;
            let wt = w * p.density();
            out.push((p, wt));
        }
        Ok(Some(out))
    }
}

/// Result of a slice integral.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceIntegral {
    pub value: f64,
    /// Difference to a half-resolution rule plus the tail estimate.
    pub error: f64,
    /// Shell integrals kept growing under domain doubling.
    pub infinite: bool,
    pub shells: usize,
}

/// Summation over doubling shells with growth detection and a tail estimate.
#[derive(Debug, Clone)]
pub struct ShellSum {
    pub total: f64,
    pub tail: f64,
    pub infinite: bool,
    pub done: bool,
    pub shells: usize,
    prev: Option<f64>,
    prev_ratio: Option<f64>,
    zero_run: usize,
    grow_run: usize,
}

impl ShellSum {
    pub fn new() -> Self {
        Self {
            total: 0.0,
            tail: 0.0,
            infinite: false,
            done: false,
            shells: 0,
            prev: None,
            prev_ratio: None,
            zero_run: 0,
            grow_run: 0,
        }
    }

    /// Adds shell `s` (nonnegative) and updates the stopping state.
    pub fn push(&mut self, s: f64, cfg: &QuadratureConfig) {
        self.shells += 1;
        self.total += s;
        if !s.is_finite() {
            self.infinite = true;
            self.done = true;
            return;
        }
        let Some(prev) = self.prev else {
            self.prev = Some(s);
            return;
        };
        if s == 0.0 {
            self.zero_run += 1;
            self.tail = 0.0;
            if self.total > 0.0 && self.zero_run >= 3 {
                self.done = true;
            }
            self.prev = Some(s);
            return;
        }
        self.zero_run = 0;
        let ratio = if prev > 0.0 { s / prev } else { f64::INFINITY };
        if ratio >= DIVERGENCE_RATIO {
            self.grow_run += 1;
        } else {
            self.grow_run = 0;
        }
        if self.grow_run >= 4 && self.shells >= 7 {
            self.infinite = true;
            self.done = true;
            return;
        }
        let q = match cfg.tail_exponent_hint {
            Some(a) if a > 0.0 => 2f64.powf(-a),
            _ => ratio,
        };
        self.tail = if q < 1.0 { s * q / (1.0 - q) } else { f64::INFINITY };
        let stable = self.prev_ratio.is_some_and(|r| (r - ratio).abs() <= 1e-3 * ratio);
        if self.tail <= cfg.rel_tol * self.total || (stable && self.tail <= 1e-3 * self.total) {
            self.done = true;
        }
        self.prev = Some(s);
        self.prev_ratio = Some(ratio);
    }

    /// Called when shells ran out: decides between a finite value and `+∞`.
    pub fn finish(&mut self) {
        if !self.done {
            if self.grow_run > 0 || !self.tail.is_finite() {
                self.infinite = true;
            }
            self.done = true;
        }
    }

    pub fn value(&self) -> f64 {
        if self.infinite {
            f64::INFINITY
        } else {
            self.total + self.tail
        }
    }
}

impl Default for ShellSum {
    fn default() -> Self {
        Self::new()
    }
}

fn integrate_once<F>(chart: &SliceChart, f: &mut F, m: usize, cfg: &QuadratureConfig) -> Result<ShellSum>
where
    F: FnMut(&SlicePoint) -> f64,
{
    let mut sum = ShellSum::new();
    let limit = if chart.spec.is_unbounded() { cfg.max_doublings + 1 } else { 1 };
    for i in 0..limit {
        let Some(points) = chart.shell_points(i, m, cfg.panels)? else { break };
        let s: f64 = points.iter().map(|(p, w)| w * f(p)).sum();
        sum.push(s, cfg);
        if sum.done {
            break;
        }
    }
    if chart.spec.is_unbounded() {
        sum.finish();
    } else {
        sum.tail = 0.0;
        sum.done = true;
    }
    Ok(sum)
}

/// `∫_{Σ_x} f dσ` through `chart`, with an error estimate from a rule of half
/// the resolution and the tail estimate of unbounded domains.
pub fn coarea_quadrature<F>(
    map: &dyn DefiningMap,
    x: &[f64],
    chart: &ChartSpec,
    mut f: F,
    cfg: &QuadratureConfig,
) -> Result<SliceIntegral>
where
    F: FnMut(&SlicePoint) -> f64,
{
    let c = chart.at(map, x)?;
    let hi = integrate_once(&c, &mut f, cfg.nodes, cfg)?;
    if hi.infinite {
        return Ok(SliceIntegral { value: f64::INFINITY, error: f64::INFINITY, infinite: true, shells: hi.shells });
    }
    let lo = integrate_once(&c, &mut f, (cfg.nodes / 2).max(2), cfg)?;
    let value = hi.value();
    let error = if lo.infinite { f64::INFINITY } else { (value - lo.value()).abs() + hi.tail.abs() };
    Ok(SliceIntegral { value, error, infinite: false, shells: hi.shells })
}

/// `∫_{Σ_x} f dσ` at the configured resolution only; `+∞` when the shells grow.
pub fn coarea_value<F>(map: &dyn DefiningMap, x: &[f64], chart: &ChartSpec, mut f: F, cfg: &QuadratureConfig) -> Result<f64>
where
    F: FnMut(&SlicePoint) -> f64,
{
    let c = chart.at(map, x)?;
    Ok(integrate_once(&c, &mut f, cfg.nodes, cfg)?.value())
}

/// `(‖d_xπ‖_ω, ‖d_yπ‖)` at `(x, y)`.
pub fn dpi_norms(map: &dyn DefiningMap, x: &[f64], y: &[f64], basis: &UnimodularBasis) -> Result<(f64, f64)> {
    let (dx, dy) = map.jacobians(x, y);
    let a = minor_norm(&dx, basis)?;
    let rows: Vec<Vector> = dy.row_iter().map(|r| r.transpose()).collect();
    Ok((a, gram(&rows)?.sqrt()))
}

/// Eigenvalue floor of the inverse square root in [`normalized_defining`].
pub const EIGEN_FLOOR: f64 = 1e-12;

/// `(D_xπ D_xπᵀ)^{-1/2}` at `(x, y)`.
pub fn inverse_sqrt_gram(dx: &Matrix) -> Result<Matrix> {
    let s = dx * dx.transpose();
    let eig = SymmetricEigen::new(s);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min.max(0.0).sqrt() >= 1e-10) {
        return Err(Error::RankDeficient(format!(
            "D_x pi has smallest singular value {:e}",
            min.max(0.0).sqrt()
        )));
    }
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// `π̄ = (D_xπ D_xπᵀ)^{-1/2} π` and `(D_xπ D_xπᵀ)^{-1/2} D_xπ`, which equals
/// `D_xπ̄` on the slice and has orthonormal rows there.
pub fn normalized_defining(map: &dyn DefiningMap, x: &[f64], y: &[f64]) -> Result<(Vector, Matrix)> {
    let (dx, _) = map.jacobians(x, y);
    let r = inverse_sqrt_gram(&dx)?;
    let v = &r * map.eval(x, y);
    Ok((v, r * dx))
}

/// Both sides of the Fubini identity for coarea measures.
#[derive(Debug, Clone, PartialEq)]
pub struct FubiniReport {
    pub lhs: f64,
    pub rhs: f64,
    pub relative_gap: f64,
}

/// Outer integration box for the Fubini check.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: usize,
    pub panels: usize,
}

impl OuterBox {
    pub fn rule(&self) -> Vec<(Vec<f64>, f64)> {
        let axes: Vec<Vec<(f64, f64)>> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| quad::composite(*a, *b, self.nodes, self.panels))
            .collect();
        quad::tensor(&axes)
    }
}

/// `∫∫ F(x, y) dσ_x(y) dx` against the same integral with the roles of `x`
/// and `y` exchanged, `π'(y, x) = π(x, y)` sliced by `y_chart`.
pub fn coarea_fubini_check<F>(
    map: &dyn DefiningMap,
    f: F,
    x_box: &OuterBox,
    x_chart: &ChartSpec,
    y_box: &OuterBox,
    y_chart: &ChartSpec,
    cfg: &QuadratureConfig,
) -> Result<FubiniReport>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let swapped = SwappedRef(map);
    let mut lhs = 0.0;
    for (x, w) in x_box.rule() {
        let s = coarea_quadrature(map, &x, x_chart, |p| f(&x, p.y.as_slice()), cfg)?;
        lhs += w * s.value;
    }
    let mut rhs = 0.0;
    for (y, w) in y_box.rule() {
        let s = coarea_quadrature(&swapped, &y, y_chart, |p| f(p.y.as_slice(), &y), cfg)?;
        rhs += w * s.value;
    }
    let scale = lhs.abs().max(rhs.abs());
    let relative_gap = if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale };
    Ok(FubiniReport { lhs, rhs, relative_gap })
}

#[derive(Debug)]
struct SwappedRef<'a>(&'a dyn DefiningMap);

impl DefiningMap for SwappedRef<'_> {
    fn n(&self) -> usize {
        self.0.n_y()
    }
    fn n_y(&self) -> usize {
        self.0.n()
    }
    fn k(&self) -> usize {
        self.0.k()
    }
    fn eval(&self, x: &[f64], y: &[f64]) -> Vector {
        self.0.eval(y, x)
    }
    fn jacobians(&self, x: &[f64], y: &[f64]) -> (Matrix, Matrix) {
        let (a, b) = self.0.jacobians(y, x);
        (b, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::PolyMap;

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn unit_circle_has_coarea_mass_two_pi() {
        let s = PolyMap::sphere(2, 1.0);
        let r = coarea_quadrature(&s, &[0.3, -0.2], &ChartSpec::sphere(2, 1.0), |_| 1.0, &cfg()).unwrap();
        assert!((r.value - 2.0 * PI).abs() < 1e-12);
    }

    // circumference 2πR divided by ‖d_yπ‖ = R
    #[test]
    fn circle_of_radius_r_has_mass_two_pi() {
        for r in [0.5, 2.0, 3.0] {
            let s = PolyMap::sphere(2, r);
            let v = coarea_quadrature(&s, &[1.0, 1.0], &ChartSpec::sphere(2, r), |_| 1.0, &cfg()).unwrap();
            assert!((v.value - 2.0 * PI * r / r).abs() < 1e-12);
        }
    }

    // |S²| R² / R
    #[test]
    fn two_sphere_mass() {
        let r = 1.5;
        let s = PolyMap::sphere(3, r);
        let v = coarea_quadrature(&s, &[0.0; 3], &ChartSpec::sphere(3, r), |_| 1.0, &cfg()).unwrap();
        assert!((v.value - 4.0 * PI * r).abs() < 1e-10);
    }

    #[test]
    fn paraboloid_chart_measure_is_dt() {
        // ∫ exp(-t²) dσ over the ℓ = 2 paraboloid slice = √π
        let p = PolyMap::paraboloid(2, 2, 0);
        let chart = ChartSpec::paraboloid(2, 2, 0, 4.0);
        let x = [0.4, -0.7];
        let v = coarea_quadrature(&p, &x, &chart, |q| (-(q.y[0] - x[0]).powi(2)).exp(), &cfg()).unwrap();
        assert!((v.value - PI.sqrt()).abs() < 1e-10, "{}", v.value);
        assert!(v.error < 1e-8);
    }

    #[test]
    fn paraboloid_unbounded_slowly_decaying_integral() {
        // ∫ (1 + 4t²)^{-1} dt = π/2
        let p = PolyMap::paraboloid(2, 2, 0);
        let chart = ChartSpec::paraboloid(2, 2, 0, 4.0);
        let v = coarea_quadrature(
            &p,
            &[0.0, 0.0],
            &chart,
            |q| 1.0 / q.dx.norm_squared(),
            &cfg(),
        )
        .unwrap();
        assert!(!v.infinite);
        assert!((v.value - PI / 2.0).abs() < 1e-6, "{}", v.value);
    }

    #[test]
    fn divergent_integral_is_flagged() {
        let p = PolyMap::paraboloid(2, 2, 0);
        let chart = ChartSpec::paraboloid(2, 2, 0, 4.0);
        let v = coarea_quadrature(&p, &[0.0, 0.0], &chart, |q| 1.0 / q.dx.norm(), &cfg()).unwrap();
        assert!(v.infinite);
    }

    #[test]
    fn chart_independence_circle_graph_vs_angles() {
        // upper half circle as a graph over y¹ ∈ (-1, 1) against the angular chart
        let s = PolyMap::sphere(2, 1.0);
        let f = |y: &Vector| (-(y[0] - 0.2).powi(2) * 8.0).exp() * y[1].max(0.0).powi(3);
        let ang = coarea_quadrature(&s, &[0.0, 0.0], &ChartSpec::sphere(2, 1.0), |p| f(&p.y), &cfg()).unwrap();
        let graph = ChartSpec::Graph {
            solved: vec![1],
            origin: AffineMap::select(&[0], 2),
            guess: AffineMap::constant(Vector::from_vec(vec![1.0]), 2),
            domain: Domain::Box { half_widths: vec![1.0 - 1e-9] },
        };
        let cfg = QuadratureConfig { panels: 64, ..cfg() };
        let g = coarea_quadrature(&s, &[0.0, 0.0], &graph, |p| f(&p.y), &cfg).unwrap();
        assert!((ang.value - g.value).abs() < 1e-6 + ang.error + g.error, "{} vs {}", ang.value, g.value);
    }

    #[test]
    fn inconsistent_chart_is_rejected() {
        let s = PolyMap::sphere(2, 1.0);
        let r = coarea_quadrature(&s, &[0.0, 0.0], &ChartSpec::sphere(2, 2.0), |_| 1.0, &cfg());
        assert!(matches!(r, Err(Error::ChartInconsistent { .. })));
    }

    #[test]
    fn degenerate_slice_is_rejected() {
        // π = (y - x)³ has d_yπ = 0 on the slice
        use crate::poly::Polynomial;
        let p = Polynomial::new(2, vec![(1.0, vec![0, 3]), (-3.0, vec![1, 2]), (3.0, vec![2, 1]), (-1.0, vec![3, 0])])
            .unwrap();
        let m = PolyMap::new(1, 1, vec![p]).unwrap();
        let chart = ChartSpec::linear_point(&Matrix::from_element(1, 1, 1.0), None);
        let r = coarea_quadrature(&m, &[0.5], &chart, |_| 1.0, &cfg());
        assert!(matches!(r, Err(Error::DegenerateSlice { .. })), "{r:?}");
    }

    #[test]
    fn linear_normalized_defining() {
        let l = Matrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let m = PolyMap::linear(&l, None);
        let (v, d) = normalized_defining(&m, &[1.0, 1.0], &[9.0]).unwrap();
        assert!((v[0] - 2.0 / 5.0).abs() < 1e-14);
        assert!((d.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sphere_normalized_is_pi_over_distance() {
        let s = PolyMap::sphere(3, 1.0);
        let x = [0.1, 0.2, 0.3];
        let y = [1.0, -0.5, 0.9];
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let (v, _) = normalized_defining(&s, &x, &y).unwrap();
        assert!((v[0] - s.eval(&x, &y)[0] / dist).abs() < 1e-14);
    }

    #[test]
    fn normalized_rows_orthonormal_on_slice() {
        let p = PolyMap::paraboloid(3, 2, 1);
        let chart = ChartSpec::paraboloid(3, 2, 1, 4.0);
        let x = [0.2, -0.4, 0.9];
        let c = chart.at(&p, &x).unwrap();
        let q = c.point(&[0.7]).unwrap();
        let (_, d) = normalized_defining(&p, &x, q.y.as_slice()).unwrap();
        assert!((&d * d.transpose() - Matrix::identity(1, 1)).norm() < 1e-8);
        // ‖d_yπ̄‖ = ‖d_yπ‖ / ‖d_xπ‖ on the slice
        let r = inverse_sqrt_gram(&q.dx).unwrap();
        let dyb = &r * &q.dy;
        assert!((dyb.norm() - q.dy.norm() / q.dx.norm()).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_dx_is_an_error() {
        // π = y does not depend on x
        let m = PolyMap::linear(&Matrix::zeros(1, 2), None);
        assert!(matches!(normalized_defining(&m, &[0.0, 0.0], &[0.0]), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn fubini_linear_delta_slices() {
        let m = PolyMap::linear(&Matrix::identity(1, 1), None);
        let f = |x: &[f64], y: &[f64]| (-(x[0] * x[0]) - 2.0 * (y[0] - 0.3).powi(2)).exp();
        let bx = OuterBox { lo: vec![-6.0], hi: vec![6.0], nodes: 16, panels: 8 };
        let chart = ChartSpec::linear_point(&Matrix::identity(1, 1), None);
        let r = coarea_fubini_check(&m, f, &bx, &chart, &bx, &chart, &cfg()).unwrap();
        // both sides reduce to ∫ F(x, x) dx
        let direct: f64 = quad::composite(-8.0, 8.0, 20, 16).iter().map(|(x, w)| w * f(&[*x], &[*x])).sum();
        assert!((r.lhs - direct).abs() < 1e-10);
        assert!((r.rhs - direct).abs() < 1e-10);
    }

    #[test]
    fn fubini_zero_integrand() {
        let m = PolyMap::sphere(2, 1.0);
        let bx = OuterBox { lo: vec![-1.0; 2], hi: vec![1.0; 2], nodes: 4, panels: 1 };
        let c = ChartSpec::sphere(2, 1.0);
        let r = coarea_fubini_check(&m, |_, _| 0.0, &bx, &c, &bx, &c, &cfg()).unwrap();
        assert_eq!((r.lhs, r.rhs, r.relative_gap), (0.0, 0.0, 0.0));
    }

    #[test]
    fn affine_reparametrization_composes() {
        let a = AffineMap::new(Matrix::from_row_slice(1, 2, &[1.0, 2.0]), Vector::from_vec(vec![0.5])).unwrap();
        let x0 = Vector::from_vec(vec![0.3, -0.1]);
        let m = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let r = a.reparametrize_x(&x0, &m);
        let x = [0.7, 0.2];
        let mapped = &x0 + &m * (Vector::from_column_slice(&x) - &x0);
        assert!((r.eval(&x)[0] - a.eval(mapped.as_slice())[0]).abs() < 1e-14);
    }
}

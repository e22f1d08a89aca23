//! Testing quantities for multilinear Radon-like transforms.
//!
//! A factor `T_j f(x) = ∫_{Σ_x} f(y) w(x, y) dσ(y)` with exponents `(p, q)`
//! is tested at `x` against a unimodular basis `ω` by
//!
//! * `p = 1`: `(sup w / ‖d_xπ‖_ω)^q`,
//! * `p > 1`, strong: `(∫ w^{p'} / ‖d_xπ‖_ω^{p'-1} dσ)^{q/p'}`,
//! * `p > 1`, restricted: `(sup_ε ε^{1-p'} ∫ χ_{‖d_xπ‖_ω < ε w} w dσ)^{q/p'}`.
//!
//! The testing value of a problem is the product over factors, times
//! `(Σ‖ωᵢ‖)^{-s}` when the scaling slack `s` is positive.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::incidence::{
    coarea_value, ChartSpec, OuterBox, QuadratureConfig, ShellSum, SlicePoint,
};
use crate::linalg::{gram, minor_norm, random_vector, Matrix, UnimodularBasis, Vector};
use crate::poly::{SharedMap, XReparam};
use crate::slopt::{sl_optimize, Direction, OptimizeStatus, SlOptimizerConfig};
use crate::weight::{WeightContext, WeightExpr};

/// A real function on `ℝ^{n'}`.
pub type Density = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Indicator of the box `[lo, hi]`.
pub fn box_indicator(lo: Vec<f64>, hi: Vec<f64>) -> Density {
    Arc::new(move |y: &[f64]| {
        let inside = y.iter().zip(lo.iter().zip(&hi)).all(|(v, (a, b))| *v >= *a && *v <= *b);
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Strong,
    Restricted,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Strong => "strong",
            Mode::Restricted => "restricted",
        }
    }
}

/// `x_orig = A x + b`, applied before a weight is evaluated.
#[derive(Debug, Clone, PartialEq)]
struct XMap {
    a: Matrix,
    b: Vector,
    a_inv: Matrix,
}

/// A nonnegative weight `w(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    expr: WeightExpr,
    xmap: Option<XMap>,
}

impl Weight {
    pub fn new(expr: WeightExpr) -> Self {
        Self { expr, xmap: None }
    }

    pub fn one() -> Self {
        Self::new(WeightExpr::one())
    }

    pub fn dxnorm() -> Self {
        Self::new(WeightExpr::DxNorm)
    }

    pub fn expr(&self) -> &WeightExpr {
        &self.expr
    }

    /// `w` at `(x, y)`, given `D_xπ` there.
    pub fn eval(&self, x: &[f64], y: &[f64], dx: &Matrix) -> f64 {
        if let WeightExpr::Num(v) = self.expr {
            return v;
        }
        let (xo, d) = match &self.xmap {
            None => (Vector::from_column_slice(x), dx.clone()),
            Some(m) => (&m.a * Vector::from_column_slice(x) + &m.b, dx * &m.a_inv),
        };
        let dxnorm = if matches!(self.expr, WeightExpr::Num(_)) {
            0.0
        } else {
            let rows: Vec<Vector> = d.row_iter().map(|r| r.transpose()).collect();
            gram(&rows).map(f64::sqrt).unwrap_or(f64::NAN)
        };
        self.expr.eval(&WeightContext { x: xo.as_slice(), y, dxnorm })
    }

    fn reparametrize_x(&self, x0: &Vector, m: &Matrix) -> Result<Self> {
        let inv = m.clone().try_inverse().ok_or(Error::DependentVectors(0.0))?;
        // x ↦ x0 + M(x - x0), composed with any existing map
        let (a, b) = (m.clone(), x0 - m * x0);
        let xmap = match &self.xmap {
            None => XMap { a, b, a_inv: inv },
            Some(old) => XMap { a: &old.a * &a, b: &old.a * &b + &old.b, a_inv: &inv * &old.a_inv },
        };
        Ok(Self { expr: self.expr.clone(), xmap: Some(xmap) })
    }
}

/// One factor `T_j` of a multilinear Radon-like transform.
#[derive(Debug, Clone)]
pub struct RadonFactor {
    pub name: String,
    pub map: SharedMap,
    pub chart: ChartSpec,
    pub weight: Weight,
    pub p: f64,
    pub q: f64,
    pub mode: Mode,
}

impl RadonFactor {
    pub fn new(
        name: impl Into<String>,
        map: SharedMap,
        chart: ChartSpec,
        weight: Weight,
        p: f64,
        q: f64,
        mode: Mode,
    ) -> Result<Self> {
        let (n, n_y, k) = (map.n(), map.n_y(), map.k());
        if k > n.min(n_y) {
            return Err(Error::InvalidArgument(format!("codimension k = {k} exceeds min(n, n') = {}", n.min(n_y))));
        }
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!("p must be in [1, ∞), got {p}")));
        }
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::InvalidArgument(format!("q must be positive, got {q}")));
        }
        if mode == Mode::Restricted && p == 1.0 {
            return Err(Error::InvalidArgument("restricted mode needs p > 1".into()));
        }
        let (mx, my) = weight.expr.max_indices();
        if mx > n || my > n_y {
            return Err(Error::InvalidArgument("weight refers to a variable out of range".into()));
        }
        chart.validate(map.as_ref())?;
        Ok(Self { name: name.into(), map, chart, weight, p, q, mode })
    }

    pub fn k(&self) -> usize {
        self.map.k()
    }

    pub fn n_y(&self) -> usize {
        self.map.n_y()
    }

    /// `p' = p / (p - 1)`, infinite for `p = 1`.
    pub fn p_prime(&self) -> f64 {
        if self.p == 1.0 {
            f64::INFINITY
        } else {
            self.p / (self.p - 1.0)
        }
    }

    /// The factor for `π(x₀ + M(x - x₀), y)`.
    pub fn reparametrize_x(&self, x0: &Vector, m: &Matrix) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            map: Arc::new(XReparam::new(self.map.clone(), x0.clone(), m.clone())?),
            chart: self.chart.reparametrize_x(x0, m),
            weight: self.weight.reparametrize_x(x0, m)?,
            p: self.p,
            q: self.q,
            mode: self.mode,
        })
    }
}

/// `s = n - Σ k_j q_j / p_j`.
pub fn scaling_slack(n: usize, factors: &[RadonFactor]) -> Result<f64> {
    if factors.is_empty() {
        return Err(Error::InvalidArgument("problem has no factors".into()));
    }
    let s = n as f64 - factors.iter().map(|f| f.k() as f64 * f.q / f.p).sum::<f64>();
    if s < -1e-12 {
        return Err(Error::ScalingViolated { slack: s });
    }
    Ok(if s.abs() <= 1e-12 { 0.0 } else { s })
}

#[derive(Debug, Clone)]
pub struct TestingProblem {
    pub n: usize,
    pub factors: Vec<RadonFactor>,
    /// Scaling slack; negative only for problems built with [`TestingProblem::supercritical`].
    pub s: f64,
}

impl TestingProblem {
    pub fn new(n: usize, factors: Vec<RadonFactor>) -> Result<Self> {
        check_dims(n, &factors)?;
        let s = scaling_slack(n, &factors)?;
        Ok(Self { n, factors, s })
    }

    /// A problem off the scaling line on the supercritical side. Only Knapp
    /// experiments accept it.
    pub fn supercritical(n: usize, factors: Vec<RadonFactor>) -> Result<Self> {
        check_dims(n, &factors)?;
        let s = n as f64 - factors.iter().map(|f| f.k() as f64 * f.q / f.p).sum::<f64>();
        Ok(Self { n, factors, s })
    }

    pub fn reparametrize_x(&self, x0: &Vector, m: &Matrix) -> Result<Self> {
        let factors = self.factors.iter().map(|f| f.reparametrize_x(x0, m)).collect::<Result<Vec<_>>>()?;
        Ok(Self { n: self.n, factors, s: self.s })
    }
}

fn check_dims(n: usize, factors: &[RadonFactor]) -> Result<()> {
    if let Some(f) = factors.iter().find(|f| f.map.n() != n) {
        return Err(Error::DimensionMismatch(format!(
            "factor '{}' acts on R^{} but the problem has n = {n}",
            f.name,
            f.map.n()
        )));
    }
    Ok(())
}

/// Settings for testing computations.
#[derive(Debug, Clone, PartialEq)]
pub struct TestingConfig {
    pub quad: QuadratureConfig,
    /// The restricted form takes its sup over `ε = 2^e`, `e` in this range.
    pub eps_exponents: (i32, i32),
}

impl Default for TestingConfig {
    fn default() -> Self {
        Self { quad: QuadratureConfig::default(), eps_exponents: (-20, 20) }
    }
}

fn node_terms(f: &RadonFactor, x: &[f64], p: &SlicePoint, basis: &UnimodularBasis) -> Result<(f64, f64)> {
    let w = f.weight.eval(x, p.y.as_slice(), &p.dx);
    if !(w >= 0.0) {
        return Err(Error::InvalidArgument(format!("weight of '{}' is negative or NaN ({w}) at y = {:?}", f.name, p.y.as_slice())));
    }
    let d = minor_norm(&p.dx, basis)?;
    Ok((w, d))
}

/// Testing value of a single factor at `x`; `+∞` when it diverges.
pub fn factor_value(f: &RadonFactor, x: &[f64], basis: &UnimodularBasis, cfg: &TestingConfig) -> Result<f64> {
    let chart = f.chart.at(f.map.as_ref(), x)?;
    let qc = &cfg.quad;
    let limit = if f.chart.is_unbounded() { qc.max_doublings + 1 } else { 1 };

    if f.p == 1.0 {
        let (mut sup, mut grow, mut flat) = (0.0f64, 0usize, 0usize);
        for i in 0..limit {
            let Some(points) = chart.shell_points(i, qc.nodes, qc.panels)? else { break };
            let mut shell = 0.0f64;
            for (pt, _) in &points {
                let (w, d) = node_terms(f, x, pt, basis)?;
                let r = if d > 0.0 {
                    w / d
                } else if w > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                shell = shell.max(r);
            }
            if i > 0 {
                if shell > sup * (1.0 + 1e-9) && sup > 0.0 {
                    grow += 1;
                    flat = 0;
                } else {
                    grow = 0;
                    flat += 1;
                }
            }
            sup = sup.max(shell);
            if !sup.is_finite() || (grow >= 4 && i >= 6) {
                return Ok(f64::INFINITY);
            }
            if flat >= 3 {
                break;
            }
        }
        if f.chart.is_unbounded() && grow > 0 && flat == 0 {
            return Ok(f64::INFINITY);
        }
        return Ok(sup.powf(f.q));
    }

    let pp = f.p_prime();
    match f.mode {
        Mode::Strong => {
            let mut sum = ShellSum::new();
            for i in 0..limit {
                let Some(points) = chart.shell_points(i, qc.nodes, qc.panels)? else { break };
                let mut s = 0.0;
                for (pt, wt) in &points {
                    let (w, d) = node_terms(f, x, pt, basis)?;
                    if w == 0.0 {
                        continue;
                    }
                    s += wt * w.powf(pp) / d.powf(pp - 1.0);
                }
                sum.push(s, qc);
                if sum.done {
                    break;
                }
            }
            if f.chart.is_unbounded() {
                sum.finish();
            } else {
                sum.tail = 0.0;
            }
            let v = sum.value();
            Ok(if v.is_finite() { v.powf(f.q / pp) } else { f64::INFINITY })
        }
        Mode::Restricted => {
            let (e0, e1) = cfg.eps_exponents;
            let count = (e1 - e0 + 1) as usize;
            let mut buckets = vec![0.0; count + 1];
            // the shells feed increments of the running sup, so a finite
            // limit shows up as vanishing increments
            let mut sum = ShellSum::new();
            let mut current = (0, 0.0);
            for i in 0..limit {
                let Some(points) = chart.shell_points(i, qc.nodes, qc.panels)? else { break };
                for (pt, wt) in &points {
                    let (w, d) = node_terms(f, x, pt, basis)?;
                    if w == 0.0 {
                        continue;
                    }
                    // contributes to every ε with d < ε w
                    let r = d / w;
                    let idx = if r == 0.0 {
                        0
                    } else {
                        let e = r.log2().floor() as i64 + 1;
                        (e - e0 as i64).clamp(0, count as i64) as usize
                    };
                    // guard against log2 rounding at exact powers of two
                    let idx = if idx > 0 && idx <= count && r < 2f64.powi(e0 + idx as i32 - 1) { idx - 1 } else { idx };
                    buckets[idx] += wt * w;
                }
                let next = restricted_sup(&buckets[..count], e0, pp);
                sum.push((next.1 - current.1).max(0.0), qc);
                current = next;
                if sum.done {
                    break;
                }
            }
            if f.chart.is_unbounded() {
                sum.finish();
            }
            if sum.infinite {
                return Ok(f64::INFINITY);
            }
            let vals: Vec<f64> = buckets[..count]
                .iter()
                .scan(0.0, |acc, b| {
                    *acc += b;
                    Some(*acc)
                })
                .enumerate()
                .map(|(j, m)| 2f64.powi(e0 + j as i32).powf(1.0 - pp) * m)
                .collect();
            let (arg, sup) = current;
            let at_edge = (arg == count - 1 && vals[count - 1] > 1.01 * vals[count - 2])
                || (arg == 0 && vals[0] > 1.01 * vals[1]);
            if at_edge || !sup.is_finite() {
                return Ok(f64::INFINITY);
            }
            Ok(sup.powf(f.q / pp))
        }
    }
}

/// `(argmax, max)` of `ε^{1-p'} S_ε` on the grid, `S_ε` the cumulative buckets.
fn restricted_sup(buckets: &[f64], e0: i32, pp: f64) -> (usize, f64) {
    let mut acc = 0.0;
    let mut best = (0, 0.0f64);
    for (j, b) in buckets.iter().enumerate() {
        acc += b;
        let v = 2f64.powi(e0 + j as i32).powf(1.0 - pp) * acc;
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Testing value of a problem at `(x, ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestingValue {
    pub factor_values: Vec<f64>,
    /// `(Σ‖ωᵢ‖)^{-s}`, equal to 1 when `s = 0`.
    pub prefactor: f64,
    pub value: f64,
}

pub fn testing_value(
    problem: &TestingProblem,
    x: &[f64],
    basis: &UnimodularBasis,
    cfg: &TestingConfig,
) -> Result<TestingValue> {
    if basis.dim() != problem.n || x.len() != problem.n {
        return Err(Error::DimensionMismatch("basis or x does not match the problem dimension".into()));
    }
    let factor_values =
        problem.factors.iter().map(|f| factor_value(f, x, basis, cfg)).collect::<Result<Vec<_>>>()?;
    let prefactor = if problem.s > 0.0 { basis.length_sum().powf(-problem.s) } else { 1.0 };
    let value = if factor_values.iter().any(|v| v.is_infinite()) {
        f64::INFINITY
    } else {
        factor_values.iter().product::<f64>() * prefactor
    };
    Ok(TestingValue { factor_values, prefactor, value })
}

/// Outcome of a supremum search over bases.
#[derive(Debug, Clone, PartialEq)]
pub struct TestingReport {
    pub x: Vec<f64>,
    pub factor_values: Vec<f64>,
    pub prefactor: f64,
    pub value: f64,
    pub basis: UnimodularBasis,
    pub status: OptimizeStatus,
    pub identity_value: f64,
    pub start_index: usize,
}

pub fn testing_sup(
    problem: &TestingProblem,
    x: &[f64],
    opt: &SlOptimizerConfig,
    cfg: &TestingConfig,
) -> Result<TestingReport> {
    let best = sl_optimize(|b| Ok(testing_value(problem, x, b, cfg)?.value), problem.n, Direction::Maximize, opt)?;
    let at = testing_value(problem, x, &best.basis, cfg)?;
    Ok(TestingReport {
        x: x.to_vec(),
        factor_values: at.factor_values,
        prefactor: at.prefactor,
        value: best.value,
        basis: best.basis,
        status: best.status,
        identity_value: best.identity_value,
        start_index: best.start_index,
    })
}

/// Running maximum of [`testing_sup`] over a grid of base points.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalReport {
    pub best: TestingReport,
    /// `(x, value, status)` per grid point.
    pub points: Vec<(Vec<f64>, f64, OptimizeStatus)>,
    pub translation_invariant: bool,
}

pub fn testing_global(
    problem: &TestingProblem,
    grid: &[Vec<f64>],
    opt: &SlOptimizerConfig,
    cfg: &TestingConfig,
) -> Result<GlobalReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty x grid".into()));
    }
    let invariant = translation_invariant(problem, opt.seed);
    if invariant {
        let r = testing_sup(problem, &grid[0], opt, cfg)?;
        let points = grid.iter().map(|x| (x.clone(), r.value, r.status)).collect();
        return Ok(GlobalReport { best: r, points, translation_invariant: true });
    }
    let run = |x: &Vec<f64>| testing_sup(problem, x, opt, cfg);
    #[cfg(feature = "parallel")]
    let reports: Vec<Result<TestingReport>> = {
        use rayon::prelude::*;
        grid.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let reports: Vec<Result<TestingReport>> = grid.iter().map(run).collect();
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let points = reports.iter().map(|r| (r.x.clone(), r.value, r.status)).collect();
    let mut best = reports[0].clone();
    for r in reports.into_iter().skip(1) {
        let diverged = |s: OptimizeStatus| s == OptimizeStatus::Diverging;
        if (diverged(r.status) && !diverged(best.status)) || (diverged(r.status) == diverged(best.status) && r.value > best.value) {
            best = r;
        }
    }
    Ok(GlobalReport { best, points, translation_invariant: false })
}

/// Whether every factor satisfies `π(x + a, y + L a) = π(x, y)` and the same
/// for its weight, for some linear `L`. `L` is fitted from `D_yπ L = -D_xπ`
/// at random points and then verified at fresh ones.
pub fn translation_invariant(problem: &TestingProblem, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11);
    problem.factors.iter().all(|f| factor_translation_invariant(f, &mut rng))
}

fn factor_translation_invariant(f: &RadonFactor, rng: &mut ChaCha8Rng) -> bool {
    let (n, n_y, k) = (f.map.n(), f.map.n_y(), f.map.k());
    let samples = 2 * (n + n_y) + 4;
    let mut a = Matrix::zeros(samples * k, n_y);
    let mut b = Matrix::zeros(samples * k, n);
    for s in 0..samples {
        let x = random_vector(n, rng);
        let y = random_vector(n_y, rng);
        let (dx, dy) = f.map.jacobians(x.as_slice(), y.as_slice());
        a.view_mut((s * k, 0), (k, n_y)).copy_from(&dy);
        b.view_mut((s * k, 0), (k, n)).copy_from(&(-dx));
    }
    let Ok(l) = a.svd(true, true).solve(&b, 1e-12) else { return false };
    for _ in 0..6 {
        let x = random_vector(n, rng);
        let y = random_vector(n_y, rng);
        let shift = random_vector(n, rng);
        let (x2, y2) = (&x + &shift, &y + &l * &shift);
        let (v1, v2) = (f.map.eval(x.as_slice(), y.as_slice()), f.map.eval(x2.as_slice(), y2.as_slice()));
        if (&v1 - &v2).norm() > 1e-9 * (1.0 + v1.norm()) {
            return false;
        }
        let (d1, _) = f.map.jacobians(x.as_slice(), y.as_slice());
        let (d2, _) = f.map.jacobians(x2.as_slice(), y2.as_slice());
        let w1 = f.weight.eval(x.as_slice(), y.as_slice(), &d1);
        let w2 = f.weight.eval(x2.as_slice(), y2.as_slice(), &d2);
        if (w1 - w2).abs() > 1e-9 * (1.0 + w1.abs()) {
            return false;
        }
    }
    true
}

/// A factor of the dual functional `∏ (∫ f_j ‖d_xπ_j‖_ω dσ_j)^{r_j}`.
#[derive(Clone)]
pub struct QFactor {
    pub map: SharedMap,
    pub chart: ChartSpec,
    pub density: Density,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QReport {
    pub value: f64,
    pub basis: UnimodularBasis,
    pub status: OptimizeStatus,
}

/// Infimum over `SL(n)` of `∏ (∫ f_j ‖d_xπ_j‖_ω dσ_j)^{r_j}`.
pub fn q_functional(
    factors: &[QFactor],
    x: &[f64],
    opt: &SlOptimizerConfig,
    quad: &QuadratureConfig,
) -> Result<QReport> {
    let n = x.len();
    if factors.is_empty() {
        return Err(Error::InvalidArgument("no factors".into()));
    }
    let total: f64 = factors.iter().map(|f| f.map.k() as f64 * f.r).sum();
    if (total - n as f64).abs() > 1e-12 {
        return Err(Error::ScalingViolated { slack: n as f64 - total });
    }
    let objective = |b: &UnimodularBasis| -> Result<f64> {
        let mut prod = 1.0;
        for f in factors {
            let mut err = None;
            let v = coarea_value(
                f.map.as_ref(),
                x,
                &f.chart,
                |p| {
                    let fy = (f.density)(p.y.as_slice());
                    if fy == 0.0 {
                        return 0.0;
                    }
                    match minor_norm(&p.dx, b) {
                        Ok(d) => fy * d,
                        Err(e) => {
                            err = Some(e);
                            0.0
                        }
                    }
                },
                quad,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            prod *= v.powf(f.r);
        }
        Ok(prod)
    };
    let best = sl_optimize(objective, n, Direction::Minimize, opt)?;
    Ok(QReport { value: best.value, basis: best.basis, status: best.status })
}

/// `T f(x) = ∫_{Σ_x} f(y) w(x, y) dσ(y)`.
pub fn apply_factor(f: &RadonFactor, density: &Density, x: &[f64], quad: &QuadratureConfig) -> Result<f64> {
    coarea_value(
        f.map.as_ref(),
        x,
        &f.chart,
        |p| {
            let fy = density(p.y.as_slice());
            if fy == 0.0 {
                0.0
            } else {
                fy * f.weight.eval(x, p.y.as_slice(), &p.dx)
            }
        },
        quad,
    )
}

/// `∫_box ∏_j (T_j f_j(x))^{q_j} dx` by tensor quadrature over the box.
pub fn multilinear_form(
    problem: &TestingProblem,
    densities: &[Density],
    outer: &OuterBox,
    quad: &QuadratureConfig,
) -> Result<f64> {
    if densities.len() != problem.factors.len() {
        return Err(Error::WrongCount { expected: problem.factors.len(), got: densities.len() });
    }
    if outer.lo.len() != problem.n || outer.hi.len() != problem.n {
        return Err(Error::DimensionMismatch("integration box has wrong dimension".into()));
    }
    let rule = outer.rule();
    let node = |(x, w): &(Vec<f64>, f64)| -> Result<f64> {
        let mut prod = 1.0;
        for (f, d) in problem.factors.iter().zip(densities) {
            let t = apply_factor(f, d, x, quad)?;
            prod *= t.abs().powf(f.q);
            if prod == 0.0 {
                break;
            }
        }
        Ok(w * prod)
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<f64>> = {
        use rayon::prelude::*;
        rule.par_iter().map(node).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<f64>> = rule.iter().map(node).collect();
    // fixed-order reduction keeps results bitwise reproducible
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total)
}

/// Both sides of a pointwise inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseReport {
    pub inequality: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Relative slack allowed in pointwise checks.
pub const POINTWISE_TOL: f64 = 1e-6;

fn report(inequality: &'static str, lhs: f64, rhs: f64) -> PointwiseReport {
    PointwiseReport { inequality, lhs, rhs, holds: lhs <= rhs * (1.0 + POINTWISE_TOL) + 1e-300 }
}

/// Checks the Hölder-type bound of `∫ f w dσ` appropriate to the factor:
/// `l1` for `p = 1`, `strong` for strong type, `restricted` (with its
/// constant 2) for restricted type, where `f` should be an indicator.
pub fn pointwise_bound_check(
    f: &RadonFactor,
    density: &Density,
    x: &[f64],
    basis: &UnimodularBasis,
    cfg: &TestingConfig,
) -> Result<PointwiseReport> {
    let quad = &cfg.quad;
    let mut err = None;
    let mut integral = |g: &dyn Fn(f64, f64, f64) -> f64| -> Result<f64> {
        let v = coarea_value(
            f.map.as_ref(),
            x,
            &f.chart,
            |p| {
                let fy = density(p.y.as_slice());
                match node_terms(f, x, p, basis) {
                    Ok((w, d)) => g(fy, w, d),
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                }
            },
            quad,
        )?;
        match err.take() {
            Some(e) => Err(e),
            None => Ok(v),
        }
    };
    let lhs = integral(&|fy, w, _| fy * w)?;
    if f.p == 1.0 {
        let mass = integral(&|fy, _, d| fy * d)?;
        let unit = RadonFactor { q: 1.0, ..f.clone() };
        let sup = factor_value(&unit, x, basis, cfg)?;
        return Ok(report("l1", lhs, mass * sup));
    }
    let p = f.p;
    match f.mode {
        Mode::Strong => {
            let a = integral(&|fy, _, d| fy.abs().powf(p) * d)?;
            let unit = RadonFactor { q: f.p_prime(), ..f.clone() };
            let b = factor_value(&unit, x, basis, cfg)?;
            Ok(report("strong", lhs, a.powf(1.0 / p) * b.powf(1.0 / f.p_prime())))
        }
        Mode::Restricted => {
            let a = integral(&|fy, _, d| fy * d)?;
            let unit = RadonFactor { q: f.p_prime(), ..f.clone() };
            let b = factor_value(&unit, x, basis, cfg)?;
            Ok(report("restricted", lhs, 2.0 * a.powf(1.0 / p) * b.powf(1.0 / f.p_prime())))
        }
    }
}

/// `∫_{S^{n-1}} |z₁| dH(z) = 2 π^{(n-1)/2} / Γ((n+1)/2)`.
pub fn sphere_abs_moment(n: usize) -> f64 {
    let nf = n as f64;
    2.0 * PI.powf((nf - 1.0) / 2.0) / statrs::function::gamma::gamma((nf + 1.0) / 2.0)
}

/// Constant of the sphere-average bound, `4ⁿ √n / ∫_{S^{n-1}} |z₁|`.
pub fn sphere_average_constant(n: usize) -> f64 {
    4f64.powi(n as i32) * (n as f64).sqrt() / sphere_abs_moment(n)
}

/// `χ_{B_R}(x) ≤ C_n R (Σ‖ωᵢ‖)^{-1} ∫ f ‖d_xπ‖_ω dσ` for the sphere relation of
/// radius `R` and `f = (4R)^{-n} χ_{[-2R, 2R]ⁿ}`.
pub fn sphere_average_check(
    r: f64,
    x: &[f64],
    basis: &UnimodularBasis,
    quad: &QuadratureConfig,
) -> Result<PointwiseReport> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument("sphere average needs n >= 2".into()));
    }
    let map = crate::poly::PolyMap::sphere(n, r);
    let chart = ChartSpec::sphere(n, r);
    let norm = (4.0 * r).powi(-(n as i32));
    let mut err = None;
    let integral = coarea_value(
        &map,
        x,
        &chart,
        |p| {
            if p.y.iter().all(|v| v.abs() <= 2.0 * r) {
                match minor_norm(&p.dx, basis) {
                    Ok(d) => norm * d,
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                }
            } else {
                0.0
            }
        },
        quad,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    let lhs = if x.iter().map(|v| v * v).sum::<f64>() < r * r { 1.0 } else { 0.0 };
    let rhs = sphere_average_constant(n) * r / basis.length_sum() * integral;
    Ok(report("sphere_average", lhs, rhs))
}

/// The segment of `(1/p, 1/q)` with `1/p - 1/q = (n-k)s / (n(s+1))` and
/// `|1/p + 1/q - 1| ≤ (n - sk) / (n(s+1))`; `None` when `n < sk`.
pub fn lp_range_from_s(n: usize, k: usize, s: f64) -> Result<Option<[(f64, f64); 2]>> {
    if !(k >= 1 && k < n) {
        return Err(Error::InvalidArgument(format!("need 1 <= k < n, got k = {k}, n = {n}")));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument("s must be positive".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let diff = (nf - kf) * s / (nf * (s + 1.0));
    let half = (nf - s * kf) / (nf * (s + 1.0));
    if half < 0.0 {
        return Ok(None);
    }
    let end = |sum: f64| ((sum + diff) / 2.0, (sum - diff) / 2.0);
    Ok(Some([end(1.0 - half), end(1.0 + half)]))
}

/// `p̃ = s p / (s - 1)`.
pub fn fractional_exponent(p: f64, s: f64) -> Result<f64> {
    if !(s > 1.0) {
        return Err(Error::InvalidArgument(format!("need s > 1, got {s}")));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("need p >= 1, got {p}")));
    }
    Ok(s * p / (s - 1.0))
}

/// Exponents of `ε` in the two terms balanced at `δ = ε^θ`, `θ = s/(s + p' - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Balance {
    pub theta: f64,
    /// Exponent of `ε^{s-1} δ^{-(s-1)}`.
    pub first: f64,
    /// Exponent of `δ^{p'} ε^{-1}`.
    pub second: f64,
    /// `p̃' - 1`.
    pub target: f64,
}

pub fn fractional_balance(p: f64, s: f64) -> Result<Balance> {
    let pt = fractional_exponent(p, s)?;
    let target = 1.0 / (pt - 1.0);
    if p == 1.0 {
        // p' = ∞: θ → 0 and p'θ → s
        return Ok(Balance { theta: 0.0, first: s - 1.0, second: s - 1.0, target });
    }
    let pp = p / (p - 1.0);
    let theta = s / (s + pp - 1.0);
    Ok(Balance { theta, first: (s - 1.0) * (1.0 - theta), second: pp * theta - 1.0, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incidence::Domain;
    use crate::linalg::random_unimodular;
    use crate::poly::PolyMap;

    fn coord_factor(n: usize, j: usize, p: f64, q: f64) -> RadonFactor {
        let map = Arc::new(PolyMap::coordinate(n, j));
        let mut a = Matrix::zeros(1, n);
        a[(0, j)] = 1.0;
        RadonFactor::new(format!("c{j}"), map, ChartSpec::linear_point(&a, None), Weight::one(), p, q, Mode::Strong)
            .unwrap()
    }

    fn parab_factor(n: usize, l: usize, j: usize, p: f64, q: f64, mode: Mode) -> RadonFactor {
        RadonFactor::new(
            format!("parab{j}"),
            Arc::new(PolyMap::paraboloid(n, l, j)),
            ChartSpec::paraboloid(n, l, j, 4.0),
            Weight::one(),
            p,
            q,
            mode,
        )
        .unwrap()
    }

    fn fast() -> SlOptimizerConfig {
        SlOptimizerConfig { multistarts: 4, ..Default::default() }
    }

    #[test]
    fn slack_examples() {
        let f = coord_factor(2, 0, 1.0, 2.0);
        assert_eq!(scaling_slack(2, &[f]).unwrap(), 0.0);
        let g = coord_factor(2, 0, 1.0, 3.0);
        assert!(matches!(scaling_slack(2, &[g]), Err(Error::ScalingViolated { .. })));
        assert!(scaling_slack(2, &[]).is_err());
    }

    #[test]
    fn coordinate_factor_value_is_row_length_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = TestingConfig::default();
        for _ in 0..10 {
            let b = random_unimodular(3, 0.6, &mut rng);
            for j in 0..3 {
                let f = coord_factor(3, j, 2.5, 1.7);
                let v = factor_value(&f, &[0.2, -0.1, 0.5], &b, &cfg).unwrap();
                let oracle = b.matrix().row(j).norm().powf(-1.7 / 2.5);
                assert!((v - oracle).abs() < 1e-12 * oracle);
            }
        }
    }

    #[test]
    fn p_one_with_full_rank_dxnorm_weight_is_one() {
        // k = n: ‖d_xπ‖_ω = |det D_xπ M| does not depend on the basis
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let map = Arc::new(PolyMap::linear(&a, None));
        let f = RadonFactor::new("full", map, ChartSpec::linear_point(&a, None), Weight::dxnorm(), 1.0, 1.0, Mode::Strong)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let b = random_unimodular(2, 0.8, &mut rng);
            let v = factor_value(&f, &[0.3, 0.4], &b, &TestingConfig::default()).unwrap();
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_rank_identity_factor_value_is_one() {
        let map = Arc::new(PolyMap::linear(&Matrix::identity(2, 2), None));
        let f = RadonFactor::new(
            "id",
            map,
            ChartSpec::linear_point(&Matrix::identity(2, 2), None),
            Weight::one(),
            2.0,
            2.0,
            Mode::Strong,
        )
        .unwrap();
        let p = TestingProblem::new(2, vec![f]).unwrap();
        let b = random_unimodular(2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let v = testing_value(&p, &[0.0, 0.0], &b, &TestingConfig::default()).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paraboloid_plane_value_is_half_pi() {
        // ∫ (1 + 4u²)^{-1} du = π/2, raised to q/p' = 1
        let f = parab_factor(2, 2, 0, 1.5, 3.0, Mode::Strong);
        let v = factor_value(&f, &[0.1, 0.2], &UnimodularBasis::identity(2), &TestingConfig::default()).unwrap();
        assert!((v - PI / 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn restricted_never_exceeds_strong() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = TestingConfig::default();
        for _ in 0..5 {
            let b = random_unimodular(2, 0.5, &mut rng);
            let s = factor_value(&parab_factor(2, 2, 0, 1.5, 3.0, Mode::Strong), &[0.0, 0.0], &b, &cfg).unwrap();
            let r = factor_value(&parab_factor(2, 2, 0, 1.5, 3.0, Mode::Restricted), &[0.0, 0.0], &b, &cfg).unwrap();
            assert!(r <= 2.0 * s, "{r} vs {s}");
            assert!(r > 0.0);
        }
    }

    #[test]
    fn paraboloid_endpoint_strong_diverges_restricted_finite() {
        // p' = ℓ = 2: the strong integral ∫(1+4u²)^{-1/2} diverges logarithmically,
        // while ε^{-1} |{√(1+4u²) < ε}| stays bounded by 1
        let b = UnimodularBasis::identity(2);
        let cfg = TestingConfig::default();
        let s = factor_value(&parab_factor(2, 2, 0, 2.0, 2.0, Mode::Strong), &[0.0, 0.0], &b, &cfg).unwrap();
        assert!(s.is_infinite());
        let r = factor_value(&parab_factor(2, 2, 0, 2.0, 2.0, Mode::Restricted), &[0.0, 0.0], &b, &cfg).unwrap();
        assert!(r.is_finite() && r <= 1.0 + 1e-9, "{r}");
        assert!(r > 0.99, "{r}");
    }

    #[test]
    fn lw_coordinate_problem_has_sup_one() {
        let fs = (0..3).map(|j| coord_factor(3, j, 1.0, 1.0)).collect();
        let p = TestingProblem::new(3, fs).unwrap();
        let r = testing_sup(&p, &[0.0; 3], &fast(), &TestingConfig::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9);
        assert_eq!(r.status, OptimizeStatus::Converged);
    }

    #[test]
    fn rank_one_projection_diverges() {
        // a single coordinate factor in the plane with q = 2p
        let f = coord_factor(2, 0, 1.0, 2.0);
        let p = TestingProblem::new(2, vec![f]).unwrap();
        let r = testing_sup(&p, &[0.0, 0.0], &fast(), &TestingConfig::default()).unwrap();
        assert_eq!(r.status, OptimizeStatus::Diverging);
    }

    #[test]
    fn sphere_prefactor_is_applied() {
        // one coordinate factor in R², (k, q, p) = (1, 1, 1): s = 1
        let f = coord_factor(2, 0, 1.0, 1.0);
        let p = TestingProblem::new(2, vec![f]).unwrap();
        assert_eq!(p.s, 1.0);
        let b = UnimodularBasis::new(Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5])).unwrap();
        let v = testing_value(&p, &[0.0, 0.0], &b, &TestingConfig::default()).unwrap();
        assert!((v.prefactor - 1.0 / 2.5).abs() < 1e-15);
        assert!((v.value - v.factor_values[0] * v.prefactor).abs() < 1e-15);
        assert!((v.factor_values[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn covariance_under_basis_change() {
        let f = parab_factor(2, 2, 0, 1.5, 3.0, Mode::Strong);
        let p = TestingProblem::new(2, vec![f]).unwrap();
        let x0 = Vector::from_vec(vec![0.3, -0.2]);
        let m = random_unimodular(2, 0.4, &mut ChaCha8Rng::seed_from_u64(2));
        let cfg = TestingConfig::default();
        let direct = testing_value(&p, x0.as_slice(), &m, &cfg).unwrap().value;
        let pm = p.reparametrize_x(&x0, m.matrix()).unwrap();
        let moved = testing_value(&pm, x0.as_slice(), &UnimodularBasis::identity(2), &cfg).unwrap().value;
        assert!((direct - moved).abs() < 1e-7 * direct, "{direct} vs {moved}");
    }

    #[test]
    fn paraboloid_system_is_translation_invariant() {
        let fs = (0..3).map(|j| parab_factor(3, 2, j, 1.5, 1.5, Mode::Strong)).collect();
        let p = TestingProblem::new(3, fs).unwrap();
        assert!(translation_invariant(&p, 1));
        let mut g = coord_factor(2, 0, 1.0, 1.0);
        g.weight = Weight::new(WeightExpr::parse("1 + x1 * x1").unwrap());
        let q = TestingProblem::new(2, vec![g]).unwrap();
        assert!(!translation_invariant(&q, 1));
    }

    #[test]
    fn q_functional_coordinate_slices() {
        let fs: Vec<QFactor> = (0..3)
            .map(|j| {
                let c = coord_factor(3, j, 1.0, 1.0);
                QFactor { map: c.map, chart: c.chart, density: Arc::new(|_: &[f64]| 1.0), r: 1.0 }
            })
            .collect();
        let r = q_functional(&fs, &[0.0; 3], &fast(), &QuadratureConfig::default()).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn q_functional_zero_density_and_homogeneity() {
        let mk = |lambda: f64| -> Vec<QFactor> {
            (0..2)
                .map(|j| {
                    let c = coord_factor(2, j, 1.0, 1.0);
                    let scale = if j == 0 { lambda } else { 1.0 };
                    QFactor { map: c.map, chart: c.chart, density: Arc::new(move |_: &[f64]| scale), r: 1.0 }
                })
                .collect()
        };
        let q = QuadratureConfig::default();
        assert_eq!(q_functional(&mk(0.0), &[0.0; 2], &fast(), &q).unwrap().value, 0.0);
        let a = q_functional(&mk(1.0), &[0.0; 2], &fast(), &q).unwrap().value;
        let b = q_functional(&mk(3.0), &[0.0; 2], &fast(), &q).unwrap().value;
        assert!((b - 3.0 * a).abs() < 1e-8);
    }

    #[test]
    fn identity_factor_multilinear_form() {
        let map = Arc::new(PolyMap::linear(&Matrix::identity(2, 2), None));
        let f = RadonFactor::new(
            "id",
            map,
            ChartSpec::linear_point(&Matrix::identity(2, 2), None),
            Weight::one(),
            1.0,
            1.0,
            Mode::Strong,
        )
        .unwrap();
        let p = TestingProblem::supercritical(2, vec![f]).unwrap();
        let fs = vec![box_indicator(vec![0.0, 0.0], vec![1.0, 1.0])];
        let outer = OuterBox { lo: vec![-1.0; 2], hi: vec![2.0; 2], nodes: 8, panels: 3 };
        let v = multilinear_form(&p, &fs, &outer, &QuadratureConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loomis_whitney_plane_form_factorizes() {
        // ∫ f₁(x²) f₂(x¹) dx = ∫f₁ ∫f₂
        let fs = vec![coord_factor(2, 1, 1.0, 1.0), coord_factor(2, 0, 1.0, 1.0)];
        let p = TestingProblem::new(2, fs).unwrap();
        let f1: Density = Arc::new(|y: &[f64]| (-y[0] * y[0]).exp());
        let f2: Density = Arc::new(|y: &[f64]| (-(y[0] - 1.0).powi(2) * 2.0).exp());
        let outer = OuterBox { lo: vec![-7.0; 2], hi: vec![8.0; 2], nodes: 16, panels: 6 };
        let v = multilinear_form(&p, &[f1, f2], &outer, &QuadratureConfig::default()).unwrap();
        let oracle = PI.sqrt() * (PI / 2.0).sqrt();
        assert!((v - oracle).abs() < 1e-9, "{v} vs {oracle}");
    }

    #[test]
    fn pointwise_bounds_hold_on_paraboloid() {
        let cfg = TestingConfig::default();
        let b = random_unimodular(2, 0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let ind = box_indicator(vec![-0.3, -1.0], vec![0.8, 2.0]);
        for mode in [Mode::Strong, Mode::Restricted] {
            let f = parab_factor(2, 2, 0, 1.5, 3.0, mode);
            let r = pointwise_bound_check(&f, &ind, &[0.1, 0.0], &b, &cfg).unwrap();
            assert!(r.holds, "{r:?}");
            assert!(r.lhs > 0.0);
        }
        let f = parab_factor(2, 2, 0, 1.0, 2.0, Mode::Strong);
        let r = pointwise_bound_check(&f, &ind, &[0.1, 0.0], &b, &cfg).unwrap();
        assert_eq!(r.inequality, "l1");
        assert!(r.holds, "{r:?}");
        let zero: Density = Arc::new(|_: &[f64]| 0.0);
        let r = pointwise_bound_check(&f, &zero, &[0.1, 0.0], &b, &cfg).unwrap();
        assert_eq!((r.lhs, r.rhs, r.holds), (0.0, 0.0, true));
    }

    #[test]
    fn sphere_average_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [2, 3] {
            for _ in 0..4 {
                let b = random_unimodular(n, 0.7, &mut rng);
                let x: Vec<f64> = random_vector(n, &mut rng).iter().map(|v| 0.4 * v).collect();
                let r = sphere_average_check(1.5, &x, &b, &QuadratureConfig::default()).unwrap();
                assert!(r.holds, "{r:?}");
            }
        }
    }

    #[test]
    fn sphere_moment_matches_formula() {
        // 2 π^{(n-1)/2} / Γ((n+1)/2)
        for n in 1..6 {
            let g = statrs::function::gamma::gamma((n as f64 + 1.0) / 2.0);
            let exact = 2.0 * PI.powf((n as f64 - 1.0) / 2.0) / g;
            assert!((sphere_abs_moment(n) - exact).abs() < 1e-12 * exact, "n={n}");
        }
    }

    #[test]
    fn lp_range_examples() {
        let [a, b] = lp_range_from_s(2, 1, 1.0).unwrap().unwrap();
        for (ip, iq) in [a, b] {
            assert!((ip - iq - 0.25).abs() < 1e-15);
            assert!((ip + iq - 1.0).abs() <= 0.25 + 1e-15);
        }
        let [a, b] = lp_range_from_s(3, 1, 3.0).unwrap().unwrap();
        assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15);
        assert!(lp_range_from_s(3, 1, 4.0).unwrap().is_none());
        let [a, _] = lp_range_from_s(2, 1, 1e-9).unwrap().unwrap();
        assert!((a.0 - a.1).abs() < 1e-8);
        assert!(lp_range_from_s(2, 2, 1.0).is_err());
    }

    #[test]
    fn fractional_exponent_examples() {
        assert_eq!(fractional_exponent(2.0, 2.0).unwrap(), 4.0);
        assert!((fractional_exponent(2.0, 1e9).unwrap() - 2.0).abs() < 1e-8);
        assert!(fractional_exponent(2.0, 1.0).is_err());
        for (p, s) in [(1.0, 3.0), (1.5, 2.0), (2.0, 5.0), (4.0, 1.5)] {
            let b = fractional_balance(p, s).unwrap();
            assert!((b.first - b.second).abs() < 1e-12);
            assert!((b.first - b.target).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_value_grows_with_domain() {
        let mut prev = 0.0;
        for h in [0.5, 1.0, 2.0, 4.0] {
            let mut f = parab_factor(2, 2, 0, 1.5, 3.0, Mode::Strong);
            f.chart = f.chart.with_domain(Domain::Box { half_widths: vec![h] });
            let v = factor_value(&f, &[0.0, 0.0], &UnimodularBasis::identity(2), &TestingConfig::default()).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }
}

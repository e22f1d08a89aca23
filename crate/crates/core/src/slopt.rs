//! Extremization of functions on `SL(n)`.
//!
//! A point is `M = exp(A)` with `A` trace-free, rescaled to `|det M| = 1` to
//! absorb rounding. Search runs an adaptive Nelder-Mead simplex in the `n² - 1`
//! coordinates of `A` from several starts; start 0 is the identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, UnimodularBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlOptimizerConfig {
    pub multistarts: usize,
    pub max_iters: usize,
    /// Simplex diameter (in generator coordinates) below which a run stops.
    pub step_tolerance: f64,
    /// Relative spread of simplex values below which a run stops.
    pub value_tolerance: f64,
    pub initial_step: f64,
    /// Standard deviation of the random generator entries for starts `1..`.
    pub start_spread: f64,
    /// A maximization is declared divergent once the best value exceeds this
    /// multiple of the identity value.
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for SlOptimizerConfig {
    fn default() -> Self {
        Self {
            multistarts: 16,
            max_iters: 1500,
            step_tolerance: 1e-7,
            value_tolerance: 1e-11,
            initial_step: 0.3,
            start_spread: 0.5,
            divergence_threshold: 1e9,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeStatus {
    Converged,
    MaxIterations,
    Diverging,
}

impl OptimizeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizeStatus::Converged => "converged",
            OptimizeStatus::MaxIterations => "max_iterations",
            OptimizeStatus::Diverging => "diverging",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartOutcome {
    pub value: f64,
    pub status: OptimizeStatus,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlOptimum {
    pub value: f64,
    pub basis: UnimodularBasis,
    pub status: OptimizeStatus,
    /// Index of the start that produced the reported optimum.
    pub start_index: usize,
    pub identity_value: f64,
    pub starts: Vec<StartOutcome>,
}

/// Maps generator coordinates to a unimodular basis.
pub fn basis_from_generator(params: &[f64], n: usize) -> Result<UnimodularBasis> {
    if params.len() != n * n - 1 {
        return Err(Error::DimensionMismatch(format!(
            "sl({n}) has dimension {}, got {} coordinates",
            n * n - 1,
            params.len()
        )));
    }
    let mut a = Matrix::zeros(n, n);
    let mut it = params.iter();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[(i, j)] = *it.next().unwrap();
            }
        }
    }
    let mut trace = 0.0;
    for i in 0..n - 1 {
        let d = *it.next().unwrap();
        a[(i, i)] = d;
        trace += d;
    }
    a[(n - 1, n - 1)] = -trace;
    UnimodularBasis::normalized(a.exp())
}

/// Optimizes `objective` over `SL(n)`.
///
/// The objective may return `+∞`; while maximizing this ends the search with
/// status [`OptimizeStatus::Diverging`]. NaN is an error.
pub fn sl_optimize<F>(
    objective: F,
    n: usize,
    direction: Direction,
    cfg: &SlOptimizerConfig,
) -> Result<SlOptimum>
where
    F: Fn(&UnimodularBasis) -> Result<f64> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let identity = UnimodularBasis::identity(n);
    let identity_value = objective(&identity)?;
    if identity_value.is_nan() {
        return Err(Error::NonFiniteObjective);
    }
    let sign = match direction {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let diverged = |v: f64| {
        direction == Direction::Maximize
            && (v == f64::INFINITY
                || (identity_value.abs() > 0.0
                    && v > cfg.divergence_threshold * identity_value.abs()))
    };
    if n == 1 || diverged(identity_value) {
        let status =
            if diverged(identity_value) { OptimizeStatus::Diverging } else { OptimizeStatus::Converged };
        return Ok(SlOptimum {
            value: identity_value,
            basis: identity,
            status,
            start_index: 0,
            identity_value,
            starts: vec![StartOutcome { value: identity_value, status, evaluations: 1 }],
        });
    }

    let dim = n * n - 1;
    let starts: Vec<Vec<f64>> = (0..cfg.multistarts.max(1))
        .map(|i| {
            if i == 0 {
                vec![0.0; dim]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(i as u64);
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * cfg.start_spread).collect()
            }
        })
        .collect();

    // minimize the negated objective for maximization
    let f = |x: &[f64]| -> Result<f64> {
        let b = basis_from_generator(x, n)?;
        let v = objective(&b)?;
        if v.is_nan() {
            return Err(Error::NonFiniteObjective);
        }
        Ok(-sign * v)
    };
    let stop = |g: f64| diverged(-sign * g);

    let run = |x0: &Vec<f64>| nelder_mead(&f, x0, cfg, &stop);
    #[cfg(feature = "parallel")]
    let runs: Vec<Result<NmRun>> = {
        use rayon::prelude::*;
        starts.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<Result<NmRun>> = starts.iter().map(run).collect();

    let mut best: Option<(usize, NmRun)> = None;
    let mut outcomes = Vec::with_capacity(runs.len());
    for (i, r) in runs.into_iter().enumerate() {
        let r = r?;
        outcomes.push(StartOutcome {
            value: -sign * r.value,
            status: r.status,
            evaluations: r.evaluations,
        });
        let better = match &best {
            None => true,
            Some((_, b)) => {
                r.status == OptimizeStatus::Diverging && b.status != OptimizeStatus::Diverging
                    || r.value < b.value - 1e-10 * b.value.abs().max(1e-300)
            }
        };
        if better && !(best.as_ref().is_some_and(|(_, b)| b.status == OptimizeStatus::Diverging)) {
            best = Some((i, r));
        }
    }
    let (start_index, run) = best.expect("at least one start");
    Ok(SlOptimum {
        value: -sign * run.value,
        basis: basis_from_generator(&run.x, n)?,
        status: run.status,
        start_index,
        identity_value,
        starts: outcomes,
    })
}

struct NmRun {
    x: Vec<f64>,
    value: f64,
    status: OptimizeStatus,
    evaluations: usize,
}

/// Simplex vertex. Values are compared on a grid of relative width
/// [`TIE_WIDTH`]; within a grid cell the point closer to the identity wins,
/// so flat directions of the objective do not make the simplex drift.
#[derive(Clone)]
struct Pt {
    x: Vec<f64>,
    f: f64,
    cell: f64,
    r2: f64,
}

const TIE_WIDTH: f64 = 1e-12;

impl Pt {
    fn new(x: Vec<f64>, f: f64, scale: f64) -> Self {
        let cell = (f / (TIE_WIDTH * scale)).round();
        let r2 = x.iter().map(|v| v * v).sum();
        Self { x, f, cell, r2 }
    }

    fn cmp(&self, o: &Pt) -> std::cmp::Ordering {
        self.cell.total_cmp(&o.cell).then(self.r2.total_cmp(&o.r2))
    }

    fn lt(&self, o: &Pt) -> bool {
        self.cmp(o) == std::cmp::Ordering::Less
    }
}

/// Adaptive Nelder-Mead (dimension-dependent coefficients), minimizing `f`.
/// Restarts from the best vertex until a restart no longer improves.
fn nelder_mead<F, S>(f: &F, x0: &[f64], cfg: &SlOptimizerConfig, stop: &S) -> Result<NmRun>
where
    F: Fn(&[f64]) -> Result<f64>,
    S: Fn(f64) -> bool,
{
    let d = x0.len();
    let df = d as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / df, 0.75 - 0.5 / df, 1.0 - 1.0 / df);
    let mut evals = 0usize;

    let f0 = f(x0)?;
    evals += 1;
    if stop(f0) {
        return Ok(NmRun { x: x0.to_vec(), value: f0, status: OptimizeStatus::Diverging, evaluations: evals });
    }
    let scale = if f0.is_finite() && f0 != 0.0 { f0.abs() } else { 1.0 };
    let mut eval = |x: Vec<f64>| -> Result<std::result::Result<Pt, Pt>> {
        evals += 1;
        let v = f(&x)?;
        let p = Pt::new(x, v, scale);
        Ok(if stop(v) { Err(p) } else { Ok(p) })
    };
    macro_rules! point {
        ($x:expr) => {
            match eval($x)? {
                Ok(p) => p,
                Err(p) => {
                    return Ok(NmRun { x: p.x, value: p.f, status: OptimizeStatus::Diverging, evaluations: evals })
                }
            }
        };
    }

    let mut center = Pt::new(x0.to_vec(), f0, scale);
    let mut iters = 0usize;
    let mut status = OptimizeStatus::MaxIterations;

    'restart: for round in 0..4 {
        let step = cfg.initial_step / (1 << round) as f64;
        let mut simplex: Vec<Pt> = vec![center.clone()];
        for i in 0..d {
            let mut x = center.x.clone();
            x[i] += step;
            simplex.push(point!(x));
        }
        loop {
            simplex.sort_by(|a, b| a.cmp(b));
            let (best, worst) = (simplex[0].f, simplex[d].f);
            let diam = simplex[1..]
                .iter()
                .map(|p| p.x.iter().zip(&simplex[0].x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            let spread = (worst - best).abs();
            if diam <= cfg.step_tolerance
                || (spread <= cfg.value_tolerance * best.abs().max(1e-300) && diam <= cfg.step_tolerance * 1e3)
            {
                status = OptimizeStatus::Converged;
                break;
            }
            if iters >= cfg.max_iters {
                status = OptimizeStatus::MaxIterations;
                break 'restart;
            }
            iters += 1;

            let mut centroid = vec![0.0; d];
            for p in &simplex[..d] {
                for (c, xi) in centroid.iter_mut().zip(&p.x) {
                    *c += xi / df;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[d].x).map(|(c, w)| c + t * (c - w)).collect()
            };
            let r = point!(along(alpha));
            if r.lt(&simplex[0]) {
                let e = point!(along(alpha * beta));
                simplex[d] = if e.lt(&r) { e } else { r };
                continue;
            }
            if r.lt(&simplex[d - 1]) {
                simplex[d] = r;
                continue;
            }
            let c = if r.lt(&simplex[d]) { point!(along(alpha * gamma)) } else { point!(along(-gamma)) };
            let bound = if r.lt(&simplex[d]) { &r } else { &simplex[d] };
            if c.lt(bound) {
                simplex[d] = c;
                continue;
            }
            // shrink towards the best vertex
            let x_best = simplex[0].x.clone();
            for v in simplex.iter_mut().skip(1) {
                let x: Vec<f64> = x_best.iter().zip(&v.x).map(|(b, x)| b + delta * (x - b)).collect();
                *v = point!(x);
            }
        }
        simplex.sort_by(|a, b| a.cmp(b));
        let improved = simplex[0].f < center.f - cfg.value_tolerance * center.f.abs().max(1e-300);
        center = simplex[0].clone();
        if round > 0 && !improved {
            break;
        }
    }
    Ok(NmRun { x: center.x, value: center.f, status, evaluations: evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_zero_is_identity() {
        let b = basis_from_generator(&[0.0; 8], 3).unwrap();
        assert!((b.matrix() - Matrix::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn generator_gives_unit_determinant() {
        let b = basis_from_generator(&[0.3, -1.2, 0.5, 0.8, 0.1, -0.4, 2.0, 0.7], 3).unwrap();
        assert!((b.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    // Product of row lengths is at least |det| = 1 (Hadamard), with equality
    // exactly on orthogonal matrices.
    #[test]
    fn minimizes_row_length_product_to_one() {
        let cfg = SlOptimizerConfig { multistarts: 4, ..Default::default() };
        let obj = |b: &UnimodularBasis| Ok(b.rows().iter().map(|r| r.norm()).product::<f64>());
        let opt = sl_optimize(obj, 3, Direction::Minimize, &cfg).unwrap();
        assert!((opt.value - 1.0).abs() < 1e-8);
        assert_eq!(opt.start_index, 0);
    }

    #[test]
    fn maximizing_reciprocal_hadamard_returns_orthogonal_matrix() {
        let cfg = SlOptimizerConfig { multistarts: 6, ..Default::default() };
        let obj = |b: &UnimodularBasis| Ok(1.0 / b.rows().iter().map(|r| r.norm()).product::<f64>());
        let opt = sl_optimize(obj, 2, Direction::Maximize, &cfg).unwrap();
        assert_eq!(opt.status, OptimizeStatus::Converged);
        let m = opt.basis.matrix();
        let mmt = m * m.transpose();
        assert!((mmt - Matrix::identity(2, 2)).norm() < 1e-3);
    }

    #[test]
    fn unbounded_objective_is_reported_diverging() {
        let cfg = SlOptimizerConfig { multistarts: 2, ..Default::default() };
        let obj = |b: &UnimodularBasis| Ok(b.matrix().norm_squared());
        let opt = sl_optimize(obj, 2, Direction::Maximize, &cfg).unwrap();
        assert_eq!(opt.status, OptimizeStatus::Diverging);
    }

    #[test]
    fn infinite_value_diverges_immediately() {
        let obj = |_: &UnimodularBasis| Ok(f64::INFINITY);
        let opt = sl_optimize(obj, 2, Direction::Maximize, &SlOptimizerConfig::default()).unwrap();
        assert_eq!(opt.status, OptimizeStatus::Diverging);
        assert_eq!(opt.starts.len(), 1);
    }

    #[test]
    fn nan_objective_is_an_error() {
        let obj = |_: &UnimodularBasis| Ok(f64::NAN);
        assert_eq!(
            sl_optimize(obj, 2, Direction::Maximize, &SlOptimizerConfig::default()),
            Err(Error::NonFiniteObjective)
        );
    }
}

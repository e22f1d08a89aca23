//! Knapp families: functions concentrated on `δ`-slabs around one slice.
//!
//! For a factor with `p > 1`,
//! `f_δ(y) = δ^{-k/p} χ_{‖π̄(x₀,y)‖<δ} (w(x₀,y)/‖d_xπ(x₀,y)‖)^{p'-1} η(y)`,
//! and for `p = 1`, `f_δ = δ^{-k} χ_{‖π̄(x₀,y)‖<δ} η`. As `δ → 0`,
//! `∫_{B_{cδ}(x₀)} Π (T_j f_{j,δ})^{q_j} / Π ‖f_{j,δ}‖_{p_j}^{q_j}` tends to
//! `|B_c| Π c_{k_j}^{-q_j/p_j}` times the testing value at the identity basis
//! (exactly so when `η = 1`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::incidence::{coarea_value, normalized_defining, ChartSpec, QuadratureConfig, ShellSum, SliceChart};
use crate::linalg::{random_vector, UnimodularBasis, Vector};
use crate::poly::DefiningMap;
use crate::quad::{composite, shell_rule, sphere_rule, unit_ball_volume};
use crate::testing::{testing_value, RadonFactor, TestingConfig, TestingProblem};

/// Cutoff `η` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Cutoff {
    One,
    /// `max(0, 1 - ‖y - z‖²/ρ²)²`.
    Bump { center: Vector, radius: f64 },
}

impl Cutoff {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Cutoff::One => 1.0,
            Cutoff::Bump { center, radius } => {
                let d2: f64 = y.iter().zip(center.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                (1.0 - d2 / (radius * radius)).max(0.0).powi(2)
            }
        }
    }

    fn pow(&self, y: &[f64], p: f64) -> f64 {
        let v = self.eval(y);
        if v == 0.0 {
            0.0
        } else {
            v.powf(p)
        }
    }
}

fn ratio_power(f: &RadonFactor, x0: &[f64], y: &[f64]) -> Result<f64> {
    let (dx, _) = f.map.jacobians(x0, y);
    let d = crate::linalg::minor_norm(&dx, &UnimodularBasis::identity(f.map.n()))?;
    if !(d > 0.0) {
        return Err(Error::DegenerateSlice { norm: d, x: x0.to_vec(), y: y.to_vec() });
    }
    let w = f.weight.eval(x0, y, &dx);
    Ok(if f.p == 1.0 { 1.0 } else { (w / d).powf(f.p_prime() - 1.0) })
}

/// `f_δ(y)` for the factor.
pub fn knapp_function(f: &RadonFactor, x0: &[f64], delta: f64, y: &[f64], cutoff: &Cutoff) -> Result<f64> {
    let eta = cutoff.eval(y);
    if eta == 0.0 {
        return Ok(0.0);
    }
    let (v, _) = normalized_defining(f.map.as_ref(), x0, y)?;
    if v.norm() >= delta {
        return Ok(0.0);
    }
    let k = f.k() as f64;
    Ok(delta.powf(-k / f.p) * ratio_power(f, x0, y)? * eta)
}

fn pibar_norm(map: &dyn DefiningMap, x0: &[f64], y: &Vector) -> Result<f64> {
    Ok(normalized_defining(map, x0, y.as_slice())?.0.norm())
}

/// First `ρ > 0` with `‖π̄(x₀, Ψ(t, ρu))‖ = δ`.
fn slab_radius(chart: &SliceChart, map: &dyn DefiningMap, base: &crate::incidence::SlicePoint, u: &[f64], delta: f64, cap: f64) -> Result<f64> {
    let x0 = chart.x().to_vec();
    let h = |rho: f64| -> Result<f64> {
        let z: Vec<f64> = u.iter().map(|v| v * rho).collect();
        let (y, _) = chart.tube_point(base, &z)?;
        Ok(pibar_norm(map, &x0, &y)? - delta)
    };
    let mut lo = 0.0;
    let mut hi = (delta / 64.0).min(cap);
    let mut found = false;
    for _ in 0..80 {
        if h(hi)? >= 0.0 {
            found = true;
            break;
        }
        lo = hi;
        if hi >= cap {
            break;
        }
        hi = (2.0 * hi).min(cap);
    }
    if !found {
        if cap.is_finite() && hi >= cap {
            return Ok(cap);
        }
        return Err(Error::InvalidArgument(format!("slab around the slice is unbounded at y = {:?}", base.y.as_slice())));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if h(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `∫_{‖π̄(x₀,y)‖<δ} g(y) dy` through the tube around the slice at `x₀`.
pub fn slab_integral<G>(
    map: &dyn DefiningMap,
    x0: &[f64],
    chart: &ChartSpec,
    delta: f64,
    mut g: G,
    cfg: &QuadratureConfig,
) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<f64>,
{
    let c = chart.at(map, x0)?;
    let k = map.k();
    let dirs = sphere_rule(k, cfg.nodes);
    let radial = composite(0.0, 1.0, cfg.nodes, 1);
    let cap = match chart {
        ChartSpec::Sphere { radius, .. } => *radius,
        _ => f64::INFINITY,
    };
    let limit = if chart.is_unbounded() { cfg.max_doublings + 1 } else { 1 };
    let mut sum = ShellSum::new();
    for i in 0..limit {
        let Some(nodes) = c.shell_nodes(i, cfg.nodes, cfg.panels) else { break };
        let mut s = 0.0;
        for (t, wt) in nodes {
            let base = c.point(&t)?;
            for (u, wu) in &dirs {
                let rho = slab_radius(&c, map, &base, u, delta, cap)?;
                for (r, wr) in &radial {
                    let rr = r * rho;
                    let z: Vec<f64> = u.iter().map(|v| v * rr).collect();
                    let (y, jac) = c.tube_point(&base, &z)?;
                    let v = g(y.as_slice())?;
                    if v != 0.0 {
                        s += wt * wu * wr * rho * rr.powi(k as i32 - 1) * jac * v;
                    }
                }
            }
        }
        sum.push(s, cfg);
        if sum.done {
            break;
        }
    }
    if chart.is_unbounded() {
        sum.finish();
    } else {
        sum.tail = 0.0;
    }
    Ok(sum.value())
}

/// `‖f_δ‖_p^p` and its `δ → 0` limit.
#[derive(Debug, Clone, PartialEq)]
pub struct KnappNorm {
    pub delta: f64,
    pub norm: f64,
    /// `‖f_δ‖_p^p`.
    pub power: f64,
    /// `c_k ∫ (w^{p'}/‖d_xπ‖^{p'-1}) η^p dσ`, or `c_k ∫ ‖d_xπ‖ η dσ` for `p = 1`.
    pub limit: f64,
    pub gap: f64,
}

/// The slice integral in the limit of `‖f_δ‖_p^p`, before the factor `c_k`.
fn norm_limit(f: &RadonFactor, x0: &[f64], cutoff: &Cutoff, cfg: &QuadratureConfig) -> Result<f64> {
    let mut err = None;
    let id = UnimodularBasis::identity(f.map.n());
    let v = coarea_value(
        f.map.as_ref(),
        x0,
        &f.chart,
        |pt| {
            let run = || -> Result<f64> {
                let eta = cutoff.pow(pt.y.as_slice(), f.p);
                if eta == 0.0 {
                    return Ok(0.0);
                }
                let d = crate::linalg::minor_norm(&pt.dx, &id)?;
                if f.p == 1.0 {
                    return Ok(d * eta);
                }
                let w = f.weight.eval(x0, pt.y.as_slice(), &pt.dx);
                let pp = f.p_prime();
                Ok(w.powf(pp) / d.powf(pp - 1.0) * eta)
            };
            run().unwrap_or_else(|e| {
                err = Some(e);
                0.0
            })
        },
        cfg,
    )?;
    err.map_or(Ok(v), Err)
}

pub fn knapp_norm(f: &RadonFactor, x0: &[f64], delta: f64, cutoff: &Cutoff, cfg: &QuadratureConfig) -> Result<KnappNorm> {
    let k = f.k() as f64;
    let inner = slab_integral(
        f.map.as_ref(),
        x0,
        &f.chart,
        delta,
        |y| {
            let eta = cutoff.pow(y, f.p);
            if eta == 0.0 {
                return Ok(0.0);
            }
            Ok(ratio_power(f, x0, y)?.powf(f.p) * eta)
        },
        cfg,
    )?;
    let power = inner / delta.powf(k);
    let limit = unit_ball_volume(f.k()) * norm_limit(f, x0, cutoff, cfg)?;
    Ok(KnappNorm { delta, norm: power.powf(1.0 / f.p), power, limit, gap: (power - limit).abs() / limit.abs().max(1e-300) })
}

/// `T f_δ(x)`.
pub fn apply_knapp(f: &RadonFactor, x0: &[f64], delta: f64, x: &[f64], cutoff: &Cutoff, cfg: &QuadratureConfig) -> Result<f64> {
    let mut err = None;
    let v = coarea_value(
        f.map.as_ref(),
        x,
        &f.chart,
        |pt| {
            let run = || -> Result<f64> {
                let fy = knapp_function(f, x0, delta, pt.y.as_slice(), cutoff)?;
                if fy == 0.0 {
                    return Ok(0.0);
                }
                Ok(fy * f.weight.eval(x, pt.y.as_slice(), &pt.dx))
            };
            run().unwrap_or_else(|e| {
                err = Some(e);
                0.0
            })
        },
        cfg,
    )?;
    err.map_or(Ok(v), Err)
}

#[derive(Debug, Clone)]
pub struct KnappFamily {
    pub problem: TestingProblem,
    pub x0: Vec<f64>,
    /// Strictly decreasing.
    pub ladder: Vec<f64>,
    pub c: f64,
    pub cutoffs: Vec<Cutoff>,
}

/// Default ladder `2^{-3} .. 2^{-8}`.
pub fn default_ladder() -> Vec<f64> {
    (3..=8).map(|e| 2f64.powi(-e)).collect()
}

impl KnappFamily {
    pub fn new(problem: TestingProblem, x0: Vec<f64>, ladder: Vec<f64>, c: f64, cutoffs: Vec<Cutoff>) -> Result<Self> {
        if x0.len() != problem.n {
            return Err(Error::DimensionMismatch("x0 does not match the problem dimension".into()));
        }
        if cutoffs.len() != problem.factors.len() {
            return Err(Error::WrongCount { expected: problem.factors.len(), got: cutoffs.len() });
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidArgument(format!("ball fraction c must lie in (0, 1), got {c}")));
        }
        if ladder.is_empty() || ladder.iter().any(|d| !(*d > 0.0)) || ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("delta ladder must be positive and strictly decreasing".into()));
        }
        Ok(Self { problem, x0, ladder, c, cutoffs })
    }

    /// `Σ k_j q_j / p_j - n`, zero on the scaling line.
    pub fn excess(&self) -> f64 {
        -self.problem.s
    }

    /// `Π c_{k_j}^{q_j/p_j} / |B_c|`: multiplies the ratio into testing units.
    pub fn normalization(&self) -> f64 {
        let ck: f64 = self.problem.factors.iter().map(|f| unit_ball_volume(f.k()).powf(f.q / f.p)).product();
        ck / (unit_ball_volume(self.problem.n) * self.c.powi(self.problem.n as i32))
    }
}

/// One rung of the ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct KnappRung {
    pub delta: f64,
    /// `∫_{B_{cδ}(x₀)} Π (T_j f_{j,δ})^{q_j} dx`.
    pub lhs: f64,
    /// `Π ‖f_{j,δ}‖_{p_j}^{q_j}`.
    pub norms: f64,
    pub ratio: f64,
    /// `ratio · δ^{Σkq/p - n}`; equal to `ratio` on the scaling line.
    pub scaled: f64,
}

fn rung_with_c(family: &KnappFamily, delta: f64, c: f64, cfg: &QuadratureConfig) -> Result<KnappRung> {
    let n = family.problem.n;
    let x0 = &family.x0;
    let mut norms = 1.0;
    for (f, eta) in family.problem.factors.iter().zip(&family.cutoffs) {
        norms *= knapp_norm(f, x0, delta, eta, cfg)?.norm.powf(f.q);
    }
    let mut lhs = 0.0;
    for (xi, w) in shell_rule(n, 0.0, c, cfg.nodes.min(8), 1) {
        let x: Vec<f64> = x0.iter().zip(&xi).map(|(a, b)| a + delta * b).collect();
        let mut prod = 1.0;
        for (f, eta) in family.problem.factors.iter().zip(&family.cutoffs) {
            prod *= apply_knapp(f, x0, delta, &x, eta, cfg)?.abs().powf(f.q);
            if prod == 0.0 {
                break;
            }
        }
        lhs += w * prod;
    }
    lhs *= delta.powi(n as i32);
    let ratio = lhs / norms;
    Ok(KnappRung { delta, lhs, norms, ratio, scaled: ratio * delta.powf(family.excess()) })
}

pub fn knapp_ratio(family: &KnappFamily, delta: f64, cfg: &QuadratureConfig) -> Result<KnappRung> {
    rung_with_c(family, delta, family.c, cfg)
}

fn ladder_rungs(family: &KnappFamily, cfg: &QuadratureConfig) -> Result<Vec<KnappRung>> {
    let run = |d: &f64| knapp_ratio(family, *d, cfg);
    #[cfg(feature = "parallel")]
    let rungs: Vec<Result<KnappRung>> = {
        use rayon::prelude::*;
        family.ladder.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rungs: Vec<Result<KnappRung>> = family.ladder.iter().map(run).collect();
    rungs.into_iter().collect()
}

/// Two-point Richardson extrapolation on the last three rungs.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    pub value: f64,
    /// Empirical order `α` in `r(δ) ≈ L + A δ^α`; `None` when the ladder is flat.
    pub order: Option<f64>,
}

/// Relative size below which successive rungs count as equal.
const FLAT: f64 = 1e-10;

pub fn richardson(deltas: &[f64], values: &[f64]) -> Result<Extrapolation> {
    let m = values.len();
    if m < 3 || deltas.len() != m {
        return Err(Error::InvalidArgument("extrapolation needs at least three rungs".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonCauchy("ladder contains a non-finite value".into()));
    }
    let (r1, r2, r3) = (values[m - 3], values[m - 2], values[m - 1]);
    let scale = r3.abs().max(1e-300);
    let (d1, d2) = (r2 - r1, r3 - r2);
    if d2.abs() <= FLAT * scale {
        return Ok(Extrapolation { value: r3, order: None });
    }
    // successive differences must shrink for the ladder to be Cauchy
    let diffs: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let growing = diffs.windows(2).rev().take(2).all(|w| w[1] > w[0] * 1.05);
    if growing && d2.abs() > 1e-3 * scale {
        return Err(Error::NonCauchy(format!("differences grow along the ladder: {diffs:?}")));
    }
    let q = deltas[m - 2] / deltas[m - 1];
    let ratio = d1 / d2;
    if !(ratio > 1.0) {
        // no clean power law; fall back to first order
        let value = r3 + d2 / (q - 1.0);
        return Ok(Extrapolation { value, order: Some(1.0) });
    }
    let alpha = ratio.ln() / q.ln();
    let value = r3 + d2 / (q.powf(alpha) - 1.0);
    Ok(Extrapolation { value, order: Some(alpha) })
}

/// Extrapolated lower bound for `‖T‖` and its comparison with the testing value.
#[derive(Debug, Clone, PartialEq)]
pub struct NecessityReport {
    pub rungs: Vec<KnappRung>,
    pub extrapolated_ratio: Extrapolation,
    /// Extrapolated ratio times `Π c_k^{q/p} / |B_c|`.
    pub lower_bound: f64,
    pub testing_value: f64,
    /// `lower_bound / testing_value`.
    pub comparison: f64,
    /// Relative change of the normalized finest rung when `c` is halved.
    pub c_sensitivity: f64,
    /// `c_sensitivity` above 5%.
    pub resolution_warning: bool,
}

pub fn necessity_lower_bound(family: &KnappFamily, cfg: &QuadratureConfig) -> Result<NecessityReport> {
    if family.ladder.len() < 3 {
        return Err(Error::InvalidArgument("ladder needs at least three rungs".into()));
    }
    let rungs = ladder_rungs(family, cfg)?;
    let values: Vec<f64> = rungs.iter().map(|r| r.scaled).collect();
    let ex = richardson(&family.ladder, &values)?;
    let norm = family.normalization();
    let lower_bound = ex.value * norm;
    let tv = testing_value(
        &family.problem,
        &family.x0,
        &UnimodularBasis::identity(family.problem.n),
        &TestingConfig { quad: cfg.clone(), ..Default::default() },
    )?
    .value;
    let finest = rungs.last().expect("non-empty ladder");
    let half = KnappFamily { c: family.c / 2.0, ..family.clone() };
    let other = rung_with_c(&half, finest.delta, half.c, cfg)?;
    let a = finest.scaled * norm;
    let b = other.scaled * half.normalization();
    let c_sensitivity = (a - b).abs() / a.abs().max(1e-300);
    Ok(NecessityReport {
        rungs,
        extrapolated_ratio: ex,
        lower_bound,
        testing_value: tv,
        comparison: lower_bound / tv,
        c_sensitivity,
        resolution_warning: c_sensitivity > 0.05,
    })
}

/// Both concentration limits at one rung.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationRung {
    pub delta: f64,
    /// `δ^{-k} ∫ f χ_{‖π̄‖<δ} dy`.
    pub space_value: f64,
    pub space_gap: f64,
    /// `∫_{Σ_{x₀+δξ}} f χ_{‖π̄(x₀,·)‖<δ} dσ` per sampled `ξ`.
    pub point_values: Vec<f64>,
    /// Largest and smallest relative gap over `ξ`.
    pub point_gap_max: f64,
    pub point_gap_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    /// `c_k ∫ f ‖d_xπ‖ dσ`.
    pub space_limit: f64,
    /// `∫ f dσ` at `x₀`.
    pub point_limit: f64,
    pub xis: Vec<Vec<f64>>,
    pub rungs: Vec<ConcentrationRung>,
}

/// Seeded `ξ` samples, uniform in the ball of radius `c`.
pub fn sample_xis(n: usize, count: usize, c: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let g = random_vector(n, &mut rng);
            let r: f64 = rand::Rng::random::<f64>(&mut rng).powf(1.0 / n as f64) * c;
            (g.normalize() * r).iter().copied().collect()
        })
        .collect()
}

pub fn concentration_limits(
    f: &RadonFactor,
    x0: &[f64],
    ladder: &[f64],
    xis: &[Vec<f64>],
    cutoff: &Cutoff,
    cfg: &QuadratureConfig,
) -> Result<ConcentrationReport> {
    let map = f.map.as_ref();
    let k = f.k();
    let mut err = None;
    let mut slice = |x: &[f64], with_chi: Option<f64>| -> Result<f64> {
        let v = coarea_value(
            map,
            x,
            &f.chart,
            |pt| {
                let eta = cutoff.eval(pt.y.as_slice());
                if eta == 0.0 {
                    return 0.0;
                }
                match with_chi {
                    None => eta,
                    Some(delta) => match pibar_norm(map, x0, &pt.y) {
                        Ok(v) if v < delta => eta,
                        Ok(_) => 0.0,
                        Err(e) => {
                            err = Some(e);
                            0.0
                        }
                    },
                }
            },
            cfg,
        )?;
        err.take().map_or(Ok(v), Err)
    };
    let point_limit = slice(x0, None)?;
    let id = UnimodularBasis::identity(f.map.n());
    let mut err2 = None;
    let weighted = coarea_value(
        map,
        x0,
        &f.chart,
        |pt| {
            let eta = cutoff.eval(pt.y.as_slice());
            if eta == 0.0 {
                return 0.0;
            }
            match crate::linalg::minor_norm(&pt.dx, &id) {
                Ok(d) => eta * d,
                Err(e) => {
                    err2 = Some(e);
                    0.0
                }
            }
        },
        cfg,
    )?;
    if let Some(e) = err2 {
        return Err(e);
    }
    let space_limit = unit_ball_volume(k) * weighted;
    let mut rungs = Vec::new();
    for &delta in ladder {
        let s = slab_integral(map, x0, &f.chart, delta, |y| Ok(cutoff.eval(y)), cfg)? / delta.powi(k as i32);
        let mut point_values = Vec::new();
        for xi in xis {
            let x: Vec<f64> = x0.iter().zip(xi).map(|(a, b)| a + delta * b).collect();
            point_values.push(slice(&x, Some(delta))?);
        }
        let gaps: Vec<f64> = point_values.iter().map(|v| (v - point_limit).abs() / point_limit.abs().max(1e-300)).collect();
        rungs.push(ConcentrationRung {
            delta,
            space_value: s,
            space_gap: (s - space_limit).abs() / space_limit.abs().max(1e-300),
            point_gap_max: gaps.iter().copied().fold(0.0, f64::max),
            point_gap_min: gaps.iter().copied().fold(f64::INFINITY, f64::min),
            point_values,
        });
    }
    Ok(ConcentrationReport { space_limit, point_limit, xis: xis.to_vec(), rungs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incidence::Domain;
    use crate::linalg::{random_unimodular, Matrix};
    use crate::poly::PolyMap;
    use crate::testing::{Mode, Weight};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn coord(n: usize, j: usize, p: f64, q: f64) -> RadonFactor {
        let mut a = Matrix::zeros(1, n);
        a[(0, j)] = 1.0;
        RadonFactor::new(format!("c{j}"), Arc::new(PolyMap::linear(&a, None)), ChartSpec::linear_point(&a, None), Weight::one(), p, q, Mode::Strong)
            .unwrap()
    }

    fn identity_factor(n: usize, p: f64) -> RadonFactor {
        let a = Matrix::identity(n, n);
        RadonFactor::new("id", Arc::new(PolyMap::linear(&a, None)), ChartSpec::linear_point(&a, None), Weight::one(), p, p, Mode::Strong)
            .unwrap()
    }

    fn circle() -> RadonFactor {
        RadonFactor::new("circle", Arc::new(PolyMap::sphere(2, 1.0)), ChartSpec::sphere(2, 1.0), Weight::one(), 1.0, 1.0, Mode::Strong)
            .unwrap()
    }

    fn parabola(p: f64, q: f64) -> RadonFactor {
        RadonFactor::new(
            "parabola",
            Arc::new(PolyMap::paraboloid(2, 2, 0)),
            ChartSpec::paraboloid(2, 2, 0, 4.0),
            Weight::one(),
            p,
            q,
            Mode::Strong,
        )
        .unwrap()
    }

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn linear_knapp_function() {
        let f = identity_factor(2, 2.0);
        let d = 0.1;
        let v = knapp_function(&f, &[0.0, 0.0], d, &[0.05, 0.0], &Cutoff::One).unwrap();
        assert!((v - d.powf(-1.0)).abs() < 1e-12);
        assert_eq!(knapp_function(&f, &[0.0, 0.0], d, &[0.2, 0.0], &Cutoff::One).unwrap(), 0.0);
    }

    #[test]
    fn p_one_form_ignores_weight() {
        let mut f = coord(2, 0, 1.0, 2.0);
        let a = knapp_function(&f, &[0.0, 0.0], 0.1, &[0.01], &Cutoff::One).unwrap();
        f.weight = Weight::new(crate::weight::WeightExpr::parse("3 + y1").unwrap());
        let b = knapp_function(&f, &[0.0, 0.0], 0.1, &[0.01], &Cutoff::One).unwrap();
        assert_eq!(a, b);
        assert!((a - 10.0).abs() < 1e-12);
    }

    #[test]
    fn paraboloid_slab_membership_matches_distance() {
        // π̄ = π/|d_xπ| is within O(δ²) of the signed distance to y² = y¹²
        let f = parabola(1.5, 3.0);
        let d = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agree = 0;
        let total = 400;
        for _ in 0..total {
            let y = [rand::Rng::random_range(&mut rng, -1.0..1.0), rand::Rng::random_range(&mut rng, -1.0..2.0)];
            let inside = knapp_function(&f, &[0.0, 0.0], d, &y, &Cutoff::One).unwrap() > 0.0;
            // vertical distance times the slope factor of the slice
            let u: f64 = y[0];
            let vert = (y[1] - u * u).abs() / (1.0 + 4.0 * u * u).sqrt();
            if inside == (vert < d) {
                agree += 1;
            }
            if (vert - d).abs() > 0.02 {
                assert_eq!(inside, vert < d, "y = {y:?}");
            }
        }
        assert!(agree > total * 9 / 10);
    }

    #[test]
    fn linear_norm_is_exact() {
        let f = identity_factor(2, 2.0);
        for d in [0.2, 0.05] {
            let r = knapp_norm(&f, &[0.3, -0.1], d, &Cutoff::One, &cfg()).unwrap();
            assert!((r.power - PI).abs() < 1e-10, "{}", r.power);
            assert!(r.gap < 1e-10);
        }
    }

    #[test]
    fn circle_annulus_oracle() {
        let f = circle();
        for d in [0.2, 0.1, 0.05] {
            let s = slab_integral(f.map.as_ref(), &[0.0, 0.0], &f.chart, d, |_| Ok(1.0), &cfg()).unwrap() / d;
            let exact = 4.0 * PI * (1.0 + d * d).sqrt();
            assert!((s - exact).abs() < 1e-9 * exact, "{s} vs {exact}");
        }
    }

    #[test]
    fn linear_ratio_is_delta_independent() {
        let p = TestingProblem::new(2, vec![identity_factor(2, 2.0)]).unwrap();
        let fam = KnappFamily::new(p, vec![0.0, 0.0], default_ladder(), 0.5, vec![Cutoff::One]).unwrap();
        let a = knapp_ratio(&fam, 0.1, &cfg()).unwrap().ratio;
        let b = knapp_ratio(&fam, 0.01, &cfg()).unwrap().ratio;
        assert!((a - b).abs() < 1e-12);
        assert!((a * fam.normalization() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn loomis_whitney_lower_bound_matches_testing_value() {
        let fs = vec![coord(2, 0, 2.0, 2.0), coord(2, 1, 2.0, 2.0)];
        let p = TestingProblem::new(2, fs).unwrap();
        let fam = KnappFamily::new(p, vec![0.1, 0.2], default_ladder(), 0.5, vec![Cutoff::One, Cutoff::One]).unwrap();
        let r = necessity_lower_bound(&fam, &cfg()).unwrap();
        assert!((r.comparison - 1.0).abs() < 1e-6, "{r:?}");
        assert!(!r.resolution_warning);
    }

    #[test]
    fn paraboloid_lower_bound_is_order_one() {
        let p = TestingProblem::new(2, vec![parabola(1.5, 3.0)]).unwrap();
        let bump = Cutoff::Bump { center: Vector::from_vec(vec![0.0, 0.0]), radius: 1.5 };
        let ladder: Vec<f64> = (3..=6).map(|e| 2f64.powi(-e)).collect();
        let fam = KnappFamily::new(p, vec![0.0, 0.0], ladder, 0.5, vec![bump]).unwrap();
        let r = necessity_lower_bound(&fam, &cfg()).unwrap();
        assert!(r.comparison > 0.1 && r.comparison < 10.0, "{r:?}");
    }

    #[test]
    fn supercritical_scaled_ratio_converges() {
        // identity factor with q > p: Σkq/p - n = n(q/p - 1) > 0
        let a = Matrix::identity(1, 1);
        let f = RadonFactor::new("id", Arc::new(PolyMap::linear(&a, None)), ChartSpec::linear_point(&a, None), Weight::one(), 2.0, 4.0, Mode::Strong)
            .unwrap();
        let p = TestingProblem::supercritical(1, vec![f]).unwrap();
        let fam = KnappFamily::new(p, vec![0.0], default_ladder(), 0.5, vec![Cutoff::One]).unwrap();
        let r1 = knapp_ratio(&fam, 0.1, &cfg()).unwrap();
        let r2 = knapp_ratio(&fam, 0.01, &cfg()).unwrap();
        assert!((r1.scaled - r2.scaled).abs() < 1e-10 * r1.scaled);
        assert!(r2.ratio > 9.0 * r1.ratio);
    }

    #[test]
    fn richardson_recovers_limits() {
        let ds: Vec<f64> = (1..=5).map(|e| 2f64.powi(-e)).collect();
        let v: Vec<f64> = ds.iter().map(|d| 3.0 + 0.7 * d).collect();
        let e = richardson(&ds, &v).unwrap();
        assert!((e.value - 3.0).abs() < 1e-12);
        assert!((e.order.unwrap() - 1.0).abs() < 1e-9);
        let v: Vec<f64> = ds.iter().map(|d| 3.0 - 2.0 * d * d).collect();
        let e = richardson(&ds, &v).unwrap();
        assert!((e.value - 3.0).abs() < 1e-12 && (e.order.unwrap() - 2.0).abs() < 1e-9);
        let flat = vec![1.5; 5];
        assert_eq!(richardson(&ds, &flat).unwrap(), Extrapolation { value: 1.5, order: None });
        let bad: Vec<f64> = ds.iter().map(|d| 1.0 / d).collect();
        assert!(matches!(richardson(&ds, &bad), Err(Error::NonCauchy(_))));
    }

    #[test]
    fn concentration_circle_and_paraboloid() {
        let f = circle();
        let xis = sample_xis(2, 8, 0.5, 1);
        let r = concentration_limits(&f, &[0.0, 0.0], &[0.1, 0.05, 0.025], &xis, &Cutoff::One, &cfg()).unwrap();
        assert!((r.space_limit - 4.0 * PI).abs() < 1e-9);
        let last = r.rungs.last().unwrap();
        assert!(last.space_gap < 1e-3);

        let g = parabola(1.5, 3.0);
        let bump = Cutoff::Bump { center: Vector::from_vec(vec![0.0, 0.0]), radius: 1.0 };
        let r = concentration_limits(&g, &[0.0, 0.0], &[0.1, 0.05, 0.025, 0.0125], &xis, &bump, &cfg()).unwrap();
        for w in r.rungs.windows(2) {
            assert!(w[1].space_gap < w[0].space_gap);
            assert!(w[1].point_gap_max < w[0].point_gap_max);
        }
    }

    #[test]
    fn covariance_of_extrapolated_value() {
        let p = TestingProblem::new(2, vec![coord(2, 0, 2.0, 2.0), coord(2, 1, 2.0, 2.0)]).unwrap();
        let m = random_unimodular(2, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
        let x0 = Vector::from_vec(vec![0.1, 0.2]);
        let pm = p.reparametrize_x(&x0, m.matrix()).unwrap();
        let ladder: Vec<f64> = (3..=5).map(|e| 2f64.powi(-e)).collect();
        let fam = KnappFamily::new(pm.clone(), x0.iter().copied().collect(), ladder, 0.5, vec![Cutoff::One, Cutoff::One]).unwrap();
        let r = necessity_lower_bound(&fam, &cfg()).unwrap();
        let direct = testing_value(&p, x0.as_slice(), &m, &TestingConfig::default()).unwrap().value;
        assert!((r.testing_value - direct).abs() < 1e-9 * direct);
        assert!((r.comparison - 1.0).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn bounded_graph_domain_is_accepted() {
        let mut f = parabola(1.5, 3.0);
        f.chart = f.chart.with_domain(Domain::Box { half_widths: vec![1.0] });
        let r = knapp_norm(&f, &[0.0, 0.0], 0.01, &Cutoff::One, &cfg()).unwrap();
        assert!(r.gap < 0.01, "{r:?}");
    }
}

//! Randomized invariant suites for the algebraic layer and the visibility
//! geometry. Every instance draws from its own ChaCha stream, so results do not
//! depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::{
    cyclic_gram_sequence, gram, log_gram, minor_norm_matrix_form, minor_norm_sum_of_minors, project_complement,
    random_unimodular, random_vector, Matrix, Vector,
};
use crate::visibility::{extremal_basis, sandwich_check, wedge_lower_bound_check, DiscreteMeasure, ExtremalConfig, KForm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { instances: 1000, mc_samples: 4000, seed: 20 }
    }
}

/// Outcome of one property over all of its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub instances: usize,
    pub violations: usize,
    /// Largest violation measure seen; `≤ 0` means every instance had slack.
    pub worst: f64,
    /// Property-specific summary, e.g. the pooled z-score.
    pub statistic: f64,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn stream(seed: u64, tag: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(i as u64);
    r
}

fn map_instances<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Folds per-instance violation measures (positive = violated).
fn summarize(name: &'static str, measures: Vec<Result<f64>>) -> Result<PropertyResult> {
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let instances = measures.len();
    for m in measures {
        let m = m?;
        if m > 0.0 || m.is_nan() {
            violations += 1;
        }
        worst = worst.max(m);
    }
    Ok(PropertyResult { name, instances, violations, worst, statistic: worst })
}

fn vectors(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    (0..l).map(|_| random_vector(n, rng)).collect()
}

/// Monte Carlo estimate of `∫ exp(-π‖Σ zⁱvᵢ‖²) dz` with its standard error.
///
/// Importance samples from the Gaussian with precision `π A/2`, where `A` is
/// the explicit inner-product matrix, so the relative weight variance is
/// bounded on every instance however ill-conditioned. The integrand itself is
/// evaluated from `‖Σ zⁱvᵢ‖`.
pub fn gaussian_gram_integral(vs: &[Vector], samples: usize, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let l = vs.len();
    let v = Matrix::from_columns(vs);
    let a = crate::linalg::gram_matrix(vs)? / 2.0;
    let chol = a.cholesky().ok_or(crate::error::Error::DependentVectors(0.0))?;
    let lt = chol.l().transpose();
    // proposal density det(A/2)^{1/2} exp(-π zᵀ(A/2)z)
    let diag = chol.l().diagonal();
    if !(diag.min() > 1e-7 * diag.max()) {
        return Err(crate::error::Error::DependentVectors(diag.min() / diag.max()));
    }
    let sqrt_det: f64 = diag.iter().product();
    let sd = (2.0 * std::f64::consts::PI).sqrt().recip();
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let y = Vector::from_fn(l, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        let z = lt.solve_upper_triangular(&y).expect("cholesky factor is invertible");
        let q = sqrt_det * (-std::f64::consts::PI * y.norm_squared()).exp();
        let w = (-std::f64::consts::PI * (&v * &z).norm_squared()).exp() / q;
        s1 += w;
        s2 += w * w;
    }
    let m = samples as f64;
    let mean = s1 / m;
    let var = (s2 / m - mean * mean).max(0.0);
    Ok((mean, (var / m).sqrt()))
}

fn gaussian_identity(cfg: &SuiteConfig) -> Result<PropertyResult> {
    let zs: Vec<Result<f64>> = map_instances(cfg.instances, |i| {
        let mut r = stream(cfg.seed, 1, i);
        let n = r.random_range(1..=4);
        let l = r.random_range(1..=n);
        let vs = vectors(n, l, &mut r);
        let exact = gram(&vs)?.powf(-0.5);
        let (est, se) = gaussian_gram_integral(&vs, cfg.mc_samples, &mut r)?;
        Ok((est - exact) / se.max(1e-300))
    });
    let zs = zs.into_iter().collect::<Result<Vec<_>>>()?;
    // the per-instance errors are independent, so their pooled z-score is N(0, 1)
    let pooled = zs.iter().sum::<f64>() / (zs.len() as f64).sqrt();
    let worst = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    let bad = !(pooled.abs() <= 3.0);
    Ok(PropertyResult {
        name: "gaussian_identity",
        instances: zs.len(),
        violations: usize::from(bad),
        worst,
        statistic: pooled,
    })
}

fn rel_gap(a: f64, b: f64, tol: f64) -> f64 {
    (a - b).abs() - tol * a.abs().max(b.abs())
}

pub fn gram_suite(cfg: &SuiteConfig) -> Result<Vec<PropertyResult>> {
    let mut out = vec![gaussian_identity(cfg)?];

    out.push(summarize(
        "projection_monotonicity",
        map_instances(cfg.instances, |i| {
            let mut r = stream(cfg.seed, 2, i);
            let n = r.random_range(2..=5);
            let l = r.random_range(1..=n);
            let span = vectors(n, r.random_range(1..n), &mut r);
            let vs = vectors(n, l, &mut r);
            let pv = vs.iter().map(|v| project_complement(&span, v)).collect::<Result<Vec<_>>>()?;
            Ok(gram(&pv)? - gram(&vs)? * (1.0 + 1e-9))
        }),
    )?);

    out.push(summarize(
        "gramfactor",
        map_instances(cfg.instances, |i| {
            let mut r = stream(cfg.seed, 3, i);
            let n = r.random_range(2..=5);
            let a = r.random_range(1..n);
            let b = r.random_range(1..=n - a);
            let u = vectors(n, a, &mut r);
            let v = vectors(n, b, &mut r);
            let pv = v.iter().map(|x| project_complement(&u, x)).collect::<Result<Vec<_>>>()?;
            let joint: Vec<Vector> = u.iter().chain(&v).cloned().collect();
            Ok(rel_gap(log_gram(&joint)?, log_gram(&u)? + log_gram(&pv)?, 0.0) - 1e-9)
        }),
    )?);

    out.push(summarize(
        "splitfactor",
        map_instances(cfg.instances, |i| {
            let mut r = stream(cfg.seed, 4, i);
            let n = r.random_range(2..=5);
            let a = r.random_range(0..n);
            let b = r.random_range(1..=n - a);
            let c = r.random_range(0..=n - a - b);
            let u = vectors(n, a, &mut r);
            let v = vectors(n, b, &mut r);
            let w = vectors(n, c, &mut r);
            let cat = |parts: &[&[Vector]]| parts.concat();
            let lhs = log_gram(&cat(&[&u, &v]))? + log_gram(&cat(&[&u, &w]))?;
            let rhs = log_gram(&u)? + log_gram(&cat(&[&u, &v, &w]))?;
            Ok(rhs - lhs - 1e-9 * (1.0 + lhs.abs()))
        }),
    )?);

    out.push(summarize(
        "splitfactor2",
        map_instances(cfg.instances, |i| {
            let mut r = stream(cfg.seed, 5, i);
            let n = r.random_range(2..=5);
            let b = r.random_range(1..n);
            let c = r.random_range(1..=n - b);
            let v = vectors(n, b, &mut r);
            let w = vectors(n, c, &mut r);
            let lhs = log_gram(&v)? + log_gram(&w)?;
            let rhs = log_gram(&[v, w].concat())?;
            Ok(rhs - lhs - 1e-9 * (1.0 + lhs.abs()))
        }),
    )?);

    // the cyclic-sequence properties share one set of instances
    type SeqSample = (usize, Vec<f64>, f64, f64);
    let seqs: Vec<Result<SeqSample>> = map_instances(cfg.instances, |i| {
        let mut r = stream(cfg.seed, 6, i);
        let n = r.random_range(3..=6);
        let vs = vectors(n, n, &mut r);
        let s = cyclic_gram_sequence(&vs)?;
        let l = r.random_range(2..=n);
        let s_max = (n - l) as f64 / (n - l + 1) as f64;
        let s_val = r.random_range(-1.0..=s_max);
        Ok((l, s.log_values, log_gram(&vs)?, s_val))
    });
    let seqs = seqs.into_iter().collect::<Result<Vec<_>>>()?;
    let tol = |x: f64| 1e-9 * (1.0 + x.abs());

    out.push(summarize(
        "log_concavity",
        seqs.iter()
            .map(|(_, lv, _, _)| {
                let n = lv.len() - 1;
                Ok((2..n).map(|l| lv[l - 1] + lv[l + 1] - 2.0 * lv[l] - tol(lv[l])).fold(f64::NEG_INFINITY, f64::max))
            })
            .collect(),
    )?);
    out.push(summarize(
        "global_gram_bound",
        seqs.iter()
            .map(|(_, lv, g, _)| {
                let n = lv.len() - 1;
                Ok((1..=n).map(|l| l as f64 * g - lv[l] - tol(lv[l])).fold(f64::NEG_INFINITY, f64::max))
            })
            .collect(),
    )?);
    out.push(summarize(
        "interpolated_gram_bound",
        seqs.iter()
            .map(|(l, lv, g, s)| {
                let l = *l;
                let rhs = s * lv[l - 1] + (s + (1.0 - s) * l as f64) * g;
                Ok(rhs - lv[l] - tol(lv[l]))
            })
            .collect(),
    )?);
    Ok(out)
}

/// Matrix form against sum of minors, and invariance under signed permutations.
pub fn minor_norm_suite(cfg: &SuiteConfig) -> Result<Vec<PropertyResult>> {
    let routes = summarize(
        "minor_norm_routes",
        map_instances(cfg.instances, |i| {
            let mut r = stream(cfg.seed, 7, i);
            let n = r.random_range(1..=5);
            let k = r.random_range(1..=n);
            let d = Matrix::from_fn(k, n, |_, _| r.sample(StandardNormal));
            let m = random_unimodular(n, 0.6, &mut r);
            let a = minor_norm_matrix_form(&d, m.matrix())?;
            let b = minor_norm_sum_of_minors(&d, m.matrix())?;
            Ok(rel_gap(a, b, 1e-9))
        }),
    )?;
    let perm = summarize(
        "minor_norm_signed_permutation",
        map_instances(cfg.instances, |i| {
            let mut r = stream(cfg.seed, 8, i);
            let n = r.random_range(1..=5);
            let k = r.random_range(1..=n);
            let d = Matrix::from_fn(k, n, |_, _| r.sample(StandardNormal));
            let m = random_unimodular(n, 0.6, &mut r);
            let mut order: Vec<usize> = (0..n).collect();
            for j in (1..n).rev() {
                order.swap(j, r.random_range(0..=j));
            }
            let mut p = Matrix::zeros(n, n);
            for (j, &o) in order.iter().enumerate() {
                p[(o, j)] = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            let a = minor_norm_matrix_form(&d, m.matrix())?;
            let b = minor_norm_matrix_form(&d, &(m.matrix() * p))?;
            Ok(rel_gap(a, b, 1e-9))
        }),
    )?;
    Ok(vec![routes, perm])
}

/// Cross-polytope anchors plus the volume sandwich and both norm inequalities
/// on random measures with `n ∈ {2, 3}` and at most 8 atoms.
pub fn visibility_suite(cfg: &SuiteConfig) -> Result<Vec<PropertyResult>> {
    let ext = ExtremalConfig { seed: cfg.seed, ..Default::default() };
    let cross = summarize(
        "cross_polytope_visibility",
        [2usize, 3]
            .iter()
            .map(|&n| {
                let r = extremal_basis(&DiscreteMeasure::cross_polytope(n), &ext)?;
                let exact = crate::visibility::factorial(n) / 2f64.powi(n as i32);
                Ok(rel_gap(r.fading.visibility, exact, 1e-12))
            })
            .collect(),
    )?;
    let per: Vec<Result<[f64; 3]>> = map_instances(cfg.instances, |i| {
        let mut r = stream(cfg.seed, 9, i);
        let n = r.random_range(2..=3);
        let m = r.random_range(n..=8);
        let mu = DiscreteMeasure::random(n, m, &mut r);
        let res = extremal_basis(&mu, &ext)?;
        // relative margins, clamped so the sign agrees with the tolerance-aware verdicts
        let verdict = |margin: f64, holds: bool| if holds { margin.min(0.0) } else { margin.max(f64::MIN_POSITIVE) };
        let (vol, scale) = (res.fading.volume, 2f64.powi(n as i32) * res.det_u.abs());
        let sandwich = verdict((scale / crate::visibility::factorial(n) / vol).max(vol / scale) - 1.0, res.sandwich_holds);
        let vs: Vec<Vector> = (0..8).map(|_| random_vector(n, &mut r)).collect();
        let mut mainconvex = f64::NEG_INFINITY;
        for s in sandwich_check(&mu, &res, &vs)? {
            mainconvex = mainconvex.max(verdict((s.lower / s.norm).max(s.norm / s.upper) - 1.0, s.holds));
        }
        let mut wedge = f64::NEG_INFINITY;
        for k in 1..n {
            let f = KForm::random(n, k, &mut r);
            let w = wedge_lower_bound_check(&mu, &f, &res)?;
            wedge = wedge.max(verdict(if w.rhs > 0.0 { w.lhs / w.rhs - 1.0 } else { 0.0 }, w.holds));
        }
        Ok([sandwich, mainconvex, wedge])
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let col = |j: usize| per.iter().map(|p| Ok(p[j])).collect::<Vec<_>>();
    Ok(vec![
        cross,
        summarize("volume_sandwich", col(0))?,
        summarize("norm_sandwich", col(1))?,
        summarize("wedge_lower_bound", col(2))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig { instances: 60, mc_samples: 2000, seed: 3 }
    }

    #[test]
    fn gaussian_integral_orthonormal() {
        let vs = vec![Vector::from_vec(vec![1.0, 0.0]), Vector::from_vec(vec![0.0, 1.0])];
        let (est, se) = gaussian_gram_integral(&vs, 20_000, &mut stream(0, 0, 0)).unwrap();
        assert!((est - 1.0).abs() < 4.0 * se && se < 0.01);
        let dependent = vec![vs[0].clone(), vs[0].clone()];
        assert!(gaussian_gram_integral(&dependent, 10, &mut stream(0, 0, 0)).is_err());
        let scaled = vec![Vector::from_vec(vec![2.0, 0.0]), Vector::from_vec(vec![0.0, 0.5])];
        let (est, se) = gaussian_gram_integral(&scaled, 20_000, &mut stream(0, 0, 1)).unwrap();
        assert!((est - 1.0).abs() < 4.0 * se + 1e-12);
    }

    #[test]
    fn gram_suite_passes() {
        for p in gram_suite(&small()).unwrap() {
            assert!(p.passed(), "{p:?}");
        }
    }

    #[test]
    fn minor_suite_passes() {
        for p in minor_norm_suite(&small()).unwrap() {
            assert!(p.passed(), "{p:?}");
        }
    }

    #[test]
    fn visibility_suite_passes() {
        for p in visibility_suite(&SuiteConfig { instances: 30, ..small() }).unwrap() {
            assert!(p.passed(), "{p:?}");
        }
    }

    #[test]
    fn a_broken_property_is_reported() {
        let r = summarize("x", vec![Ok(-1.0), Ok(0.5), Ok(f64::NAN)]).unwrap();
        assert_eq!(r.violations, 2);
        assert!(!r.passed());
    }

    #[test]
    fn deterministic_across_runs() {
        let a = gram_suite(&small()).unwrap();
        let b = gram_suite(&small()).unwrap();
        assert_eq!(a, b);
    }
}

//! The cyclic paraboloid system and its closed forms.
//!
//! Factor `j` averages over `y^ℓ = x^{j+ℓ} + Σ_{i<ℓ} (x^{j+i} - yⁱ)²`. For a
//! basis with rows `R₁..R_n`, its strong testing integral reduces to
//! `∫_{ℝ^{ℓ-1}} ‖R_ℓ + Σ tⁱ Rᵢ‖^{-(p'-1)} dt` over the cyclic window, which
//! equals `β · G(R₁..R_{ℓ-1})^{(p'-ℓ-1)/2} / G(R₁..R_ℓ)^{(p'-ℓ)/2}`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::incidence::{ChartSpec, QuadratureConfig, ShellSum};
use crate::linalg::{
    cyclic_gram_sequence, cyclic_window, log_gram, project_complement, random_unimodular, GramSequence, Matrix,
    UnimodularBasis, Vector,
};
use crate::poly::PolyMap;
use crate::quad::{composite, shell_rule, unit_ball_volume};
use crate::testing::{Mode, RadonFactor, TestingProblem, Weight};

fn check_l(n: usize, l: usize) -> Result<()> {
    if l < 2 || l > n {
        return Err(Error::InvalidArgument(format!("need 2 <= l <= n, got l = {l}, n = {n}")));
    }
    Ok(())
}

fn dual(p: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::InvalidArgument(format!("need p > 1, got {p}")));
    }
    Ok(p / (p - 1.0))
}

/// Exponents `p` for which the system is bounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentRange {
    pub p_min: f64,
    /// Excluded for strong type.
    pub p_max: f64,
    /// Restricted strong type still holds at `p_max`.
    pub restricted_at_max: bool,
}

pub fn admissible_range(n: usize, l: usize) -> Result<ExponentRange> {
    check_l(n, l)?;
    Ok(ExponentRange {
        p_min: (n as f64 + 1.0) / n as f64,
        p_max: l as f64 / (l as f64 - 1.0),
        restricted_at_max: true,
    })
}

/// `β = ∫_{ℝ^{ℓ-1}} (1 + |t|²)^{-(p'-1)/2} dt`, `+∞` when `p ≥ ℓ/(ℓ-1)`.
///
/// With `t = tan θ` the radial integral becomes `∫₀^{π/2} sin^{d-1} cos^{c} dθ`
/// with `d = ℓ - 1`, `c = p' - ℓ - 1 > -1`; the endpoint singularity is
/// removed by `u = (π/2 - θ)^{c+1}`.
pub fn beta_constant(p: f64, l: usize) -> Result<f64> {
    if l < 2 {
        return Err(Error::InvalidArgument(format!("need l >= 2, got {l}")));
    }
    let pp = dual(p)?;
    let d = (l - 1) as f64;
    let c = pp - l as f64 - 1.0;
    if !(c > -1.0) {
        return Ok(f64::INFINITY);
    }
    let e = c + 1.0;
    let top = std::f64::consts::FRAC_PI_2.powf(e);
    let radial: f64 = composite(0.0, top, 24, 8)
        .into_iter()
        .map(|(u, w)| {
            let phi = u.powf(1.0 / e);
            let sinc = if phi > 0.0 { phi.sin() / phi } else { 1.0 };
            w * phi.cos().powf(d - 1.0) * sinc.powf(c) / e
        })
        .sum();
    Ok(d * unit_ball_volume(l - 1) * radial)
}

fn gram_pair(rows: &[Vector]) -> Result<(f64, f64)> {
    let l = rows.len();
    let lo = log_gram(&rows[..l - 1])?;
    let hi = log_gram(rows)?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::DependentVectors(hi.exp()));
    }
    Ok((lo, hi))
}

/// `ln` of the closed form for `∫ ‖R_ℓ + Σ tⁱ Rᵢ‖^{-(p'-1)} dt`.
pub fn log_paraboloid_factor(rows: &[Vector], p: f64) -> Result<f64> {
    let l = rows.len();
    if l < 2 {
        return Err(Error::InvalidArgument("need at least two rows".into()));
    }
    let pp = dual(p)?;
    let beta = beta_constant(p, l)?;
    if beta.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let (lo, hi) = gram_pair(rows)?;
    let lf = l as f64;
    Ok(beta.ln() + 0.5 * (pp - lf - 1.0) * lo - 0.5 * (pp - lf) * hi)
}

pub fn paraboloid_factor_closed_form(rows: &[Vector], p: f64) -> Result<f64> {
    Ok(log_paraboloid_factor(rows, p)?.exp())
}

/// Direct quadrature of `∫_{ℝ^{ℓ-1}} ‖R_ℓ + Σ tⁱ Rᵢ‖^{-(p'-1)} dt` on shells
/// around the minimizer, with a geometric tail correction.
pub fn paraboloid_factor_quadrature(rows: &[Vector], p: f64, cfg: &QuadratureConfig) -> Result<f64> {
    let l = rows.len();
    if l < 2 {
        return Err(Error::InvalidArgument("need at least two rows".into()));
    }
    let pp = dual(p)?;
    let d = l - 1;
    let a = Matrix::from_columns(&rows[..d]);
    let last = &rows[d];
    let perp = project_complement(&rows[..d], last)?;
    let h = perp.norm();
    if !(h > 0.0) {
        return Err(Error::DependentVectors(0.0));
    }
    let svd = a.clone().svd(true, true);
    // minimizer of ‖R_ℓ + A t‖
    let center = svd.solve(&(-last), 1e-14).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    // shells are laid out in w = S Vᵀ (t - c), where the integrand is radial
    let v_t = svd.v_t.clone().ok_or_else(|| Error::InvalidArgument("svd failed".into()))?;
    let sv = &svd.singular_values;
    let to_t = v_t.transpose() * Matrix::from_diagonal(&sv.map(|x| 1.0 / x));
    let jac = 1.0 / sv.product();
    let r0 = 4.0 * h;
    let f = |w: &[f64]| -> f64 {
        let tv = &center + &to_t * Vector::from_column_slice(w);
        jac * (last + &a * tv).norm().powf(1.0 - pp)
    };
    let cfg = QuadratureConfig { tail_exponent_hint: Some(pp - l as f64), ..cfg.clone() };
    let mut sum = ShellSum::new();
    for i in 0..=cfg.max_doublings {
        let (lo, hi) = if i == 0 { (0.0, r0) } else { (r0 * 2f64.powi(i as i32 - 1), r0 * 2f64.powi(i as i32)) };
        let s: f64 = shell_rule(d, lo, hi, cfg.nodes, cfg.panels).iter().map(|(t, w)| w * f(t)).sum();
        sum.push(s, &cfg);
        if sum.done {
            break;
        }
    }
    sum.finish();
    Ok(sum.value())
}

/// Rows `Rᵢ` of the coordinate matrix.
pub fn row_family(basis: &UnimodularBasis) -> Vec<Vector> {
    basis.rows()
}

/// Both evaluations of the cyclic product of closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicProduct {
    /// `ln(β^n I_{ℓ-1}^{(p'-ℓ-1)/2} I_ℓ^{-(p'-ℓ)/2})`.
    pub log_value: f64,
    /// `Σⱼ ln` of the per-window closed forms.
    pub log_windows: f64,
}

impl CyclicProduct {
    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }
}

pub fn cyclic_product(basis: &UnimodularBasis, p: f64, l: usize) -> Result<CyclicProduct> {
    let n = basis.dim();
    check_l(n, l)?;
    let pp = dual(p)?;
    let beta = beta_constant(p, l)?;
    if beta.is_infinite() {
        return Ok(CyclicProduct { log_value: f64::INFINITY, log_windows: f64::INFINITY });
    }
    let rows = row_family(basis);
    let seq = cyclic_gram_sequence(&rows)?;
    let lf = l as f64;
    let log_value = n as f64 * beta.ln() + 0.5 * (pp - lf - 1.0) * seq.log_value(l - 1) - 0.5 * (pp - lf) * seq.log_value(l);
    let mut log_windows = 0.0;
    for j in 0..n {
        log_windows += log_paraboloid_factor(&cyclic_window(&rows, j, l), p)?;
    }
    if (log_value - log_windows).abs() > 1e-9 * (1.0 + log_value.abs()) {
        return Err(Error::RouteMismatch { what: "cyclic product", a: log_value, b: log_windows });
    }
    Ok(CyclicProduct { log_value, log_windows })
}

/// Largest cyclic product over seeded random unimodular bases.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMax {
    pub samples: usize,
    /// Max over the first half of the sample.
    pub half_max: f64,
    pub max: f64,
    /// `β^n`, the value at the identity.
    pub identity: f64,
}

impl RandomMax {
    /// The max did not move when the sample doubled.
    pub fn stable(&self, rel: f64) -> bool {
        self.max <= self.half_max * (1.0 + rel)
    }
}

/// Cyclic products at the seeded random bases: basis `i` comes from stream `i`.
pub fn random_basis_values(n: usize, l: usize, p: f64, samples: usize, spread: f64, seed: u64) -> Result<Vec<f64>> {
    check_l(n, l)?;
    let eval = |i: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let b = random_unimodular(n, spread, &mut rng);
        Ok(cyclic_product(&b, p, l)?.value())
    };
    #[cfg(feature = "parallel")]
    let vals: Vec<Result<f64>> = {
        use rayon::prelude::*;
        (0..samples).into_par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let vals: Vec<Result<f64>> = (0..samples).map(eval).collect();
    vals.into_iter().collect()
}

pub fn random_basis_max(n: usize, l: usize, p: f64, samples: usize, spread: f64, seed: u64) -> Result<RandomMax> {
    let vals = random_basis_values(n, l, p, samples, spread, seed)?;
    let max_of = |v: &[f64]| v.iter().copied().fold(0.0f64, f64::max);
    Ok(RandomMax {
        samples,
        half_max: max_of(&vals[..samples / 2]),
        max: max_of(&vals),
        identity: beta_constant(p, l)?.powi(n as i32),
    })
}

/// `I_ℓ` against `[N^{2n(n-ℓ)}, 2^{nℓ} N^{2n(n-ℓ)}]`, in logs.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDiagnostic {
    pub l: usize,
    pub log_value: f64,
    pub log_lower: f64,
    pub log_upper: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessFamily {
    pub n: usize,
    pub big_n: f64,
    pub vectors: Vec<Vector>,
    pub grams: GramSequence,
    pub diagnostics: Vec<WindowDiagnostic>,
}

impl SharpnessFamily {
    /// The family as a basis with rows `vᵢ`; its determinant is 1.
    pub fn basis(&self) -> Result<UnimodularBasis> {
        let m = Matrix::from_fn(self.n, self.n, |i, j| self.vectors[i][j]);
        UnimodularBasis::new(m)
    }
}

/// `v₁ = N^{n-1} e₁`, `vᵢ = N^{n-1} e₁ + N^{-1} eᵢ`.
pub fn sharpness_family(n: usize, big_n: f64) -> Result<SharpnessFamily> {
    if n < 2 {
        return Err(Error::InvalidArgument("need n >= 2".into()));
    }
    if !(big_n >= 1.0) {
        return Err(Error::InvalidArgument(format!("need N >= 1, got {big_n}")));
    }
    let top = big_n.powi(n as i32 - 1);
    let vectors: Vec<Vector> = (0..n)
        .map(|i| {
            let mut v = Vector::zeros(n);
            v[0] = top;
            if i > 0 {
                v[i] = 1.0 / big_n;
            }
            v
        })
        .collect();
    let grams = cyclic_gram_sequence(&vectors)?;
    let (nf, ln_n) = (n as f64, big_n.ln());
    let diagnostics = (1..=n)
        .map(|l| {
            let lf = l as f64;
            let log_lower = 2.0 * nf * (nf - lf) * ln_n;
            let log_upper = log_lower + nf * lf * std::f64::consts::LN_2;
            let v = grams.log_value(l);
            let slack = 1e-9 * (1.0 + log_upper.abs());
            WindowDiagnostic { l, log_value: v, log_lower, log_upper, within: v >= log_lower - slack && v <= log_upper + slack }
        })
        .collect();
    Ok(SharpnessFamily { n, big_n, vectors, grams, diagnostics })
}

/// `s = (p' - ℓ - 1)/(p' - ℓ)`, the weight for which the cyclic product is a
/// power of `I_{ℓ-1}^s / I_ℓ`.
pub fn slack_s(p_prime: f64, l: usize) -> f64 {
    let lf = l as f64;
    (p_prime - lf - 1.0) / (p_prime - lf)
}

/// Predicted growth exponent `2sn(n-ℓ+1) - 2n(n-ℓ)` of `I_{ℓ-1}^s / I_ℓ`.
pub fn growth_exponent(n: usize, l: usize, s: f64) -> f64 {
    let (nf, lf) = (n as f64, l as f64);
    2.0 * s * nf * (nf - lf + 1.0) - 2.0 * nf * (nf - lf)
}

/// Least-squares slope of `ln(I_{ℓ-1}^s / I_ℓ)` against `ln N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub big_ns: Vec<f64>,
    pub log_ratios: Vec<f64>,
    /// `ln` of the cyclic product at each `N`.
    pub log_products: Vec<f64>,
    pub slope: f64,
    pub predicted: f64,
}

impl SlopeFit {
    pub fn relative_error(&self) -> f64 {
        (self.slope - self.predicted).abs() / self.predicted.abs()
    }
}

pub fn sharpness_slope(n: usize, l: usize, p: f64, big_ns: &[f64]) -> Result<SlopeFit> {
    check_l(n, l)?;
    if big_ns.len() < 2 {
        return Err(Error::InvalidArgument("need at least two values of N".into()));
    }
    let pp = dual(p)?;
    let s = slack_s(pp, l);
    let mut log_ratios = Vec::new();
    let mut log_products = Vec::new();
    for &big_n in big_ns {
        let fam = sharpness_family(n, big_n)?;
        log_ratios.push(s * fam.grams.log_value(l - 1) - fam.grams.log_value(l));
        log_products.push(cyclic_product(&fam.basis()?, p, l)?.log_value);
    }
    let xs: Vec<f64> = big_ns.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = log_ratios.iter().sum::<f64>() / xs.len() as f64;
    let sxy: f64 = xs.iter().zip(&log_ratios).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(SlopeFit {
        big_ns: big_ns.to_vec(),
        log_ratios,
        log_products,
        slope: sxy / sxx,
        predicted: growth_exponent(n, l, s),
    })
}

/// Measure of `{t ∈ ℝ^{ℓ-1} : ‖R_ℓ + Σ tⁱ Rᵢ‖ < ε}` and its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Sublevel {
    pub exact: f64,
    /// `c_{ℓ-1} G(R₁..R_{ℓ-1})^{-1/2} ε^{ℓ-1}`.
    pub bound: f64,
}

pub fn endpoint_sublevel(rows: &[Vector], eps: f64) -> Result<Sublevel> {
    let l = rows.len();
    if l < 2 {
        return Err(Error::InvalidArgument("need at least two rows".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("need eps > 0".into()));
    }
    let d = l - 1;
    let lg = log_gram(&rows[..d])?;
    if !lg.is_finite() {
        return Err(Error::DependentVectors(0.0));
    }
    let h2 = project_complement(&rows[..d], &rows[d])?.norm_squared();
    let c = unit_ball_volume(d);
    let inv_sqrt_g = (-0.5 * lg).exp();
    let exact = c * (eps * eps - h2).max(0.0).powf(d as f64 / 2.0) * inv_sqrt_g;
    let bound = c * inv_sqrt_g * eps.powi(d as i32);
    Ok(Sublevel { exact, bound })
}

/// Product of [`endpoint_sublevel`] over the cyclic windows against `(c_{ℓ-1} ε^{ℓ-1})ⁿ`.
pub fn endpoint_cyclic(basis: &UnimodularBasis, l: usize, eps: f64) -> Result<Sublevel> {
    let n = basis.dim();
    check_l(n, l)?;
    let rows = row_family(basis);
    let mut exact = 1.0;
    for j in 0..n {
        exact *= endpoint_sublevel(&cyclic_window(&rows, j, l), eps)?.exact;
    }
    let bound = (unit_ball_volume(l - 1) * eps.powi(l as i32 - 1)).powi(n as i32);
    Ok(Sublevel { exact, bound })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedNormCertificate {
    /// `G(R₁..R_{ℓ-1})^{-1/2} G(R_ℓ)^{-1/2}`.
    pub value: f64,
    pub holds: bool,
}

/// Checks `G(R₁..R_{ℓ-1})^{-1/2} G(R_ℓ)^{-1/2} ≤ G(R₁..R_ℓ)^{-1/2} = 1`.
pub fn mixed_norm_certificate(basis: &UnimodularBasis) -> Result<MixedNormCertificate> {
    let l = basis.dim();
    check_l(l, l)?;
    let rows = row_family(basis);
    let a = log_gram(&rows[..l - 1])?;
    let b = rows[l - 1].norm_squared().ln();
    let all = log_gram(&rows)?;
    let value = (-0.5 * (a + b)).exp();
    Ok(MixedNormCertificate { value, holds: value <= (-0.5 * all).exp() * (1.0 + 1e-9) })
}

/// The testing problem of the system: `n` factors, `q = p` on the scaling line.
pub fn paraboloid_problem(n: usize, l: usize, p: f64, mode: Mode) -> Result<TestingProblem> {
    check_l(n, l)?;
    let factors = (0..n)
        .map(|j| {
            RadonFactor::new(
                format!("paraboloid_{}", j + 1),
                Arc::new(PolyMap::paraboloid(n, l, j)),
                ChartSpec::paraboloid(n, l, j, 4.0),
                Weight::one(),
                p,
                p,
                mode,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TestingProblem::new(n, factors)
}

/// The strong testing value predicted by the closed form: each factor's
/// slice measure is `2^{-(ℓ-1)} dt`, raised to `q/p' = p - 1`.
pub fn predicted_testing_value(basis: &UnimodularBasis, p: f64, l: usize) -> Result<f64> {
    let n = basis.dim() as f64;
    let c = cyclic_product(basis, p, l)?;
    Ok(((c.log_value - n * (l as f64 - 1.0) * std::f64::consts::LN_2) * (p - 1.0)).exp())
}

//! Quadrature rules: Gauss-Legendre, tensor boxes, spheres, balls and annuli.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::SymmetricEigen;

use crate::linalg::Matrix;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Golub-Welsch: eigenvalues of the Jacobi matrix of the Legendre recurrence.
    fn compute(m: usize) -> Self {
        assert!(m > 0, "Gauss rule needs at least one node");
        let mut j = Matrix::zeros(m, m);
        for i in 1..m {
            let b = i as f64 / ((4 * i * i - 1) as f64).sqrt();
            j[(i, i - 1)] = b;
            j[(i - 1, i)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..m)
            .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize to remove eigen-solver noise
        for i in 0..m / 2 {
            let (a, b) = (pairs[i], pairs[m - 1 - i]);
            let x = 0.5 * (b.0 - a.0);
            let w = 0.5 * (a.1 + b.1);
            pairs[i] = (-x, w);
            pairs[m - 1 - i] = (x, w);
        }
        if m % 2 == 1 {
            pairs[m / 2].0 = 0.0;
        }
        Self { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
    }

    pub fn get(m: usize) -> Arc<GaussRule> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut c = cache.lock().expect("gauss cache poisoned");
        c.entry(m).or_insert_with(|| Arc::new(GaussRule::compute(m))).clone()
    }
}

/// Composite Gauss-Legendre rule on `[a, b]` with `panels` equal panels.
pub fn composite(a: f64, b: f64, m: usize, panels: usize) -> Vec<(f64, f64)> {
    let g = GaussRule::get(m);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(m * panels);
    for p in 0..panels {
        let lo = a + h * p as f64;
        for (x, w) in g.nodes.iter().zip(&g.weights) {
            out.push((lo + 0.5 * h * (x + 1.0), 0.5 * h * w));
        }
    }
    out
}

/// Equispaced rule for a periodic integrand on `[a, a + period)`.
pub fn periodic(a: f64, period: f64, count: usize) -> Vec<(f64, f64)> {
    let h = period / count as f64;
    (0..count).map(|i| (a + h * i as f64, h)).collect()
}

/// Tensor product of one-dimensional rules.
pub fn tensor(axes: &[Vec<(f64, f64)>]) -> Vec<(Vec<f64>, f64)> {
    let mut out: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for (p, w) in &out {
            for (x, v) in axis {
                let mut q = p.clone();
                q.push(*x);
                next.push((q, w * v));
            }
        }
        out = next;
    }
    out
}

/// Rule on the unit sphere `S^{d-1} ⊂ ℝ^d` with `m` nodes per angle.
/// Integrates constants exactly to rounding.
pub fn sphere_rule(d: usize, m: usize) -> Vec<(Vec<f64>, f64)> {
    match d {
        0 => vec![],
        1 => vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)],
        2 => periodic(0.0, 2.0 * PI, 2 * m)
            .into_iter()
            .map(|(t, w)| (vec![t.cos(), t.sin()], w))
            .collect(),
        _ => {
            let inner = sphere_rule(d - 1, m);
            let mut out = Vec::new();
            for (th, w) in composite(0.0, PI, m, 2) {
                let (c, s) = (th.cos(), th.sin());
                let jac = s.powi(d as i32 - 2);
                for (v, u) in &inner {
                    let mut p = Vec::with_capacity(d);
                    p.push(c);
                    p.extend(v.iter().map(|vi| s * vi));
                    out.push((p, w * u * jac));
                }
            }
            out
        }
    }
}

/// Rule on the spherical shell `a ≤ |t| ≤ b` in `ℝ^d` (a ball when `a = 0`).
pub fn shell_rule(d: usize, a: f64, b: f64, m: usize, panels: usize) -> Vec<(Vec<f64>, f64)> {
    if d == 0 {
        return vec![(Vec::new(), 1.0)];
    }
    if d == 1 {
        if a == 0.0 {
            return composite(-b, b, m, 2 * panels).into_iter().map(|(x, w)| (vec![x], w)).collect();
        }
        let mut out: Vec<(Vec<f64>, f64)> =
            composite(-b, -a, m, panels).into_iter().map(|(x, w)| (vec![x], w)).collect();
        out.extend(composite(a, b, m, panels).into_iter().map(|(x, w)| (vec![x], w)));
        return out;
    }
    let sph = sphere_rule(d, m);
    let mut out = Vec::with_capacity(m * panels * sph.len());
    for (r, w) in composite(a, b, m, panels) {
        let jac = r.powi(d as i32 - 1);
        for (u, v) in &sph {
            out.push((u.iter().map(|ui| r * ui).collect(), w * v * jac));
        }
    }
    out
}

/// Volume of the unit ball in `ℝ^k`, `π^{k/2} / Γ(k/2 + 1)`.
pub fn unit_ball_volume(k: usize) -> f64 {
    PI.powf(k as f64 / 2.0) / statrs::function::gamma::gamma(k as f64 / 2.0 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_rule_integrates_polynomials_exactly() {
        for m in [1, 2, 5, 16, 33] {
            let g = GaussRule::get(m);
            for deg in 0..2 * m {
                let q: f64 = g.nodes.iter().zip(&g.weights).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "m={m} deg={deg}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn composite_rule_on_interval() {
        let q: f64 = composite(0.0, 3.0, 8, 3).iter().map(|(x, w)| w * x.exp()).sum();
        assert!((q - (3f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sphere_areas() {
        // |S^{d-1}| = d |B^d|
        for d in 1..6 {
            let area: f64 = sphere_rule(d, 12).iter().map(|(_, w)| w).sum();
            let exact = d as f64 * unit_ball_volume(d);
            assert!((area - exact).abs() < 1e-12 * exact, "d={d}: {area} vs {exact}");
        }
    }

    #[test]
    fn sphere_second_moment() {
        // ∫_{S^{d-1}} u₁² = |S^{d-1}| / d
        for d in 2..5 {
            let rule = sphere_rule(d, 12);
            let q: f64 = rule.iter().map(|(u, w)| w * u[0] * u[0]).sum();
            let area: f64 = rule.iter().map(|(_, w)| w).sum();
            assert!((q - area / d as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_volumes_from_shell_rule() {
        for d in 1..5 {
            let v: f64 = shell_rule(d, 0.0, 2.0, 8, 2).iter().map(|(_, w)| w).sum();
            let exact = unit_ball_volume(d) * 2f64.powi(d as i32);
            assert!((v - exact).abs() < 1e-11 * exact);
        }
    }

    #[test]
    fn unit_ball_volume_low_dimensions() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-14);
        assert!((unit_ball_volume(2) - PI).abs() < 1e-14);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-13);
    }

    #[test]
    fn tensor_rule_integrates_product() {
        let ax = composite(0.0, 1.0, 4, 1);
        let q: f64 = tensor(&[ax.clone(), ax]).iter().map(|(p, w)| w * p[0] * p[1] * p[1]).sum();
        assert!((q - 1.0 / 6.0).abs() < 1e-14);
    }
}

//! Browser bindings. Each export takes plain numbers and returns a JSON string.

// `!(x > 0.0)` also rejects NaN, which is the point
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use rblab_core::linalg::{minor_norm_matrix_form, minor_norm_sum_of_minors, Matrix, UnimodularBasis, Vector};
use rblab_core::paraboloid::{admissible_range, beta_constant, random_basis_values, sharpness_slope};
use rblab_core::visibility::{extremal_basis, fading_zone_vertices, DiscreteMeasure, ExtremalConfig};

fn finite(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Fading zone of a planar or spatial measure given as flat `n`-vectors.
pub fn visibility_report(n: usize, atoms: &[f64], weights: &[f64]) -> Result<Value, String> {
    if n == 0 || !atoms.len().is_multiple_of(n) || atoms.is_empty() {
        return Err(format!("expected a multiple of {n} coordinates, got {}", atoms.len()));
    }
    let m = atoms.len() / n;
    let w = |i: usize| weights.get(i).copied().unwrap_or(1.0);
    let mu = DiscreteMeasure::new(atoms.chunks(n).enumerate().map(|(i, c)| (Vector::from_column_slice(c), w(i))).collect())
        .map_err(err)?;
    if !mu.spans() {
        return Ok(json!({ "atoms": m, "degenerate": true, "visibility": 0.0, "volume": "inf" }));
    }
    let cfg = ExtremalConfig { multistarts: 8, mc_samples: 40_000, ..Default::default() };
    let r = extremal_basis(&mu, &cfg).map_err(err)?;
    let mut polygon = Vec::new();
    if n == 2 {
        let mut pts: Vec<[f64; 2]> = fading_zone_vertices(&mu)
            .map_err(err)?
            .iter()
            .flat_map(|v| [[v[0], v[1]], [-v[0], -v[1]]])
            .collect();
        pts.sort_by(|a, b| a[1].atan2(a[0]).total_cmp(&b[1].atan2(b[0])));
        polygon = pts;
    }
    let (lo, hi) = r.visibility_bounds();
    Ok(json!({
        "atoms": m,
        "degenerate": false,
        "volume": finite(r.fading.volume),
        "visibility": finite(r.fading.visibility),
        "bounds": [finite(lo), finite(hi)],
        "det_u": r.det_u,
        "basis": r.u.column_iter().map(|c| c.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        "sandwich_holds": r.sandwich_holds,
        "polygon": polygon,
    }))
}

/// Regime of the cyclic paraboloid system at `p`, with sample values or the growth slope.
pub fn paraboloid_report(n: usize, l: usize, p: f64, samples: usize, seed: u64) -> Result<Value, String> {
    let range = admissible_range(n, l).map_err(err)?;
    if !(p > 1.0) {
        return Err(format!("p must exceed 1, got {p}"));
    }
    let pp = p / (p - 1.0);
    if p < range.p_min * (1.0 - 1e-12) {
        let fit = sharpness_slope(n, l, p, &[2.0, 4.0, 8.0, 16.0]).map_err(err)?;
        return Ok(json!({
            "regime": "unbounded",
            "p_prime": pp,
            "slope": fit.slope,
            "predicted": fit.predicted,
            "big_ns": fit.big_ns,
            "log_ratios": fit.log_ratios,
        }));
    }
    let beta = beta_constant(p, l).map_err(err)?;
    if beta.is_infinite() {
        return Ok(json!({ "regime": "divergent", "p_prime": pp, "restricted_at_max": (p - range.p_max).abs() < 1e-12 }));
    }
    let vals = random_basis_values(n, l, p, samples, 0.5, seed).map_err(err)?;
    let max = vals.iter().copied().fold(0.0f64, f64::max);
    Ok(json!({
        "regime": "bounded",
        "p_prime": pp,
        "identity": beta.powi(n as i32),
        "max": max,
        "values": vals,
    }))
}

/// Both evaluation routes of `‖D‖` against the unimodularized rows of `m`.
pub fn minor_norm_report(k: usize, n: usize, d: &[f64], m: &[f64]) -> Result<Value, String> {
    if d.len() != k * n || m.len() != n * n {
        return Err(format!("need {} entries for D and {} for M", k * n, n * n));
    }
    let d = Matrix::from_row_slice(k, n, d);
    let basis = UnimodularBasis::normalized(Matrix::from_row_slice(n, n, m)).map_err(err)?;
    let a = minor_norm_matrix_form(&d, basis.matrix()).map_err(err)?;
    let b = minor_norm_sum_of_minors(&d, basis.matrix()).map_err(err)?;
    Ok(json!({ "matrix_form": a, "sum_of_minors": b, "relative_gap": (a - b).abs() / a.abs().max(1e-300) }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn visibility(n: usize, atoms: &[f64], weights: &[f64]) -> Result<String, JsError> {
    to_js(visibility_report(n, atoms, weights))
}

#[wasm_bindgen]
pub fn paraboloid(n: usize, l: usize, p: f64, samples: usize, seed: u64) -> Result<String, JsError> {
    to_js(paraboloid_report(n, l, p, samples, seed))
}

#[wasm_bindgen(js_name = minorNorm)]
pub fn minor_norm(k: usize, n: usize, d: &[f64], m: &[f64]) -> Result<String, JsError> {
    to_js(minor_norm_report(k, n, d, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_polygon() {
        let v = visibility_report(2, &[1.0, 0.0, 0.0, 1.0], &[]).unwrap();
        assert_eq!(v["polygon"].as_array().unwrap().len(), 4);
        assert!((v["visibility"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_atoms_are_degenerate() {
        let v = visibility_report(2, &[1.0, 1.0, 2.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(v["degenerate"], json!(true));
        assert!(visibility_report(2, &[1.0, 1.0, 2.0], &[]).is_err());
    }

    #[test]
    fn paraboloid_regimes() {
        assert_eq!(paraboloid_report(3, 2, 1.9, 16, 1).unwrap()["regime"], "bounded");
        assert_eq!(paraboloid_report(3, 2, 1.2, 16, 1).unwrap()["regime"], "unbounded");
        assert_eq!(paraboloid_report(3, 2, 2.0, 16, 1).unwrap()["regime"], "divergent");
    }

    #[test]
    fn minor_norm_routes_agree() {
        let v = minor_norm_report(1, 2, &[1.0, 2.0], &[2.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(v["relative_gap"].as_f64().unwrap() < 1e-12);
        assert!(minor_norm_report(1, 2, &[1.0], &[1.0; 4]).is_err());
    }
}

//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use rblab_core::incidence::{coarea_fubini_check, ChartSpec, OuterBox, QuadratureConfig};
use rblab_core::knapp::{concentration_limits, necessity_lower_bound, sample_xis, Cutoff, KnappFamily};
use rblab_core::linalg::{random_vector, Matrix, Vector};
use rblab_core::paraboloid::{
    beta_constant, paraboloid_factor_closed_form, paraboloid_factor_quadrature, random_basis_max, sharpness_slope,
};
use rblab_core::poly::PolyMap;
use rblab_core::suite::{gram_suite, minor_norm_suite, visibility_suite, PropertyResult, SuiteConfig};
use rblab_core::testing::{Mode, RadonFactor, TestingProblem, Weight};

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn rblab(args: &[&str], out: &Path) -> (i32, Option<Value>) {
    let status = Command::new(env!("CARGO_BIN_EXE_rblab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    let report = std::fs::read_to_string(out.join("report.json")).ok().and_then(|s| serde_json::from_str(&s).ok());
    (status.status.code().unwrap_or(-1), report)
}

fn within(elapsed: Duration, limit_s: f64, msg: String) -> Check {
    let t = elapsed.as_secs_f64();
    if t < limit_s {
        Ok(format!("{msg} ({t:.1}s)"))
    } else {
        Err(format!("{msg}, but took {t:.1}s > {limit_s}s"))
    }
}

fn all_pass(results: &[PropertyResult]) -> Check {
    let bad: Vec<String> = results
        .iter()
        .filter(|p| !p.passed())
        .map(|p| format!("{} ({} violations, worst {:e})", p.name, p.violations, p.worst))
        .collect();
    if bad.is_empty() {
        Ok(results.iter().map(|p| format!("{}:{}/{}", p.name, p.instances - p.violations, p.instances)).collect::<Vec<_>>().join(" "))
    } else {
        Err(bad.join(", "))
    }
}

fn minor_norm_identity() -> Check {
    let t = Instant::now();
    let r = minor_norm_suite(&SuiteConfig { instances: 500, seed: 1, ..Default::default() }).map_err(|e| e.to_string())?;
    let routes: Vec<PropertyResult> = r.into_iter().filter(|p| p.name == "minor_norm_routes").collect();
    let msg = all_pass(&routes)?;
    within(t.elapsed(), 5.0, msg)
}

fn gram_suite_check() -> Check {
    let t = Instant::now();
    let r = gram_suite(&SuiteConfig { instances: 1000, seed: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let msg = all_pass(&r)?;
    within(t.elapsed(), 30.0, msg)
}

fn pp_to_p(pp: f64) -> f64 {
    pp / (pp - 1.0)
}

fn paraboloid_dichotomy() -> Check {
    let t = Instant::now();
    let mut notes = Vec::new();
    for (n, l) in [(3, 2), (4, 2), (4, 3)] {
        for pp in [l as f64 + 0.5, n as f64 + 1.0] {
            let r = random_basis_max(n, l, pp_to_p(pp), 1000, 1.0, 11).map_err(|e| e.to_string())?;
            if !(r.stable(0.05) && r.max <= r.identity * (1.0 + 1e-9)) {
                return Err(format!("n={n} l={l} p'={pp}: max {} half {} identity {}", r.max, r.half_max, r.identity));
            }
        }
        let fit = sharpness_slope(n, l, pp_to_p(n as f64 + 2.0), &[2.0, 4.0, 8.0, 16.0]).map_err(|e| e.to_string())?;
        if fit.relative_error() > 0.1 {
            return Err(format!("n={n} l={l}: slope {} vs predicted {}", fit.slope, fit.predicted));
        }
        notes.push(format!("({n},{l}) slope {:.3}/{:.3}", fit.slope, fit.predicted));
    }
    within(t.elapsed(), 120.0, format!("bounded maxima stable; {}", notes.join(", ")))
}

fn closed_form_vs_quadrature() -> Check {
    let cfg = QuadratureConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.random_range(2..=3);
        let n = rng.random_range(l..=4);
        let rows: Vec<Vector> = (0..l).map(|_| random_vector(n, &mut rng)).collect();
        let p = pp_to_p(l as f64 + rng.random_range(0.5..3.0));
        let c = paraboloid_factor_closed_form(&rows, p).map_err(|e| e.to_string())?;
        let q = paraboloid_factor_quadrature(&rows, p, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((c - q).abs() / c);
    }
    let ortho = [Vector::from_vec(vec![1.0, 0.0]), Vector::from_vec(vec![0.0, 1.0])];
    let anchor = paraboloid_factor_quadrature(&ortho, 1.5, &cfg).map_err(|e| e.to_string())?;
    let beta = beta_constant(1.5, 2).map_err(|e| e.to_string())?;
    let gap = ((anchor - PI) / PI).abs().max(((beta - PI) / PI).abs());
    let msg = format!("worst gap {worst:.2e} on 100 families; anchor {anchor:.6} (gap {gap:.1e})");
    if worst <= 0.02 && gap <= 0.005 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn testing_oracles(dir: &Path) -> Check {
    let (code, report) = rblab(&["testing", configs().join("loomis_whitney.cfg").to_str().unwrap()], &dir.join("lw"));
    let v = &report.ok_or("no report")?["steps"][0]["values"];
    let value = v["value"].as_f64().ok_or("no value")?;
    let rows: Vec<Vec<f64>> = serde_json::from_value(v["basis"].clone()).map_err(|e| e.to_string())?;
    let b = Matrix::from_fn(3, 3, |i, j| rows[i][j]);
    let ortho = (b.transpose() * &b - Matrix::identity(3, 3)).norm();
    if code != 0 || (value - 1.0).abs() > 1e-3 || ortho > 1e-2 {
        return Err(format!("exit {code}, value {value}, |BᵀB - I| = {ortho:.2e}"));
    }
    let (code2, _) = rblab(&["testing", configs().join("rank_deficient.cfg").to_str().unwrap()], &dir.join("rd"));
    if code2 != 2 {
        return Err(format!("rank-deficient problem exited with {code2}, expected 2"));
    }
    Ok(format!("value {value:.6}, |BᵀB - I| = {ortho:.1e}; rank-deficient exit 2"))
}

fn knapp_necessity(dir: &Path) -> Check {
    let t = Instant::now();
    let (code, report) = rblab(&["knapp", configs().join("knapp_linear.cfg").to_str().unwrap()], &dir.join("kl"));
    let v = &report.ok_or("no report")?["steps"][0]["values"];
    let (lb, tv) = (v["lower_bound"].as_f64().ok_or("no bound")?, v["testing_value"].as_f64().ok_or("no value")?);
    if code != 0 || (lb - tv).abs() > 1e-6 * tv {
        return Err(format!("linear: exit {code}, bound {lb} vs testing value {tv}"));
    }

    let cfg = QuadratureConfig::default();
    let parabola = || {
        RadonFactor::new(
            "parabola",
            std::sync::Arc::new(PolyMap::paraboloid(2, 2, 0)),
            ChartSpec::paraboloid(2, 2, 0, 4.0),
            Weight::one(),
            1.5,
            3.0,
            Mode::Strong,
        )
    };
    let bump = Cutoff::Bump { center: Vector::from_vec(vec![0.0, 0.0]), radius: 1.5 };
    let mut bounds = Vec::new();
    for first in [3, 4] {
        let ladder: Vec<f64> = (first..first + 4).map(|e| 2f64.powi(-e)).collect();
        let problem = TestingProblem::new(2, vec![parabola().map_err(|e| e.to_string())?]).map_err(|e| e.to_string())?;
        let fam = KnappFamily::new(problem, vec![0.0, 0.0], ladder, 0.5, vec![bump.clone()]).map_err(|e| e.to_string())?;
        bounds.push(necessity_lower_bound(&fam, &cfg).map_err(|e| e.to_string())?);
    }
    let ratio = bounds[0].comparison;
    let drift = (bounds[1].lower_bound - bounds[0].lower_bound).abs() / bounds[0].lower_bound;
    if !(0.1..=10.0).contains(&ratio) || drift > 0.2 {
        return Err(format!("paraboloid: ratio {ratio}, drift under halving {drift}"));
    }

    let circle = RadonFactor::new(
        "circle",
        std::sync::Arc::new(PolyMap::sphere(2, 1.0)),
        ChartSpec::sphere(2, 1.0),
        Weight::one(),
        1.0,
        1.0,
        Mode::Strong,
    )
    .map_err(|e| e.to_string())?;
    let r = concentration_limits(&circle, &[0.0, 0.0], &[0.1, 0.05, 0.025], &sample_xis(2, 4, 0.5, 1), &Cutoff::One, &cfg)
        .map_err(|e| e.to_string())?;
    let finest = r.rungs.last().ok_or("no rungs")?.space_value;
    let cgap = ((finest - 4.0 * PI) / (4.0 * PI)).abs().max(((r.space_limit - 4.0 * PI) / (4.0 * PI)).abs());
    if cgap > 0.01 {
        return Err(format!("circle limit {finest} vs 4π"));
    }
    within(
        t.elapsed(),
        120.0,
        format!("linear gap {:.1e}; paraboloid ratio {ratio:.3}, drift {drift:.3}; circle gap {cgap:.1e}", (lb - tv).abs() / tv),
    )
}

fn visibility_check() -> Check {
    let r = visibility_suite(&SuiteConfig { instances: 500, seed: 7, ..Default::default() }).map_err(|e| e.to_string())?;
    all_pass(&r)
}

fn fubini_check() -> Check {
    // |x - y|² = 1 in the plane with a Gaussian bump in both variables
    let map = PolyMap::sphere(2, 1.0);
    let chart = ChartSpec::sphere(2, 1.0);
    let f = |x: &[f64], y: &[f64]| {
        let a = (x[0] - 0.2).powi(2) + (x[1] + 0.1).powi(2);
        let b = (y[0] - 0.5).powi(2) + y[1].powi(2);
        (-a - 2.0 * b).exp()
    };
    let bx = OuterBox { lo: vec![-5.0; 2], hi: vec![5.0; 2], nodes: 12, panels: 6 };
    let r = coarea_fubini_check(&map, f, &bx, &chart, &bx, &chart, &QuadratureConfig::default()).map_err(|e| e.to_string())?;
    let msg = format!("lhs {:.6}, rhs {:.6}, gap {:.1e}", r.lhs, r.rhs, r.relative_gap);
    if r.relative_gap <= 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reproducibility(dir: &Path) -> Check {
    let mut csvs = Vec::new();
    for run in ["v1", "v2"] {
        let out = dir.join(run);
        let (code, _) = rblab(&["verify", "--seed", "9"], &out);
        if code != 0 {
            return Err(format!("verify exited with {code}"));
        }
        csvs.push(std::fs::read(out.join("verify.csv")).map_err(|e| e.to_string())?);
    }
    if csvs[0] == csvs[1] {
        Ok(format!("{} identical bytes", csvs[0].len()))
    } else {
        Err("verify.csv differs between runs".into())
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("minor-norm identity", Box::new(minor_norm_identity)),
        ("Gram suite", Box::new(gram_suite_check)),
        ("paraboloid dichotomy", Box::new(paraboloid_dichotomy)),
        ("closed form vs quadrature", Box::new(closed_form_vs_quadrature)),
        ("testing-functional oracles", Box::new(|| testing_oracles(dir))),
        ("Knapp necessity", Box::new(|| knapp_necessity(dir))),
        ("visibility suite", Box::new(visibility_check)),
        ("Fubini check", Box::new(fubini_check)),
        ("reproducibility", Box::new(|| reproducibility(dir))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

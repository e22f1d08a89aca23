use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use rblab_core::knapp::{knapp_ratio, necessity_lower_bound, KnappFamily};
use rblab_core::linalg::{random_vector, Matrix, UnimodularBasis};
use rblab_core::paraboloid::{
    admissible_range, beta_constant, random_basis_values, sharpness_slope,
};
use rblab_core::slopt::OptimizeStatus;
use rblab_core::suite::{gram_suite, minor_norm_suite, visibility_suite, PropertyResult, SuiteConfig};
use rblab_core::testing::{q_functional, testing_global, TestingConfig};
use rblab_core::visibility::{
    extremal_basis, fading_zone_volume, sandwich_check, wedge_lower_bound_check, DiscreteMeasure, ExtremalConfig,
    KForm,
};
use rblab_core::Error;

use crate::config::{Diagnostic, LoadedConfig};
use crate::report::{cell, num, nums, Outcome, Status, Step, Table};

pub const DEFAULT_SEED: u64 = 0x5eed;

/// Errors that end a run with exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<Diagnostic>),
    #[error("{module}::{operation}: {source}")]
    Core { module: &'static str, operation: &'static str, source: Error },
    #[error("{0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<Vec<Diagnostic>> for CliError {
    fn from(d: Vec<Diagnostic>) -> Self {
        CliError::Config(d)
    }
}

fn ctx(module: &'static str, operation: &'static str) -> impl FnOnce(Error) -> CliError {
    move |source| CliError::Core { module, operation, source }
}

/// Command-line overrides shared by all commands.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub ladder: Option<Vec<f64>>,
}

fn matrix_rows(m: &Matrix) -> Value {
    Value::Array(m.row_iter().map(|r| nums(&r.iter().copied().collect::<Vec<_>>())).collect())
}

fn basis_table(name: &str, m: &Matrix) -> Table {
    let n = m.ncols();
    let mut head = vec!["row".to_string()];
    head.extend((1..=n).map(|j| format!("c{j}")));
    let mut t = Table { name: name.into(), header: head, rows: Vec::new() };
    for (i, r) in m.row_iter().enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(r.iter().map(|v| cell(*v)));
        t.push(row);
    }
    t
}

fn coord_header(n: usize, prefix: &str) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn testing(cfg: &LoadedConfig, opts: &RunOptions) -> Result<Outcome, CliError> {
    let built = cfg.build(false)?;
    let opt = cfg.optimizer(opts.seed);
    let tcfg = TestingConfig { quad: cfg.quadrature(), ..Default::default() };
    let grid = cfg.grid(opt.seed);
    let g = testing_global(&built.problem, &grid, &opt, &tcfg).map_err(ctx("testing_functional", "testing_global"))?;
    let divergent = g.best.status == OptimizeStatus::Diverging || !g.best.value.is_finite();
    let n = built.problem.n;

    let mut points = Table { name: "testing".into(), header: coord_header(n, "x"), rows: Vec::new() };
    points.header.extend(["value".to_string(), "status".to_string()]);
    for (x, v, s) in &g.points {
        let mut row: Vec<String> = x.iter().map(|c| cell(*c)).collect();
        row.extend([cell(*v), s.as_str().to_string()]);
        points.push(row);
    }
    let step = Step::new(
        "testing_functional",
        "testing_global",
        json!({ "config": cfg.digest, "grid": grid, "seed": opt.seed, "multistarts": opt.multistarts }),
        json!({
            "value": num(g.best.value),
            "status": g.best.status.as_str(),
            "x": nums(&g.best.x),
            "factor_values": nums(&g.best.factor_values),
            "prefactor": num(g.best.prefactor),
            "basis": matrix_rows(g.best.basis.matrix()),
            "identity_value": num(g.best.identity_value),
            "start_index": g.best.start_index,
            "scaling_slack": num(built.problem.s),
            "translation_invariant": g.translation_invariant,
        }),
    );
    let summary = if divergent {
        format!("testing supremum diverges (value {} at x = {:?})", g.best.value, g.best.x)
    } else {
        format!("testing supremum {:.6} at x = {:?}", g.best.value, g.best.x)
    };
    Ok(Outcome {
        status: if divergent { Status::Divergent } else { Status::Ok },
        summary,
        steps: vec![step],
        tables: vec![points, basis_table("basis", g.best.basis.matrix())],
    })
}

pub fn q(cfg: &LoadedConfig, opts: &RunOptions) -> Result<Outcome, CliError> {
    let built = cfg.build(false)?;
    let opt = cfg.optimizer(opts.seed);
    let quad = cfg.quadrature();
    let x = cfg.grid(opt.seed).remove(0);
    let r = q_functional(&built.qfactors, &x, &opt, &quad).map_err(ctx("testing_functional", "q_functional"))?;
    let rs: Vec<f64> = built.qfactors.iter().map(|f| f.r).collect();
    let step = Step::new(
        "testing_functional",
        "q_functional",
        json!({ "config": cfg.digest, "x": x, "seed": opt.seed, "r": nums(&rs) }),
        json!({ "value": num(r.value), "status": r.status.as_str(), "basis": matrix_rows(r.basis.matrix()) }),
    );
    let mut t = Table::new("q", &["value", "status"]);
    t.push(vec![cell(r.value), r.status.as_str().into()]);
    Ok(Outcome {
        status: Status::Ok,
        summary: format!("Q functional infimum {:.6}", r.value),
        steps: vec![step],
        tables: vec![t, basis_table("basis", r.basis.matrix())],
    })
}

pub fn knapp(cfg: &LoadedConfig, opts: &RunOptions, supercritical: bool) -> Result<Outcome, CliError> {
    let built = cfg.build(supercritical)?;
    let quad = cfg.quadrature();
    let (x0, ladder, c) = cfg.knapp_settings();
    let ladder = opts.ladder.clone().unwrap_or(ladder);
    let family = KnappFamily::new(built.problem, x0.clone(), ladder.clone(), c, built.cutoffs)
        .map_err(ctx("knapp_necessity", "knapp_family"))?;
    let inputs = json!({ "config": cfg.digest, "x0": x0, "ladder": ladder, "c": c });
    let mut table = Table::new("knapp", &["delta", "lhs", "norms", "ratio", "scaled", "normalized"]);
    let norm = family.normalization();

    if family.excess() > 1e-12 {
        // off the scaling line: the raw ratio must blow up like δ^{n - Σkq/p}
        let rungs = ladder
            .iter()
            .map(|d| knapp_ratio(&family, *d, &quad))
            .collect::<rblab_core::Result<Vec<_>>>()
            .map_err(ctx("knapp_necessity", "knapp_ratio"))?;
        for r in &rungs {
            table.push(vec![cell(r.delta), cell(r.lhs), cell(r.norms), cell(r.ratio), cell(r.scaled), cell(r.scaled * norm)]);
        }
        let first = rungs.first().expect("ladder is non-empty");
        let last = rungs.last().expect("ladder is non-empty");
        let growing = last.ratio > first.ratio * (1.0 + 1e-9);
        let step = Step::new(
            "knapp_necessity",
            "knapp_ratio",
            inputs,
            json!({
                "excess": num(family.excess()),
                "ratios": nums(&rungs.iter().map(|r| r.ratio).collect::<Vec<_>>()),
                "scaled": nums(&rungs.iter().map(|r| r.scaled).collect::<Vec<_>>()),
                "ratio_unbounded": growing,
            }),
        );
        return Ok(Outcome {
            status: if growing { Status::Divergent } else { Status::Ok },
            summary: format!(
                "supercritical scaling (excess {:.4}): ratio grows from {:.4e} to {:.4e}, no inequality can hold",
                family.excess(),
                first.ratio,
                last.ratio
            ),
            steps: vec![step],
            tables: vec![table],
        });
    }

    match necessity_lower_bound(&family, &quad) {
        Ok(r) => {
            for k in &r.rungs {
                table.push(vec![cell(k.delta), cell(k.lhs), cell(k.norms), cell(k.ratio), cell(k.scaled), cell(k.scaled * norm)]);
            }
            let step = Step::new(
                "knapp_necessity",
                "necessity_lower_bound",
                inputs,
                json!({
                    "extrapolated_ratio": num(r.extrapolated_ratio.value),
                    "order": r.extrapolated_ratio.order.map(num),
                    "lower_bound": num(r.lower_bound),
                    "testing_value": num(r.testing_value),
                    "comparison": num(r.comparison),
                    "c_sensitivity": num(r.c_sensitivity),
                    "resolution_warning": r.resolution_warning,
                }),
            );
            let mut summary = format!(
                "lower bound {:.6} vs testing value {:.6} (ratio {:.4})",
                r.lower_bound, r.testing_value, r.comparison
            );
            if r.resolution_warning {
                summary.push_str(&format!("; warning: result moves {:.1}% when c is halved", 100.0 * r.c_sensitivity));
            }
            Ok(Outcome { status: Status::Ok, summary, steps: vec![step], tables: vec![table] })
        }
        Err(Error::NonCauchy(msg)) => {
            let step = Step::new("knapp_necessity", "necessity_lower_bound", inputs, json!({ "non_cauchy": msg }));
            Ok(Outcome {
                status: Status::Divergent,
                summary: format!("Knapp ratios do not converge: {msg}"),
                steps: vec![step],
                tables: vec![table],
            })
        }
        Err(e) => Err(ctx("knapp_necessity", "necessity_lower_bound")(e)),
    }
}

/// Parameters of the `paraboloid` command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaboloidArgs {
    pub n: usize,
    pub l: usize,
    pub p: f64,
    pub spread: f64,
}

pub fn paraboloid(a: &ParaboloidArgs, opts: &RunOptions) -> Result<Outcome, CliError> {
    let range = admissible_range(a.n, a.l).map_err(ctx("paraboloid_models", "admissible_range"))?;
    if !(a.p > 1.0) {
        return Err(CliError::Usage(format!("--p must exceed 1, got {}", a.p)));
    }
    let pp = a.p / (a.p - 1.0);
    let seed = opts.seed.unwrap_or(DEFAULT_SEED);
    let inputs = json!({ "n": a.n, "l": a.l, "p": a.p, "spread": a.spread, "seed": seed });
    let mut steps = vec![Step::new(
        "paraboloid_models",
        "admissible_range",
        json!({ "n": a.n, "l": a.l }),
        json!({ "p_min": num(range.p_min), "p_max": num(range.p_max), "restricted_at_max": range.restricted_at_max }),
    )];
    if a.p < range.p_min * (1.0 - 1e-12) {
        // p' > n + 1: the sharpness family makes the cyclic product grow
        let big_ns = [2.0, 4.0, 8.0, 16.0];
        let fit = sharpness_slope(a.n, a.l, a.p, &big_ns).map_err(ctx("paraboloid_models", "sharpness_slope"))?;
        let mut t = Table::new("sharpness", &["N", "log_ratio", "log_product"]);
        for i in 0..big_ns.len() {
            t.push(vec![cell(fit.big_ns[i]), cell(fit.log_ratios[i]), cell(fit.log_products[i])]);
        }
        steps.push(Step::new(
            "paraboloid_models",
            "sharpness_slope",
            inputs,
            json!({ "slope": num(fit.slope), "predicted": num(fit.predicted), "relative_error": num(fit.relative_error()) }),
        ));
        return Ok(Outcome {
            status: Status::Divergent,
            summary: format!(
                "p' = {pp:.4} > n + 1 = {}: unbounded, log-log growth slope {:.4} (predicted {:.4})",
                a.n + 1,
                fit.slope,
                fit.predicted
            ),
            steps,
            tables: vec![t],
        });
    }
    let beta = beta_constant(a.p, a.l).map_err(ctx("paraboloid_models", "beta_constant"))?;
    if beta.is_infinite() {
        steps.push(Step::new("paraboloid_models", "beta_constant", inputs, json!({ "beta": num(beta) })));
        let note = if (a.p - range.p_max).abs() <= 1e-12 { "; restricted strong type still holds here" } else { "" };
        return Ok(Outcome {
            status: Status::Divergent,
            summary: format!("p' = {pp:.4} <= l = {}: the slice integrals diverge{note}", a.l),
            steps,
            tables: Vec::new(),
        });
    }
    let samples = opts.samples.unwrap_or(1000);
    let vals = random_basis_values(a.n, a.l, a.p, samples, a.spread, seed).map_err(ctx("paraboloid_models", "random_basis_max"))?;
    let max_of = |v: &[f64]| v.iter().copied().fold(0.0f64, f64::max);
    let (half, max) = (max_of(&vals[..samples / 2]), max_of(&vals));
    let stable = max <= half * 1.05;
    let mut t = Table::new("paraboloid", &["sample", "cyclic_product"]);
    for (i, v) in vals.iter().enumerate() {
        t.push(vec![i.to_string(), cell(*v)]);
    }
    steps.push(Step::new(
        "paraboloid_models",
        "random_basis_max",
        inputs,
        json!({
            "beta": num(beta),
            "identity": num(beta.powi(a.n as i32)),
            "half_max": num(half),
            "max": num(max),
            "stable": stable,
        }),
    ));
    Ok(Outcome {
        status: Status::Ok,
        summary: format!(
            "p' = {pp:.4} <= n + 1 = {}: bounded; max cyclic product {max:.6} over {samples} bases (first half {half:.6})",
            a.n + 1
        ),
        steps,
        tables: vec![t],
    })
}

/// Random measure settings used when no config is given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomMeasure {
    pub n: usize,
    pub atoms: usize,
}

pub fn visibility(cfg: Option<&LoadedConfig>, random: RandomMeasure, opts: &RunOptions) -> Result<Outcome, CliError> {
    let seed = opts.seed.unwrap_or(DEFAULT_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mu, vsamples) = match cfg.map(|c| c.measure()).transpose()?.flatten() {
        Some(m) => m,
        None => {
            if random.n == 0 || random.atoms == 0 {
                return Err(CliError::Usage("visibility needs --n and --atoms at least 1".into()));
            }
            (DiscreteMeasure::random(random.n, random.atoms, &mut rng), 64)
        }
    };
    let vsamples = opts.samples.unwrap_or(vsamples);
    let n = mu.dim();
    let atoms: Vec<Value> = mu.atoms().iter().map(|(y, w)| json!({ "y": nums(y.as_slice()), "w": num(*w) })).collect();
    let inputs = json!({ "atoms": atoms, "seed": seed, "samples": vsamples });
    let ext = ExtremalConfig { seed, ..Default::default() };
    if !mu.spans() {
        let v = fading_zone_volume(&mu, ext.mc_samples, seed).map_err(ctx("visibility_geometry", "fading_zone_volume"))?;
        let step = Step::new(
            "visibility_geometry",
            "fading_zone_volume",
            inputs,
            json!({ "volume": num(v.volume), "visibility": num(v.visibility), "degenerate": true }),
        );
        return Ok(Outcome {
            status: Status::Divergent,
            summary: "atoms do not span: the fading zone is unbounded and the visibility is 0".into(),
            steps: vec![step],
            tables: Vec::new(),
        });
    }
    let r = extremal_basis(&mu, &ext).map_err(ctx("visibility_geometry", "extremal_basis"))?;
    let vs: Vec<_> = (0..vsamples).map(|_| random_vector(n, &mut rng)).collect();
    let checks = sandwich_check(&mu, &r, &vs).map_err(ctx("visibility_geometry", "sandwich_check"))?;
    let mut t = Table { name: "visibility".into(), header: coord_header(n, "v"), rows: Vec::new() };
    t.header.extend(["lower", "norm", "upper", "holds"].map(String::from));
    for (v, c) in vs.iter().zip(&checks) {
        let mut row: Vec<String> = v.iter().map(|x| cell(*x)).collect();
        row.extend([cell(c.lower), cell(c.norm), cell(c.upper), c.holds.to_string()]);
        t.push(row);
    }
    let mut wedges = Vec::new();
    for k in 1..n {
        let f = KForm::random(n, k, &mut rng);
        let w = wedge_lower_bound_check(&mu, &f, &r).map_err(ctx("visibility_geometry", "wedge_lower_bound_check"))?;
        wedges.push(json!({ "k": k, "lhs": num(w.lhs), "rhs": num(w.rhs), "holds": w.holds }));
    }
    let all_hold = r.sandwich_holds && checks.iter().all(|c| c.holds) && wedges.iter().all(|w| w["holds"] == json!(true));
    let (lo, hi) = r.visibility_bounds();
    let step = Step::new(
        "visibility_geometry",
        "extremal_basis",
        inputs,
        json!({
            "volume": num(r.fading.volume),
            "volume_exact": r.fading.exact,
            "volume_std_error": num(r.fading.std_error),
            "visibility": num(r.fading.visibility),
            "visibility_bounds": [num(lo), num(hi)],
            "det_u": num(r.det_u),
            "u": matrix_rows(&r.u),
            "u_dual": matrix_rows(&r.u_dual),
            "volume_sandwich_holds": r.sandwich_holds,
            "wedge_checks": wedges,
        }),
    );
    Ok(Outcome {
        status: if all_hold { Status::Ok } else { Status::Failed },
        summary: format!(
            "Vis = {:.6} in [{lo:.6}, {hi:.6}], |det u| = {:.6}; all inequalities {}",
            r.fading.visibility,
            r.det_u.abs(),
            if all_hold { "hold" } else { "NOT satisfied" }
        ),
        steps: vec![step],
        tables: vec![t, basis_table("basis", &r.u)],
    })
}

fn suite_rows(table: &mut Table, suite: &str, results: &[PropertyResult]) {
    for p in results {
        table.push(vec![
            suite.into(),
            p.name.into(),
            p.instances.to_string(),
            p.violations.to_string(),
            cell(p.worst),
            cell(p.statistic),
            p.passed().to_string(),
        ]);
    }
}

fn suite_step(suite: &'static str, cfg: &SuiteConfig, results: &[PropertyResult]) -> Step {
    let props: Vec<Value> = results
        .iter()
        .map(|p| json!({ "name": p.name, "instances": p.instances, "violations": p.violations, "worst": num(p.worst), "statistic": num(p.statistic) }))
        .collect();
    Step::new(
        "multilinear_algebra",
        suite,
        json!({ "instances": cfg.instances, "mc_samples": cfg.mc_samples, "seed": cfg.seed }),
        Value::Array(props),
    )
}

fn suite_table() -> Table {
    Table::new("suite", &["suite", "property", "instances", "violations", "worst", "statistic", "passed"])
}

pub fn gram_suite_cmd(opts: &RunOptions) -> Result<Outcome, CliError> {
    let cfg = SuiteConfig { instances: opts.samples.unwrap_or(1000), seed: opts.seed.unwrap_or(DEFAULT_SEED), ..Default::default() };
    let g = gram_suite(&cfg).map_err(ctx("multilinear_algebra", "gram_suite"))?;
    let m = minor_norm_suite(&cfg).map_err(ctx("multilinear_algebra", "minor_norm_suite"))?;
    let mut t = suite_table();
    suite_rows(&mut t, "gram", &g);
    suite_rows(&mut t, "minor_norm", &m);
    let failed: Vec<&str> = g.iter().chain(&m).filter(|p| !p.passed()).map(|p| p.name).collect();
    Ok(Outcome {
        status: if failed.is_empty() { Status::Ok } else { Status::Failed },
        summary: if failed.is_empty() {
            format!("all {} Gram and minor-norm properties hold", g.len() + m.len())
        } else {
            format!("violated: {}", failed.join(", "))
        },
        steps: vec![suite_step("gram_suite", &cfg, &g), suite_step("minor_norm_suite", &cfg, &m)],
        tables: vec![t],
    })
}

/// Every randomized suite plus closed-form anchors.
pub fn verify(opts: &RunOptions) -> Result<Outcome, CliError> {
    let mut out = gram_suite_cmd(opts)?;
    let instances = opts.samples.map_or(500, |s| s.div_ceil(2));
    let cfg = SuiteConfig { instances, seed: opts.seed.unwrap_or(DEFAULT_SEED), ..Default::default() };
    let v = visibility_suite(&cfg).map_err(ctx("visibility_geometry", "visibility_suite"))?;
    suite_rows(&mut out.tables[0], "visibility", &v);
    out.steps.push(Step::new(
        "visibility_geometry",
        "visibility_suite",
        json!({ "instances": cfg.instances, "seed": cfg.seed }),
        Value::Array(v.iter().map(|p| json!({ "name": p.name, "violations": p.violations, "worst": num(p.worst) })).collect()),
    ));

    // closed-form anchors
    let beta = beta_constant(1.5, 2).map_err(ctx("paraboloid_models", "beta_constant"))?;
    let cross = fading_zone_volume(&DiscreteMeasure::cross_polytope(3), 0, 0)
        .map_err(ctx("visibility_geometry", "fading_zone_volume"))?
        .visibility;
    let ident = rblab_core::linalg::minor_norm(&Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]), &UnimodularBasis::identity(3))
        .map_err(ctx("multilinear_algebra", "minor_norm"))?;
    let anchors = [
        ("beta_l2_pprime3_is_pi", beta, std::f64::consts::PI),
        ("cross_polytope_visibility_n3", cross, 6.0 / 8.0),
        ("minor_norm_diag_1_2", ident, 2.0),
    ];
    let mut a_fail = Vec::new();
    for (name, got, want) in anchors {
        let gap = (got - want).abs() / want.abs();
        let ok = gap <= 1e-9;
        if !ok {
            a_fail.push(name);
        }
        out.tables[0].push(vec![
            "anchor".into(),
            name.into(),
            "1".into(),
            usize::from(!ok).to_string(),
            cell(gap),
            cell(got),
            ok.to_string(),
        ]);
    }
    out.steps.push(Step::new(
        "verify",
        "anchors",
        json!({}),
        Value::Array(anchors.iter().map(|(n, g, w)| json!({ "name": n, "value": num(*g), "expected": num(*w) })).collect()),
    ));
    out.tables[0].name = "verify".into();
    let failed: Vec<&str> = v.iter().filter(|p| !p.passed()).map(|p| p.name).chain(a_fail).collect();
    if !failed.is_empty() {
        out.status = Status::Failed;
        out.summary = if out.summary.starts_with("violated") {
            format!("{}, {}", out.summary, failed.join(", "))
        } else {
            format!("violated: {}", failed.join(", "))
        };
    } else if out.status == Status::Ok {
        let total = out.tables[0].rows.len();
        out.summary = format!("all {total} invariant checks hold");
    }
    Ok(out)
}

//! Problem files: TOML with an `[ambient]` table, one `[[factor]]` per
//! transform and optional `[knapp]`, `[optimizer]`, `[quadrature]`, `[grid]`
//! and `[visibility]` tables.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rblab_core::incidence::{AffineMap, ChartSpec, Domain, QuadratureConfig};
use rblab_core::knapp::{default_ladder, Cutoff};
use rblab_core::linalg::{Matrix, Vector};
use rblab_core::poly::{PolyMap, Polynomial, SharedMap};
use rblab_core::slopt::SlOptimizerConfig;
use rblab_core::testing::{Density, Mode, QFactor, RadonFactor, TestingProblem, Weight};
use rblab_core::visibility::DiscreteMeasure;
use rblab_core::weight::WeightExpr;
use rblab_core::Error;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub ambient: Ambient,
    #[serde(default, rename = "factor")]
    pub factors: Vec<FactorConfig>,
    pub knapp: Option<KnappConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub quadrature: QuadConfig,
    pub grid: Option<GridConfig>,
    pub visibility: Option<VisibilityConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Ambient {
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub name: Option<String>,
    pub p: f64,
    pub q: f64,
    /// Checked against the number of map components when given.
    pub k: Option<usize>,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default = "one")]
    pub weight: String,
    pub map: MapConfig,
    #[serde(default)]
    pub chart: ChartConfig,
    #[serde(default)]
    pub cutoff: CutoffConfig,
    #[serde(default)]
    pub density: DensityConfig,
    /// Exponent in the dual functional; defaults to `q/p`.
    pub r: Option<f64>,
}

fn one() -> String {
    "1".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    #[default]
    Strong,
    Restricted,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapConfig {
    /// `y = x^index`.
    Coordinate { index: usize },
    /// `y = A x + b`.
    Linear { matrix: Vec<Vec<f64>>, offset: Option<Vec<f64>> },
    /// `|x - y|² = R²`.
    Sphere { radius: f64 },
    /// Factor `index` (0-based) of the cyclic paraboloid system.
    Paraboloid { l: usize, index: usize },
    /// Components as term lists over `(x₁..xₙ, y₁..y_{n_y})`.
    Polynomial { n_y: usize, components: Vec<Vec<Term>> },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coef: f64,
    pub exp: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Box { half_widths: Vec<f64> },
    Ball { radius: f64 },
    Unbounded { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChartConfig {
    /// Chosen from the map kind; `radius` sets the first shell of unbounded charts.
    Auto { radius: Option<f64> },
    Point { guess: AffineConfig },
    Graph { solved: Vec<usize>, origin: AffineConfig, guess: AffineConfig, domain: DomainConfig },
    Sphere { radius: f64, center: Option<AffineConfig> },
}

impl Default for ChartConfig {
    fn default() -> Self {
        ChartConfig::Auto { radius: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CutoffConfig {
    #[default]
    One,
    Bump { center: Vec<f64>, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    #[default]
    One,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Gaussian { center: Vec<f64>, width: f64 },
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KnappConfig {
    pub x0: Option<Vec<f64>>,
    pub ladder: Option<Vec<f64>>,
    #[serde(default = "half")]
    pub c: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub multistarts: Option<usize>,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub step_tolerance: Option<f64>,
    pub value_tolerance: Option<f64>,
    pub initial_step: Option<f64>,
    pub start_spread: Option<f64>,
    pub divergence_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct QuadConfig {
    pub nodes: Option<usize>,
    pub panels: Option<usize>,
    pub max_doublings: Option<usize>,
    pub tail_exponent_hint: Option<f64>,
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Explicit base points.
    pub points: Option<Vec<Vec<f64>>>,
    /// Additional seeded points, uniform in `[-radius, radius]ⁿ`.
    pub samples: Option<usize>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilityConfig {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    /// Number of random test vectors for the norm sandwich.
    pub samples: Option<usize>,
}

/// One problem with a config file: where it is and what is wrong.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// A parsed config together with its source, for line lookups.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ProblemConfig,
    pub digest: String,
    source: String,
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Parses a config document. `digest` is the SHA-256 of its canonical JSON
/// form, which ignores formatting and key order.
pub fn parse_config_str(source: &str) -> std::result::Result<LoadedConfig, Vec<Diagnostic>> {
    let config: ProblemConfig = toml::from_str(source).map_err(|e| {
        let line = e.span().map(|s| line_of(source, s.start));
        vec![Diagnostic { line, field: "syntax".into(), message: e.message().trim().to_string() }]
    })?;
    let value: toml::Value = toml::from_str(source).expect("document already parsed");
    let canonical = serde_json::to_string(&value).expect("toml values serialize");
    let digest = hex(&Sha256::digest(canonical.as_bytes()));
    let loaded = LoadedConfig { config, digest, source: source.to_string() };
    let diags = loaded.check_shapes();
    if diags.is_empty() {
        Ok(loaded)
    } else {
        Err(diags)
    }
}

pub fn parse_config(path: &Path) -> std::result::Result<LoadedConfig, Vec<Diagnostic>> {
    let source = std::fs::read_to_string(path).map_err(|e| {
        vec![Diagnostic { line: None, field: path.display().to_string(), message: e.to_string() }]
    })?;
    parse_config_str(&source)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn matrix(rows: &[Vec<f64>]) -> std::result::Result<Matrix, String> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err("matrix must be a non-empty list of equal-length rows".into());
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn affine(a: &AffineConfig) -> std::result::Result<AffineMap, String> {
    let m = matrix(&a.matrix)?;
    AffineMap::new(m, Vector::from_column_slice(&a.offset)).map_err(|e| e.to_string())
}

/// The problem pieces a command needs, built from a validated config.
pub struct Built {
    pub problem: TestingProblem,
    pub cutoffs: Vec<Cutoff>,
    pub densities: Vec<Density>,
    pub qfactors: Vec<QFactor>,
}

impl LoadedConfig {
    /// Line of the `i`-th `[[factor]]` header.
    fn factor_line(&self, i: usize) -> Option<usize> {
        self.source
            .lines()
            .enumerate()
            .filter(|(_, l)| l.trim() == "[[factor]]")
            .nth(i)
            .map(|(n, _)| n + 1)
    }

    fn table_line(&self, name: &str) -> Option<usize> {
        let header = format!("[{name}]");
        self.source.lines().position(|l| l.trim() == header).map(|n| n + 1)
    }

    fn factor_field(&self, i: usize) -> String {
        match &self.config.factors[i].name {
            Some(name) => format!("factor[{i}] ({name})"),
            None => format!("factor[{i}]"),
        }
    }

    fn check_shapes(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let n = self.config.ambient.n;
        if n == 0 {
            out.push(Diagnostic { line: self.table_line("ambient"), field: "ambient.n".into(), message: "must be positive".into() });
        }
        if let Some(k) = &self.config.knapp {
            if let Some(x0) = &k.x0 {
                if x0.len() != n {
                    out.push(Diagnostic {
                        line: self.table_line("knapp"),
                        field: "knapp.x0".into(),
                        message: format!("has length {} but n = {n}", x0.len()),
                    });
                }
            }
        }
        if let Some(g) = &self.config.grid {
            for (i, pt) in g.points.iter().flatten().enumerate() {
                if pt.len() != n {
                    out.push(Diagnostic {
                        line: self.table_line("grid"),
                        field: format!("grid.points[{i}]"),
                        message: format!("has length {} but n = {n}", pt.len()),
                    });
                }
            }
        }
        if let Some(v) = &self.config.visibility {
            if v.atoms.iter().any(|a| a.len() != n) {
                out.push(Diagnostic {
                    line: self.table_line("visibility"),
                    field: "visibility.atoms".into(),
                    message: format!("every atom must have length n = {n}"),
                });
            }
            if v.weights.as_ref().is_some_and(|w| w.len() != v.atoms.len()) {
                out.push(Diagnostic {
                    line: self.table_line("visibility"),
                    field: "visibility.weights".into(),
                    message: "needs one weight per atom".into(),
                });
            }
        }
        out
    }

    fn factor(&self, i: usize, f: &FactorConfig) -> std::result::Result<(RadonFactor, Cutoff, Density), String> {
        let n = self.config.ambient.n;
        let (map, poly): (SharedMap, PolyMap) = {
            let m = match &f.map {
                MapConfig::Coordinate { index } => {
                    if *index >= n {
                        return Err(format!("map.index {index} out of range for n = {n}"));
                    }
                    PolyMap::coordinate(n, *index)
                }
                MapConfig::Linear { matrix: rows, offset } => {
                    let a = matrix(rows)?;
                    if a.ncols() != n {
                        return Err(format!("map.matrix has {} columns but n = {n}", a.ncols()));
                    }
                    let b = offset.as_ref().map(|o| Vector::from_column_slice(o));
                    if b.as_ref().is_some_and(|b| b.len() != a.nrows()) {
                        return Err("map.offset must have one entry per matrix row".into());
                    }
                    PolyMap::linear(&a, b.as_ref())
                }
                MapConfig::Sphere { radius } => {
                    if !(*radius > 0.0) {
                        return Err("map.radius must be positive".into());
                    }
                    PolyMap::sphere(n, *radius)
                }
                MapConfig::Paraboloid { l, index } => {
                    if *l < 2 || *l > n || *index >= n {
                        return Err(format!("paraboloid needs 2 <= l <= n and index < n, got l = {l}, index = {index}"));
                    }
                    PolyMap::paraboloid(n, *l, *index)
                }
                MapConfig::Polynomial { n_y, components } => {
                    let comps = components
                        .iter()
                        .map(|terms| {
                            Polynomial::new(n + n_y, terms.iter().map(|t| (t.coef, t.exp.clone())).collect())
                        })
                        .collect::<rblab_core::Result<Vec<_>>>()
                        .map_err(|e| format!("map.components: {e}"))?;
                    PolyMap::new(n, *n_y, comps).map_err(|e| e.to_string())?
                }
            };
            (Arc::new(m.clone()), m)
        };
        if let Some(k) = f.k {
            if k != poly.components().len() {
                return Err(format!("k = {k} but the map has {} components", poly.components().len()));
            }
        }
        let chart = match &f.chart {
            ChartConfig::Auto { radius } => match &f.map {
                MapConfig::Coordinate { index } => {
                    let mut a = Matrix::zeros(1, n);
                    a[(0, *index)] = 1.0;
                    ChartSpec::linear_point(&a, None)
                }
                MapConfig::Linear { matrix: rows, offset } => {
                    let b = offset.as_ref().map(|o| Vector::from_column_slice(o));
                    ChartSpec::linear_point(&matrix(rows)?, b.as_ref())
                }
                MapConfig::Sphere { radius: r } => ChartSpec::sphere(n, *r),
                MapConfig::Paraboloid { l, index } => ChartSpec::paraboloid(n, *l, *index, radius.unwrap_or(4.0)),
                MapConfig::Polynomial { .. } => return Err("polynomial maps need an explicit chart".into()),
            },
            ChartConfig::Point { guess } => ChartSpec::Point { guess: affine(guess)? },
            ChartConfig::Graph { solved, origin, guess, domain } => ChartSpec::Graph {
                solved: solved.clone(),
                origin: affine(origin)?,
                guess: affine(guess)?,
                domain: match domain {
                    DomainConfig::Box { half_widths } => Domain::Box { half_widths: half_widths.clone() },
                    DomainConfig::Ball { radius } => Domain::Ball { radius: *radius },
                    DomainConfig::Unbounded { radius } => Domain::Unbounded { radius: *radius },
                },
            },
            ChartConfig::Sphere { radius, center } => ChartSpec::Sphere {
                center: match center {
                    Some(c) => affine(c)?,
                    None => AffineMap::identity(n),
                },
                radius: *radius,
            },
        };
        let weight = Weight::new(WeightExpr::parse(&f.weight).map_err(|e| format!("weight: {e}"))?);
        let mode = match f.mode {
            ModeConfig::Strong => Mode::Strong,
            ModeConfig::Restricted => Mode::Restricted,
        };
        let name = f.name.clone().unwrap_or_else(|| format!("factor_{}", i + 1));
        let factor = RadonFactor::new(name, map, chart, weight, f.p, f.q, mode).map_err(|e| e.to_string())?;
        let n_y = factor.n_y();
        let cutoff = match &f.cutoff {
            CutoffConfig::One => Cutoff::One,
            CutoffConfig::Bump { center, radius } => {
                if center.len() != n_y || !(*radius > 0.0) {
                    return Err(format!("cutoff needs a centre of length {n_y} and a positive radius"));
                }
                Cutoff::Bump { center: Vector::from_column_slice(center), radius: *radius }
            }
        };
        let density: Density = match &f.density {
            DensityConfig::One => Arc::new(|_: &[f64]| 1.0),
            DensityConfig::Box { lo, hi } => {
                if lo.len() != n_y || hi.len() != n_y {
                    return Err(format!("density box needs bounds of length {n_y}"));
                }
                rblab_core::testing::box_indicator(lo.clone(), hi.clone())
            }
            DensityConfig::Gaussian { center, width } => {
                if center.len() != n_y || !(*width > 0.0) {
                    return Err(format!("gaussian density needs a centre of length {n_y} and a positive width"));
                }
                let (c, w) = (center.clone(), *width);
                Arc::new(move |y: &[f64]| {
                    let d2: f64 = y.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                    (-d2 / (w * w)).exp()
                })
            }
        };
        Ok((factor, cutoff, density))
    }

    /// Builds the testing problem. Supercritical scaling is rejected unless
    /// `allow_supercritical` is set.
    pub fn build(&self, allow_supercritical: bool) -> std::result::Result<Built, Vec<Diagnostic>> {
        let mut diags = Vec::new();
        if self.config.factors.is_empty() {
            diags.push(Diagnostic { line: None, field: "factor".into(), message: "config defines no [[factor]] tables".into() });
            return Err(diags);
        }
        let mut factors = Vec::new();
        let mut cutoffs = Vec::new();
        let mut densities = Vec::new();
        for (i, f) in self.config.factors.iter().enumerate() {
            match self.factor(i, f) {
                Ok((rf, c, d)) => {
                    factors.push(rf);
                    cutoffs.push(c);
                    densities.push(d);
                }
                Err(message) => diags.push(Diagnostic { line: self.factor_line(i), field: self.factor_field(i), message }),
            }
        }
        if !diags.is_empty() {
            return Err(diags);
        }
        let n = self.config.ambient.n;
        let problem = if allow_supercritical {
            TestingProblem::supercritical(n, factors)
        } else {
            TestingProblem::new(n, factors)
        };
        let problem = problem.map_err(|e| {
            let message = match e {
                Error::ScalingViolated { slack } => {
                    format!("supercritical scaling: sum of k q / p exceeds n by {}", -slack)
                }
                other => other.to_string(),
            };
            vec![Diagnostic { line: self.table_line("ambient"), field: "factor".into(), message }]
        })?;
        let qfactors = problem
            .factors
            .iter()
            .zip(&self.config.factors)
            .zip(&densities)
            .map(|((f, c), d)| QFactor {
                map: f.map.clone(),
                chart: f.chart.clone(),
                density: d.clone(),
                r: c.r.unwrap_or(c.q / c.p),
            })
            .collect();
        Ok(Built { problem, cutoffs, densities, qfactors })
    }

    pub fn optimizer(&self, seed: Option<u64>) -> SlOptimizerConfig {
        let o = &self.config.optimizer;
        let d = SlOptimizerConfig::default();
        SlOptimizerConfig {
            multistarts: o.multistarts.unwrap_or(d.multistarts),
            max_iters: o.max_iters.unwrap_or(d.max_iters),
            step_tolerance: o.step_tolerance.unwrap_or(d.step_tolerance),
            value_tolerance: o.value_tolerance.unwrap_or(d.value_tolerance),
            initial_step: o.initial_step.unwrap_or(d.initial_step),
            start_spread: o.start_spread.unwrap_or(d.start_spread),
            divergence_threshold: o.divergence_threshold.unwrap_or(d.divergence_threshold),
            seed: seed.or(o.seed).unwrap_or(d.seed),
        }
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        let q = &self.config.quadrature;
        let d = QuadratureConfig::default();
        QuadratureConfig {
            nodes: q.nodes.unwrap_or(d.nodes),
            panels: q.panels.unwrap_or(d.panels),
            max_doublings: q.max_doublings.unwrap_or(d.max_doublings),
            tail_exponent_hint: q.tail_exponent_hint.or(d.tail_exponent_hint),
            rel_tol: q.rel_tol.unwrap_or(d.rel_tol),
        }
    }

    /// Explicit grid points followed by seeded samples; the origin if neither is given.
    pub fn grid(&self, seed: u64) -> Vec<Vec<f64>> {
        let n = self.config.ambient.n;
        let mut pts = Vec::new();
        if let Some(g) = &self.config.grid {
            pts.extend(g.points.iter().flatten().cloned());
            if let Some(m) = g.samples {
                let r = g.radius.unwrap_or(1.0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d1d);
                for _ in 0..m {
                    pts.push((0..n).map(|_| rng.random_range(-r..=r)).collect());
                }
            }
        }
        if pts.is_empty() {
            pts.push(vec![0.0; n]);
        }
        pts
    }

    pub fn knapp_settings(&self) -> (Vec<f64>, Vec<f64>, f64) {
        let n = self.config.ambient.n;
        match &self.config.knapp {
            Some(k) => (
                k.x0.clone().unwrap_or_else(|| vec![0.0; n]),
                k.ladder.clone().unwrap_or_else(default_ladder),
                k.c,
            ),
            None => (vec![0.0; n], default_ladder(), 0.5),
        }
    }

    pub fn measure(&self) -> std::result::Result<Option<(DiscreteMeasure, usize)>, Vec<Diagnostic>> {
        let Some(v) = &self.config.visibility else {
            return Ok(None);
        };
        let atoms = v
            .atoms
            .iter()
            .enumerate()
            .map(|(i, a)| (Vector::from_column_slice(a), v.weights.as_ref().map_or(1.0, |w| w[i])))
            .collect();
        let mu = DiscreteMeasure::new(atoms).map_err(|e| {
            vec![Diagnostic { line: self.table_line("visibility"), field: "visibility".into(), message: e.to_string() }]
        })?;
        Ok(Some((mu, v.samples.unwrap_or(64))))
    }
}

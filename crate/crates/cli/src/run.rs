//! Scenario execution: model construction from the catalog, the convexity
//! gate, and one runner per subcommand.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use lenslab_core::catalog::{self, BumpSpec, Diffeo};
use lenslab_core::flow::{self, PhasePoint};
use lenslab_core::lens::{self, HomotopyClass, RowFlag};
use lenslab_core::measure::{self, BoundaryInterval, FanGrid};
use lenslab_core::metric::{BoundaryPoint, Chart, SurfaceModel};
use lenslab_core::rigidity::{self, ConvexCatalog, MetricPair, SamplingSpec};
use lenslab_core::Vec2;

use crate::output::{artifact_path, fmt_float, CsvWriter, Manifest};
use crate::scenario::{config_hash, ConfigError, Scenario, Section};

pub enum RunError {
    Config(ConfigError),
    ModelRejected(String),
    Numeric(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::ModelRejected(_) => 3,
            RunError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> String {
        match self {
            RunError::Config(e) => e.to_string(),
            RunError::ModelRejected(m) => format!("model rejected: {m}"),
            RunError::Numeric(m) => format!("numeric failure: {m}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<lenslab_core::Error> for RunError {
    fn from(e: lenslab_core::Error) -> Self {
        match e {
            lenslab_core::Error::CurvatureSignViolation(_) => RunError::ModelRejected(e.to_string()),
            lenslab_core::Error::BoundaryMismatch(_) => RunError::ModelRejected(e.to_string()),
            other => RunError::Numeric(other.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Numeric(format!("io: {e}"))
    }
}

/// CLI-level overrides applied on top of the scenario.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub t_max: Option<f64>,
    pub grid: Option<usize>,
    pub allow_nonconvex: bool,
    pub out_dir: Option<PathBuf>,
}

fn base_model_by_kind(kind: &str, sec: &Section, prefix: &str) -> Result<SurfaceModel, RunError> {
    let key = |k: &str| format!("{prefix}{k}");
    let model = match kind {
        "euclidean_disk" => catalog::euclidean_disk(sec.f64_or(&key("radius"), 1.0)?),
        "poincare_disk" => catalog::poincare_disk(sec.f64_or(&key("r_chart"), 0.5)?),
        "sphere_cap" => catalog::sphere_cap(sec.f64_or(&key("r_chart"), 3.0)?),
        "hyperbolic_cylinder" => catalog::hyperbolic_cylinder(
            sec.f64_or(&key("half_width"), 1.0)?,
            sec.f64_or(&key("period"), 6.0)?,
        ),
        "flat_cylinder" => catalog::flat_cylinder(
            sec.f64_or(&key("half_width"), 1.0)?,
            sec.f64_or(&key("period"), 6.0)?,
        ),
        other => {
            return Err(ConfigError::new(format!(
                "unknown catalog metric `{other}` (expected euclidean_disk, poincare_disk, \
                 sphere_cap, hyperbolic_cylinder, flat_cylinder, conformal_bump, pullback)"
            ))
            .into())
        }
    };
    Ok(model)
}

fn bump_from(sec: &Section) -> Result<BumpSpec, RunError> {
    Ok(BumpSpec {
        amplitude: sec.require_f64("amplitude")?,
        center: Vec2::new(sec.f64_or("center_u", 0.0)?, sec.f64_or("center_v", 0.0)?),
        width: sec.require_f64("width")?,
    })
}

fn diffeo_from(sec: &Section, chart: Chart) -> Result<Diffeo, RunError> {
    let kind = sec.get_str("diffeo").unwrap_or_else(|| "twist".into());
    match kind.as_str() {
        "twist" => {
            let Chart::Disk { radius } = chart else {
                return Err(ConfigError::new("twist diffeos require a disk chart").into());
            };
            Ok(catalog::twist(radius, sec.f64_or("diffeo_amplitude", 0.3)?))
        }
        "identity" => Ok(Diffeo::identity()),
        other => Err(ConfigError::new(format!("unknown catalog diffeo `{other}`")).into()),
    }
}

fn build_model(sec: &Section) -> Result<SurfaceModel, RunError> {
    let kind = sec.require_str("kind")?;
    match kind.as_str() {
        "conformal_bump" => {
            let base_kind = sec.require_str("base")?;
            let base = base_model_by_kind(&base_kind, sec, "base_")?;
            Ok(catalog::conformal_bump(&base, bump_from(sec)?)?)
        }
        "pullback" => {
            let base_kind = sec.require_str("base")?;
            let base = base_model_by_kind(&base_kind, sec, "base_")?;
            let diffeo = diffeo_from(sec, base.chart)?;
            Ok(catalog::pullback(&base, &diffeo))
        }
        other => base_model_by_kind(other, sec, ""),
    }
}

fn convexity_gate(model: &SurfaceModel, ov: &Overrides) -> Result<f64, RunError> {
    let min_curvature = model.boundary_convexity_check(64);
    if min_curvature <= 0.0 && !ov.allow_nonconvex {
        return Err(RunError::ModelRejected(format!(
            "{}: boundary geodesic curvature {min_curvature:.6} is not strictly positive \
             (pass --allow-nonconvex to override)",
            model.name
        )));
    }
    Ok(min_curvature)
}

fn build_pair(scn: &Scenario, ov: &Overrides) -> Result<MetricPair, RunError> {
    let g1 = build_model(&scn.section("model"))?;
    convexity_gate(&g1, ov)?;
    let pair_sec = scn.section("pair");
    let relation = pair_sec.get_str("relation").unwrap_or_else(|| "identical".into());
    let pair = match relation.as_str() {
        "identical" => MetricPair::identical(&g1),
        "pullback" => {
            let diffeo = diffeo_from(&pair_sec, g1.chart)?;
            MetricPair::pullback(&g1, &diffeo)?
        }
        "conformal" => MetricPair::conformal(&g1, bump_from(&pair_sec)?)?,
        "unrelated" => {
            if !scn.has_section("model2") {
                return Err(ConfigError::new(
                    "relation = unrelated requires a [model2] section",
                )
                .into());
            }
            let g2 = build_model(&scn.section("model2"))?;
            convexity_gate(&g2, ov)?;
            MetricPair::unrelated(&g1, &g2)?
        }
        other => {
            return Err(ConfigError::new(format!(
                "unknown pair relation `{other}` (identical | pullback | conformal | unrelated)"
            ))
            .into())
        }
    };
    Ok(pair)
}

struct RunContext {
    out_dir: PathBuf,
    prefix: String,
    seed: u64,
    t_max: Option<f64>,
    grid: Option<usize>,
    manifest: Manifest,
}

impl RunContext {
    fn path(&self, name: &str) -> PathBuf {
        artifact_path(&self.out_dir, &self.prefix, name)
    }

    fn grid_of(&self, params: &Section, t_max_default: Option<f64>) -> Result<FanGrid, RunError> {
        let mut grid = FanGrid::default();
        grid.n_s = self.grid.map(Ok).unwrap_or_else(|| params.usize_or("grid_s", 256))?;
        grid.n_theta =
            self.grid.map(Ok).unwrap_or_else(|| params.usize_or("grid_theta", 256))?;
        grid.n_theta_scan = params.usize_or("grid_theta_scan", 48)?;
        grid.n_max = params.i64_or("n_max", 5)?;
        grid.t_max = match self.t_max {
            Some(t) => Some(t),
            None => params.get_f64("t_max")?.or(t_max_default),
        };
        Ok(grid)
    }
}

pub fn run(
    command: &str,
    scenario_path: &Path,
    ov: &Overrides,
) -> Result<(), RunError> {
    let scn = Scenario::load(scenario_path)?;
    // The optional top-level command key must agree with the subcommand.
    if let Some(declared) = scn.section("").get_str("command") {
        if declared != command {
            return Err(ConfigError::new(format!(
                "scenario declares command `{declared}` but `{command}` was requested"
            ))
            .into());
        }
    }

    let threads = ov.threads.unwrap_or(0);
    if let Some(n) = ov.threads {
        // Global cap; ignore failure if a pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let params = scn.section("params");
    let out_sec = scn.section("output");
    let out_dir = ov
        .out_dir
        .clone()
        .or_else(|| out_sec.get_str("dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let prefix = out_sec
        .get_str("prefix")
        .unwrap_or_else(|| command.replace('-', "_"));
    let seed = match ov.seed {
        Some(s) => s,
        None => params.get_u64("seed")?.unwrap_or(0),
    };

    let mut canonical = scn.canonical_string();
    canonical.push_str(&format!(
        "override.seed={seed}\noverride.t_max={:?}\noverride.grid={:?}\n",
        ov.t_max, ov.grid
    ));
    let hash = config_hash(&canonical);
    let manifest = Manifest::new(command, &hash, Some(seed), threads);

    let mut ctx = RunContext {
        out_dir,
        prefix,
        seed,
        t_max: ov.t_max,
        grid: ov.grid,
        manifest,
    };

    match command {
        "lens-table" => cmd_lens_table(&scn, &params, ov, &mut ctx)?,
        "distance" => cmd_distance(&scn, &params, ov, &mut ctx)?,
        "volume-check" => cmd_volume(&scn, &params, ov, &mut ctx)?,
        "intersection-check" => cmd_intersection(&scn, &params, ov, &mut ctx)?,
        "fan-check" => cmd_fan(&scn, &params, ov, &mut ctx)?,
        "douady-check" => cmd_douady(&scn, &params, ov, &mut ctx)?,
        "trapped-probe" => cmd_trapped(&scn, &params, ov, &mut ctx)?,
        "conjugate-scan" => cmd_conjugate(&scn, &params, ov, &mut ctx)?,
        "cone-check" => cmd_cone(&scn, &params, ov, &mut ctx)?,
        "theta-curve" => cmd_theta_curve(&scn, &params, ov, &mut ctx)?,
        "jensen" => cmd_jensen(&scn, &params, ov, &mut ctx)?,
        "psi-map" => cmd_psi_map(&scn, &params, ov, &mut ctx)?,
        "certificate" => cmd_certificate(&scn, &params, ov, &mut ctx)?,
        "croke-chain" => cmd_croke(&scn, &params, ov, &mut ctx)?,
        other => {
            return Err(ConfigError::new(format!("unknown command `{other}`")).into());
        }
    }

    scn.check_consumed()?;
    let manifest_path = ctx.path("manifest.json");
    ctx.manifest.write(&manifest_path)?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn json_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable report")
}

fn write_json(ctx: &mut RunContext, name: &str, value: &Value) -> Result<PathBuf, RunError> {
    let path = ctx.path(name);
    crate::output::write_atomic(&path, serde_json::to_string_pretty(value).unwrap().as_bytes())?;
    ctx.manifest.record_output(&path);
    Ok(path)
}

fn cmd_lens_table(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let n_s = ctx.grid.map(Ok).unwrap_or_else(|| params.usize_or("grid_s", 64))?;
    let n_theta = ctx.grid.map(Ok).unwrap_or_else(|| params.usize_or("grid_theta", 64))?;
    let t_max = match ctx.t_max {
        Some(t) => t,
        None => params.f64_or("t_max", model.default_horizon())?,
    };
    let period = model.chart.boundary_param_period();
    let s_values: Vec<f64> = (0..n_s).map(|i| period * i as f64 / n_s as f64).collect();
    let theta_values: Vec<f64> =
        (0..n_theta).map(|j| std::f64::consts::PI * (j as f64 + 0.5) / n_theta as f64).collect();
    let table = lens::shoot_table(&model, &s_values, &theta_values, t_max);

    let strip = matches!(model.chart, Chart::Strip { .. });
    let mut header = vec!["s", "theta", "ell", "s_exit", "theta_exit", "flag"];
    if strip {
        header.extend_from_slice(&["component", "component_exit"]);
    }
    let mut csv = CsvWriter::new(&header);
    let (mut n_ok, mut n_tan, mut n_trapped) = (0usize, 0usize, 0usize);
    for row in &table.rows {
        let flag = match row.flag {
            RowFlag::Ok => {
                n_ok += 1;
                "ok"
            }
            RowFlag::Tangential => {
                n_tan += 1;
                "tangential"
            }
            RowFlag::Trapped => {
                n_trapped += 1;
                "trapped"
            }
        };
        let mut cells = vec![
            fmt_float(row.s),
            fmt_float(row.theta),
            row.ell.map(fmt_float).unwrap_or_default(),
            row.s_exit.map(fmt_float).unwrap_or_default(),
            row.theta_exit.map(fmt_float).unwrap_or_default(),
            flag.to_string(),
        ];
        if strip {
            cells.push(row.component.to_string());
            cells.push(row.component_exit.map(|c| c.to_string()).unwrap_or_default());
        }
        csv.row(&cells);
    }
    let path = ctx.path("lens_table.csv");
    csv.finish(&path)?;
    ctx.manifest.record_output(&path);
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert(
        "values",
        json!({"rows": table.rows.len(), "ok": n_ok, "tangential": n_tan, "trapped": n_trapped, "t_max": t_max}),
    );
    Ok(())
}

fn cmd_distance(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let winding = HomotopyClass(params.i64_or("winding", 0)?);
    let query = params.get_str("query").unwrap_or_else(|| "boundary".into());
    let record = match query.as_str() {
        "boundary" => {
            let from = BoundaryPoint::new(
                params.usize_or("from_component", 0)?,
                params.require_f64("from_s")?,
            );
            let to = BoundaryPoint::new(
                params.usize_or("to_component", 0)?,
                params.require_f64("to_s")?,
            );
            lens::boundary_distance(&model, from, to, winding)?
        }
        "interior" => {
            let x = Vec2::new(params.require_f64("x_u")?, params.require_f64("x_v")?);
            let y = Vec2::new(params.require_f64("y_u")?, params.require_f64("y_v")?);
            lens::interior_distance(&model, x, y, winding)?
        }
        other => {
            return Err(ConfigError::new(format!(
                "unknown query `{other}` (boundary | interior)"
            ))
            .into())
        }
    };

    if params.usize_or("samples", 0)? != 0 {
        let mut csv = CsvWriter::new(&["t", "u", "v", "wu", "wv"]);
        for (t, y) in &record.nodes {
            csv.row(&[
                fmt_float(*t),
                fmt_float(y.p.u),
                fmt_float(y.p.v),
                fmt_float(y.w.u),
                fmt_float(y.w.v),
            ]);
        }
        let path = ctx.path("trajectory.csv");
        csv.finish(&path)?;
        ctx.manifest.record_output(&path);
    }
    let summary = json!({
        "length": record.length,
        "winding": record.class.0,
        "solver": format!("{:?}", record.solver),
        "ode_residual": record.ode_residual,
        "start": [record.start.u, record.start.v],
        "end": [record.end.u, record.end.v],
    });
    write_json(ctx, "distance.json", &summary)?;
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert("values", summary);
    Ok(())
}

fn cmd_volume(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let grid = ctx.grid_of(params, None)?;
    let rep = measure::volume_via_lens(&model, &grid)?;
    let summary = json!({
        "value": rep.lens_value,
        "area_value": rep.area_value,
        "defect": rep.defect,
        "masked_fraction": rep.masked_fraction,
        "grid": {"n_s": grid.n_s, "n_theta": grid.n_theta},
    });
    write_json(ctx, "volume.json", &summary)?;
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert("values", summary);
    Ok(())
}

fn cmd_intersection(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    use rand::Rng;
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let n_pairs = params.usize_or("n_pairs", 20)?;
    let mut grid = ctx.grid_of(params, None)?;
    if ctx.grid.is_none() && params.get_usize("grid_s")?.is_none() {
        grid.n_s = 128;
        grid.n_theta = 128;
    }
    let mut rng = lenslab_core::sampling::seeded_rng(ctx.seed);
    let period = model.chart.boundary_param_period();
    let mut rows = Vec::new();
    let mut worst = 0.0_f64;
    for k in 0..n_pairs {
        let a = rng.gen::<f64>() * period;
        let (to, class) = match model.chart {
            Chart::Disk { .. } => {
                let gap = 0.4 + rng.gen::<f64>() * (period - 0.8);
                (BoundaryPoint::new(0, a + gap), HomotopyClass(0))
            }
            Chart::Strip { .. } => {
                let comp = k % 2;
                let b = rng.gen::<f64>() * period;
                let class = HomotopyClass((k as i64 % 3) - 1);
                (BoundaryPoint::new(comp, b), class)
            }
        };
        let rec = lens::boundary_distance(&model, BoundaryPoint::new(0, a), to, class)?;
        let rep = measure::intersection_number(&model, &rec, &grid)?;
        worst = worst.max(rep.rel_defect);
        rows.push(json!({
            "length": rec.length,
            "eta": rep.eta,
            "expected": rep.expected,
            "rel_defect": rep.rel_defect,
            "truncation_residual": rep.truncation_residual,
        }));
    }
    let summary = json!({"pairs": rows, "max_rel_defect": worst, "grid": {"n_s": grid.n_s, "n_theta": grid.n_theta, "n_max": grid.n_max}});
    write_json(ctx, "intersection.json", &summary)?;
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert("values", json!({"max_rel_defect": worst, "n_pairs": n_pairs}));
    Ok(())
}

fn cmd_fan(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let from = BoundaryPoint::new(
        params.usize_or("from_component", 0)?,
        params.f64_or("from_s", 0.0)?,
    );
    let to = BoundaryPoint::new(
        params.usize_or("to_component", 0)?,
        params.f64_or("to_s", std::f64::consts::PI)?,
    );
    let winding = HomotopyClass(params.i64_or("winding", 0)?);
    let n_tau = params.usize_or("boxes_tau", 8)?;
    let n_theta_boxes = params.usize_or("boxes_theta", 8)?;
    let mut grid = ctx.grid_of(params, None)?;
    if ctx.grid.is_none() && params.get_usize("grid_s")?.is_none() {
        grid.n_s = 192;
        grid.n_theta = 192;
    }
    let rec = lens::boundary_distance(&model, from, to, winding)?;
    let rep = measure::fan_chart_check(&model, &rec, n_tau, n_theta_boxes, &grid)?;
    let summary = json_value(&rep);
    write_json(ctx, "fan_chart.json", &summary)?;
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert(
        "values",
        json!({"tv_defect": rep.tv_defect, "max_rel_defect": rep.max_rel_defect, "rms_rel_defect": rep.rms_rel_defect}),
    );
    Ok(())
}

fn cmd_douady(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let e = BoundaryInterval::new(
        params.usize_or("e_component", 0)?,
        params.require_f64("e_lo")?,
        params.require_f64("e_hi")?,
    );
    let f = BoundaryInterval::new(
        params.usize_or("f_component", 0)?,
        params.require_f64("f_lo")?,
        params.require_f64("f_hi")?,
    );
    let depth = params.usize_or("depth", 6)?;
    let grid = ctx.grid_of(params, None)?;
    let rep = measure::douady_reconstruct(&model, e, f, depth, &grid)?;
    let summary = json_value(&rep);
    write_json(ctx, "douady.json", &summary)?;
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert(
        "values",
        json!({"reconstructed": rep.reconstructed, "direct": rep.direct, "rel_defect": rep.rel_defect}),
    );
    Ok(())
}

fn cmd_trapped(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let n = params.usize_or("n_samples", 20_000)?;
    let horizons: Vec<f64> = match params.get_str("horizons") {
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim().parse::<f64>().map_err(|_| {
                    ConfigError::new(format!("bad horizon `{x}` in `horizons`"))
                })
            })
            .collect::<Result<_, _>>()?,
        None => vec![10.0, 20.0, 40.0],
    };
    let t_cap = horizons.iter().cloned().fold(0.0, f64::max);
    let survey = flow::escape_length_survey(&model, n, ctx.t_max.unwrap_or(t_cap), ctx.seed);
    let mut csv = CsvWriter::new(&["t_max", "fraction"]);
    let mut vals = Vec::new();
    for &t in &horizons {
        let frac = survey.iter().filter(|l| l.map_or(true, |v| v >= t)).count() as f64
            / survey.len() as f64;
        csv.row(&[fmt_float(t), fmt_float(frac)]);
        vals.push(json!({"t_max": t, "fraction": frac}));
    }
    let path = ctx.path("trapped_fraction.csv");
    csv.finish(&path)?;
    ctx.manifest.record_output(&path);
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert("values", json!({"n_samples": n, "fractions": vals}));
    Ok(())
}

fn cmd_conjugate(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    use rand::Rng;
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let n_orbits = params.usize_or("n_orbits", 200)?;
    let horizon = match ctx.t_max {
        Some(t) => t,
        None => params.f64_or("t_max", 5.0 * model.diameter())?,
    };
    let mut rng = lenslab_core::sampling::seeded_rng(ctx.seed);
    let mut csv = CsvWriter::new(&["orbit", "t_star"]);
    let mut found = 0usize;
    for k in 0..n_orbits {
        // Random interior phase point.
        let p = loop {
            let cand = match model.chart {
                Chart::Disk { radius } => Vec2::new(
                    radius * (2.0 * rng.gen::<f64>() - 1.0),
                    radius * (2.0 * rng.gen::<f64>() - 1.0),
                ),
                Chart::Strip { v_min, v_max, period } => Vec2::new(
                    period * rng.gen::<f64>(),
                    v_min + (v_max - v_min) * rng.gen::<f64>(),
                ),
            };
            if model.chart.contains(cand, -0.02 * model.diameter()) {
                break cand;
            }
        };
        let a = rng.gen::<f64>() * std::f64::consts::TAU;
        let y = PhasePoint::new(p, model.unit(p, Vec2::new(a.cos(), a.sin())));
        match flow::conjugate_scan(&model, y, horizon)? {
            Some(t) => {
                found += 1;
                csv.row(&[k.to_string(), fmt_float(t)]);
            }
            None => csv.row(&[k.to_string(), String::new()]),
        }
    }
    let path = ctx.path("conjugate_scan.csv");
    csv.finish(&path)?;
    ctx.manifest.record_output(&path);
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert(
        "values",
        json!({"orbits": n_orbits, "with_conjugate_point": found, "horizon": horizon}),
    );
    Ok(())
}

fn cmd_cone(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let model = build_model(&scn.section("model"))?;
    convexity_gate(&model, ov)?;
    let p = Vec2::new(params.f64_or("u", 0.0)?, params.f64_or("v", 0.0)?);
    let dir = Vec2::new(params.f64_or("wu", 1.0)?, params.f64_or("wv", 0.0)?);
    let y = PhasePoint::new(p, model.unit(p, dir));
    let tau = params.f64_or("tau", 2.0)?;
    let alpha = params.f64_or("alpha", 0.5)?;
    let rho = params.f64_or("rho", 0.5)?;
    let rep = flow::cone_expansion_check(&model, y, tau, alpha, rho)?;
    let lambda = flow::lyapunov_estimate(&model, y, params.f64_or("lyapunov_t", 30.0)?)?;
    let summary = json!({
        "contained": rep.contained,
        "min_factor": rep.min_factor,
        "splitting_ok": rep.splitting_ok,
        "fan_size": rep.fan_size,
        "lyapunov_estimate": lambda,
        "tau": tau, "alpha": alpha, "rho": rho,
    });
    write_json(ctx, "cone_check.json", &summary)?;
    ctx.manifest.insert("model", json!(model.name));
    ctx.manifest.insert("values", summary);
    Ok(())
}

fn cmd_theta_curve(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let pair = build_pair(scn, ov)?;
    let n_theta = params.usize_or("theta_points", 11)?.max(2);
    let samples = params.usize_or("samples", 10_000)?;
    let mut csv = CsvWriter::new(&["theta", "Theta", "stderr", "invalid_mass"]);
    let mut worst = 0.0_f64;
    for k in 0..n_theta {
        let theta = std::f64::consts::PI * k as f64 / (n_theta - 1) as f64;
        let rep = rigidity::average_angle(
            &pair,
            theta,
            &SamplingSpec::new(samples, ctx.seed.wrapping_add(k as u64)),
        )?;
        worst = worst.max((rep.value - theta).abs());
        csv.row(&[
            fmt_float(theta),
            fmt_float(rep.value),
            fmt_float(rep.stderr),
            fmt_float(rep.invalid_mass),
        ]);
    }
    let path = ctx.path("theta_curve.csv");
    csv.finish(&path)?;
    ctx.manifest.record_output(&path);
    ctx.manifest.insert("pair", json!([pair.g1.name, pair.g2.name]));
    ctx.manifest.insert(
        "values",
        json!({"theta_points": n_theta, "samples": samples, "max_identity_deviation": worst}),
    );
    Ok(())
}

fn cmd_jensen(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let pair = build_pair(scn, ov)?;
    let theta = params.f64_or("theta", std::f64::consts::FRAC_PI_2)?;
    let f_name = params.get_str("f").unwrap_or_else(|| "square".into());
    let f = ConvexCatalog::parse(&f_name).ok_or_else(|| {
        ConfigError::new(format!("unknown convex function `{f_name}` (square | exp | neg_sin | linear)"))
    })?;
    let samples = params.usize_or("samples", 4000)?;
    let rep = rigidity::jensen_gap(&pair, theta, f, &SamplingSpec::new(samples, ctx.seed))?;
    let summary = json_value(&rep);
    write_json(ctx, "jensen.json", &summary)?;
    ctx.manifest.insert("pair", json!([pair.g1.name, pair.g2.name]));
    ctx.manifest.insert("values", summary);
    Ok(())
}

fn cmd_psi_map(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let pair = build_pair(scn, ov)?;
    let n = params.usize_or("grid_n", 5)?.max(1);
    let probes = params.usize_or("probes", 3)?;
    let mut points = Vec::new();
    match pair.g1.chart {
        Chart::Disk { radius } => {
            for i in 0..n {
                for j in 0..n {
                    let r = radius * 0.8 * (i as f64 + 0.5) / n as f64;
                    let a = std::f64::consts::TAU * j as f64 / n as f64;
                    points.push(Vec2::new(r * a.cos(), r * a.sin()));
                }
            }
        }
        Chart::Strip { v_min, v_max, period } => {
            for i in 0..n {
                for j in 0..n {
                    let u = period * (i as f64 + 0.5) / n as f64;
                    let v = v_min + (v_max - v_min) * (0.1 + 0.8 * (j as f64 + 0.5) / n as f64);
                    points.push(Vec2::new(u, v));
                }
            }
        }
    }
    let mut csv = CsvWriter::new(&["x_u", "x_v", "psi_u", "psi_v", "spread"]);
    let mut max_spread = 0.0_f64;
    for x in points {
        match rigidity::psi_reconstruct(&pair, x, probes) {
            Ok(est) => {
                max_spread = max_spread.max(est.spread);
                csv.row(&[
                    fmt_float(x.u),
                    fmt_float(x.v),
                    fmt_float(est.point.u),
                    fmt_float(est.point.v),
                    fmt_float(est.spread),
                ]);
            }
            Err(_) => {
                csv.row(&[fmt_float(x.u), fmt_float(x.v), String::new(), String::new(), String::new()]);
            }
        }
    }
    let path = ctx.path("psi_map.csv");
    csv.finish(&path)?;
    ctx.manifest.record_output(&path);
    ctx.manifest.insert("pair", json!([pair.g1.name, pair.g2.name]));
    ctx.manifest.insert("values", json!({"max_spread": max_spread, "probes": probes}));
    Ok(())
}

fn cmd_certificate(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    use rand::Rng;
    let pair = build_pair(scn, ov)?;
    let n_pairs = params.usize_or("n_pairs", 8)?;
    let n_boundary = params.usize_or("n_boundary", 8)?;
    let mut rng = lenslab_core::sampling::seeded_rng(ctx.seed);
    let mut pt = || loop {
        let cand = match pair.g1.chart {
            Chart::Disk { radius } => Vec2::new(
                radius * (2.0 * rng.gen::<f64>() - 1.0),
                radius * (2.0 * rng.gen::<f64>() - 1.0),
            ),
            Chart::Strip { v_min, v_max, period } => Vec2::new(
                period * rng.gen::<f64>(),
                v_min + (v_max - v_min) * rng.gen::<f64>(),
            ),
        };
        if pair.g1.chart.contains(cand, -0.05 * pair.g1.diameter()) {
            return cand;
        }
    };
    let sample_pairs: Vec<(Vec2, Vec2)> = (0..n_pairs).map(|_| (pt(), pt())).collect();
    let rep = rigidity::isometry_certificate(&pair, &sample_pairs, n_boundary)?;
    let summary = json_value(&rep);
    write_json(ctx, "certificate.json", &summary)?;
    ctx.manifest.insert("pair", json!([pair.g1.name, pair.g2.name]));
    ctx.manifest.insert("values", summary);
    Ok(())
}

fn cmd_croke(
    scn: &Scenario,
    params: &Section,
    ov: &Overrides,
    ctx: &mut RunContext,
) -> Result<(), RunError> {
    let pair = build_pair(scn, ov)?;
    let grid = ctx.grid_of(params, None)?;
    let rep = rigidity::croke_conformal_check(&pair, &grid)?;
    let summary = json_value(&rep);
    write_json(ctx, "croke_chain.json", &summary)?;
    ctx.manifest.insert("pair", json!([pair.g1.name, pair.g2.name]));
    ctx.manifest.insert("values", summary);
    Ok(())
}

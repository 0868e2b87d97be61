//! Two-point geodesic problems: lens tables, marked boundary distance by
//! homotopy class, interior distances via Birkhoff curve shortening, and the
//! lens-data/distance consistency check.
//!
//! Shooting is the primary solver; exit parameters are monotone in the launch
//! angle on the universal cover, so bracketing plus Brent refinement is
//! reliable away from the trapped wedge. Shortening is the fallback and the
//! independent cross-check.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{
    boundary_phase, exit_angle, escape_opts, EscapeStatus, ExitData, FlowOptions, PhasePoint,
};
use crate::geom::Vec2;
use crate::metric::{lift_after, BoundaryPoint, Chart, SurfaceModel};
use crate::quad::pairwise_sum;
use crate::roots::brent;

/// Winding count of the deck translation; disks force 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HomotopyClass(pub i64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum SolverKind {
    Shooting,
    Shortening,
}

/// A solved geodesic with a dense sample of its trajectory.
#[derive(Clone, Debug)]
pub struct GeodesicRecord {
    pub start: Vec2,
    pub end: Vec2,
    pub start_boundary: Option<BoundaryPoint>,
    pub end_boundary: Option<BoundaryPoint>,
    pub class: HomotopyClass,
    pub length: f64,
    /// (arclength, phase point) samples, ordered, endpoints included.
    pub nodes: Vec<(f64, PhasePoint)>,
    pub solver: SolverKind,
    /// Reported sup-norm estimate of the geodesic ODE residual on the samples.
    pub ode_residual: f64,
}

impl GeodesicRecord {
    pub fn positions(&self) -> Vec<Vec2> {
        self.nodes.iter().map(|(_, y)| y.p).collect()
    }

    /// g-length of the sample polyline (Simpson on each chart segment);
    /// agrees with `length` to quadrature tolerance.
    pub fn polyline_length(&self, model: &SurfaceModel) -> f64 {
        let pts: Vec<Vec2> = self.positions();
        polyline_g_length(model, &pts)
    }
}

/// g-length of a chart polyline, Simpson per segment.
pub fn polyline_g_length(model: &SurfaceModel, pts: &[Vec2]) -> f64 {
    let mut terms = Vec::with_capacity(pts.len().saturating_sub(1));
    for pair in pts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let d = b - a;
        let na = model.metric.at(a).quad(d).sqrt();
        let nm = model.metric.at(a + d.scale(0.5)).quad(d).sqrt();
        let nb = model.metric.at(b).quad(d).sqrt();
        terms.push((na + 4.0 * nm + nb) / 6.0);
    }
    pairwise_sum(&terms)
}

/// Piecewise-linear curve joined by short geodesic segments.
#[derive(Clone, Debug)]
pub struct BrokenGeodesic {
    pub nodes: Vec<Vec2>,
}

impl BrokenGeodesic {
    pub fn from_endpoints(a: Vec2, b: Vec2, k: usize) -> Self {
        let k = k.max(2);
        let nodes = (0..=k)
            .map(|i| a + (b - a).scale(i as f64 / k as f64))
            .collect();
        BrokenGeodesic { nodes }
    }

    /// Discrete energy k * sum of squared segment lengths.
    pub fn energy(&self, model: &SurfaceModel) -> f64 {
        let k = self.nodes.len() - 1;
        let mut e = 0.0;
        for pair in self.nodes.windows(2) {
            let d = pair[1] - pair[0];
            let mid = pair[0] + d.scale(0.5);
            e += model.metric.at(mid).quad(d);
        }
        e * k as f64
    }
}

/// Solver controls shared by the lens operations.
#[derive(Clone, Copy, Debug)]
pub struct LensOptions {
    pub t_max: f64,
    pub flow: FlowOptions,
    /// Bracketing grid resolution over (0, pi).
    pub scan_points: usize,
    /// Stop once the exit parameter matches the target this closely.
    pub exit_tol: f64,
    /// Node spacing of returned records.
    pub dense_dt: f64,
    /// Initial launch-angle guess for warm-started solves.
    pub guess: Option<f64>,
}

impl LensOptions {
    pub fn for_model(model: &SurfaceModel) -> Self {
        let d = model.diameter();
        LensOptions {
            t_max: model.default_horizon(),
            flow: FlowOptions::for_model(model),
            scan_points: 512,
            exit_tol: 1e-12,
            dense_dt: 0.04 * d,
            guess: None,
        }
    }

    pub fn with_guess(mut self, theta: f64) -> Self {
        self.guess = Some(theta);
        self
    }
}

/// Exit parameter lifted to the cover, relative to the entry point: disk exits
/// unwrap into (anchor, anchor + 2 pi]; strip exits are already lifted.
fn lifted_exit_param(model: &SurfaceModel, anchor: &BoundaryPoint, exit: &ExitData) -> f64 {
    match model.chart {
        Chart::Disk { .. } => lift_after(anchor.s, exit.boundary.s, std::f64::consts::TAU),
        Chart::Strip { .. } => exit.boundary.s,
    }
}

/// The lifted exit parameter a shooting solve must reach.
#[derive(Clone, Copy, Debug)]
struct ShootTarget {
    component: usize,
    param: f64,
}

fn shoot_target(
    model: &SurfaceModel,
    from: BoundaryPoint,
    to: BoundaryPoint,
    class: HomotopyClass,
) -> Result<ShootTarget> {
    match model.chart {
        Chart::Disk { .. } => {
            if class.0 != 0 {
                return Err(Error::DiskClass);
            }
            let delta = (to.s - from.s).rem_euclid(std::f64::consts::TAU);
            if delta == 0.0 {
                return Err(Error::InvalidParameter(
                    "coincident boundary endpoints in the trivial class".into(),
                ));
            }
            Ok(ShootTarget { component: 0, param: from.s + delta })
        }
        Chart::Strip { period, .. } => {
            // Canonical class-0 lift: chart-u within half a period of the entry.
            let u_from = if from.component == 0 { from.s } else { -from.s };
            let u_to = if to.component == 0 { to.s } else { -to.s };
            let mut du = (u_to - u_from).rem_euclid(period);
            if du >= period / 2.0 {
                du -= period;
            }
            let u_lift = u_from + du;
            let s0 = if to.component == 0 { u_lift } else { -u_lift };
            let lifted = model.deck_boundary(BoundaryPoint::new(to.component, s0), class.0);
            if to.component == from.component && (lifted.s - from.s).abs() < 1e-14 {
                return Err(Error::InvalidParameter(
                    "coincident boundary endpoints in the trivial class".into(),
                ));
            }
            Ok(ShootTarget { component: to.component, param: lifted.s })
        }
    }
}

enum ShotOutcome {
    Exit { component: usize, param: f64, exit: ExitData },
    Trapped,
    Tangential,
}

fn shoot_once(
    model: &SurfaceModel,
    from: BoundaryPoint,
    theta: f64,
    opts: &LensOptions,
) -> Result<ShotOutcome> {
    let y = boundary_phase(model, from, theta);
    let res = escape_opts(model, y, opts.t_max, &opts.flow)?;
    Ok(match res.status {
        EscapeStatus::Trapped { .. } => ShotOutcome::Trapped,
        EscapeStatus::Exited(e) if e.tangential && e.length == 0.0 => ShotOutcome::Tangential,
        EscapeStatus::Exited(e) => ShotOutcome::Exit {
            component: e.boundary.component,
            param: lifted_exit_param(model, &from, &e),
            exit: e,
        },
    })
}

/// Shooting solve: find the launch angle whose exit parameter matches the
/// target, via bracketing on the scan grid (or around the caller's guess)
/// plus Brent refinement.
fn solve_shooting(
    model: &SurfaceModel,
    from: BoundaryPoint,
    target: ShootTarget,
    opts: &LensOptions,
) -> Result<(f64, ExitData)> {
    let miss = |out: &ShotOutcome| -> Option<f64> {
        match out {
            ShotOutcome::Exit { component, param, .. } if *component == target.component => {
                Some(param - target.param)
            }
            _ => None,
        }
    };

    let mut bracket: Option<(f64, f64, f64, f64)> = None;

    if let Some(g) = opts.guess {
        let mut delta = 0.02;
        while delta < 0.8 {
            let a = (g - delta).max(1e-7);
            let b = (g + delta).min(std::f64::consts::PI - 1e-7);
            let fa = miss(&shoot_once(model, from, a, opts)?);
            let fb = miss(&shoot_once(model, from, b, opts)?);
            if let Some(br) = clean_bracket(a, b, fa, fb) {
                bracket = Some(br);
                break;
            }
            delta *= 2.0;
        }
    }

    if bracket.is_none() {
        bracket = scan_bracket(model, from, opts, &miss)?;
    }

    let Some((a, b, fa, fb)) = bracket else {
        return Err(Error::NoBracket {
            target: target.param,
            wedge_lo: 0.0,
            wedge_hi: std::f64::consts::PI,
        });
    };

    let f = |theta: f64| -> f64 {
        match shoot_once(model, from, theta, opts) {
            Ok(out) => miss(&out).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        }
    };
    let (theta, residual) = brent(f, a, b, fa, fb, 1e-14);
    if !residual.is_finite() || residual.abs() > opts.exit_tol.max(1e-9 * model.diameter()) {
        return Err(Error::SolverDiverged(format!(
            "shooting residual {residual:.3e} at theta = {theta:.12}"
        )));
    }
    // Final dense run for the record.
    let dense = LensOptions { flow: opts.flow.dense(opts.dense_dt), ..*opts };
    match shoot_once(model, from, theta, &dense)? {
        ShotOutcome::Exit { exit, .. } => Ok((theta, exit)),
        _ => Err(Error::SolverDiverged("refined angle no longer exits".into())),
    }
}

type Bracket = (f64, f64, f64, f64);

/// Exit parameters are monotone increasing in the launch angle within each
/// stretch exiting through the target's boundary stretch, so valid brackets
/// are increasing pairs f(a) <= 0 <= f(b); decreasing sign changes mean the
/// exit point wrapped through a trapped wedge, and the bracket would contain
/// angles that never reach the target component.
fn clean_bracket(a: f64, b: f64, fa: Option<f64>, fb: Option<f64>) -> Option<Bracket> {
    match (fa, fb) {
        (Some(fa), Some(fb)) if fa <= 0.0 && fb >= 0.0 => Some((a, b, fa, fb)),
        _ => None,
    }
}

fn scan_bracket(
    model: &SurfaceModel,
    from: BoundaryPoint,
    opts: &LensOptions,
    miss: &(dyn Fn(&ShotOutcome) -> Option<f64> + Sync),
) -> Result<Option<Bracket>> {
    let n = opts.scan_points.max(8);
    let theta_at = |i: usize| std::f64::consts::PI * (i as f64 + 0.5) / (n as f64);
    let shots: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| shoot_once(model, from, theta_at(i), opts).ok().and_then(|o| miss(&o)))
        .collect();

    for i in 0..n - 1 {
        if let Some(b) = clean_bracket(theta_at(i), theta_at(i + 1), shots[i], shots[i + 1]) {
            return Ok(Some(b));
        }
    }

    // Hunt near the stretch edges. The exit parameter runs to +-infinity at a
    // trapped wedge, but only logarithmically fast, so bisecting into the
    // edge of a visible stretch climbs to any lifted target in a few dozen
    // steps.
    let eval = |theta: f64| shoot_once(model, from, theta, opts).ok().and_then(|o| miss(&o));
    for i in 0..n - 1 {
        let (ta, tb) = (theta_at(i), theta_at(i + 1));
        match (shots[i], shots[i + 1]) {
            (Some(fa), None) => {
                if let Some(br) = edge_walk(&eval, ta, fa, tb) {
                    return Ok(Some(br));
                }
            }
            (None, Some(fb)) => {
                if let Some(br) = edge_walk(&eval, tb, fb, ta) {
                    return Ok(Some(br));
                }
            }
            _ => {}
        }
    }

    // Stretches invisible at scan resolution: probe decreasing pairs (a wrap
    // through a wedge) and blank windows a few levels deep, then edge-walk
    // whatever surfaces.
    let mut stack: Vec<(f64, Option<f64>, f64, Option<f64>, u32)> = Vec::new();
    for i in 0..n - 1 {
        let interesting = match (shots[i], shots[i + 1]) {
            (Some(fa), Some(fb)) => fb < fa,
            (None, None) => true,
            _ => false,
        };
        if interesting {
            stack.push((theta_at(i), shots[i], theta_at(i + 1), shots[i + 1], 0));
        }
    }
    let mut budget = 256usize;
    while let Some((lo, flo, hi, fhi, depth)) = stack.pop() {
        if budget == 0 || depth > 8 || hi - lo < 1e-13 {
            continue;
        }
        budget -= 1;
        let mid = 0.5 * (lo + hi);
        let fmid = eval(mid);
        for (a, fa, b, fb) in [(lo, flo, mid, fmid), (mid, fmid, hi, fhi)] {
            if let Some(br) = clean_bracket(a, b, fa, fb) {
                return Ok(Some(br));
            }
            match (fa, fb) {
                (Some(x), None) => {
                    if let Some(br) = edge_walk(&eval, a, x, b) {
                        return Ok(Some(br));
                    }
                }
                (None, Some(y)) => {
                    if let Some(br) = edge_walk(&eval, b, y, a) {
                        return Ok(Some(br));
                    }
                }
                _ => stack.push((a, fa, b, fb, depth + 1)),
            }
        }
    }
    Ok(None)
}

/// Walk from a resolved fan angle into an adjacent unresolved region, keeping
/// one foot on the stretch; returns a monotone bracket when the exit
/// parameter sweeps past the target on the way to the wedge.
fn edge_walk(
    eval: &dyn Fn(f64) -> Option<f64>,
    theta_some: f64,
    f_some: f64,
    theta_none: f64,
) -> Option<Bracket> {
    let (mut ts, mut fs) = (theta_some, f_some);
    let mut tn = theta_none;
    for _ in 0..90 {
        if (ts - tn).abs() < 1e-15 {
            return None;
        }
        let mid = 0.5 * (ts + tn);
        match eval(mid) {
            Some(fm) => {
                let (a, fa, b, fb) =
                    if mid < ts { (mid, fm, ts, fs) } else { (ts, fs, mid, fm) };
                if let Some(br) = clean_bracket(a, b, Some(fa), Some(fb)) {
                    return Some(br);
                }
                ts = mid;
                fs = fm;
            }
            None => tn = mid,
        }
    }
    None
}

fn record_from_exit(
    model: &SurfaceModel,
    from: BoundaryPoint,
    class: HomotopyClass,
    theta: f64,
    exit: ExitData,
    opts: &LensOptions,
) -> Result<GeodesicRecord> {
    // Re-run densely to collect nodes.
    let y = boundary_phase(model, from, theta);
    let res = escape_opts(model, y, opts.t_max, &opts.flow.dense(opts.dense_dt))?;
    let nodes = res
        .trajectory
        .map(|t| t.nodes)
        .unwrap_or_else(|| vec![(0.0, y), (exit.length, exit.exit)]);
    let residual = ode_residual(model, &nodes);
    Ok(GeodesicRecord {
        start: y.p,
        end: exit.exit.p,
        start_boundary: Some(from),
        end_boundary: Some(exit.boundary),
        class,
        length: exit.length,
        nodes,
        solver: SolverKind::Shooting,
        ode_residual: residual,
    })
}

/// Max deviation of the sampled velocity derivative from the Christoffel
/// acceleration, a first-order sanity figure on the record samples.
fn ode_residual(model: &SurfaceModel, nodes: &[(f64, PhasePoint)]) -> f64 {
    let mut worst: f64 = 0.0;
    let stride = (nodes.len() / 16).max(1);
    for i in (stride..nodes.len().saturating_sub(stride)).step_by(stride) {
        let (t0, y0) = nodes[i - stride];
        let (t1, y1) = nodes[i + stride];
        let (_, ym) = nodes[i];
        let dt = t1 - t0;
        if dt <= 0.0 {
            continue;
        }
        let dw = (y1.w - y0.w).scale(1.0 / dt);
        let acc = model.christoffel_raw(ym.p).accel(ym.w);
        worst = worst.max((dw - acc).norm() * dt);
    }
    worst
}

/// Marked boundary distance: the unique geodesic joining two boundary points
/// in the given class, solved by shooting with a curve-shortening fallback.
pub fn boundary_distance(
    model: &SurfaceModel,
    from: BoundaryPoint,
    to: BoundaryPoint,
    class: HomotopyClass,
) -> Result<GeodesicRecord> {
    boundary_distance_opts(model, from, to, class, &LensOptions::for_model(model))
}

pub fn boundary_distance_opts(
    model: &SurfaceModel,
    from: BoundaryPoint,
    to: BoundaryPoint,
    class: HomotopyClass,
    opts: &LensOptions,
) -> Result<GeodesicRecord> {
    let target = shoot_target(model, from, to, class)?;
    match solve_shooting(model, from, target, opts) {
        Ok((theta, exit)) => record_from_exit(model, from, class, theta, exit, opts),
        Err(Error::NoBracket { .. }) | Err(Error::SolverDiverged(_)) => {
            let a = model.chart.boundary_point(from.component, from.s);
            let b = lifted_target_point(model, target);
            let k = segment_count(model, a, b);
            let init = BrokenGeodesic::from_endpoints(a, b, k);
            let mut rec = curve_shorten(model, &init, class)?;
            rec.start_boundary = Some(from);
            rec.end_boundary = Some(BoundaryPoint::new(target.component, target.param));
            Ok(rec)
        }
        Err(e) => Err(e),
    }
}

fn lifted_target_point(model: &SurfaceModel, target: ShootTarget) -> Vec2 {
    model.chart.boundary_point(target.component, target.param)
}

fn segment_count(model: &SurfaceModel, a: Vec2, b: Vec2) -> usize {
    let rough = polyline_g_length(model, &[a, b]);
    ((rough / (0.1 * model.diameter())).ceil() as usize).clamp(4, 400)
}

/// Distance on the cover between chart points (class lifts the second point
/// by the deck translation).
pub fn interior_distance(
    model: &SurfaceModel,
    x: Vec2,
    x_other: Vec2,
    class: HomotopyClass,
) -> Result<GeodesicRecord> {
    if matches!(model.chart, Chart::Disk { .. }) && class.0 != 0 {
        return Err(Error::DiskClass);
    }
    let target = model.deck(x_other, class.0);
    if (target - x).norm() < 1e-14 && class.0 == 0 {
        return Err(Error::InvalidParameter("coincident endpoints in the trivial class".into()));
    }
    let init = BrokenGeodesic::from_endpoints(x, target, segment_count(model, x, target));
    curve_shorten(model, &init, class)
}

/// One Birkhoff sweep: replace each selected node by the midpoint of the
/// short geodesic joining its neighbors.
fn sweep(
    model: &SurfaceModel,
    nodes: &mut [Vec2],
    parity: usize,
    precise: bool,
) -> Result<()> {
    let n = nodes.len();
    for i in 1..n - 1 {
        if i % 2 != parity {
            continue;
        }
        let (a, b) = (nodes[i - 1], nodes[i + 1]);
        let mid = if precise {
            local_geodesic(model, a, b)?.midpoint
        } else {
            cheap_midpoint(model, a, b)
        };
        if !model.chart.contains(mid, 1e-12 * model.diameter()) {
            return Err(Error::StalledAtBoundary);
        }
        nodes[i] = mid;
    }
    Ok(())
}

/// Third-order geodesic midpoint: chart midpoint plus the leading Christoffel
/// correction.
fn cheap_midpoint(model: &SurfaceModel, a: Vec2, b: Vec2) -> Vec2 {
    let d = b - a;
    let mid = a + d.scale(0.5);
    let corr = model.christoffel_raw(mid).accel(d);
    mid - corr.scale(0.125)
}

struct LocalGeodesic {
    midpoint: Vec2,
    length: f64,
    /// Initial chart velocity solving the two-point problem over unit time.
    v0: Vec2,
    /// Final chart velocity at the far endpoint.
    v1: Vec2,
}

/// Short two-point geodesic by Newton shooting on the initial velocity over a
/// unit time interval. Intended for segments well below the injectivity
/// surrogate, where the problem is strongly contracting.
fn local_geodesic(model: &SurfaceModel, a: Vec2, b: Vec2) -> Result<LocalGeodesic> {
    use crate::flow::dopri::{integrate_span, Dopri5};
    let params = Dopri5::new(1e-11, 1e-13, 0.25, 1.0);
    let rhs = |_: f64, y: &[f64; 4]| {
        let p = Vec2::new(y[0], y[1]);
        let w = Vec2::new(y[2], y[3]);
        let acc = model.christoffel_raw(p).accel(w);
        [y[2], y[3], acc.u, acc.v]
    };
    let endpoint = |v: Vec2| -> Result<[f64; 4]> {
        integrate_span(params, rhs, 0.0, [a.u, a.v, v.u, v.v], 1.0)
            .map_err(|e| Error::SolverDiverged(e.to_string()))
    };
    let mut v = b - a;
    let mut state = endpoint(v)?;
    for _ in 0..12 {
        let f = Vec2::new(state[0] - b.u, state[1] - b.v);
        if f.norm() < 1e-12 * model.diameter() {
            break;
        }
        let h = 1e-7 * v.norm().max(1e-12);
        let su = endpoint(v + Vec2::new(h, 0.0))?;
        let sv = endpoint(v + Vec2::new(0.0, h))?;
        let j = crate::geom::Mat2::new(
            (su[0] - state[0]) / h,
            (sv[0] - state[0]) / h,
            (su[1] - state[1]) / h,
            (sv[1] - state[1]) / h,
        );
        let det = j.det();
        if det.abs() < 1e-14 {
            return Err(Error::SolverDiverged("singular local shooting Jacobian".into()));
        }
        let dv = Vec2::new((j.d * f.u - j.b * f.v) / det, (-j.c * f.u + j.a * f.v) / det);
        v = v - dv;
        state = endpoint(v)?;
    }
    let f = Vec2::new(state[0] - b.u, state[1] - b.v);
    if f.norm() > 1e-9 * model.diameter() {
        return Err(Error::SolverDiverged("local two-point solve did not converge".into()));
    }
    let mid_state = integrate_span(params, rhs, 0.0, [a.u, a.v, v.u, v.v], 0.5)
        .map_err(|e| Error::SolverDiverged(e.to_string()))?;
    // Geodesics have constant speed, so the length is the initial g-norm.
    let length = model.metric.at(a).quad(v).sqrt();
    Ok(LocalGeodesic {
        midpoint: Vec2::new(mid_state[0], mid_state[1]),
        length,
        v0: v,
        v1: Vec2::new(state[2], state[3]),
    })
}

/// Birkhoff curve shortening on a broken geodesic with fixed endpoints:
/// alternating midpoint sweeps with monotone energy decrease, stopped at a
/// relative decrease below 1e-12, then polished with exact local solves.
pub fn curve_shorten(
    model: &SurfaceModel,
    initial: &BrokenGeodesic,
    class: HomotopyClass,
) -> Result<GeodesicRecord> {
    const ENERGY_TOL: f64 = 1e-12;
    if initial.nodes.len() < 3 {
        return curve_shorten(
            model,
            &BrokenGeodesic::from_endpoints(
                *initial.nodes.first().ok_or_else(|| {
                    Error::InvalidParameter("empty initial polyline".into())
                })?,
                *initial.nodes.last().unwrap(),
                4,
            ),
            class,
        );
    }
    for p in &initial.nodes {
        if !model.chart.contains(*p, 1e-9 * model.diameter()) {
            return Err(Error::Domain(p.u, p.v));
        }
    }

    // Subdivide until each segment sits under the injectivity surrogate.
    let cap = 0.1 * model.diameter();
    let mut nodes = initial.nodes.clone();
    loop {
        let mut refined = Vec::with_capacity(nodes.len() * 2);
        let mut split = false;
        for pair in nodes.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            refined.push(a);
            if polyline_g_length(model, &[a, b]) > cap {
                refined.push(a + (b - a).scale(0.5));
                split = true;
            }
        }
        refined.push(*nodes.last().unwrap());
        nodes = refined;
        if !split {
            break;
        }
    }

    let poly = |nodes: &[Vec2]| BrokenGeodesic { nodes: nodes.to_vec() };
    let mut energy = poly(&nodes).energy(model);
    let max_sweeps = 40_000;
    for it in 0..max_sweeps {
        sweep(model, &mut nodes, 1, false)?;
        sweep(model, &mut nodes, 0, false)?;
        let next = poly(&nodes).energy(model);
        // The approximate midpoint has a fixed accuracy floor; treat a tick
        // up as converged and let the exact polish finish the job.
        let done = next > energy || energy - next < ENERGY_TOL * energy.abs().max(1e-300);
        energy = next.min(energy);
        let _ = it;
        if done {
            break;
        }
    }

    // Polish with exact local midpoints until the energy settles again.
    let mut energy = precise_energy(model, &nodes)?;
    for _ in 0..80 {
        sweep(model, &mut nodes, 1, true)?;
        sweep(model, &mut nodes, 0, true)?;
        let next = precise_energy(model, &nodes)?;
        if next > energy * (1.0 + 1e-9) {
            return Err(Error::SolverDiverged("energy increased during exact sweeps".into()));
        }
        let done = (energy - next).abs() < ENERGY_TOL * energy.abs().max(1e-300);
        energy = next;
        if done {
            break;
        }
    }

    assemble_shortened_record(model, &nodes, class)
}

fn precise_energy(model: &SurfaceModel, nodes: &[Vec2]) -> Result<f64> {
    let k = nodes.len() - 1;
    let mut e = 0.0;
    for pair in nodes.windows(2) {
        let l = local_geodesic(model, pair[0], pair[1])?.length;
        e += l * l;
    }
    Ok(e * k as f64)
}

fn assemble_shortened_record(
    model: &SurfaceModel,
    nodes: &[Vec2],
    class: HomotopyClass,
) -> Result<GeodesicRecord> {
    let mut lengths = Vec::with_capacity(nodes.len() - 1);
    let mut phase_nodes: Vec<(f64, PhasePoint)> = Vec::new();
    let mut acc = 0.0;
    for (i, pair) in nodes.windows(2).enumerate() {
        let seg = local_geodesic(model, pair[0], pair[1])?;
        let w0 = model.unit(pair[0], seg.v0);
        phase_nodes.push((acc, PhasePoint::new(pair[0], w0)));
        // Midpoint sample keeps the polyline tight between solver nodes.
        let wm = model.unit(seg.midpoint, seg.v0 + (seg.v1 - seg.v0).scale(0.5));
        phase_nodes.push((acc + 0.5 * seg.length, PhasePoint::new(seg.midpoint, wm)));
        acc += seg.length;
        lengths.push(seg.length);
        if i + 2 == nodes.len() {
            let w1 = model.unit(pair[1], seg.v1);
            phase_nodes.push((acc, PhasePoint::new(pair[1], w1)));
        }
    }
    let length = pairwise_sum(&lengths);
    let residual = ode_residual(model, &phase_nodes);
    Ok(GeodesicRecord {
        start: *nodes.first().unwrap(),
        end: *nodes.last().unwrap(),
        start_boundary: None,
        end_boundary: None,
        class,
        length,
        nodes: phase_nodes,
        solver: SolverKind::Shortening,
        ode_residual: residual,
    })
}

/// Lens table row flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum RowFlag {
    Ok,
    Tangential,
    Trapped,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LensRow {
    pub component: usize,
    pub s: f64,
    pub theta: f64,
    pub ell: Option<f64>,
    pub component_exit: Option<usize>,
    pub s_exit: Option<f64>,
    pub theta_exit: Option<f64>,
    pub flag: RowFlag,
}

#[derive(Clone, Debug, Default)]
pub struct LensTable {
    pub rows: Vec<LensRow>,
}

/// Lens data on a boundary fan grid: rows (s, theta, ell, exit data), with
/// tangential and trapped rows flagged rather than erroring.
pub fn shoot_table(
    model: &SurfaceModel,
    s_values: &[f64],
    theta_values: &[f64],
    t_max: f64,
) -> LensTable {
    let opts = FlowOptions::for_model(model);
    let mut jobs = Vec::new();
    for comp in 0..model.chart.num_boundary_components() {
        for &s in s_values {
            for &theta in theta_values {
                jobs.push((comp, s, theta));
            }
        }
    }
    let rows: Vec<LensRow> = jobs
        .par_iter()
        .map(|&(comp, s, theta)| {
            let bp = BoundaryPoint::new(comp, s);
            let y = boundary_phase(model, bp, theta);
            match escape_opts(model, y, t_max, &opts) {
                Ok(res) => match res.status {
                    EscapeStatus::Exited(e) if !e.tangential => LensRow {
                        component: comp,
                        s,
                        theta,
                        ell: Some(e.length),
                        component_exit: Some(e.boundary.component),
                        s_exit: Some(e.boundary.s),
                        theta_exit: Some(exit_angle(model, &e)),
                        flag: RowFlag::Ok,
                    },
                    EscapeStatus::Exited(e) => LensRow {
                        component: comp,
                        s,
                        theta,
                        ell: Some(e.length),
                        component_exit: Some(e.boundary.component),
                        s_exit: Some(e.boundary.s),
                        theta_exit: None,
                        flag: RowFlag::Tangential,
                    },
                    EscapeStatus::Trapped { .. } => LensRow {
                        component: comp,
                        s,
                        theta,
                        ell: None,
                        component_exit: None,
                        s_exit: None,
                        theta_exit: None,
                        flag: RowFlag::Trapped,
                    },
                },
                Err(_) => LensRow {
                    component: comp,
                    s,
                    theta,
                    ell: None,
                    component_exit: None,
                    s_exit: None,
                    theta_exit: None,
                    flag: RowFlag::Trapped,
                },
            }
        })
        .collect();
    LensTable { rows }
}

/// Consistency of marked distances and lens data between two metrics sharing
/// a chart and boundary: reports the max distance discrepancy and the max
/// scattering mismatch over seeded samples. The two vanish together.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LensDistanceReport {
    pub max_distance_defect: f64,
    pub max_exit_param_defect: f64,
    pub max_exit_angle_defect: f64,
    pub samples: usize,
}

pub fn lens_vs_distance_check(
    g1: &SurfaceModel,
    g2: &SurfaceModel,
    n_samples: usize,
    seed: u64,
) -> Result<LensDistanceReport> {
    if g1.chart != g2.chart {
        return Err(Error::InvalidParameter("models must share a chart".into()));
    }
    // Boundary jet gate: the metrics must agree pointwise on the boundary.
    let period = g1.chart.boundary_param_period();
    let mut worst = 0.0_f64;
    for comp in 0..g1.chart.num_boundary_components() {
        for i in 0..64 {
            let s = period * i as f64 / 64.0;
            let p = g1.chart.boundary_point(comp, s);
            let d = g1.metric.at(p).sub(g2.metric.at(p)).max_abs();
            worst = worst.max(d);
        }
    }
    if worst > 1e-8 {
        return Err(Error::BoundaryMismatch(worst));
    }

    use rand::Rng;
    let mut rng = crate::sampling::seeded_rng(seed);
    let ncomp = g1.chart.num_boundary_components();
    let mut dist_defect = 0.0_f64;
    let mut param_defect = 0.0_f64;
    let mut angle_defect = 0.0_f64;
    let classes: &[i64] =
        if matches!(g1.chart, Chart::Disk { .. }) { &[0] } else { &[0, 1, -1] };
    for _ in 0..n_samples {
        let ca = rng.gen_range(0..ncomp);
        let cb = rng.gen_range(0..ncomp);
        let sa = rng.gen::<f64>() * period;
        let sb = rng.gen::<f64>() * period;
        let class = HomotopyClass(classes[rng.gen_range(0..classes.len())]);
        let from = BoundaryPoint::new(ca, sa);
        let to = BoundaryPoint::new(cb, sb);
        let r1 = boundary_distance(g1, from, to, class);
        let r2 = boundary_distance(g2, from, to, class);
        if let (Ok(r1), Ok(r2)) = (r1, r2) {
            dist_defect = dist_defect.max((r1.length - r2.length).abs());
        }

        // Scattering mismatch on a random incoming direction.
        let theta = rng.gen::<f64>() * (std::f64::consts::PI - 0.2) + 0.1;
        let y1 = boundary_phase(g1, from, theta);
        let y2 = boundary_phase(g2, from, theta);
        let e1 = escape_opts(g1, y1, g1.default_horizon(), &FlowOptions::for_model(g1))?;
        let e2 = escape_opts(g2, y2, g2.default_horizon(), &FlowOptions::for_model(g2))?;
        if let (Some(a), Some(b)) = (e1.exited(), e2.exited()) {
            if a.boundary.component == b.boundary.component {
                let pa = lifted_exit_param(g1, &from, a);
                let pb = lifted_exit_param(g2, &from, b);
                param_defect = param_defect.max((pa - pb).abs());
                angle_defect =
                    angle_defect.max((exit_angle(g1, a) - exit_angle(g2, b)).abs());
            } else {
                param_defect = f64::INFINITY;
            }
        }
    }
    Ok(LensDistanceReport {
        max_distance_defect: dist_defect,
        max_exit_param_defect: param_defect,
        max_exit_angle_defect: angle_defect,
        samples: n_samples,
    })
}

/// Warm-started boundary solve used by the comparative diagnostics: matched
/// lifts come from the caller, the guess from the reference metric's angle.
pub fn geodesic_between(
    model: &SurfaceModel,
    from: BoundaryPoint,
    to: BoundaryPoint,
    class: HomotopyClass,
    guess: Option<f64>,
) -> Result<GeodesicRecord> {
    let mut opts = LensOptions::for_model(model);
    opts.guess = guess;
    boundary_distance_opts(model, from, to, class, &opts)
}

/// Solve directly toward a lifted strip target (cover coordinates), bypassing
/// the canonical class-0 windowing.
pub fn geodesic_to_lifted(
    model: &SurfaceModel,
    from: BoundaryPoint,
    target: BoundaryPoint,
    guess: Option<f64>,
) -> Result<GeodesicRecord> {
    let mut opts = LensOptions::for_model(model);
    opts.guess = guess;
    let t = ShootTarget { component: target.component, param: target.s };
    match solve_shooting(model, from, t, &opts) {
        Ok((theta, exit)) => {
            record_from_exit(model, from, HomotopyClass(0), theta, exit, &opts)
        }
        Err(e) => Err(e),
    }
}

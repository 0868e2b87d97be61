//! Geodesic flow on the unit tangent bundle with boundary-exit detection,
//! escape times, the scattering map, Jacobi fields, conjugate-point scans,
//! and trapped-set hyperbolicity diagnostics.

pub mod dopri;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::{Mat2, Vec2};
use crate::metric::{BoundaryPoint, SurfaceModel};
use crate::quad;
use crate::roots::brent;
use dopri::{integrate_span, Dopri5, StepRecord, Stepper};

/// A point of the unit tangent bundle: base point plus g-unit tangent vector
/// in chart components.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhasePoint {
    pub p: Vec2,
    pub w: Vec2,
}

impl PhasePoint {
    pub fn new(p: Vec2, w: Vec2) -> Self {
        PhasePoint { p, w }
    }

    /// Same base point, reversed direction.
    pub fn reversed(self) -> Self {
        PhasePoint { p: self.p, w: -self.w }
    }

    fn to_state(self) -> [f64; 4] {
        [self.p.u, self.p.v, self.w.u, self.w.v]
    }

    fn from_state(y: &[f64]) -> Self {
        PhasePoint::new(Vec2::new(y[0], y[1]), Vec2::new(y[2], y[3]))
    }
}

/// Scalar normal Jacobi data (J, J').
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobiState {
    pub j: f64,
    pub dj: f64,
}

impl JacobiState {
    pub fn new(j: f64, dj: f64) -> Self {
        JacobiState { j, dj }
    }

    pub fn norm(self) -> f64 {
        (self.j * self.j + self.dj * self.dj).sqrt()
    }
}

/// Exit data on the outgoing boundary.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ExitData {
    /// Escape time = g-length of the orbit segment.
    pub length: f64,
    pub exit: PhasePoint,
    pub boundary: BoundaryPoint,
    /// Set when |g(w, nu)| at the exit falls below the tangency tolerance.
    pub tangential: bool,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub enum EscapeStatus {
    Exited(ExitData),
    Trapped { horizon: f64 },
}

/// Outcome of the forward flow with optional trajectory nodes.
#[derive(Clone, Debug)]
pub struct EscapeResult {
    pub status: EscapeStatus,
    pub trajectory: Option<Trajectory>,
}

impl EscapeResult {
    pub fn exited(&self) -> Option<&ExitData> {
        match &self.status {
            EscapeStatus::Exited(e) => Some(e),
            EscapeStatus::Trapped { .. } => None,
        }
    }

    pub fn is_trapped(&self) -> bool {
        matches!(self.status, EscapeStatus::Trapped { .. })
    }
}

/// Time-stamped phase points along an orbit (integrator nodes, unit-renormalized).
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub nodes: Vec<(f64, PhasePoint)>,
}

impl Trajectory {
    pub fn positions(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.nodes.iter().map(|(_, y)| y.p)
    }

    pub fn duration(&self) -> f64 {
        self.nodes.last().map(|(t, _)| *t).unwrap_or(0.0)
    }
}

/// Integration and event-location controls.
#[derive(Clone, Copy, Debug)]
pub struct FlowOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    /// Absolute tolerance, in time, for locating boundary crossings.
    pub event_tol: f64,
    /// |g(w, nu)| below this flags a tangential exit.
    pub tangent_tol: f64,
    pub record_nodes: bool,
}

impl FlowOptions {
    pub fn for_model(model: &SurfaceModel) -> Self {
        let d = model.diameter();
        let h_max = (0.2 * d).min(model.eval_margin).max(1e-3 * d);
        FlowOptions {
            rtol: 1e-9,
            atol: 1e-11,
            h_init: 0.01 * d,
            h_max,
            event_tol: 1e-10,
            tangent_tol: 1e-6,
            record_nodes: false,
        }
    }

    /// Record trajectory nodes with spacing at most `dt`.
    pub fn dense(mut self, dt: f64) -> Self {
        self.record_nodes = true;
        self.h_max = self.h_max.min(dt);
        self
    }

    fn dopri(&self) -> Dopri5 {
        Dopri5::new(self.rtol, self.atol, self.h_init, self.h_max)
    }
}

/// Phase point entering at the boundary with angle `theta` from the oriented
/// boundary tangent; theta in (0, pi) points inward.
pub fn boundary_phase(model: &SurfaceModel, bp: BoundaryPoint, theta: f64) -> PhasePoint {
    let bd = model.boundary_data(bp);
    let g = model.metric.at(bd.point);
    let w = model.rotate_raw(g, bd.tangent, theta);
    PhasePoint::new(bd.point, w)
}

fn geodesic_rhs(model: &SurfaceModel) -> impl Fn(f64, &[f64; 4]) -> [f64; 4] + '_ {
    move |_, y| {
        let p = Vec2::new(y[0], y[1]);
        let w = Vec2::new(y[2], y[3]);
        let a = model.christoffel_raw(p).accel(w);
        [y[2], y[3], a.u, a.v]
    }
}

fn jacobi_rhs(model: &SurfaceModel) -> impl Fn(f64, &[f64; 6]) -> [f64; 6] + '_ {
    move |_, y| {
        let p = Vec2::new(y[0], y[1]);
        let w = Vec2::new(y[2], y[3]);
        let a = model.christoffel_raw(p).accel(w);
        let k = model.gauss_curvature_raw(p);
        [y[2], y[3], a.u, a.v, y[5], -k * y[4]]
    }
}

fn fundamental_rhs(model: &SurfaceModel) -> impl Fn(f64, &[f64; 8]) -> [f64; 8] + '_ {
    move |_, y| {
        let p = Vec2::new(y[0], y[1]);
        let w = Vec2::new(y[2], y[3]);
        let a = model.christoffel_raw(p).accel(w);
        let k = model.gauss_curvature_raw(p);
        [y[2], y[3], a.u, a.v, y[5], -k * y[4], y[7], -k * y[6]]
    }
}

/// Rescale the velocity components of a state to unit g-norm.
fn renormalize<const N: usize>(model: &SurfaceModel, y: &mut [f64; N]) {
    let p = Vec2::new(y[0], y[1]);
    let w = Vec2::new(y[2], y[3]);
    let n = model.metric.at(p).quad(w).sqrt();
    y[2] /= n;
    y[3] /= n;
}

/// Normalized signed boundary defect: positive inside, comparable to chart
/// lengths on every component.
fn defect(model: &SurfaceModel, comp: usize, p: Vec2) -> f64 {
    let raw = model.chart.boundary_defect(comp, p);
    match model.chart {
        crate::metric::Chart::Disk { radius } => raw / (2.0 * radius),
        crate::metric::Chart::Strip { .. } => raw,
    }
}

struct Crossing<const N: usize> {
    t: f64,
    state: [f64; N],
    component: usize,
}

/// Locate the earliest boundary crossing inside one accepted step, if any.
/// `armed[c]` gates components whose defect has not yet risen above the
/// arming threshold (needed for starts on the boundary).
fn first_crossing<const N: usize, R: Fn(f64, &[f64; N]) -> [f64; N]>(
    model: &SurfaceModel,
    params: Dopri5,
    rhs: &R,
    rec: &StepRecord<N>,
    armed: &mut [bool],
    arm_eps: f64,
    event_tol: f64,
) -> Result<Option<Crossing<N>>> {
    const SCAN: usize = 8;
    let ncomp = model.chart.num_boundary_components();
    let mut best: Option<Crossing<N>> = None;
    for comp in 0..ncomp {
        // Scan dense samples for the first sign change on this component.
        let mut t_prev = rec.t0;
        let mut d_prev = defect(model, comp, Vec2::new(rec.y0[0], rec.y0[1]));
        if !armed[comp] && d_prev > arm_eps {
            armed[comp] = true;
        }
        let mut bracket = None;
        for k in 1..=SCAN {
            let t = rec.t0 + rec.h() * (k as f64) / (SCAN as f64);
            let y = if k == SCAN { rec.y1 } else { rec.eval(t) };
            let d = defect(model, comp, Vec2::new(y[0], y[1]));
            if armed[comp] && d_prev > 0.0 && d <= 0.0 {
                bracket = Some((t_prev, t));
                break;
            }
            if !armed[comp] && d > arm_eps {
                armed[comp] = true;
            }
            t_prev = t;
            d_prev = d;
        }
        let Some((mut lo, mut hi)) = bracket else { continue };

        // Shrink on the interpolant first, then switch to exact re-integration
        // from the step start for the final location.
        for _ in 0..20 {
            if hi - lo < 16.0 * event_tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let y = rec.eval(mid);
            if defect(model, comp, Vec2::new(y[0], y[1])) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let exact = |t: f64| -> [f64; N] {
            integrate_span(params, rhs, rec.t0, rec.y0, t)
                .unwrap_or(rec.y1)
        };
        let f = |t: f64| {
            let y = exact(t);
            defect(model, comp, Vec2::new(y[0], y[1]))
        };
        let (mut flo, mut fhi) = (f(lo), f(hi));
        // The interpolant can misplace the bracket by its own error; widen to
        // the full step if necessary.
        if flo <= 0.0 {
            lo = rec.t0;
            flo = defect(model, comp, Vec2::new(rec.y0[0], rec.y0[1]));
            if flo <= 0.0 {
                return Err(Error::EventNotBracketed);
            }
        }
        if fhi > 0.0 {
            hi = rec.t1;
            fhi = defect(model, comp, Vec2::new(rec.y1[0], rec.y1[1]));
            if fhi > 0.0 {
                // The dip was an interpolation artifact.
                continue;
            }
        }
        let (t_exit, _) = brent(f, lo, hi, flo, fhi, event_tol);
        let state = exact(t_exit);
        if best.as_ref().map_or(true, |b| t_exit < b.t) {
            best = Some(Crossing { t: t_exit, state, component: comp });
        }
    }
    Ok(best)
}

fn gl5() -> &'static [(f64, f64)] {
    use std::sync::OnceLock;
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| quad::gauss_legendre_on(5, 0.0, 1.0))
}

fn check_inside(model: &SurfaceModel, p: Vec2) -> Result<()> {
    for comp in 0..model.chart.num_boundary_components() {
        if defect(model, comp, p) < -1e-9 * model.diameter() {
            return Err(Error::Domain(p.u, p.v));
        }
    }
    Ok(())
}

/// Internal flow driver shared by `escape`, `flow_step`, and the Santalo
/// quadratures. Returns the escape result, the final state when trapped, and
/// the accumulated time integral of the optional integrand.
fn escape_core(
    model: &SurfaceModel,
    y: PhasePoint,
    t_max: f64,
    opts: &FlowOptions,
    integrand: Option<&dyn Fn(Vec2, Vec2) -> f64>,
) -> Result<(EscapeResult, PhasePoint, f64)> {
    if t_max <= 0.0 {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    model.check_unit(y.p, y.w)?;
    check_inside(model, y.p)?;

    let ncomp = model.chart.num_boundary_components();
    let arm_eps = 1e-9 * model.diameter();
    let mut armed = vec![false; ncomp];
    let mut on_boundary = None;
    for comp in 0..ncomp {
        let d = defect(model, comp, y.p);
        if d > arm_eps {
            armed[comp] = true;
        } else if d.abs() <= arm_eps {
            on_boundary = Some(comp);
        }
    }
    if let Some(comp) = on_boundary {
        let bp = BoundaryPoint::new(comp, model.chart.boundary_param_of(comp, y.p));
        let bd = model.boundary_data(bp);
        let gn = model.inner(y.p, y.w, bd.normal);
        if gn <= opts.tangent_tol {
            // Outgoing or tangent start: escape time zero.
            let exit = ExitData {
                length: 0.0,
                exit: y,
                boundary: bp,
                tangential: gn.abs() <= opts.tangent_tol,
            };
            let trajectory = opts.record_nodes.then(|| Trajectory { nodes: vec![(0.0, y)] });
            return Ok((
                EscapeResult { status: EscapeStatus::Exited(exit), trajectory },
                y,
                0.0,
            ));
        }
    }

    let rhs = geodesic_rhs(model);
    let params = opts.dopri();
    let mut stepper = Stepper::new(params, &rhs, 0.0, y.to_state());
    let mut nodes = Vec::new();
    if opts.record_nodes {
        nodes.push((0.0, y));
    }
    let mut integral = 0.0;
    let add_integral = |rec: &StepRecord<4>, t_hi: f64, acc: &mut f64| {
        if let Some(f) = integrand {
            let span = t_hi - rec.t0;
            let mut part = 0.0;
            for &(x, w) in gl5() {
                let yv = rec.eval(rec.t0 + x * span);
                part += w * f(Vec2::new(yv[0], yv[1]), Vec2::new(yv[2], yv[3]));
            }
            *acc += part * span;
        }
    };

    loop {
        let rec = stepper
            .step(t_max)
            .map_err(|e| Error::SolverDiverged(e.to_string()))?;
        if let Some(hit) =
            first_crossing(model, params, &rhs, &rec, &mut armed, arm_eps, opts.event_tol)?
        {
            add_integral(&rec, hit.t, &mut integral);
            let mut state = hit.state;
            renormalize(model, &mut state);
            let exit_phase = PhasePoint::from_state(&state);
            let comp = hit.component;
            let bp = BoundaryPoint::new(comp, model.chart.boundary_param_of(comp, exit_phase.p));
            let bd = model.boundary_data(bp);
            let gn = model.inner(exit_phase.p, exit_phase.w, bd.normal);
            let exit = ExitData {
                length: hit.t,
                exit: exit_phase,
                boundary: bp,
                tangential: gn.abs() < opts.tangent_tol,
            };
            if opts.record_nodes {
                nodes.push((hit.t, exit_phase));
            }
            let trajectory = opts.record_nodes.then_some(Trajectory { nodes });
            return Ok((
                EscapeResult { status: EscapeStatus::Exited(exit), trajectory },
                exit_phase,
                integral,
            ));
        }
        add_integral(&rec, rec.t1, &mut integral);
        let mut state = stepper.y;
        renormalize(model, &mut state);
        stepper.set_state(stepper.t, state);
        if opts.record_nodes {
            nodes.push((stepper.t, PhasePoint::from_state(&state)));
        }
        if stepper.t >= t_max * (1.0 - 1e-15) {
            let at = PhasePoint::from_state(&state);
            let trajectory = opts.record_nodes.then_some(Trajectory { nodes });
            return Ok((
                EscapeResult { status: EscapeStatus::Trapped { horizon: t_max }, trajectory },
                at,
                integral,
            ));
        }
    }
}

/// Forward flow until the boundary or the horizon.
pub fn escape(model: &SurfaceModel, y: PhasePoint, t_max: f64) -> Result<EscapeResult> {
    escape_opts(model, y, t_max, &FlowOptions::for_model(model))
}

pub fn escape_opts(
    model: &SurfaceModel,
    y: PhasePoint,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<EscapeResult> {
    escape_core(model, y, t_max, opts, None).map(|(r, _, _)| r)
}

/// Escape plus the time integral of `f` along the orbit (the inner integral
/// of Santalo's formula).
pub fn escape_with_integral(
    model: &SurfaceModel,
    y: PhasePoint,
    t_max: f64,
    opts: &FlowOptions,
    f: &dyn Fn(Vec2, Vec2) -> f64,
) -> Result<(EscapeResult, f64)> {
    escape_core(model, y, t_max, opts, Some(f)).map(|(r, _, i)| (r, i))
}

/// Flow for exactly time `t`; errors with the exit estimate if the orbit
/// leaves the domain first.
pub fn flow_step(model: &SurfaceModel, y: PhasePoint, t: f64) -> Result<PhasePoint> {
    flow_step_opts(model, y, t, &FlowOptions::for_model(model))
}

pub fn flow_step_opts(
    model: &SurfaceModel,
    y: PhasePoint,
    t: f64,
    opts: &FlowOptions,
) -> Result<PhasePoint> {
    let (res, at, _) = escape_core(model, y, t, opts, None)?;
    match res.status {
        EscapeStatus::Trapped { .. } => Ok(at),
        EscapeStatus::Exited(e) => Err(Error::LeftDomain { t_exit: e.length }),
    }
}

/// Scattering map on the incoming boundary: requires g(w, nu) > 0 at the
/// start and returns the outgoing exit data (or trapped status).
pub fn scattering(model: &SurfaceModel, y: PhasePoint, t_max: f64) -> Result<EscapeResult> {
    scattering_opts(model, y, t_max, &FlowOptions::for_model(model))
}

pub fn scattering_opts(
    model: &SurfaceModel,
    y: PhasePoint,
    t_max: f64,
    opts: &FlowOptions,
) -> Result<EscapeResult> {
    let mut comp = None;
    for c in 0..model.chart.num_boundary_components() {
        if defect(model, c, y.p).abs() <= 1e-7 * model.diameter() {
            comp = Some(c);
        }
    }
    let comp = comp.ok_or(Error::Domain(y.p.u, y.p.v))?;
    let bp = BoundaryPoint::new(comp, model.chart.boundary_param_of(comp, y.p));
    let bd = model.boundary_data(bp);
    if model.inner(y.p, y.w, bd.normal) <= 0.0 {
        return Err(Error::InvalidParameter(
            "scattering requires an inward-pointing start".into(),
        ));
    }
    escape_opts(model, y, t_max, opts)
}

/// Jacobi evolution J'' + K J = 0 along the orbit of `y`, jointly integrated
/// with the flow.
pub fn jacobi_evolve(
    model: &SurfaceModel,
    y: PhasePoint,
    j0: JacobiState,
    t: f64,
) -> Result<JacobiState> {
    model.check_unit(y.p, y.w)?;
    check_inside(model, y.p)?;
    let opts = FlowOptions::for_model(model);
    let rhs = jacobi_rhs(model);
    let params = opts.dopri();
    let y0 = [y.p.u, y.p.v, y.w.u, y.w.v, j0.j, j0.dj];
    let mut armed = vec![false; model.chart.num_boundary_components()];
    let arm_eps = 1e-9 * model.diameter();
    let mut stepper = Stepper::new(params, &rhs, 0.0, y0);
    loop {
        let rec = stepper
            .step(t)
            .map_err(|e| Error::SolverDiverged(e.to_string()))?;
        if let Some(hit) =
            first_crossing(model, params, &rhs, &rec, &mut armed, arm_eps, opts.event_tol)?
        {
            return Err(Error::LeftDomain { t_exit: hit.t });
        }
        let mut state = stepper.y;
        renormalize(model, &mut state);
        stepper.set_state(stepper.t, state);
        if stepper.t >= t * (1.0 - 1e-15) {
            return Ok(JacobiState::new(state[4], state[5]));
        }
    }
}

/// First conjugate time: the first zero of J on (0, T] for J(0) = 0,
/// J'(0) = 1, or None if no zero occurs before T or before the orbit exits.
pub fn conjugate_scan(model: &SurfaceModel, y: PhasePoint, t_end: f64) -> Result<Option<f64>> {
    model.check_unit(y.p, y.w)?;
    check_inside(model, y.p)?;
    let opts = FlowOptions::for_model(model);
    let rhs = jacobi_rhs(model);
    let params = opts.dopri();
    let y0 = [y.p.u, y.p.v, y.w.u, y.w.v, 0.0, 1.0];
    let mut armed = vec![false; model.chart.num_boundary_components()];
    let arm_eps = 1e-9 * model.diameter();
    let t_skip = 1e-8 * model.diameter();
    let mut stepper = Stepper::new(params, &rhs, 0.0, y0);
    loop {
        let rec = stepper
            .step(t_end)
            .map_err(|e| Error::SolverDiverged(e.to_string()))?;
        let exit =
            first_crossing(model, params, &rhs, &rec, &mut armed, arm_eps, opts.event_tol)?;
        let t_stop = exit.as_ref().map(|c| c.t).unwrap_or(rec.t1);

        // Scan dense samples of J for the first sign change past t_skip.
        const SCAN: usize = 8;
        let mut t_prev = rec.t0;
        let mut j_prev = rec.y0[4];
        for k in 1..=SCAN {
            let tk = rec.t0 + rec.h() * (k as f64) / (SCAN as f64);
            if tk > t_stop {
                break;
            }
            let jk = if k == SCAN { rec.y1[4] } else { rec.eval(tk)[4] };
            if t_prev > t_skip && j_prev * jk <= 0.0 && (j_prev != 0.0 || jk != 0.0) {
                let f = |t: f64| {
                    integrate_span(params, &rhs, rec.t0, rec.y0, t)
                        .map(|s| s[4])
                        .unwrap_or(f64::NAN)
                };
                let (t_root, _) = brent(f, t_prev, tk, f(t_prev), f(tk), 1e-12);
                return Ok(Some(t_root));
            }
            t_prev = tk;
            j_prev = jk;
        }
        if exit.is_some() {
            return Ok(None);
        }
        let mut state = stepper.y;
        renormalize(model, &mut state);
        stepper.set_state(stepper.t, state);
        if stepper.t >= t_end * (1.0 - 1e-15) {
            return Ok(None);
        }
    }
}

/// Finite-time expansion-rate estimate log ||(J, J')(T)|| / T along a trapped
/// orbit, with per-step renormalization so arbitrarily long horizons stay in
/// range. Errors with NotTrapped if the orbit escapes first.
pub fn lyapunov_estimate(model: &SurfaceModel, y: PhasePoint, t: f64) -> Result<f64> {
    lyapunov_estimate_with(model, y, t, JacobiState::new(1.0, 0.0))
}

pub fn lyapunov_estimate_with(
    model: &SurfaceModel,
    y: PhasePoint,
    t: f64,
    j0: JacobiState,
) -> Result<f64> {
    model.check_unit(y.p, y.w)?;
    let opts = FlowOptions::for_model(model);
    let rhs = jacobi_rhs(model);
    let params = opts.dopri();
    let n0 = j0.norm();
    if n0 == 0.0 {
        return Err(Error::InvalidParameter("initial Jacobi state must be nonzero".into()));
    }
    let y0 = [y.p.u, y.p.v, y.w.u, y.w.v, j0.j / n0, j0.dj / n0];
    let mut armed = vec![false; model.chart.num_boundary_components()];
    let arm_eps = 1e-9 * model.diameter();
    let mut stepper = Stepper::new(params, &rhs, 0.0, y0);
    let mut log_acc = 0.0;
    loop {
        let rec = stepper
            .step(t)
            .map_err(|e| Error::SolverDiverged(e.to_string()))?;
        if let Some(hit) =
            first_crossing(model, params, &rhs, &rec, &mut armed, arm_eps, opts.event_tol)?
        {
            return Err(Error::NotTrapped(hit.t));
        }
        let mut state = stepper.y;
        renormalize(model, &mut state);
        let n = (state[4] * state[4] + state[5] * state[5]).sqrt();
        log_acc += n.ln();
        state[4] /= n;
        state[5] /= n;
        stepper.set_state(stepper.t, state);
        if stepper.t >= t * (1.0 - 1e-15) {
            return Ok(log_acc / t);
        }
    }
}

/// Transport of the (J, J') fundamental matrix over [0, t] along the orbit of
/// `y`; errors with NotTrapped if the orbit exits first.
pub fn jacobi_transport(model: &SurfaceModel, y: PhasePoint, t: f64) -> Result<(Mat2, PhasePoint)> {
    model.check_unit(y.p, y.w)?;
    if t == 0.0 {
        return Ok((Mat2::new(1.0, 0.0, 0.0, 1.0), y));
    }
    let opts = FlowOptions::for_model(model);
    let rhs = fundamental_rhs(model);
    let params = opts.dopri();
    let y0 = [y.p.u, y.p.v, y.w.u, y.w.v, 1.0, 0.0, 0.0, 1.0];
    let mut armed = vec![false; model.chart.num_boundary_components()];
    let arm_eps = 1e-9 * model.diameter();
    let mut stepper = Stepper::new(params, &rhs, 0.0, y0);
    loop {
        let rec = stepper
            .step(t)
            .map_err(|e| Error::SolverDiverged(e.to_string()))?;
        if let Some(hit) =
            first_crossing(model, params, &rhs, &rec, &mut armed, arm_eps, opts.event_tol)?
        {
            return Err(Error::NotTrapped(hit.t));
        }
        let mut state = stepper.y;
        renormalize(model, &mut state);
        stepper.set_state(stepper.t, state);
        if stepper.t >= t * (1.0 - 1e-15) {
            // Columns are the evolved basis solutions (1,0) and (0,1).
            let m = Mat2::new(state[4], state[6], state[5], state[7]);
            return Ok((m, PhasePoint::from_state(&state)));
        }
    }
}

fn normalize2(v: Vec2) -> Vec2 {
    v.scale(1.0 / v.norm())
}

const POWER_SEED: Vec2 = Vec2 { u: 0.6, v: 0.8 };

/// Numeric unstable (J, J') direction at `y`, by transporting a generic
/// Jacobi vector forward over `warmup` from the backward orbit.
pub fn unstable_direction(model: &SurfaceModel, y: PhasePoint, warmup: f64) -> Result<Vec2> {
    let back = flow_step(model, y.reversed(), warmup).map_err(|_| Error::NotTrapped(warmup))?;
    let (m, _) = jacobi_transport(model, back.reversed(), warmup)?;
    Ok(normalize2(m.apply(POWER_SEED)))
}

/// Numeric stable direction at `y`: the unstable direction of the reversed
/// flow, pulled back through the (J, J') -> (J, -J') reversal.
pub fn stable_direction(model: &SurfaceModel, y: PhasePoint, warmup: f64) -> Result<Vec2> {
    let fwd = flow_step(model, y, warmup).map_err(|_| Error::NotTrapped(warmup))?;
    let (m, _) = jacobi_transport(model, fwd.reversed(), warmup)?;
    let e = normalize2(m.apply(POWER_SEED));
    Ok(Vec2::new(e.u, -e.v))
}

/// Finite-time cone and expansion report along a trapped orbit.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct ConeReport {
    /// All fan images lie in the rho-cone around the transported unstable
    /// direction.
    pub contained: bool,
    /// Minimal growth factor ||d phi zeta|| / ||zeta|| over the fan.
    pub min_factor: f64,
    /// False when the numeric stable/unstable directions fail to split.
    pub splitting_ok: bool,
    pub fan_size: usize,
}

/// Transports a fan of tangent vectors spanning the alpha-cone around the
/// unstable direction over time `tau` and reports cone containment (slope
/// rho) and the minimal expansion factor.
pub fn cone_expansion_check(
    model: &SurfaceModel,
    y: PhasePoint,
    tau: f64,
    alpha: f64,
    rho: f64,
) -> Result<ConeReport> {
    const WARMUP: f64 = 8.0;
    const FAN: usize = 17;
    if tau < 0.0 || alpha <= 0.0 || rho <= 0.0 {
        return Err(Error::InvalidParameter("cone check needs tau >= 0, alpha, rho > 0".into()));
    }
    // Both time directions must stay inside over the probed spans.
    match escape(model, y, tau + 2.0 * WARMUP)? .status {
        EscapeStatus::Trapped { .. } => {}
        EscapeStatus::Exited(e) => return Err(Error::NotTrapped(e.length)),
    }
    match escape(model, y.reversed(), 2.0 * WARMUP)?.status {
        EscapeStatus::Trapped { .. } => {}
        EscapeStatus::Exited(e) => return Err(Error::NotTrapped(e.length)),
    }

    let e_u0 = unstable_direction(model, y, WARMUP)?;
    let e_s0 = stable_direction(model, y, WARMUP)?;
    let (m, z) = jacobi_transport(model, y, tau)?;
    let e_u1 = unstable_direction(model, z, WARMUP)?;
    let e_s1 = stable_direction(model, z, WARMUP)?;

    let det0 = e_u0.cross(e_s0);
    let det1 = e_u1.cross(e_s1);
    let splitting_ok = det0.abs() > 1e-3 && det1.abs() > 1e-3;
    // Fall back to orthogonal complements when the splitting degenerates, so
    // the expansion factors are still meaningful.
    let s0 = if splitting_ok { e_s0 } else { Vec2::new(-e_u0.v, e_u0.u) };
    let s1 = if splitting_ok { e_s1 } else { Vec2::new(-e_u1.v, e_u1.u) };
    let det1 = e_u1.cross(s1);

    let mut contained = splitting_ok;
    let mut min_factor = f64::INFINITY;
    for i in 0..FAN {
        let eta = alpha * (2.0 * i as f64 / (FAN - 1) as f64 - 1.0);
        let zeta = e_u0 + s0.scale(eta);
        let img = m.apply(zeta);
        let factor = img.norm() / zeta.norm();
        min_factor = min_factor.min(factor);
        // Coordinates of the image in the endpoint splitting.
        let xi1 = img.cross(s1) / det1;
        let eta1 = e_u1.cross(img) / det1;
        if eta1.abs() > rho * xi1.abs() {
            contained = false;
        }
    }
    Ok(ConeReport { contained, min_factor, splitting_ok, fan_size: FAN })
}

/// Escape-length survey over seeded Liouville-weighted boundary samples:
/// None marks rays still inside at the horizon.
pub fn escape_length_survey(
    model: &SurfaceModel,
    n: usize,
    horizon: f64,
    seed: u64,
) -> Vec<Option<f64>> {
    use rayon::prelude::*;
    let sampler = crate::sampling::BoundarySampler::new(model);
    let starts: Vec<PhasePoint> = {
        let mut rng = crate::sampling::seeded_rng(seed);
        (0..n).map(|_| sampler.sample_phase(&mut rng).1).collect()
    };
    starts
        .par_iter()
        .map(|y| match escape(model, *y, horizon) {
            Ok(res) => match res.status {
                EscapeStatus::Exited(e) => Some(e.length),
                EscapeStatus::Trapped { .. } => None,
            },
            Err(_) => None,
        })
        .collect()
}

/// Fraction of Liouville-weighted incoming samples still inside at `t_max`.
/// Monotone non-increasing in the horizon for a fixed sample set.
pub fn trapped_fraction(model: &SurfaceModel, n: usize, t_max: f64, seed: u64) -> f64 {
    assert!(n >= 1);
    let survey = escape_length_survey(model, n, t_max, seed);
    survey.iter().filter(|l| l.is_none()).count() as f64 / n as f64
}

/// Entry angle of the reversed exit ray, measured from the oriented boundary
/// tangent; seeds warm-started shooting solves.
pub fn entry_angle(model: &SurfaceModel, exit: &ExitData) -> f64 {
    let bd = model.boundary_data(exit.boundary);
    let a = model.signed_angle(exit.exit.p, bd.tangent, -exit.exit.w);
    a.rem_euclid(2.0 * PI).min(PI)
}

/// Unsigned tangent angle of the outgoing exit vector, in (0, pi). On the
/// round disk this mirrors the entry angle, so lens tables are symmetric.
pub fn exit_angle(model: &SurfaceModel, exit: &ExitData) -> f64 {
    let bd = model.boundary_data(exit.boundary);
    model.signed_angle(exit.exit.p, bd.tangent, exit.exit.w).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn straight_line_on_flat_disk() {
        let m = catalog::euclidean_disk(1.0);
        let y = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        let z = flow_step(&m, y, 0.5).unwrap();
        assert_abs_diff_eq!(z.p.u, 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(z.p.v, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.w.u, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn flow_step_errors_when_leaving() {
        let m = catalog::euclidean_disk(1.0);
        let y = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        match flow_step(&m, y, 2.0) {
            Err(Error::LeftDomain { t_exit }) => assert_abs_diff_eq!(t_exit, 1.0, epsilon = 1e-8),
            other => panic!("expected LeftDomain, got {other:?}"),
        }
    }

    #[test]
    fn poincare_center_chart_speed() {
        // Unit g-norm at the center of the 4/(1-r^2)^2 metric means chart
        // speed 1/2; the orbit stays on the diameter.
        let m = catalog::poincare_disk(0.5);
        let w0 = m.unit(Vec2::ZERO, Vec2::new(1.0, 0.0));
        assert_relative_eq!(w0.u, 0.5, epsilon = 1e-14);
        let y = PhasePoint::new(Vec2::ZERO, w0);
        let z = flow_step(&m, y, 0.4).unwrap();
        assert_abs_diff_eq!(z.p.v, 0.0, epsilon = 1e-12);
        assert!(z.p.u > 0.19 && z.p.u < 0.21);
    }

    #[test]
    fn waist_orbit_stays_on_waist() {
        let m = catalog::hyperbolic_cylinder(1.0, 6.0);
        let y = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        let z = flow_step(&m, y, 7.5).unwrap();
        assert_abs_diff_eq!(z.p.v, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(z.p.u, 7.5, epsilon = 1e-8);
        let res = escape(&m, y, 50.0).unwrap();
        assert!(res.is_trapped());
    }

    #[test]
    fn diameter_chord_escape() {
        let m = catalog::euclidean_disk(1.0);
        let y = PhasePoint::new(Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0));
        let res = escape(&m, y, 10.0).unwrap();
        let exit = res.exited().expect("chord must exit");
        assert_abs_diff_eq!(exit.length, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(exit.exit.p.u, -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(exit.exit.p.v, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(exit.exit.w.u, -1.0, epsilon = 1e-9);
        assert!(!exit.tangential);
        // Outgoing sign convention.
        let bd = m.boundary_data(exit.boundary);
        assert!(m.inner(exit.exit.p, exit.exit.w, bd.normal) < 0.0);
    }

    #[test]
    fn chord_at_angle_from_normal() {
        // Boundary start at angle pi/3 from nu: length 1, exit (1/2, sqrt3/2).
        let m = catalog::euclidean_disk(1.0);
        let p = Vec2::new(1.0, 0.0);
        let w = Vec2::new(-0.5, 3.0_f64.sqrt() / 2.0);
        let res = escape(&m, PhasePoint::new(p, w), 10.0).unwrap();
        let exit = res.exited().unwrap();
        assert_abs_diff_eq!(exit.length, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(exit.exit.p.u, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(exit.exit.p.v, 3.0_f64.sqrt() / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn scattering_equivariance_on_annulus() {
        let m = catalog::hyperbolic_cylinder(1.0, 6.0);
        for &(s, theta) in &[(0.3, 0.7), (1.9, 2.2), (4.0, 1.1)] {
            let bp = BoundaryPoint::new(0, s);
            let y = boundary_phase(&m, bp, theta);
            let shifted = boundary_phase(&m, m.deck_boundary(bp, 1), theta);
            let a = escape(&m, y, 200.0).unwrap();
            let b = escape(&m, shifted, 200.0).unwrap();
            let (ea, eb) = (a.exited().unwrap(), b.exited().unwrap());
            assert_eq!(ea.boundary.component, eb.boundary.component);
            let sign = if ea.boundary.component == 0 { 1.0 } else { -1.0 };
            assert_abs_diff_eq!(ea.boundary.s + sign * 6.0, eb.boundary.s, epsilon = 1e-7);
            assert_abs_diff_eq!(ea.length, eb.length, epsilon = 1e-8);
        }
    }

    #[test]
    fn scattering_reversibility() {
        let m = catalog::poincare_disk(0.5);
        let y = boundary_phase(&m, BoundaryPoint::new(0, 0.4), 1.1);
        let res = scattering(&m, y, 50.0).unwrap();
        let exit = res.exited().unwrap();
        let back = scattering(&m, exit.exit.reversed(), 50.0).unwrap();
        let bexit = back.exited().unwrap();
        assert_abs_diff_eq!((bexit.exit.p - y.p).norm(), 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!((bexit.exit.w + y.w).norm(), 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(bexit.length, exit.length, epsilon = 1e-9);
    }

    #[test]
    fn flow_group_property() {
        let m = catalog::poincare_disk(0.8);
        let y = PhasePoint::new(Vec2::new(0.1, -0.2), m.unit(Vec2::new(0.1, -0.2), Vec2::new(0.3, 1.0)));
        let once = flow_step(&m, y, 0.9).unwrap();
        let first = flow_step(&m, y, 0.4).unwrap();
        let second = flow_step(&m, first, 0.5).unwrap();
        assert_abs_diff_eq!((once.p - second.p).norm(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!((once.w - second.w).norm(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn flow_reversibility() {
        let m = catalog::poincare_disk(0.8);
        let p = Vec2::new(-0.2, 0.1);
        let y = PhasePoint::new(p, m.unit(p, Vec2::new(1.0, 0.4)));
        let z = flow_step(&m, y, 0.7).unwrap();
        let back = flow_step(&m, z.reversed(), 0.7).unwrap();
        assert_abs_diff_eq!((back.p - y.p).norm(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!((back.w + y.w).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn unit_norm_drift_stays_small() {
        let m = catalog::hyperbolic_cylinder(1.0, 6.0);
        // Near-waist trapped-ish orbit, long horizon.
        let p = Vec2::new(0.0, 0.01);
        let y = PhasePoint::new(p, m.unit(p, Vec2::new(1.0, 0.0)));
        let z = flow_step(&m, y, 100.0).unwrap_or_else(|_| y);
        let n = m.norm(z.p, z.w);
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn jacobi_flat_linear() {
        let m = catalog::euclidean_disk(5.0);
        let y = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        let j = jacobi_evolve(&m, y, JacobiState::new(0.0, 1.0), 2.0).unwrap();
        assert_abs_diff_eq!(j.j, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(j.dj, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn jacobi_negative_curvature_closed_form() {
        // K = -1: J'' = J, so (0,1) evolves to (sinh t, cosh t).
        let m = catalog::hyperbolic_cylinder(1.0, 20.0);
        let y = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        let j = jacobi_evolve(&m, y, JacobiState::new(0.0, 1.0), 1.0).unwrap();
        assert_relative_eq!(j.j, 1.0_f64.sinh(), epsilon = 1e-9);
        assert_relative_eq!(j.dj, 1.0_f64.cosh(), epsilon = 1e-9);
        assert_relative_eq!(j.j, 1.1752011936438014, epsilon = 1e-9);
        assert_relative_eq!(j.dj, 1.5430806348152437, epsilon = 1e-9);
    }

    #[test]
    fn jacobi_positive_curvature_sine() {
        // Equator orbit of the stereographic sphere chart stays at r = 1.
        let m = catalog::sphere_cap(3.0);
        let p = Vec2::new(1.0, 0.0);
        let y = PhasePoint::new(p, m.unit(p, Vec2::new(0.0, 1.0)));
        let j = jacobi_evolve(&m, y, JacobiState::new(0.0, 1.0), PI).unwrap();
        assert_abs_diff_eq!(j.j, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(j.dj, -1.0, epsilon = 1e-8);
    }

    #[test]
    fn conjugate_scan_matches_constant_curvature() {
        let flat = catalog::euclidean_disk(1.0);
        let y = PhasePoint::new(Vec2::new(-0.5, 0.0), Vec2::new(1.0, 0.0));
        assert_eq!(conjugate_scan(&flat, y, 10.0).unwrap(), None);

        let hyp = catalog::hyperbolic_cylinder(1.0, 6.0);
        let waist = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        assert_eq!(conjugate_scan(&hyp, waist, 30.0).unwrap(), None);

        let cap = catalog::sphere_cap(3.0);
        let p = Vec2::new(1.0, 0.0);
        let equator = PhasePoint::new(p, cap.unit(p, Vec2::new(0.0, 1.0)));
        let t = conjugate_scan(&cap, equator, 4.0).unwrap().expect("sin t vanishes at pi");
        assert_abs_diff_eq!(t, PI, epsilon = 1e-8);
    }

    #[test]
    fn lyapunov_on_the_waist() {
        let m = catalog::hyperbolic_cylinder(1.0, 6.0);
        let waist = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        let l = lyapunov_estimate(&m, waist, 30.0).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 0.05);
        // Contracting initial data decays at rate -1 until roundoff injects
        // the growing mode; T = 10 stays clean.
        let lc =
            lyapunov_estimate_with(&m, waist, 10.0, JacobiState::new(1.0, -1.0)).unwrap();
        assert_abs_diff_eq!(lc, -1.0, epsilon = 0.05);
    }

    #[test]
    fn lyapunov_rejects_escaping_orbits() {
        let m = catalog::euclidean_disk(1.0);
        let y = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        assert!(matches!(lyapunov_estimate(&m, y, 10.0), Err(Error::NotTrapped(_))));
    }

    #[test]
    fn cone_check_on_hyperbolic_waist() {
        let m = catalog::hyperbolic_cylinder(1.0, 6.0);
        let waist = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        let rep = cone_expansion_check(&m, waist, 2.0, 0.5, 0.5).unwrap();
        assert!(rep.splitting_ok);
        assert!(rep.contained);
        // Explicit e^{+-t} Jacobi solutions give at least e^2 (1 - rho) growth.
        assert!(rep.min_factor >= 3.5, "factor {}", rep.min_factor);

        let trivial = cone_expansion_check(&m, waist, 0.0, 0.5, 0.5).unwrap();
        assert!(trivial.contained);
        assert_relative_eq!(trivial.min_factor, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn cone_check_flat_cylinder_fails_to_expand() {
        let m = catalog::flat_cylinder(1.0, 6.0);
        let mid = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        let rep = cone_expansion_check(&m, mid, 2.0, 0.05, 0.025).unwrap();
        assert!(!rep.contained);
        assert!(rep.min_factor < 2.0, "linear growth only, got {}", rep.min_factor);
    }

    #[test]
    fn cone_check_rejects_untrapped() {
        let m = catalog::euclidean_disk(1.0);
        let y = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));
        assert!(matches!(
            cone_expansion_check(&m, y, 1.0, 0.5, 0.5),
            Err(Error::NotTrapped(_))
        ));
    }

    #[test]
    fn trapped_fraction_empty_on_disk() {
        let m = catalog::euclidean_disk(1.0);
        assert_eq!(trapped_fraction(&m, 200, 10.0, 7), 0.0);
        let hyp = catalog::poincare_disk(0.5);
        assert_eq!(trapped_fraction(&hyp, 200, 10.0, 7), 0.0);
    }

    #[test]
    fn trapped_fraction_decays_on_cylinder() {
        let m = catalog::hyperbolic_cylinder(1.0, 6.0);
        let survey = escape_length_survey(&m, 40_000, 40.0, 11);
        let frac = |t: f64| {
            survey.iter().filter(|l| l.map_or(true, |v| v >= t)).count() as f64
                / survey.len() as f64
        };
        let (f10, f40) = (frac(10.0), frac(40.0));
        assert!(f10 > 0.0, "no mass near the trapped wedge at T=10");
        assert!(f40 < f10, "fraction must decay: {f10} -> {f40}");
    }

    #[test]
    fn tangential_start_flagged() {
        let m = catalog::euclidean_disk(1.0);
        let y = boundary_phase(&m, BoundaryPoint::new(0, 0.0), 0.0);
        let res = escape(&m, y, 5.0).unwrap();
        let exit = res.exited().unwrap();
        assert!(exit.tangential);
        assert_eq!(exit.length, 0.0);
    }
}

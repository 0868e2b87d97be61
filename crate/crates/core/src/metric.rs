//! Surfaces with boundary as analytic metric charts, with pointwise tensor
//! calculus: metric evaluation, Christoffel symbols, Gauss curvature, metric
//! rotations, and boundary convexity data.
//!
//! Two chart families are supported: a disk of given chart radius, and an
//! infinite strip `R x [v_min, v_max]` with a deck translation of period `L`
//! presenting an annulus directly by its universal cover.

use std::f64::consts::TAU;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geom::{SymMat2, Vec2};

/// Tolerance for the g-unit precondition on tangent vectors.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Relative finite-difference step (times the domain diameter).
pub const FD_STEP_REL: f64 = 1e-5;

type EvalFn = Arc<dyn Fn(Vec2) -> SymMat2 + Send + Sync>;
type GradFn = Arc<dyn Fn(Vec2) -> (SymMat2, SymMat2) + Send + Sync>;
type ScalarFn = Arc<dyn Fn(Vec2) -> f64 + Send + Sync>;

/// A metric tensor field on a chart.
///
/// `grad` and `curvature` are optional analytic closures; when absent, central
/// finite differences with step `fd_step` are used (one-sided at the chart
/// edge). Fields must be evaluable on a small margin outside the closed chart
/// so that integrator stages near the boundary stay defined.
#[derive(Clone)]
pub struct MetricField {
    eval: EvalFn,
    grad: Option<GradFn>,
    curvature: Option<ScalarFn>,
    fd_step: f64,
}

impl MetricField {
    pub fn new(eval: impl Fn(Vec2) -> SymMat2 + Send + Sync + 'static, fd_step: f64) -> Self {
        assert!(fd_step > 0.0, "finite-difference step must be positive");
        MetricField { eval: Arc::new(eval), grad: None, curvature: None, fd_step }
    }

    pub fn with_grad(
        mut self,
        grad: impl Fn(Vec2) -> (SymMat2, SymMat2) + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_curvature(mut self, k: impl Fn(Vec2) -> f64 + Send + Sync + 'static) -> Self {
        self.curvature = Some(Arc::new(k));
        self
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn has_analytic_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Raw evaluation, no domain or positivity gate.
    pub fn at(&self, p: Vec2) -> SymMat2 {
        (self.eval)(p)
    }

    /// (d/du g, d/dv g), analytic when supplied, otherwise central differences.
    pub fn d_at(&self, p: Vec2) -> (SymMat2, SymMat2) {
        match &self.grad {
            Some(g) => g(p),
            None => {
                let h = self.fd_step;
                let du = self
                    .at(Vec2::new(p.u + h, p.v))
                    .sub(self.at(Vec2::new(p.u - h, p.v)))
                    .scale(0.5 / h);
                let dv = self
                    .at(Vec2::new(p.u, p.v + h))
                    .sub(self.at(Vec2::new(p.u, p.v - h)))
                    .scale(0.5 / h);
                (du, dv)
            }
        }
    }

    /// Second derivatives (g_uu, g_uv, g_vv) by differencing `d_at`.
    fn d2_at(&self, p: Vec2) -> (SymMat2, SymMat2, SymMat2) {
        let h = self.fd_step;
        let (du_p, dv_p) = self.d_at(Vec2::new(p.u + h, p.v));
        let (du_m, dv_m) = self.d_at(Vec2::new(p.u - h, p.v));
        let (_, dv_pv) = self.d_at(Vec2::new(p.u, p.v + h));
        let (_, dv_mv) = self.d_at(Vec2::new(p.u, p.v - h));
        let guu = du_p.sub(du_m).scale(0.5 / h);
        let guv = dv_p.sub(dv_m).scale(0.5 / h);
        let gvv = dv_pv.sub(dv_mv).scale(0.5 / h);
        (guu, guv, gvv)
    }
}

/// Chart domains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Chart {
    /// Euclidean-coordinate disk of the given chart radius, centered at 0.
    Disk { radius: f64 },
    /// Strip `R x [v_min, v_max]`, universal cover of an annulus with deck
    /// translation `(u, v) -> (u + period, v)`.
    Strip { v_min: f64, v_max: f64, period: f64 },
}

impl Chart {
    pub fn contains(&self, p: Vec2, tol: f64) -> bool {
        match *self {
            Chart::Disk { radius } => p.norm_sq() <= (radius + tol) * (radius + tol),
            Chart::Strip { v_min, v_max, .. } => p.v >= v_min - tol && p.v <= v_max + tol,
        }
    }

    /// Diagonal of a fundamental domain; scale for steps and horizons.
    pub fn diameter(&self) -> f64 {
        match *self {
            Chart::Disk { radius } => 2.0 * radius,
            Chart::Strip { v_min, v_max, period } => {
                (period * period + (v_max - v_min) * (v_max - v_min)).sqrt()
            }
        }
    }

    pub fn num_boundary_components(&self) -> usize {
        match self {
            Chart::Disk { .. } => 1,
            Chart::Strip { .. } => 2,
        }
    }

    /// Period of the boundary parameter on the quotient surface.
    pub fn boundary_param_period(&self) -> f64 {
        match *self {
            Chart::Disk { .. } => TAU,
            Chart::Strip { period, .. } => period,
        }
    }

    /// Boundary parametrization x(s). Component 0 is the disk circle or the
    /// bottom edge; component 1 the top edge. Orientations are chosen so that
    /// the +90 degree rotation of the tangent points into the domain:
    /// the bottom edge runs in +u and the top edge in -u.
    pub fn boundary_point(&self, component: usize, s: f64) -> Vec2 {
        match *self {
            Chart::Disk { radius } => Vec2::new(radius * s.cos(), radius * s.sin()),
            Chart::Strip { v_min, v_max, .. } => match component {
                0 => Vec2::new(s, v_min),
                _ => Vec2::new(-s, v_max),
            },
        }
    }

    /// Chart derivative dx/ds of the boundary parametrization.
    pub fn boundary_tangent(&self, component: usize, s: f64) -> Vec2 {
        match *self {
            Chart::Disk { radius } => Vec2::new(-radius * s.sin(), radius * s.cos()),
            Chart::Strip { .. } => match component {
                0 => Vec2::new(1.0, 0.0),
                _ => Vec2::new(-1.0, 0.0),
            },
        }
    }

    /// Chart second derivative d2x/ds2.
    pub fn boundary_second(&self, component: usize, s: f64) -> Vec2 {
        match *self {
            Chart::Disk { .. } => -self.boundary_point(component, s),
            Chart::Strip { .. } => Vec2::ZERO,
        }
    }

    /// Boundary parameter of a chart point assumed to lie on the given
    /// component. Disk parameters are wrapped to [0, 2pi); strip parameters
    /// are the (lifted) chart coordinate.
    pub fn boundary_param_of(&self, component: usize, p: Vec2) -> f64 {
        match *self {
            Chart::Disk { .. } => p.v.atan2(p.u).rem_euclid(TAU),
            Chart::Strip { .. } => match component {
                0 => p.u,
                _ => -p.u,
            },
        }
    }

    /// Signed boundary functions, positive inside, one per component.
    pub fn boundary_defect(&self, component: usize, p: Vec2) -> f64 {
        match *self {
            Chart::Disk { radius } => radius * radius - p.norm_sq(),
            Chart::Strip { v_min, v_max, .. } => match component {
                0 => p.v - v_min,
                _ => v_max - p.v,
            },
        }
    }

    pub fn deck_offset(&self) -> Option<f64> {
        match *self {
            Chart::Strip { period, .. } => Some(period),
            Chart::Disk { .. } => None,
        }
    }
}

/// A point of the boundary, as component index plus parameter.
///
/// On the strip the parameter is a lifted coordinate in R; on the disk it is
/// an angle, wrapped to [0, 2pi) unless explicitly lifted by the caller.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundaryPoint {
    pub component: usize,
    pub s: f64,
}

impl BoundaryPoint {
    pub fn new(component: usize, s: f64) -> Self {
        BoundaryPoint { component, s }
    }
}

/// Pointwise boundary frame and convexity data.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryData {
    pub point: Vec2,
    /// g-unit tangent in the orientation of the parametrization.
    pub tangent: Vec2,
    /// g-unit inward normal (the +90 degree rotation of `tangent`).
    pub normal: Vec2,
    /// Geodesic curvature of the boundary; positive means strictly convex.
    pub curvature: f64,
    /// Chart-parameter speed |dx/ds|_g.
    pub speed: f64,
}

/// Christoffel symbols of the second kind, indexed [k][i][j].
#[derive(Clone, Copy, Debug, Default)]
pub struct Christoffel(pub [[[f64; 2]; 2]; 2]);

impl Christoffel {
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.0[k][i][j]
    }

    /// Geodesic acceleration -Gamma^k_{ij} w^i w^j.
    pub fn accel(&self, w: Vec2) -> Vec2 {
        let ww = [w.u, w.v];
        let mut out = [0.0; 2];
        for (k, out_k) in out.iter_mut().enumerate() {
            let g = &self.0[k];
            *out_k = -(g[0][0] * ww[0] * ww[0] + 2.0 * g[0][1] * ww[0] * ww[1] + g[1][1] * ww[1] * ww[1]);
        }
        Vec2::new(out[0], out[1])
    }
}

/// A surface with boundary: chart domain plus metric field.
#[derive(Clone)]
pub struct SurfaceModel {
    pub chart: Chart,
    pub metric: MetricField,
    pub name: String,
    /// Chart distance beyond the closed domain on which the metric field
    /// stays evaluable and positive (integrator stages may land there).
    pub eval_margin: f64,
}

impl SurfaceModel {
    pub fn new(chart: Chart, metric: MetricField, name: impl Into<String>) -> Self {
        SurfaceModel { chart, metric, name: name.into(), eval_margin: f64::INFINITY }
    }

    pub fn with_eval_margin(mut self, margin: f64) -> Self {
        self.eval_margin = margin;
        self
    }

    pub fn diameter(&self) -> f64 {
        self.chart.diameter()
    }

    /// Default trapping horizon, 20 diameters.
    pub fn default_horizon(&self) -> f64 {
        20.0 * self.diameter()
    }

    /// Metric tensor at a chart point, with domain and positivity gates.
    pub fn metric_at(&self, p: Vec2) -> Result<SymMat2> {
        if !self.chart.contains(p, 1e-9 * self.diameter()) {
            return Err(Error::Domain(p.u, p.v));
        }
        let g = self.metric.at(p);
        if !g.is_spd() {
            return Err(Error::NotSpd(p.u, p.v));
        }
        Ok(g)
    }

    /// Christoffel symbols Gamma^k_{ij} from the metric derivatives.
    pub fn christoffel(&self, p: Vec2) -> Result<Christoffel> {
        if !self.chart.contains(p, self.metric.fd_step()) {
            return Err(Error::Domain(p.u, p.v));
        }
        Ok(self.christoffel_raw(p))
    }

    /// Ungated Christoffel evaluation for integrator interiors.
    pub fn christoffel_raw(&self, p: Vec2) -> Christoffel {
        let g = self.metric.at(p);
        let gi = g.inverse();
        let (du, dv) = self.metric.d_at(p);
        // dg[l][i][j] = d_l g_{ij}
        let dg = [
            [[du.uu, du.uv], [du.uv, du.vv]],
            [[dv.uu, dv.uv], [dv.uv, dv.vv]],
        ];
        let ginv = [[gi.uu, gi.uv], [gi.uv, gi.vv]];
        let mut out = [[[0.0; 2]; 2]; 2];
        for (k, out_k) in out.iter_mut().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    let mut sum = 0.0;
                    for l in 0..2 {
                        sum += ginv[k][l] * (dg[i][j][l] + dg[j][i][l] - dg[l][i][j]);
                    }
                    out_k[i][j] = 0.5 * sum;
                }
            }
        }
        Christoffel(out)
    }

    /// Gauss curvature; analytic closure when available, Brioschi formula on
    /// metric derivatives otherwise.
    pub fn gauss_curvature(&self, p: Vec2) -> Result<f64> {
        if !self.chart.contains(p, 2.0 * self.metric.fd_step()) {
            return Err(Error::Domain(p.u, p.v));
        }
        Ok(self.gauss_curvature_raw(p))
    }

    pub fn gauss_curvature_raw(&self, p: Vec2) -> f64 {
        if let Some(k) = &self.metric.curvature {
            return k(p);
        }
        self.curvature_brioschi(p)
    }

    /// Brioschi formula in terms of E, F, G and their derivatives. Serves as
    /// the derivative-based route independent of any analytic closure.
    pub fn curvature_brioschi(&self, p: Vec2) -> f64 {
        let g = self.metric.at(p);
        let (du, dv) = self.metric.d_at(p);
        let (d2u, d2uv, d2v) = self.metric.d2_at(p);
        let (e, f, gg) = (g.uu, g.uv, g.vv);
        let (e_u, e_v) = (du.uu, dv.uu);
        let (f_u, f_v) = (du.uv, dv.uv);
        let (g_u, g_v) = (du.vv, dv.vv);
        let e_vv = d2v.uu;
        let g_uu = d2u.vv;
        let f_uv = d2uv.uv;
        let det3 = |m: [[f64; 3]; 3]| -> f64 {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let a = det3([
            [-0.5 * e_vv + f_uv - 0.5 * g_uu, 0.5 * e_u, f_u - 0.5 * e_v],
            [f_v - 0.5 * g_u, e, f],
            [0.5 * g_v, f, gg],
        ]);
        let b = det3([
            [0.0, 0.5 * e_v, 0.5 * g_u],
            [0.5 * e_v, e, f],
            [0.5 * g_u, f, gg],
        ]);
        let den = e * gg - f * f;
        (a - b) / (den * den)
    }

    /// g-inner product at p.
    pub fn inner(&self, p: Vec2, w1: Vec2, w2: Vec2) -> f64 {
        self.metric.at(p).inner(w1, w2)
    }

    /// g-norm at p.
    pub fn norm(&self, p: Vec2, w: Vec2) -> f64 {
        self.metric.at(p).quad(w).sqrt()
    }

    /// Rescale a chart vector to g-unit length.
    pub fn unit(&self, p: Vec2, w: Vec2) -> Vec2 {
        w.scale(1.0 / self.norm(p, w))
    }

    pub fn check_unit(&self, p: Vec2, w: Vec2) -> Result<()> {
        let defect = (self.metric.at(p).quad(w) - 1.0).abs();
        if defect > 2.0 * UNIT_NORM_TOL + UNIT_NORM_TOL {
            return Err(Error::NotUnit(defect));
        }
        Ok(())
    }

    /// The g-orthogonal complex structure: J w is w rotated by +90 degrees in
    /// the metric, in the chart's standard orientation.
    pub fn j_rotate(&self, g: SymMat2, w: Vec2) -> Vec2 {
        let sq = g.det().sqrt();
        Vec2::new(-(g.uv * w.u + g.vv * w.v) / sq, (g.uu * w.u + g.uv * w.v) / sq)
    }

    /// Positive rotation of a g-unit vector by angle theta.
    pub fn rotate(&self, p: Vec2, w: Vec2, theta: f64) -> Result<Vec2> {
        let g = self.metric_at(p)?;
        let defect = (g.quad(w) - 1.0).abs();
        if defect > UNIT_NORM_TOL {
            return Err(Error::NotUnit(defect));
        }
        Ok(self.rotate_raw(g, w, theta))
    }

    pub fn rotate_raw(&self, g: SymMat2, w: Vec2, theta: f64) -> Vec2 {
        let jw = self.j_rotate(g, w);
        w.scale(theta.cos()) + jw.scale(theta.sin())
    }

    /// Signed g-angle from w1 to w2, in (-pi, pi].
    pub fn signed_angle(&self, p: Vec2, w1: Vec2, w2: Vec2) -> f64 {
        let g = self.metric.at(p);
        let s = g.det().sqrt() * w1.cross(w2);
        let c = g.inner(w1, w2);
        s.atan2(c)
    }

    /// Unsigned g-angle in [0, pi].
    pub fn angle(&self, p: Vec2, w1: Vec2, w2: Vec2) -> f64 {
        self.signed_angle(p, w1, w2).abs()
    }

    /// Boundary frame at x(s): point, g-unit tangent and inward normal,
    /// geodesic curvature, and parameter speed.
    pub fn boundary_data(&self, bp: BoundaryPoint) -> BoundaryData {
        let point = self.chart.boundary_point(bp.component, bp.s);
        let cp = self.chart.boundary_tangent(bp.component, bp.s);
        let cpp = self.chart.boundary_second(bp.component, bp.s);
        let g = self.metric.at(point);
        let speed = g.quad(cp).sqrt();
        let tangent = cp.scale(1.0 / speed);
        let normal = self.j_rotate(g, tangent);
        // Covariant acceleration of the parametrized curve.
        let gamma = self.christoffel_raw(point);
        let acc = cpp - gamma.accel(cp);
        let curvature = g.inner(acc, normal) / (speed * speed);
        BoundaryData { point, tangent, normal, curvature, speed }
    }

    /// Minimum sampled geodesic curvature of the boundary. Positive values
    /// certify strict convexity at the sample resolution.
    pub fn boundary_convexity_check(&self, n_samples: usize) -> f64 {
        assert!(n_samples >= 8, "need at least 8 boundary samples");
        let period = self.chart.boundary_param_period();
        let mut min_k = f64::INFINITY;
        for comp in 0..self.chart.num_boundary_components() {
            for i in 0..n_samples {
                let s = period * (i as f64) / (n_samples as f64);
                let k = self.boundary_data(BoundaryPoint::new(comp, s)).curvature;
                if k < min_k {
                    min_k = k;
                }
            }
        }
        min_k
    }

    /// Deck translation by n periods (strip charts only).
    pub fn deck(&self, p: Vec2, n: i64) -> Vec2 {
        match self.chart.deck_offset() {
            Some(l) => Vec2::new(p.u + n as f64 * l, p.v),
            None => p,
        }
    }

    /// Deck action on lifted boundary parameters. On the top edge of a strip
    /// the parameter runs against u, so the action is s -> s - period there.
    pub fn deck_boundary(&self, bp: BoundaryPoint, n: i64) -> BoundaryPoint {
        match self.chart.deck_offset() {
            Some(l) => {
                let sign = if bp.component == 0 { 1.0 } else { -1.0 };
                BoundaryPoint::new(bp.component, bp.s + sign * n as f64 * l)
            }
            None => bp,
        }
    }
}

/// Wrap an angle-like parameter to [0, period).
pub fn wrap_param(s: f64, period: f64) -> f64 {
    s.rem_euclid(period)
}

/// Lift `target` to the representative in [anchor, anchor + period).
pub fn lift_after(anchor: f64, target: f64, period: f64) -> f64 {
    anchor + (target - anchor).rem_euclid(period)
}

//! Comparative rigidity diagnostics between two metrics sharing a chart and
//! boundary: the transferred-angle function, its symmetry and subadditivity
//! identities, the Liouville-averaged angle, Jensen gaps, the constructive
//! point map from concurrent geodesic triples, isometry certificates, and the
//! conformal volume chain.

use rayon::prelude::*;

use crate::catalog::{BumpSpec, ConformalBump, Diffeo};
use crate::crossing::SegmentIndex;
use crate::error::{Error, Result};
use crate::flow::{
    dopri::{integrate_span, Dopri5},
    escape_opts, flow_step_opts, EscapeStatus, ExitData, FlowOptions, PhasePoint,
};
use crate::geom::Vec2;
use crate::lens::{self, GeodesicRecord, HomotopyClass};
use crate::measure::{area_quadrature, santalo_integrate, FanGrid};
use crate::metric::{BoundaryPoint, Chart, SurfaceModel};
use crate::sampling::{seeded_rng, BoundarySampler};

/// Angle resolution of the transfer pipeline; folded into reported standard
/// errors as a systematic floor.
pub const ANGLE_TOL: f64 = 1e-6;

/// How the second metric of a pair was produced.
#[derive(Clone)]
pub enum PairRelation {
    Identical,
    /// g2 = (psi^{-1})^* g1 for the stored boundary-fixing diffeomorphism, so
    /// psi itself is the isometry (M, g1) -> (M, g2).
    Pullback(Diffeo),
    Conformal(ConformalBump),
    Unrelated,
}

impl std::fmt::Debug for PairRelation {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairRelation::Identical => write!(fmt, "Identical"),
            PairRelation::Pullback(d) => write!(fmt, "Pullback({})", d.name),
            PairRelation::Conformal(_) => write!(fmt, "Conformal"),
            PairRelation::Unrelated => write!(fmt, "Unrelated"),
        }
    }
}

/// Two metrics on the same chart, agreeing on the boundary. Angles and
/// rotations are always measured by `g1`.
#[derive(Clone)]
pub struct MetricPair {
    pub g1: SurfaceModel,
    pub g2: SurfaceModel,
    pub relation: PairRelation,
}

impl MetricPair {
    pub fn identical(model: &SurfaceModel) -> MetricPair {
        MetricPair { g1: model.clone(), g2: model.clone(), relation: PairRelation::Identical }
    }

    /// Pair with g2 the pushforward of g1 under a boundary-fixing diffeo.
    pub fn pullback(model: &SurfaceModel, psi: &Diffeo) -> Result<MetricPair> {
        let g2 = crate::catalog::pullback(model, &psi.inverted());
        let pair = MetricPair {
            g1: model.clone(),
            g2,
            relation: PairRelation::Pullback(psi.clone()),
        };
        pair.check_boundary_agreement()?;
        Ok(pair)
    }

    /// Pair with g2 = e^{2 omega} g1 for a compactly supported bump omega.
    pub fn conformal(model: &SurfaceModel, spec: BumpSpec) -> Result<MetricPair> {
        let g2 = crate::catalog::conformal_bump(model, spec)?;
        let bump = ConformalBump::new(model.chart, spec)?;
        let pair =
            MetricPair { g1: model.clone(), g2, relation: PairRelation::Conformal(bump) };
        pair.check_boundary_agreement()?;
        Ok(pair)
    }

    pub fn unrelated(g1: &SurfaceModel, g2: &SurfaceModel) -> Result<MetricPair> {
        if g1.chart != g2.chart {
            return Err(Error::InvalidParameter("pair must share a chart".into()));
        }
        let pair = MetricPair {
            g1: g1.clone(),
            g2: g2.clone(),
            relation: PairRelation::Unrelated,
        };
        pair.check_boundary_agreement()?;
        Ok(pair)
    }

    fn check_boundary_agreement(&self) -> Result<()> {
        let period = self.g1.chart.boundary_param_period();
        let mut worst = 0.0_f64;
        for comp in 0..self.g1.chart.num_boundary_components() {
            for i in 0..64 {
                let p = self.g1.chart.boundary_point(comp, period * i as f64 / 64.0);
                worst = worst.max(self.g1.metric.at(p).sub(self.g2.metric.at(p)).max_abs());
            }
        }
        if worst > 1e-8 {
            return Err(Error::BoundaryMismatch(worst));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.g1.default_horizon()
    }
}

/// One transferred-angle evaluation.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct AngleSample {
    pub base: Vec2,
    pub theta: f64,
    /// The g2-angle at the transferred intersection point.
    pub theta_second: f64,
    /// The transferred intersection point x''.
    pub x_second: Vec2,
    pub valid: bool,
}

impl AngleSample {
    fn invalid(y: PhasePoint, theta: f64) -> Self {
        AngleSample { base: y.p, theta, theta_second: f64::NAN, x_second: y.p, valid: false }
    }
}

/// Endpoints of a complete g1-geodesic through a phase point, with the exit
/// records needed for warm-started g2 solves.
struct ChordEndpoints {
    back: ExitData,
    fwd: ExitData,
}

fn g1_chord(pair: &MetricPair, y: PhasePoint, opts: &FlowOptions) -> Result<ChordEndpoints> {
    let horizon = pair.horizon();
    let fwd = match escape_opts(&pair.g1, y, horizon, opts)?.status {
        EscapeStatus::Exited(e) if !e.tangential => e,
        _ => return Err(Error::ProbeTrapped),
    };
    let back = match escape_opts(&pair.g1, y.reversed(), horizon, opts)?.status {
        EscapeStatus::Exited(e) if !e.tangential => e,
        _ => return Err(Error::ProbeTrapped),
    };
    Ok(ChordEndpoints { back, fwd })
}

/// Solve the g2 two-point problem with the same (lifted) endpoints as a
/// g1 chord, oriented from the backward exit to the forward exit.
fn g2_matched_geodesic(pair: &MetricPair, chord: &ChordEndpoints) -> Result<GeodesicRecord> {
    let from = chord.back.boundary;
    let to = chord.fwd.boundary;
    // Entry angle of the reversed backward ray seeds the shooting solve; the
    // metrics agree on the boundary, so the g1 angle is an excellent guess.
    let guess = crate::flow::entry_angle(&pair.g1, &chord.back);
    match pair.g1.chart {
        Chart::Disk { .. } => lens::geodesic_between(
            &pair.g2,
            from,
            BoundaryPoint::new(to.component, to.s),
            HomotopyClass(0),
            Some(guess),
        ),
        Chart::Strip { .. } => lens::geodesic_to_lifted(&pair.g2, from, to, Some(guess)),
    }
}

/// Phase point along a record at arclength t, refined by re-integration from
/// the nearest stored node.
fn record_point_at(model: &SurfaceModel, rec: &GeodesicRecord, t: f64) -> PhasePoint {
    let t = t.clamp(rec.nodes.first().map(|n| n.0).unwrap_or(0.0), rec.length);
    let idx = rec
        .nodes
        .partition_point(|(tn, _)| *tn <= t)
        .saturating_sub(1)
        .min(rec.nodes.len() - 1);
    let (t0, y0) = rec.nodes[idx];
    if (t - t0).abs() < 1e-14 {
        return y0;
    }
    let params = Dopri5::new(1e-11, 1e-13, (t - t0).abs().max(1e-6), (t - t0).abs().max(1e-6));
    let rhs = |_: f64, s: &[f64; 4]| {
        let p = Vec2::new(s[0], s[1]);
        let w = Vec2::new(s[2], s[3]);
        let a = model.christoffel_raw(p).accel(w);
        [s[2], s[3], a.u, a.v]
    };
    match integrate_span(params, rhs, t0, [y0.p.u, y0.p.v, y0.w.u, y0.w.v], t) {
        Ok(s) => PhasePoint::new(Vec2::new(s[0], s[1]), Vec2::new(s[2], s[3])),
        Err(_) => y0,
    }
}

/// Transverse intersection of two records, Newton-refined on the exact flow.
fn refined_intersection(
    model: &SurfaceModel,
    a: &GeodesicRecord,
    b: &GeodesicRecord,
) -> Result<(Vec2, Vec2, Vec2)> {
    let index = SegmentIndex::new(&a.nodes, model);
    let hit = index.crossing(&b.nodes).ok_or(Error::NoIntersection)?;
    let (mut t1, mut t2) = (hit.record_tau, hit.probe_tau);
    let mut pa = record_point_at(model, a, t1);
    let mut pb = record_point_at(model, b, t2);
    for _ in 0..10 {
        let f = pa.p - pb.p;
        if f.norm() < 1e-13 * model.diameter() {
            break;
        }
        // Solve [wa | -wb] (dt1, dt2)^T = -f.
        let det = -pa.w.cross(pb.w);
        if det.abs() < 1e-14 {
            break;
        }
        let dt1 = (pb.w.v * f.u - pb.w.u * f.v) / det;
        let dt2 = (pa.w.v * f.u - pa.w.u * f.v) / det;
        t1 = (t1 + dt1).clamp(0.0, a.length);
        t2 = (t2 + dt2).clamp(0.0, b.length);
        pa = record_point_at(model, a, t1);
        pb = record_point_at(model, b, t2);
    }
    if (pa.p - pb.p).norm() > 1e-7 * model.diameter() {
        return Err(Error::NoIntersection);
    }
    let point = pa.p + (pb.p - pa.p).scale(0.5);
    Ok((point, pa.w, pb.w))
}

/// The transferred angle: endpoints of the two g1-geodesics through `y` with
/// directions v and R_theta v are joined under g2 (matched lifts); the
/// g2-geodesics meet at x'' with angle theta''.
pub fn theta_transfer(pair: &MetricPair, y: PhasePoint, theta: f64) -> Result<AngleSample> {
    pair.g1.check_unit(y.p, y.w)?;
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(Error::InvalidParameter("theta must lie in [0, pi]".into()));
    }
    // Degenerate fan: coinciding or opposite rays transfer exactly.
    if theta < ANGLE_TOL || theta > std::f64::consts::PI - ANGLE_TOL {
        return Ok(AngleSample {
            base: y.p,
            theta,
            theta_second: theta,
            x_second: y.p,
            valid: true,
        });
    }
    let opts = FlowOptions::for_model(&pair.g1);
    let rotated = PhasePoint::new(y.p, pair.g1.rotate(y.p, y.w, theta)?);
    let chord1 = match g1_chord(pair, y, &opts) {
        Ok(c) => c,
        Err(_) => return Ok(AngleSample::invalid(y, theta)),
    };
    let chord2 = match g1_chord(pair, rotated, &opts) {
        Ok(c) => c,
        Err(_) => return Ok(AngleSample::invalid(y, theta)),
    };
    let beta1 = match g2_matched_geodesic(pair, &chord1) {
        Ok(r) => r,
        Err(_) => return Ok(AngleSample::invalid(y, theta)),
    };
    let beta2 = match g2_matched_geodesic(pair, &chord2) {
        Ok(r) => r,
        Err(_) => return Ok(AngleSample::invalid(y, theta)),
    };
    let (x_second, w1, w2) = match refined_intersection(&pair.g2, &beta1, &beta2) {
        Ok(t) => t,
        Err(_) => return Ok(AngleSample::invalid(y, theta)),
    };
    let signed = pair.g2.signed_angle(x_second, w1, w2);
    let theta_second = signed.clamp(0.0, std::f64::consts::PI);
    Ok(AngleSample { base: y.p, theta, theta_second, x_second, valid: true })
}

/// Liouville sampling controls for the averaged diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct SamplingSpec {
    pub n_samples: usize,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        SamplingSpec { n_samples, seed }
    }
}

/// Phase-space samples distributed by the Liouville measure via the boundary
/// fan (weight = chord length, time-uniform along chords).
fn liouville_samples(model: &SurfaceModel, spec: &SamplingSpec) -> Vec<(PhasePoint, f64)> {
    use rand::Rng;
    let sampler = BoundarySampler::new(model);
    let horizon = model.default_horizon();
    let opts = FlowOptions::for_model(model);
    let mut rng = seeded_rng(spec.seed);
    let raw: Vec<(PhasePoint, f64)> = (0..spec.n_samples)
        .map(|_| {
            let (_, y) = sampler.sample_phase(&mut rng);
            (y, rng.gen::<f64>())
        })
        .collect();
    raw.par_iter()
        .map(|&(y, t_frac)| {
            match escape_opts(model, y, horizon, &opts) {
                Ok(res) => match res.status {
                    EscapeStatus::Exited(e) if !e.tangential && e.length > 0.0 => {
                        let t = t_frac * e.length;
                        match flow_step_opts(model, y, t, &opts) {
                            Ok(at) => (at, e.length),
                            Err(_) => (y, -horizon),
                        }
                    }
                    // Trapped or tangential entries carry the horizon weight
                    // and count as invalid mass.
                    _ => (y, -horizon),
                },
                Err(_) => (y, -horizon),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct AverageAngle {
    pub theta: f64,
    /// Liouville average of theta''.
    pub value: f64,
    /// Statistical standard error with the solver floor folded in.
    pub stderr: f64,
    /// Weight fraction of trapped rays and failed transfers.
    pub invalid_mass: f64,
    pub n_valid: usize,
}

/// The average angle Theta(theta) over phase space, by Liouville sampling.
pub fn average_angle(pair: &MetricPair, theta: f64, spec: &SamplingSpec) -> Result<AverageAngle> {
    let samples = liouville_samples(&pair.g1, spec);
    let evals: Vec<(f64, f64, bool)> = samples
        .par_iter()
        .map(|&(y, weight)| {
            if weight <= 0.0 {
                return (weight.abs(), f64::NAN, false);
            }
            match theta_transfer(pair, y, theta) {
                Ok(s) if s.valid => (weight, s.theta_second, true),
                _ => (weight, f64::NAN, false),
            }
        })
        .collect();
    let total_w: f64 = evals.iter().map(|e| e.0).sum();
    let valid: Vec<(f64, f64)> =
        evals.iter().filter(|e| e.2).map(|e| (e.0, e.1)).collect();
    let valid_w: f64 = valid.iter().map(|e| e.0).sum();
    if valid.is_empty() {
        return Err(Error::SolverDiverged("no valid transfer samples".into()));
    }
    let mean = valid.iter().map(|(w, x)| w * x).sum::<f64>() / valid_w;
    let var_num: f64 = valid.iter().map(|(w, x)| w * w * (x - mean) * (x - mean)).sum();
    let stderr_stat = var_num.sqrt() / valid_w;
    Ok(AverageAngle {
        theta,
        value: mean,
        stderr: (stderr_stat * stderr_stat + ANGLE_TOL * ANGLE_TOL).sqrt(),
        invalid_mass: 1.0 - valid_w / total_w,
        n_valid: valid.len(),
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct SymmetryReport {
    pub max_residual: f64,
    pub n_valid: usize,
    pub n_invalid: usize,
}

/// Max residual of theta''(x, v, theta) + theta''(x, R_theta v, pi - theta)
/// = pi over Liouville samples; the identity holds for every pair.
pub fn symmetry_check(pair: &MetricPair, spec: &SamplingSpec) -> Result<SymmetryReport> {
    use rand::Rng;
    let samples = liouville_samples(&pair.g1, spec);
    let mut rng = seeded_rng(spec.seed ^ 0x51ca_77ee);
    let thetas: Vec<f64> = (0..samples.len())
        .map(|_| 0.05 + (std::f64::consts::PI - 0.1) * rng.gen::<f64>())
        .collect();
    let evals: Vec<Option<f64>> = samples
        .par_iter()
        .zip(thetas.par_iter())
        .map(|(&(y, weight), &theta)| {
            if weight <= 0.0 {
                return None;
            }
            let a = theta_transfer(pair, y, theta).ok()?;
            let rot = pair.g1.rotate(y.p, y.w, theta).ok()?;
            let b = theta_transfer(
                pair,
                PhasePoint::new(y.p, rot),
                std::f64::consts::PI - theta,
            )
            .ok()?;
            (a.valid && b.valid)
                .then(|| (a.theta_second + b.theta_second - std::f64::consts::PI).abs())
        })
        .collect();
    let residuals: Vec<f64> = evals.iter().flatten().copied().collect();
    if residuals.is_empty() {
        return Err(Error::SolverDiverged("no valid symmetry samples".into()));
    }
    Ok(SymmetryReport {
        max_residual: residuals.iter().cloned().fold(0.0, f64::max),
        n_valid: residuals.len(),
        n_invalid: evals.len() - residuals.len(),
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct SubadditivityReport {
    pub min_residual: f64,
    pub n_valid: usize,
    pub n_invalid: usize,
}

/// Min residual of theta''(theta1 + theta2) - theta''(theta1) -
/// theta''(R_theta1; theta2) over samples; nonnegative when g2 is negatively
/// curved, with equality exactly at concurrent triples.
pub fn subadditivity_check(pair: &MetricPair, spec: &SamplingSpec) -> Result<SubadditivityReport> {
    // Curvature sign gate on g2.
    let worst = sample_max_curvature(&pair.g2);
    if worst >= 0.0 {
        return Err(Error::CurvatureSignViolation(worst));
    }
    use rand::Rng;
    let samples = liouville_samples(&pair.g1, spec);
    let mut rng = seeded_rng(spec.seed ^ 0x5ab5_ab5a);
    let angles: Vec<(f64, f64)> = (0..samples.len())
        .map(|_| {
            let t1 = 0.05 + 0.9 * rng.gen::<f64>();
            let t2 = 0.05 + (std::f64::consts::PI - t1 - 0.1) * rng.gen::<f64>();
            (t1, t2)
        })
        .collect();
    let evals: Vec<Option<f64>> = samples
        .par_iter()
        .zip(angles.par_iter())
        .map(|(&(y, weight), &(t1, t2))| {
            if weight <= 0.0 {
                return None;
            }
            let whole = theta_transfer(pair, y, t1 + t2).ok()?;
            let part1 = theta_transfer(pair, y, t1).ok()?;
            let rot = pair.g1.rotate(y.p, y.w, t1).ok()?;
            let part2 = theta_transfer(pair, PhasePoint::new(y.p, rot), t2).ok()?;
            (whole.valid && part1.valid && part2.valid)
                .then(|| whole.theta_second - part1.theta_second - part2.theta_second)
        })
        .collect();
    let residuals: Vec<f64> = evals.iter().flatten().copied().collect();
    if residuals.is_empty() {
        return Err(Error::SolverDiverged("no valid subadditivity samples".into()));
    }
    Ok(SubadditivityReport {
        min_residual: residuals.iter().cloned().fold(f64::INFINITY, f64::min),
        n_valid: residuals.len(),
        n_invalid: evals.len() - residuals.len(),
    })
}

fn sample_max_curvature(model: &SurfaceModel) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    match model.chart {
        Chart::Disk { radius } => {
            for i in 0..24 {
                for j in 0..12 {
                    let r = radius * (i as f64 + 0.5) / 24.0;
                    let a = std::f64::consts::TAU * j as f64 / 12.0;
                    let p = Vec2::new(r * a.cos(), r * a.sin());
                    worst = worst.max(model.gauss_curvature_raw(p));
                }
            }
        }
        Chart::Strip { v_min, v_max, period } => {
            for i in 0..24 {
                for j in 0..12 {
                    let u = period * (i as f64 + 0.5) / 24.0;
                    let v = v_min + (v_max - v_min) * (j as f64 + 0.5) / 12.0;
                    worst = worst.max(model.gauss_curvature_raw(Vec2::new(u, v)));
                }
            }
        }
    }
    worst
}

/// Named convex test functions for the Jensen diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum ConvexCatalog {
    Square,
    Exp,
    NegSin,
    Linear,
}

impl ConvexCatalog {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "square" | "x2" => Some(ConvexCatalog::Square),
            "exp" => Some(ConvexCatalog::Exp),
            "neg_sin" | "negsin" => Some(ConvexCatalog::NegSin),
            "linear" => Some(ConvexCatalog::Linear),
            _ => None,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ConvexCatalog::Square => x * x,
            ConvexCatalog::Exp => x.exp(),
            ConvexCatalog::NegSin => -x.sin(),
            ConvexCatalog::Linear => x,
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct JensenReport {
    pub theta: f64,
    /// E[f(theta'')] - f(Theta(theta)), nonnegative for convex f.
    pub gap: f64,
    pub stderr: f64,
    pub mean_value: f64,
    pub invalid_mass: f64,
}

/// Jensen gap for a convex function of the transferred angle.
pub fn jensen_gap(
    pair: &MetricPair,
    theta: f64,
    f: ConvexCatalog,
    spec: &SamplingSpec,
) -> Result<JensenReport> {
    let samples = liouville_samples(&pair.g1, spec);
    let evals: Vec<(f64, f64, bool)> = samples
        .par_iter()
        .map(|&(y, weight)| {
            if weight <= 0.0 {
                return (weight.abs(), f64::NAN, false);
            }
            match theta_transfer(pair, y, theta) {
                Ok(s) if s.valid => (weight, s.theta_second, true),
                _ => (weight, f64::NAN, false),
            }
        })
        .collect();
    let total_w: f64 = evals.iter().map(|e| e.0).sum();
    let valid: Vec<(f64, f64)> = evals.iter().filter(|e| e.2).map(|e| (e.0, e.1)).collect();
    if valid.is_empty() {
        return Err(Error::SolverDiverged("no valid Jensen samples".into()));
    }
    let valid_w: f64 = valid.iter().map(|e| e.0).sum();
    let mean_angle = valid.iter().map(|(w, x)| w * x).sum::<f64>() / valid_w;
    let mean_f = valid.iter().map(|(w, x)| w * f.eval(*x)).sum::<f64>() / valid_w;
    let var_num: f64 = valid
        .iter()
        .map(|(w, x)| {
            let d = f.eval(*x) - mean_f;
            w * w * d * d
        })
        .sum();
    let stderr = (var_num.sqrt() / valid_w).max(1e-9);
    Ok(JensenReport {
        theta,
        gap: mean_f - f.eval(mean_angle),
        stderr,
        mean_value: mean_angle,
        invalid_mass: 1.0 - valid_w / total_w,
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct PsiEstimate {
    pub point: Vec2,
    /// Max pairwise distance between probe intersections; small spread
    /// certifies concurrence.
    pub spread: f64,
    pub n_probes: usize,
}

/// Reconstruct the point map from concurrent geodesics: probe g1-geodesics
/// through x are transferred to g2 and their common intersection estimated by
/// least squares.
pub fn psi_reconstruct(pair: &MetricPair, x: Vec2, n_probes: usize) -> Result<PsiEstimate> {
    if n_probes < 3 {
        return Err(Error::InvalidParameter("need at least 3 probe directions".into()));
    }
    let opts = FlowOptions::for_model(&pair.g1);
    let v0 = pair.g1.unit(x, Vec2::new(1.0, 0.0));
    let mut records = Vec::with_capacity(n_probes);
    for k in 0..n_probes {
        let ang = std::f64::consts::PI * k as f64 / n_probes as f64;
        let v = pair.g1.rotate(x, v0, ang)?;
        let chord = g1_chord(pair, PhasePoint::new(x, v), &opts).map_err(|_| Error::ProbeTrapped)?;
        records.push(g2_matched_geodesic(pair, &chord)?);
    }
    let mut crossings = Vec::new();
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            if let Ok((p, _, _)) = refined_intersection(&pair.g2, &records[i], &records[j]) {
                crossings.push(p);
            }
        }
    }
    if crossings.len() < 2 {
        return Err(Error::NoIntersection);
    }
    let mut spread = 0.0_f64;
    for i in 0..crossings.len() {
        for j in i + 1..crossings.len() {
            spread = spread.max((crossings[i] - crossings[j]).norm());
        }
    }
    let mut point = Vec2::ZERO;
    for c in &crossings {
        point = point + *c;
    }
    point = point.scale(1.0 / crossings.len() as f64);
    // Gauss-Newton polish on the sum of squared curve distances, with each
    // record linearized at its nearest sample.
    for _ in 0..3 {
        let mut a11 = 0.0;
        let mut a12 = 0.0;
        let mut a22 = 0.0;
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for rec in &records {
            let t = nearest_on_record(rec, point);
            let at = record_point_at(&pair.g2, rec, t);
            let n = Vec2::new(-at.w.v, at.w.u);
            let r = n.dot(point - at.p);
            a11 += n.u * n.u;
            a12 += n.u * n.v;
            a22 += n.v * n.v;
            b1 += n.u * r;
            b2 += n.v * r;
        }
        let det = a11 * a22 - a12 * a12;
        if det.abs() < 1e-14 {
            break;
        }
        let du = (a22 * b1 - a12 * b2) / det;
        let dv = (a11 * b2 - a12 * b1) / det;
        point = point - Vec2::new(du, dv);
    }
    Ok(PsiEstimate { point, spread, n_probes })
}

/// Arclength of the polyline point nearest to p.
fn nearest_on_record(rec: &GeodesicRecord, p: Vec2) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for pair in rec.nodes.windows(2) {
        let (ta, a) = (pair[0].0, pair[0].1.p);
        let (tb, b) = (pair[1].0, pair[1].1.p);
        let d = b - a;
        let len2 = d.norm_sq().max(1e-300);
        let t = ((p - a).dot(d) / len2).clamp(0.0, 1.0);
        let dist = (p - (a + d.scale(t))).norm();
        if dist < best.0 {
            best = (dist, ta + t * (tb - ta));
        }
    }
    best.1
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct CertificateReport {
    /// max |d_{g2}(psi x, psi x') - d_{g1}(x, x')| over the sample pairs.
    pub max_distance_defect: f64,
    /// max |psi(x) - x| over near-boundary fan points.
    pub max_boundary_drift: f64,
    pub max_spread: f64,
    pub n_pairs: usize,
}

/// Distance-preservation certificate for the reconstructed point map.
pub fn isometry_certificate(
    pair: &MetricPair,
    interior_pairs: &[(Vec2, Vec2)],
    n_boundary: usize,
) -> Result<CertificateReport> {
    let defects: Vec<(f64, f64)> = interior_pairs
        .par_iter()
        .map(|&(x, x2)| -> Result<(f64, f64)> {
            let px = psi_reconstruct(pair, x, 3)?;
            let px2 = psi_reconstruct(pair, x2, 3)?;
            let d1 = lens::interior_distance(&pair.g1, x, x2, HomotopyClass(0))?.length;
            let d2 =
                lens::interior_distance(&pair.g2, px.point, px2.point, HomotopyClass(0))?.length;
            Ok(((d1 - d2).abs(), px.spread.max(px2.spread)))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_distance_defect = defects.iter().map(|d| d.0).fold(0.0, f64::max);
    let max_spread = defects.iter().map(|d| d.1).fold(0.0, f64::max);

    // Near-boundary fans: the reconstructed map must hold the boundary.
    let period = pair.g1.chart.boundary_param_period();
    let delta = 1e-3 * pair.g1.diameter();
    let drifts: Vec<f64> = (0..n_boundary)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let comp = i % pair.g1.chart.num_boundary_components();
            let s = period * (i as f64 + 0.31) / n_boundary as f64;
            let bd = pair.g1.boundary_data(BoundaryPoint::new(comp, s));
            let x = bd.point + bd.normal.scale(delta);
            let p = psi_reconstruct(pair, x, 3)?;
            Ok((p.point - x).norm())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CertificateReport {
        max_distance_defect,
        max_boundary_drift: drifts.iter().cloned().fold(0.0, f64::max),
        max_spread,
        n_pairs: interior_pairs.len(),
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct CrokeReport {
    /// Areas from direct quadrature.
    pub vol1: f64,
    pub vol2: f64,
    /// Areas from the lens side of the volume identity.
    pub vol1_lens: f64,
    pub vol2_lens: f64,
    pub int_exp_omega: f64,
    /// sqrt(vol1 vol2) - int e^omega dvol1; zero iff omega vanishes.
    pub holder_defect: f64,
    /// Marked-distance discrepancy over a few sampled boundary pairs.
    pub max_distance_defect: f64,
}

/// The conformal volume chain: equal lens data forces equal volumes, the
/// intermediate integral of e^omega, and a vanishing Hoelder defect; a
/// nonzero bump breaks the chain and shows up in the marked distances.
pub fn croke_conformal_check(pair: &MetricPair, grid: &FanGrid) -> Result<CrokeReport> {
    let PairRelation::Conformal(bump) = &pair.relation else {
        return Err(Error::InvalidParameter(
            "croke chain requires a conformal pair".into(),
        ));
    };
    let two_pi = std::f64::consts::TAU;
    let vol1 = area_quadrature(&pair.g1, 192, 384);
    let vol2 = area_quadrature(&pair.g2, 192, 384);
    let lens1 = santalo_integrate(&pair.g1, &|_, _| 1.0, grid)?.value / two_pi;
    let lens2 = santalo_integrate(&pair.g2, &|_, _| 1.0, grid)?.value / two_pi;
    let int_exp_omega = weighted_area(&pair.g1, &|p| bump.omega(p).exp());
    let holder_defect = (vol1 * vol2).sqrt() - int_exp_omega;
    let distance = lens::lens_vs_distance_check(&pair.g1, &pair.g2, 6, grid.n_max as u64 + 17)?;
    Ok(CrokeReport {
        vol1,
        vol2,
        vol1_lens: lens1,
        vol2_lens: lens2,
        int_exp_omega,
        holder_defect,
        max_distance_defect: distance.max_distance_defect,
    })
}

fn weighted_area(model: &SurfaceModel, weight: &dyn Fn(Vec2) -> f64) -> f64 {
    use crate::quad::{gauss_legendre_on, pairwise_sum};
    let (n_r, n_a) = (192, 384);
    match model.chart {
        Chart::Disk { radius } => {
            let rr = gauss_legendre_on(n_r, 0.0, radius);
            let mut terms = Vec::with_capacity(n_r * n_a);
            for &(r, wr) in &rr {
                for i in 0..n_a {
                    let phi = std::f64::consts::TAU * (i as f64 + 0.5) / n_a as f64;
                    let p = Vec2::new(r * phi.cos(), r * phi.sin());
                    let det = model.metric.at(p).det().max(0.0);
                    terms.push(
                        wr * (std::f64::consts::TAU / n_a as f64) * det.sqrt() * r * weight(p),
                    );
                }
            }
            pairwise_sum(&terms)
        }
        Chart::Strip { v_min, v_max, period } => {
            let vv = gauss_legendre_on(n_r, v_min, v_max);
            let mut terms = Vec::with_capacity(n_r * n_a);
            for &(v, wv) in &vv {
                for i in 0..n_a {
                    let u = period * (i as f64 + 0.5) / n_a as f64;
                    let p = Vec2::new(u, v);
                    let det = model.metric.at(p).det().max(0.0);
                    terms.push(wv * (period / n_a as f64) * det.sqrt() * weight(p));
                }
            }
            pairwise_sum(&terms)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::PI;

    fn base() -> SurfaceModel {
        catalog::poincare_disk(0.5)
    }

    fn bump_spec() -> BumpSpec {
        BumpSpec { amplitude: 0.1, center: Vec2::new(0.15, 0.0), width: 0.3 }
    }

    fn phase(m: &SurfaceModel, p: Vec2, dir: Vec2) -> PhasePoint {
        PhasePoint::new(p, m.unit(p, dir))
    }

    #[test]
    fn identical_pair_transfers_exactly() {
        let pair = MetricPair::identical(&base());
        let y = phase(&pair.g1, Vec2::new(0.1, -0.05), Vec2::new(1.0, 0.4));
        for &theta in &[0.4, 1.2, 2.6] {
            let s = theta_transfer(&pair, y, theta).unwrap();
            assert!(s.valid);
            assert_abs_diff_eq!(s.theta_second, theta, epsilon = 1e-6);
            assert_abs_diff_eq!((s.x_second - y.p).norm(), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn endpoint_angles_transfer_trivially() {
        let pair = MetricPair::conformal(&base(), bump_spec()).unwrap();
        let y = phase(&pair.g1, Vec2::new(0.05, 0.1), Vec2::new(0.2, 1.0));
        let a = theta_transfer(&pair, y, 0.0).unwrap();
        let b = theta_transfer(&pair, y, PI).unwrap();
        assert_eq!(a.theta_second, 0.0);
        assert_eq!(b.theta_second, PI);
    }

    #[test]
    fn pullback_pair_maps_to_the_diffeo_image() {
        let model = base();
        let psi = catalog::twist(0.5, 0.3);
        let pair = MetricPair::pullback(&model, &psi).unwrap();
        let x = Vec2::new(0.12, -0.08);
        let y = phase(&pair.g1, x, Vec2::new(0.9, 0.3));
        let s = theta_transfer(&pair, y, 1.1).unwrap();
        assert!(s.valid);
        // x'' is the diffeo image of x and the angle is preserved.
        let expected = psi.apply(x);
        assert_abs_diff_eq!((s.x_second - expected).norm(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.theta_second, 1.1, epsilon = 1e-5);
    }

    #[test]
    fn symmetry_identity_holds_for_conformal_pair() {
        let pair = MetricPair::conformal(&base(), bump_spec()).unwrap();
        let rep = symmetry_check(&pair, &SamplingSpec::new(40, 9)).unwrap();
        assert!(rep.max_residual < 5e-5, "residual {}", rep.max_residual);
        assert!(rep.n_valid > 20);
    }

    #[test]
    fn subadditivity_nonnegative_for_negatively_curved_g2() {
        // Amplitude low enough to keep the bumped curvature negative.
        let spec = BumpSpec { amplitude: 0.01, center: Vec2::new(0.15, 0.0), width: 0.3 };
        let pair = MetricPair::conformal(&base(), spec).unwrap();
        let rep = subadditivity_check(&pair, &SamplingSpec::new(40, 21)).unwrap();
        assert!(rep.min_residual > -1e-4, "min residual {}", rep.min_residual);
    }

    #[test]
    fn subadditivity_rejects_positive_curvature() {
        let flat = catalog::euclidean_disk(1.0);
        let pair = MetricPair::identical(&flat);
        assert!(matches!(
            subadditivity_check(&pair, &SamplingSpec::new(4, 1)),
            Err(Error::CurvatureSignViolation(_))
        ));
    }

    #[test]
    fn average_angle_identity_pair() {
        let pair = MetricPair::identical(&base());
        let rep = average_angle(&pair, 1.0, &SamplingSpec::new(300, 5)).unwrap();
        assert!((rep.value - 1.0).abs() <= 2.0 * rep.stderr, "Theta {} +- {}", rep.value, rep.stderr);
        assert!(rep.invalid_mass < 0.01);
    }

    #[test]
    fn jensen_gap_zero_for_identity_and_linear() {
        let pair = MetricPair::identical(&base());
        let spec = SamplingSpec::new(200, 3);
        let sq = jensen_gap(&pair, 1.3, ConvexCatalog::Square, &spec).unwrap();
        assert!(sq.gap.abs() <= 2.0 * sq.stderr + 1e-8);
        let bump_pair = MetricPair::conformal(&base(), bump_spec()).unwrap();
        let lin = jensen_gap(&bump_pair, 1.3, ConvexCatalog::Linear, &spec).unwrap();
        assert_abs_diff_eq!(lin.gap, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psi_identity_and_pullback() {
        let pair = MetricPair::identical(&base());
        let x = Vec2::new(0.1, 0.07);
        let est = psi_reconstruct(&pair, x, 3).unwrap();
        assert!(est.spread < 1e-6, "spread {}", est.spread);
        assert_abs_diff_eq!((est.point - x).norm(), 0.0, epsilon = 1e-6);

        let psi = catalog::twist(0.5, 0.3);
        let pb = MetricPair::pullback(&base(), &psi).unwrap();
        let est = psi_reconstruct(&pb, x, 3).unwrap();
        assert!(est.spread < 1e-5, "spread {}", est.spread);
        assert_abs_diff_eq!((est.point - psi.apply(x)).norm(), 0.0, epsilon = 1e-4);
    }

    #[test]
    fn psi_spread_positive_inside_bump() {
        let pair = MetricPair::conformal(&base(), bump_spec()).unwrap();
        let est = psi_reconstruct(&pair, Vec2::new(0.15, 0.02), 3).unwrap();
        assert!(est.spread > 1e-5, "spread {}", est.spread);
    }

    #[test]
    fn croke_chain_identity_conformal_factor() {
        // Zero-amplitude bump: all chain quantities coincide.
        let spec = BumpSpec { amplitude: 0.0, center: Vec2::new(0.1, 0.0), width: 0.2 };
        let pair = MetricPair::conformal(&base(), spec).unwrap();
        let rep = croke_conformal_check(&pair, &FanGrid::coarse(96, 96)).unwrap();
        assert_relative_eq!(rep.vol1, rep.vol2, epsilon = 1e-10);
        assert_relative_eq!(rep.vol1, rep.int_exp_omega, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.holder_defect, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.max_distance_defect, 0.0, epsilon = 1e-8);
        assert_relative_eq!(rep.vol1_lens, rep.vol1, max_relative = 1e-3);
    }

    #[test]
    fn croke_chain_detects_the_bump() {
        let pair = MetricPair::conformal(&base(), bump_spec()).unwrap();
        let rep = croke_conformal_check(&pair, &FanGrid::coarse(96, 96)).unwrap();
        // Conformal factor > 1 inflates the second volume.
        assert!(rep.vol2 > rep.vol1);
        assert!(rep.holder_defect > 0.0);
        assert!(rep.max_distance_defect > 1e-4);

        // Sign-flipped bump gives the mirrored report.
        let neg = BumpSpec { amplitude: -0.1, ..bump_spec() };
        let pair_neg = MetricPair::conformal(&base(), neg).unwrap();
        let rep_neg = croke_conformal_check(&pair_neg, &FanGrid::coarse(96, 96)).unwrap();
        assert!(rep_neg.vol2 < rep_neg.vol1);
        assert!(rep_neg.holder_defect > 0.0);
    }
}

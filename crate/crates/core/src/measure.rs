//! Integral geometry on the boundary fan: the incoming-boundary measure with
//! weight |g(v, nu)|, Santalo quadrature and the volume identity, the induced
//! measure on the space of geodesics (endpoint pairs on the cover boundary),
//! intersection numbers, the fan-chart density check, and the four-corner /
//! dyadic reconstruction from marked distances alone.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{boundary_phase, escape_opts, escape_with_integral, EscapeStatus, FlowOptions};
use crate::geom::Vec2;
use crate::lens::{self, GeodesicRecord, HomotopyClass};
use crate::metric::{BoundaryPoint, Chart, SurfaceModel};
use crate::quad::{gauss_legendre_on, pairwise_sum};

/// Quadrature sizes and horizons for the measure operations.
#[derive(Clone, Copy, Debug)]
pub struct FanGrid {
    /// Boundary nodes per component (or per unit interval on covers).
    pub n_s: usize,
    /// Angle nodes for smooth integrands (Gauss-Legendre in cos theta).
    pub n_theta: usize,
    /// Coarse angle scan used to locate indicator transitions.
    pub n_theta_scan: usize,
    /// Trapping horizon; None uses the model default.
    pub t_max: Option<f64>,
    /// Winding truncation for crossing regions on annuli.
    pub n_max: i64,
}

impl Default for FanGrid {
    fn default() -> Self {
        FanGrid { n_s: 256, n_theta: 256, n_theta_scan: 48, t_max: None, n_max: 5 }
    }
}

impl FanGrid {
    pub fn coarse(n_s: usize, n_theta: usize) -> Self {
        FanGrid { n_s, n_theta, n_theta_scan: n_theta.min(48), ..Default::default() }
    }

    fn horizon(&self, model: &SurfaceModel) -> f64 {
        self.t_max.unwrap_or_else(|| model.default_horizon())
    }
}

/// Midpoint boundary nodes with sigma(s) ds weights, one period per component.
fn boundary_nodes(model: &SurfaceModel, n_s: usize) -> Vec<(BoundaryPoint, f64)> {
    let period = model.chart.boundary_param_period();
    let mut nodes = Vec::new();
    for comp in 0..model.chart.num_boundary_components() {
        let ds = period / n_s as f64;
        for i in 0..n_s {
            let s = ds * (i as f64 + 0.5);
            let bp = BoundaryPoint::new(comp, s);
            let w = model.boundary_data(bp).speed * ds;
            nodes.push((bp, w));
        }
    }
    nodes
}

/// Gauss-Legendre angle rule in xi = cos theta: integrates
/// f |-> int_0^pi f(theta) sin(theta) d theta exactly in the node limit.
fn theta_rule(n: usize) -> Vec<(f64, f64)> {
    gauss_legendre_on(n, -1.0, 1.0)
        .into_iter()
        .map(|(xi, w)| (xi.clamp(-1.0, 1.0).acos(), w))
        .collect()
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct SantaloReport {
    pub value: f64,
    /// Weight fraction of trapped or tangential nodes, excluded from the sum.
    pub masked_fraction: f64,
}

/// Santalo quadrature: integral over the unit tangent bundle of `f`, computed
/// as a boundary-fan double integral of the orbit time-integrals.
pub fn santalo_integrate(
    model: &SurfaceModel,
    f: &(dyn Fn(Vec2, Vec2) -> f64 + Sync),
    grid: &FanGrid,
) -> Result<SantaloReport> {
    let s_nodes = boundary_nodes(model, grid.n_s);
    let th_nodes = theta_rule(grid.n_theta);
    let horizon = grid.horizon(model);
    let opts = FlowOptions::for_model(model);

    let rows: Vec<(Vec<f64>, f64, f64)> = s_nodes
        .par_iter()
        .map(|&(bp, ws)| {
            let mut terms = Vec::with_capacity(th_nodes.len());
            let mut mass = 0.0;
            let mut masked = 0.0;
            for &(theta, wt) in &th_nodes {
                let weight = ws * wt;
                mass += weight;
                let y = boundary_phase(model, bp, theta);
                match escape_with_integral(model, y, horizon, &opts, f) {
                    Ok((res, integral)) => match res.status {
                        EscapeStatus::Exited(e) if !e.tangential => {
                            terms.push(weight * integral)
                        }
                        _ => masked += weight,
                    },
                    Err(_) => masked += weight,
                }
            }
            (terms, mass, masked)
        })
        .collect();

    let mut all_terms = Vec::new();
    let mut total_mass = 0.0;
    let mut total_masked = 0.0;
    for (terms, mass, masked) in rows {
        all_terms.extend(terms);
        total_mass += mass;
        total_masked += masked;
    }
    Ok(SantaloReport {
        value: pairwise_sum(&all_terms),
        masked_fraction: total_masked / total_mass,
    })
}

/// Riemannian area of the quotient surface by direct chart quadrature.
pub fn area_quadrature(model: &SurfaceModel, n_radial: usize, n_angular: usize) -> f64 {
    match model.chart {
        Chart::Disk { radius } => {
            let rr = gauss_legendre_on(n_radial, 0.0, radius);
            let mut terms = Vec::with_capacity(n_radial * n_angular);
            for &(r, wr) in &rr {
                for i in 0..n_angular {
                    let phi = std::f64::consts::TAU * (i as f64 + 0.5) / n_angular as f64;
                    let p = Vec2::new(r * phi.cos(), r * phi.sin());
                    let det = model.metric.at(p).det().max(0.0);
                    terms.push(wr * (std::f64::consts::TAU / n_angular as f64) * det.sqrt() * r);
                }
            }
            pairwise_sum(&terms)
        }
        Chart::Strip { v_min, v_max, period } => {
            let vv = gauss_legendre_on(n_radial, v_min, v_max);
            let mut terms = Vec::with_capacity(n_radial * n_angular);
            for &(v, wv) in &vv {
                for i in 0..n_angular {
                    let u = period * (i as f64 + 0.5) / n_angular as f64;
                    let det = model.metric.at(Vec2::new(u, v)).det().max(0.0);
                    terms.push(wv * (period / n_angular as f64) * det.sqrt());
                }
            }
            pairwise_sum(&terms)
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct VolumeReport {
    /// Vol(SM) from the lens side: the boundary-fan integral of escape times.
    pub lens_value: f64,
    /// Vol(SM) = 2 pi Area from direct chart quadrature.
    pub area_value: f64,
    pub defect: f64,
    pub masked_fraction: f64,
}

/// Volume identity: the escape-time integral against the boundary measure
/// equals the Riemannian volume of the unit tangent bundle.
pub fn volume_via_lens(model: &SurfaceModel, grid: &FanGrid) -> Result<VolumeReport> {
    let lens = santalo_integrate(model, &|_, _| 1.0, grid)?;
    let area = area_quadrature(model, grid.n_s.min(192), 2 * grid.n_s.min(192));
    let vol_sm = std::f64::consts::TAU * area;
    Ok(VolumeReport {
        lens_value: lens.value,
        area_value: vol_sm,
        defect: (lens.value - vol_sm).abs(),
        masked_fraction: lens.masked_fraction,
    })
}

/// Interval of boundary parameter on one component. Disk parameters are
/// angles (the interval may wrap past 2 pi); strip parameters are lifted
/// cover coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundaryInterval {
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
}

impl BoundaryInterval {
    pub fn new(component: usize, lo: f64, hi: f64) -> Self {
        BoundaryInterval { component, lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn contains(&self, model: &SurfaceModel, bp: &BoundaryPoint) -> bool {
        if bp.component != self.component {
            return false;
        }
        match model.chart {
            Chart::Disk { .. } => {
                let span = self.hi - self.lo;
                (bp.s - self.lo).rem_euclid(std::f64::consts::TAU) <= span
            }
            Chart::Strip { .. } => bp.s >= self.lo && bp.s <= self.hi,
        }
    }
}

/// A measurable region of the space of geodesics (endpoint pairs on the
/// cover boundary, ordered).
#[derive(Clone, Debug)]
pub enum MeasureRegion {
    /// Ordered pairs entering in `entry` and exiting in `exit`.
    EndpointIntervals { entry: Vec<BoundaryInterval>, exit: Vec<BoundaryInterval> },
    /// Geodesics crossing the given solved geodesic with positive sign.
    Crossing { record: GeodesicRecord },
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct EtaReport {
    pub value: f64,
    pub masked_fraction: f64,
    /// Outermost winding-window contribution on annuli (crossing regions).
    pub truncation_residual: Option<f64>,
}

use crate::crossing::SegmentIndex;

/// Entry windows (component, interval, node count) for a region.
fn entry_windows(
    model: &SurfaceModel,
    region: &MeasureRegion,
    grid: &FanGrid,
) -> Vec<(BoundaryInterval, usize)> {
    let period = model.chart.boundary_param_period();
    match region {
        MeasureRegion::EndpointIntervals { entry, .. } => entry
            .iter()
            .map(|iv| {
                let n = ((grid.n_s as f64 * iv.width() / period).ceil() as usize).clamp(8, 4096);
                (*iv, n)
            })
            .collect(),
        MeasureRegion::Crossing { record } => match model.chart {
            Chart::Disk { .. } => {
                // The angle-window profile has root-type kinks where the
                // record meets the boundary; splitting the entry rule there
                // keeps the quadrature clean even for short chords.
                let mut cuts: Vec<f64> = record
                    .start_boundary
                    .iter()
                    .chain(record.end_boundary.iter())
                    .map(|bp| bp.s.rem_euclid(period))
                    .collect();
                cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
                if cuts.is_empty() {
                    cuts.push(0.0);
                }
                let mut windows = Vec::new();
                for (k, &lo) in cuts.iter().enumerate() {
                    let hi = if k + 1 < cuts.len() { cuts[k + 1] } else { cuts[0] + period };
                    if hi - lo < 1e-12 {
                        continue;
                    }
                    let n = ((grid.n_s as f64 * (hi - lo) / period).ceil() as usize)
                        .clamp(48, 4096);
                    windows.push((BoundaryInterval::new(0, lo, hi), n));
                }
                windows
            }
            Chart::Strip { period, .. } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (_, y) in &record.nodes {
                    lo = lo.min(y.p.u);
                    hi = hi.max(y.p.u);
                }
                let lo = lo - grid.n_max as f64 * period;
                let hi = hi + grid.n_max as f64 * period;
                let mut windows = Vec::new();
                for c in 0..model.chart.num_boundary_components() {
                    // Strip boundary params: bottom s = u, top s = -u.
                    let (a, b) = if c == 0 { (lo, hi) } else { (-hi, -lo) };
                    // Split at the record's boundary endpoints, where the
                    // angle-window profile kinks.
                    let mut cuts = vec![a];
                    for bp in record.start_boundary.iter().chain(record.end_boundary.iter()) {
                        if bp.component == c && bp.s > a + 1e-12 && bp.s < b - 1e-12 {
                            cuts.push(bp.s);
                        }
                    }
                    cuts.push(b);
                    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    for pair in cuts.windows(2) {
                        let (wa, wb) = (pair[0], pair[1]);
                        if wb - wa < 1e-12 {
                            continue;
                        }
                        let n = ((grid.n_s as f64 * (wb - wa) / period).ceil() as usize)
                            .clamp(32, 65_536);
                        windows.push((BoundaryInterval::new(c, wa, wb), n));
                    }
                }
                windows
            }
        },
    }
}

/// Measure of a region of geodesic space by boundary-fan quadrature: for each
/// entry node the angle set hitting the region is resolved to intervals by
/// bisection, and sin(theta) is integrated exactly over them.
pub fn eta_measure(
    model: &SurfaceModel,
    region: &MeasureRegion,
    grid: &FanGrid,
) -> Result<EtaReport> {
    let horizon = grid.horizon(model);
    let opts = match region {
        MeasureRegion::Crossing { .. } => {
            FlowOptions::for_model(model).dense(0.04 * model.diameter())
        }
        MeasureRegion::EndpointIntervals { .. } => FlowOptions::for_model(model),
    };
    let index = match region {
        MeasureRegion::Crossing { record } => Some(SegmentIndex::new(&record.nodes, model)),
        MeasureRegion::EndpointIntervals { .. } => None,
    };

    // Membership of the geodesic launched at (bp, theta).
    enum Probe {
        Member,
        Outside,
        Masked,
    }
    let probe = |bp: BoundaryPoint, theta: f64| -> Probe {
        let y = boundary_phase(model, bp, theta);
        match escape_opts(model, y, horizon, &opts) {
            Ok(res) => match res.status {
                EscapeStatus::Exited(e) if !e.tangential => match region {
                    MeasureRegion::EndpointIntervals { exit, .. } => {
                        if exit.iter().any(|iv| iv.contains(model, &e.boundary)) {
                            Probe::Member
                        } else {
                            Probe::Outside
                        }
                    }
                    MeasureRegion::Crossing { .. } => {
                        let traj = res.trajectory.as_ref().expect("dense escape records nodes");
                        match index.as_ref().unwrap().positive_crossing(&traj.nodes) {
                            Some(_) => Probe::Member,
                            None => Probe::Outside,
                        }
                    }
                },
                EscapeStatus::Exited(_) => Probe::Masked,
                EscapeStatus::Trapped { .. } => Probe::Masked,
            },
            Err(_) => Probe::Masked,
        }
    };

    let windows = entry_windows(model, region, grid);
    let mut node_jobs: Vec<(BoundaryPoint, f64, bool)> = Vec::new();
    for (iv, n) in &windows {
        let rule = gauss_legendre_on(*n, iv.lo, iv.hi);
        let period = model.chart.boundary_param_period();
        for (s, w) in rule {
            let bp = BoundaryPoint::new(iv.component, s);
            let sigma = model.boundary_data(bp).speed;
            // Mark nodes in the outermost winding windows for the truncation
            // residual report.
            let outer = matches!(region, MeasureRegion::Crossing { .. })
                && matches!(model.chart, Chart::Strip { .. })
                && (s - iv.lo < period || iv.hi - s < period);
            node_jobs.push((bp, w * sigma, outer));
        }
    }

    // Short chords subtend small angle windows; refine the transition scan
    // so no membership interval slips between scan nodes.
    let scan = match region {
        MeasureRegion::Crossing { record } => {
            let needed =
                (4.0 * std::f64::consts::PI * model.diameter() / record.length.max(1e-9)).ceil();
            (grid.n_theta_scan.max(8)).max((needed as usize).min(2048))
        }
        MeasureRegion::EndpointIntervals { .. } => grid.n_theta_scan.max(8),
    };
    let results: Vec<(f64, f64, f64)> = node_jobs
        .par_iter()
        .map(|&(bp, weight, outer)| {
            // Resolve the member set in theta to a union of intervals.
            let mut masked_w = 0.0;
            let thetas: Vec<f64> =
                (0..=scan).map(|k| std::f64::consts::PI * k as f64 / scan as f64).collect();
            let mut states: Vec<i8> = Vec::with_capacity(thetas.len());
            for (k, &th) in thetas.iter().enumerate() {
                if k == 0 || k == scan {
                    // Tangent rays carry zero weight.
                    states.push(0);
                    continue;
                }
                states.push(match probe(bp, th) {
                    Probe::Member => 1,
                    Probe::Outside => 0,
                    Probe::Masked => {
                        masked_w += weight * (thetas[1] - thetas[0]).sin().max(1e-3);
                        -1
                    }
                });
            }
            let mut member_mass = 0.0;
            let mut k = 0;
            while k < scan {
                let (s0, s1) = (states[k], states[k + 1]);
                let (t0, t1) = (thetas[k], thetas[k + 1]);
                let edge = |a: f64, b: f64, target_in: bool| -> f64 {
                    // Bisect the transition between a (inside==target_in) and b.
                    let (mut lo, mut hi) = (a, b);
                    for _ in 0..28 {
                        let mid = 0.5 * (lo + hi);
                        let inside = matches!(probe(bp, mid), Probe::Member);
                        if inside == target_in {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    0.5 * (lo + hi)
                };
                match (s0 == 1, s1 == 1) {
                    (true, true) => member_mass += t0.cos() - t1.cos(),
                    (true, false) => {
                        let b = edge(t0, t1, true);
                        member_mass += t0.cos() - b.cos();
                    }
                    (false, true) => {
                        let a = edge(t1, t0, true);
                        member_mass += a.cos() - t1.cos();
                    }
                    (false, false) => {}
                }
                k += 1;
            }
            let contribution = weight * member_mass;
            (contribution, masked_w, if outer { contribution } else { 0.0 })
        })
        .collect();

    let value = pairwise_sum(&results.iter().map(|r| r.0).collect::<Vec<_>>());
    let masked: f64 = results.iter().map(|r| r.1).sum();
    let outer: f64 = results.iter().map(|r| r.2).sum();
    let total_mass: f64 = node_jobs.iter().map(|(_, w, _)| 2.0 * w).sum();
    let truncation = matches!(
        (region, model.chart),
        (MeasureRegion::Crossing { .. }, Chart::Strip { .. })
    )
    .then_some(outer);
    Ok(EtaReport {
        value,
        masked_fraction: masked / total_mass.max(1e-300),
        truncation_residual: truncation,
    })
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct IntersectionReport {
    pub eta: f64,
    /// Twice the record length, the analytic value of the crossing measure.
    pub expected: f64,
    pub defect: f64,
    pub rel_defect: f64,
    pub masked_fraction: f64,
    pub truncation_residual: Option<f64>,
}

/// Intersection-number identity: the measure of geodesics positively crossing
/// a solved geodesic equals twice its length.
pub fn intersection_number(
    model: &SurfaceModel,
    record: &GeodesicRecord,
    grid: &FanGrid,
) -> Result<IntersectionReport> {
    let region = MeasureRegion::Crossing { record: record.clone() };
    let eta = eta_measure(model, &region, grid)?;
    let expected = 2.0 * record.length;
    let defect = (eta.value - expected).abs();
    Ok(IntersectionReport {
        eta: eta.value,
        expected,
        defect,
        rel_defect: defect / expected.abs().max(1e-300),
        masked_fraction: eta.masked_fraction,
        truncation_residual: eta.truncation_residual,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FanChartReport {
    /// Total-variation defect: sum of |direct - analytic| over the boxes,
    /// relative to the total analytic mass. The headline comparison figure.
    pub tv_defect: f64,
    pub max_rel_defect: f64,
    pub rms_rel_defect: f64,
    pub n_boxes: usize,
    pub boxes: Vec<FanBox>,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct FanBox {
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub direct: f64,
    pub analytic: f64,
}

/// Fan-chart density check: bins the crossing parameters (tau, theta) of
/// boundary-fan probes against the sine density, box by box.
///
/// The direct side uses plain indicator quadrature on the fan grid, so its
/// defect shrinks at the quadrature order under grid refinement.
pub fn fan_chart_check(
    model: &SurfaceModel,
    record: &GeodesicRecord,
    n_tau: usize,
    n_theta_boxes: usize,
    grid: &FanGrid,
) -> Result<FanChartReport> {
    let horizon = grid.horizon(model);
    let opts = FlowOptions::for_model(model).dense(0.04 * model.diameter());
    let index = SegmentIndex::new(&record.nodes, model);
    let d = record.length;

    let windows = entry_windows(
        model,
        &MeasureRegion::Crossing { record: record.clone() },
        grid,
    );
    let th_nodes = theta_rule(grid.n_theta);
    let mut jobs: Vec<(BoundaryPoint, f64)> = Vec::new();
    for (iv, n) in &windows {
        for (s, w) in gauss_legendre_on(*n, iv.lo, iv.hi) {
            let bp = BoundaryPoint::new(iv.component, s);
            let sigma = model.boundary_data(bp).speed;
            jobs.push((bp, w * sigma));
        }
    }

    let bins: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(bp, ws)| {
            let mut local = vec![0.0; n_tau * n_theta_boxes];
            for &(theta, wt) in &th_nodes {
                let y = boundary_phase(model, bp, theta);
                let Ok(res) = escape_opts(model, y, horizon, &opts) else { continue };
                if res.exited().map_or(true, |e| e.tangential) {
                    continue;
                }
                let traj = res.trajectory.as_ref().unwrap();
                if let Some(hit) = index.positive_crossing(&traj.nodes) {
                    let ang = model.angle(hit.point, hit.record_dir, hit.probe_dir);
                    let i = ((hit.record_tau / d) * n_tau as f64).floor() as usize;
                    let j = ((ang / std::f64::consts::PI) * n_theta_boxes as f64).floor() as usize;
                    if i < n_tau && j < n_theta_boxes {
                        local[i * n_theta_boxes + j] += ws * wt;
                    }
                }
            }
            local
        })
        .collect();

    let mut direct = vec![0.0; n_tau * n_theta_boxes];
    for local in bins {
        for (d, l) in direct.iter_mut().zip(local) {
            *d += l;
        }
    }

    let mut boxes = Vec::with_capacity(n_tau * n_theta_boxes);
    let mut max_rel = 0.0_f64;
    let mut sum_sq = 0.0;
    let mut abs_err = 0.0;
    let mut total_mass = 0.0;
    for i in 0..n_tau {
        for j in 0..n_theta_boxes {
            let tau_lo = d * i as f64 / n_tau as f64;
            let tau_hi = d * (i + 1) as f64 / n_tau as f64;
            let theta_lo = std::f64::consts::PI * j as f64 / n_theta_boxes as f64;
            let theta_hi = std::f64::consts::PI * (j + 1) as f64 / n_theta_boxes as f64;
            let analytic = (tau_hi - tau_lo) * (theta_lo.cos() - theta_hi.cos());
            let val = direct[i * n_theta_boxes + j];
            let rel = (val - analytic).abs() / analytic;
            max_rel = max_rel.max(rel);
            sum_sq += rel * rel;
            abs_err += (val - analytic).abs();
            total_mass += analytic;
            boxes.push(FanBox { tau_lo, tau_hi, theta_lo, theta_hi, direct: val, analytic });
        }
    }
    Ok(FanChartReport {
        tv_defect: abs_err / total_mass,
        max_rel_defect: max_rel,
        rms_rel_defect: (sum_sq / (n_tau * n_theta_boxes) as f64).sqrt(),
        n_boxes: n_tau * n_theta_boxes,
        boxes,
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DouadyReport {
    /// Reconstruction from marked distances alone.
    pub reconstructed: f64,
    /// Direct quadrature of the same region.
    pub direct: f64,
    pub rel_defect: f64,
    /// Cumulative dyadic values per depth (E = F case only).
    pub levels: Vec<f64>,
}

/// Total order of boundary points in the circular order of the cover
/// boundary (disk: lifted angle; strip: bottom ascending, then top).
fn circular_key(model: &SurfaceModel, bp: &BoundaryPoint) -> (usize, f64) {
    let _ = model;
    (bp.component, bp.s)
}

/// Crossing measure of the chord between two boundary points, from marked
/// distance data: eta(F(x, x')) = 2 d(x, x').
fn chord_eta(model: &SurfaceModel, a: BoundaryPoint, b: BoundaryPoint) -> Result<f64> {
    if a.component == b.component && (a.s - b.s).abs() < 1e-13 {
        return Ok(0.0);
    }
    let rec = match model.chart {
        Chart::Disk { .. } => lens::boundary_distance(
            model,
            a,
            BoundaryPoint::new(b.component, b.s.rem_euclid(std::f64::consts::TAU)),
            HomotopyClass(0),
        )?,
        Chart::Strip { .. } => lens::geodesic_to_lifted(model, a, b, None)?,
    };
    Ok(2.0 * rec.length)
}

/// Measure of ordered endpoint pairs (E, F) reconstructed from marked
/// distances: the four-corner formula for disjoint intervals, the dyadic
/// splitting for E = F. Compared against the direct quadrature.
pub fn douady_reconstruct(
    model: &SurfaceModel,
    e: BoundaryInterval,
    f: BoundaryInterval,
    depth: usize,
    grid: &FanGrid,
) -> Result<DouadyReport> {
    let same = e == f;
    if e.width() < 0.0 || f.width() < 0.0 {
        return Err(Error::BadCornerOrder);
    }
    if e.width() == 0.0 || f.width() == 0.0 {
        let direct = direct_pair_measure(model, e, f, grid)?;
        return Ok(DouadyReport { reconstructed: 0.0, direct, rel_defect: direct.abs(), levels: vec![] });
    }

    let reconstructed;
    let mut levels = Vec::new();
    if same {
        // Dyadic splitting: each level adds the sibling-pair mass
        // 2 (d(lo,mid) + d(mid,hi) - d(lo,hi)) over the previous level's
        // segments, which is nonnegative by the triangle inequality.
        let mut cache: HashMap<(u64, u64), f64> = HashMap::new();
        let max_idx = 1u64 << depth;
        let param_at = |i: u64| e.lo + e.width() * i as f64 / max_idx as f64;
        let mut dist = |i: u64, j: u64| -> Result<f64> {
            let key = (i.min(j), i.max(j));
            if let Some(v) = cache.get(&key) {
                return Ok(*v);
            }
            let v = 0.5
                * chord_eta(
                    model,
                    BoundaryPoint::new(e.component, param_at(key.0)),
                    BoundaryPoint::new(e.component, param_at(key.1)),
                )?;
            cache.insert(key, v);
            Ok(v)
        };
        let mut total = 0.0;
        for level in 0..depth {
            let step = max_idx >> level;
            let half = step / 2;
            let mut level_sum = 0.0;
            let mut i = 0u64;
            while i < max_idx {
                let (lo, mid, hi) = (i, i + half, i + step);
                level_sum += 2.0 * (dist(lo, mid)? + dist(mid, hi)? - dist(lo, hi)?);
                i += step;
            }
            total += level_sum;
            levels.push(total);
        }
        reconstructed = total;
    } else {
        // Four corners in circular order x1, x2 = boundary of E, x3, x4 =
        // boundary of F.
        let x1 = BoundaryPoint::new(e.component, e.lo);
        let x2 = BoundaryPoint::new(e.component, e.hi);
        let x3 = BoundaryPoint::new(f.component, f.lo);
        let x4 = BoundaryPoint::new(f.component, f.hi);
        let mut order = [x1, x2, x3, x4];
        order.sort_by(|a, b| {
            circular_key(model, a)
                .partial_cmp(&circular_key(model, b))
                .unwrap()
        });
        // Allow the wrapped disk configuration (F before E in angle) by
        // rotating the roles; reject genuine overlap.
        let overlap = match model.chart {
            Chart::Disk { .. } => {
                let shift = (f.lo - e.hi).rem_euclid(std::f64::consts::TAU);
                let span_f = f.width();
                shift + span_f > std::f64::consts::TAU - e.width() + 1e-12
            }
            Chart::Strip { .. } => {
                e.component == f.component
                    && e.hi > f.lo + 1e-12
                    && f.hi > e.lo + 1e-12
            }
        };
        if overlap {
            return Err(Error::BadCornerOrder);
        }
        let d13 = chord_eta(model, x1, x3)? / 2.0;
        let d42 = chord_eta(model, x4, x2)? / 2.0;
        let d23 = chord_eta(model, x2, x3)? / 2.0;
        let d14 = chord_eta(model, x1, x4)? / 2.0;
        reconstructed = d13 + d42 - d23 - d14;
    }

    let direct = direct_pair_measure(model, e, f, grid)?;
    let denom = direct.abs().max(1e-300);
    Ok(DouadyReport {
        reconstructed,
        direct,
        rel_defect: (reconstructed - direct).abs() / denom,
        levels,
    })
}

fn direct_pair_measure(
    model: &SurfaceModel,
    e: BoundaryInterval,
    f: BoundaryInterval,
    grid: &FanGrid,
) -> Result<f64> {
    let region = MeasureRegion::EndpointIntervals { entry: vec![e], exit: vec![f] };
    Ok(eta_measure(model, &region, grid)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::{PI, TAU};

    fn small_grid() -> FanGrid {
        FanGrid { n_s: 64, n_theta: 64, n_theta_scan: 32, t_max: None, n_max: 3 }
    }

    #[test]
    fn volume_identity_euclidean_disk() {
        // Vol(SM) = 2 pi Area = 2 pi^2 for the unit disk.
        let m = catalog::euclidean_disk(1.0);
        let rep = volume_via_lens(&m, &small_grid()).unwrap();
        assert_relative_eq!(rep.lens_value, 2.0 * PI * PI, max_relative = 1e-4);
        assert_relative_eq!(rep.area_value, 2.0 * PI * PI, max_relative = 1e-10);
        assert!(rep.defect < 1e-3 * rep.area_value);
        assert_eq!(rep.masked_fraction, 0.0);
    }

    #[test]
    fn volume_identity_poincare_patch() {
        // Hyperbolic disk of radius ln 3: area 2 pi (cosh ln3 - 1) = 4 pi / 3.
        let m = catalog::poincare_disk(0.5);
        let rep = volume_via_lens(&m, &small_grid()).unwrap();
        let expect = TAU * (4.0 * PI / 3.0);
        assert_relative_eq!(rep.area_value, expect, max_relative = 1e-9);
        assert!(rep.defect < 1e-3 * expect, "defect {}", rep.defect);
    }

    #[test]
    fn santalo_half_disk_indicator() {
        // Indicator of the upper half disk integrates to half the volume.
        let m = catalog::euclidean_disk(1.0);
        let rep = santalo_integrate(
            &m,
            &|p, _| if p.v > 0.0 { 1.0 } else { 0.0 },
            &FanGrid::coarse(128, 128),
        )
        .unwrap();
        assert_relative_eq!(rep.value, PI * PI, max_relative = 2e-3);
    }

    #[test]
    fn eta_total_mass_is_twice_boundary_length() {
        let m = catalog::euclidean_disk(1.0);
        let region = MeasureRegion::EndpointIntervals {
            entry: vec![BoundaryInterval::new(0, 0.0, TAU)],
            exit: vec![BoundaryInterval::new(0, 0.0, TAU)],
        };
        let rep = eta_measure(&m, &region, &small_grid()).unwrap();
        assert_relative_eq!(rep.value, 4.0 * PI, max_relative = 1e-6);
    }

    #[test]
    fn eta_involution_symmetry() {
        let m = catalog::poincare_disk(0.5);
        let e = BoundaryInterval::new(0, 0.2, 1.1);
        let f = BoundaryInterval::new(0, 2.5, 3.9);
        let ef = MeasureRegion::EndpointIntervals { entry: vec![e], exit: vec![f] };
        let fe = MeasureRegion::EndpointIntervals { entry: vec![f], exit: vec![e] };
        let a = eta_measure(&m, &ef, &small_grid()).unwrap().value;
        let b = eta_measure(&m, &fe, &small_grid()).unwrap().value;
        assert_relative_eq!(a, b, max_relative = 1e-5);
        assert!(a > 0.0);
    }

    #[test]
    fn intersection_number_of_diameter() {
        // eta(F(x, x')) = 2 d: the unit-disk diameter gives 4.
        let m = catalog::euclidean_disk(1.0);
        let rec = lens::boundary_distance(
            &m,
            BoundaryPoint::new(0, 0.0),
            BoundaryPoint::new(0, PI),
            HomotopyClass(0),
        )
        .unwrap();
        let rep = intersection_number(&m, &rec, &small_grid()).unwrap();
        assert_abs_diff_eq!(rep.eta, 4.0, epsilon = 1e-2);
        assert!(rep.rel_defect < 0.01, "rel defect {}", rep.rel_defect);
    }

    #[test]
    fn intersection_number_short_chord() {
        let m = catalog::euclidean_disk(1.0);
        // Chord of length about 0.1.
        let half = (0.05_f64).asin();
        let rec = lens::boundary_distance(
            &m,
            BoundaryPoint::new(0, -half),
            BoundaryPoint::new(0, half),
            HomotopyClass(0),
        )
        .unwrap();
        assert_relative_eq!(rec.length, 0.1, epsilon = 1e-8);
        let rep = intersection_number(&m, &rec, &small_grid()).unwrap();
        assert_relative_eq!(rep.eta, 0.2, max_relative = 0.02);
    }

    #[test]
    fn fan_chart_boxes_match_sine_density() {
        let m = catalog::euclidean_disk(1.0);
        let rec = lens::boundary_distance(
            &m,
            BoundaryPoint::new(0, 0.3),
            BoundaryPoint::new(0, 0.3 + PI),
            HomotopyClass(0),
        )
        .unwrap();
        let rep = fan_chart_check(&m, &rec, 8, 8, &FanGrid::coarse(192, 192)).unwrap();
        assert!(rep.tv_defect < 0.02, "tv defect {}", rep.tv_defect);
        assert_eq!(rep.n_boxes, 64);
    }

    #[test]
    fn douady_four_corner_opposite_arcs() {
        let m = catalog::euclidean_disk(1.0);
        let e = BoundaryInterval::new(0, 0.0, PI / 2.0);
        let f = BoundaryInterval::new(0, PI, 1.5 * PI);
        let rep = douady_reconstruct(&m, e, f, 0, &small_grid()).unwrap();
        assert!(rep.rel_defect < 0.01, "defect {}", rep.rel_defect);
        assert!(rep.direct > 0.1);
    }

    #[test]
    fn douady_dyadic_same_interval() {
        let m = catalog::euclidean_disk(1.0);
        let e = BoundaryInterval::new(0, 0.0, PI / 2.0);
        let rep = douady_reconstruct(&m, e, e, 6, &small_grid()).unwrap();
        assert!(rep.rel_defect < 0.02, "defect {}", rep.rel_defect);
        // Monotone convergence from below.
        for w in rep.levels.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert!(*rep.levels.last().unwrap() <= rep.direct * 1.01);
    }

    #[test]
    fn douady_rejects_overlapping_intervals() {
        let m = catalog::euclidean_disk(1.0);
        let e = BoundaryInterval::new(0, 0.0, 2.0);
        let f = BoundaryInterval::new(0, 1.0, 3.0);
        assert!(matches!(
            douady_reconstruct(&m, e, f, 0, &small_grid()),
            Err(Error::BadCornerOrder)
        ));
    }

    #[test]
    fn empty_interval_measures_zero() {
        let m = catalog::euclidean_disk(1.0);
        let e = BoundaryInterval::new(0, 1.0, 1.0);
        let f = BoundaryInterval::new(0, 2.0, 3.0);
        let rep = douady_reconstruct(&m, e, f, 0, &small_grid()).unwrap();
        assert_abs_diff_eq!(rep.direct, 0.0, epsilon = 1e-9);
        assert_eq!(rep.reconstructed, 0.0);
    }
}

//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test -p lenslab-core --test acceptance -- --nocapture`
//! to see the per-criterion lines; tolerances are pinned in the asserts.

use std::f64::consts::{PI, TAU};
use std::time::Instant;

use lenslab_core::catalog::{self, BumpSpec};
use lenslab_core::flow::{
    self, boundary_phase, conjugate_scan, cone_expansion_check, escape_length_survey,
    lyapunov_estimate, PhasePoint,
};
use lenslab_core::lens::{self, BrokenGeodesic, HomotopyClass};
use lenslab_core::measure::{self, BoundaryInterval, FanGrid};
use lenslab_core::metric::{BoundaryPoint, SurfaceModel};
use lenslab_core::rigidity::{self, ConvexCatalog, MetricPair, SamplingSpec};
use lenslab_core::Vec2;

fn pass(id: u32, name: &str, details: &str) {
    println!("acceptance {id:02} {name}: PASS ({details})");
}

fn fail(id: u32, name: &str, details: &str) -> ! {
    println!("acceptance {id:02} {name}: FAIL ({details})");
    panic!("acceptance criterion {id} ({name}) failed: {details}");
}

fn check(id: u32, name: &str, ok: bool, details: String) {
    if ok {
        pass(id, name, &details);
    } else {
        fail(id, name, &details);
    }
}

fn interior_phase_samples(model: &SurfaceModel, n: usize, seed: u64) -> Vec<PhasePoint> {
    use rand::Rng;
    let mut rng = lenslab_core::sampling::seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = match model.chart {
            lenslab_core::Chart::Disk { radius } => {
                let u = rng.gen::<f64>() * 2.0 - 1.0;
                let v = rng.gen::<f64>() * 2.0 - 1.0;
                let p = Vec2::new(u * radius, v * radius);
                if p.norm() > 0.95 * radius {
                    continue;
                }
                p
            }
            lenslab_core::Chart::Strip { v_min, v_max, period } => {
                let u = rng.gen::<f64>() * period;
                let v = v_min + (v_max - v_min) * (0.05 + 0.9 * rng.gen::<f64>());
                Vec2::new(u, v)
            }
        };
        let a = rng.gen::<f64>() * TAU;
        let w = model.unit(p, Vec2::new(a.cos(), a.sin()));
        out.push(PhasePoint::new(p, w));
    }
    out
}

#[test]
fn criterion_01_chord_oracle() {
    let id = 1;
    let name = "chord oracle";
    let start = Instant::now();
    let m = catalog::euclidean_disk(1.0);
    let mut worst = 0.0_f64;
    // 256 grid points: entry angle phi from the tangent, so that the chord
    // length is 2 sin(phi) = 2 cos(angle from the normal).
    for i in 0..16 {
        for j in 0..16 {
            let s = TAU * i as f64 / 16.0;
            let phi = PI * (j as f64 + 0.5) / 16.0;
            let y = boundary_phase(&m, BoundaryPoint::new(0, s), phi);
            let res = flow::scattering(&m, y, 10.0).unwrap();
            let exit = res.exited().expect("disk chords exit");
            let ell_expected = 2.0 * phi.sin();
            let s_exit = s + 2.0 * phi;
            let p_expected = Vec2::new(s_exit.cos(), s_exit.sin());
            worst = worst.max((exit.length - ell_expected).abs());
            worst = worst.max((exit.exit.p - p_expected).norm());
        }
    }
    let dt = start.elapsed().as_secs_f64();
    check(
        id,
        name,
        worst <= 1e-8 && dt < 5.0,
        format!("max error {worst:.3e} over 256 chords, {dt:.2} s"),
    );
}

#[test]
fn criterion_02_volume_identity() {
    let id = 2;
    let name = "volume identity";
    let grid = FanGrid::default();

    let start = Instant::now();
    let flat = catalog::euclidean_disk(1.0);
    let rep = measure::volume_via_lens(&flat, &grid).unwrap();
    let expect_flat = 2.0 * PI * PI;
    let err_flat = (rep.lens_value - expect_flat).abs() / expect_flat;
    let t_flat = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let hyp = catalog::poincare_disk(0.5);
    let rep_h = measure::volume_via_lens(&hyp, &grid).unwrap();
    // Area of the hyperbolic disk of radius ln 3 is 2 pi (cosh ln3 - 1).
    let expect_hyp = TAU * (TAU * ((3.0_f64.ln()).cosh() - 1.0));
    let err_hyp = (rep_h.lens_value - expect_hyp).abs() / expect_hyp;
    let t_hyp = start.elapsed().as_secs_f64();

    check(
        id,
        name,
        err_flat <= 1e-3 && err_hyp <= 1e-3 && t_flat < 60.0 && t_hyp < 60.0,
        format!(
            "disk rel err {err_flat:.2e} in {t_flat:.1} s; hyperbolic patch rel err {err_hyp:.2e} in {t_hyp:.1} s"
        ),
    );
}

#[test]
fn criterion_03_intersection_identity() {
    let id = 3;
    let name = "intersection numbers";
    use rand::Rng;
    let grid = FanGrid { n_s: 128, n_theta: 128, n_theta_scan: 48, t_max: None, n_max: 5 };

    let mut worst_disk = 0.0_f64;
    for (mi, model) in [catalog::euclidean_disk(1.0), catalog::poincare_disk(0.5)]
        .iter()
        .enumerate()
    {
        let mut rng = lenslab_core::sampling::seeded_rng(31 + mi as u64);
        for _ in 0..10 {
            let a = rng.gen::<f64>() * TAU;
            let gap = 0.4 + rng.gen::<f64>() * (TAU - 0.8);
            let rec = lens::boundary_distance(
                model,
                BoundaryPoint::new(0, a),
                BoundaryPoint::new(0, a + gap),
                HomotopyClass(0),
            )
            .unwrap();
            let rep = measure::intersection_number(model, &rec, &grid).unwrap();
            worst_disk = worst_disk.max(rep.rel_defect);
        }
    }

    let annulus = catalog::hyperbolic_cylinder(1.0, 6.0);
    let mut worst_annulus = 0.0_f64;
    let mut rng = lenslab_core::sampling::seeded_rng(77);
    let agrid = FanGrid { n_s: 96, n_theta: 96, n_theta_scan: 48, t_max: None, n_max: 5 };
    for k in 0..4 {
        let s = rng.gen::<f64>() * 6.0;
        let (to, class) = match k {
            0 => (BoundaryPoint::new(1, -s - 2.0), HomotopyClass(0)),
            1 => (BoundaryPoint::new(0, s + 2.5), HomotopyClass(0)),
            2 => (BoundaryPoint::new(1, -s + 1.0), HomotopyClass(1)),
            _ => (BoundaryPoint::new(0, s + 1.5), HomotopyClass(-1)),
        };
        let rec =
            lens::boundary_distance(&annulus, BoundaryPoint::new(0, s), to, class).unwrap();
        let rep = measure::intersection_number(&annulus, &rec, &agrid).unwrap();
        worst_annulus = worst_annulus.max(rep.rel_defect);
    }

    check(
        id,
        name,
        worst_disk <= 0.01 && worst_annulus <= 0.02,
        format!("disk max rel defect {worst_disk:.3e} (20 chords), annulus {worst_annulus:.3e}"),
    );
}

#[test]
fn criterion_04_fan_chart_density() {
    let id = 4;
    let name = "fan-chart density";
    let m = catalog::euclidean_disk(1.0);
    let rec = lens::boundary_distance(
        &m,
        BoundaryPoint::new(0, 0.4),
        BoundaryPoint::new(0, 0.4 + PI),
        HomotopyClass(0),
    )
    .unwrap();
    let coarse = measure::fan_chart_check(&m, &rec, 8, 8, &FanGrid::coarse(128, 128)).unwrap();
    let fine = measure::fan_chart_check(&m, &rec, 8, 8, &FanGrid::coarse(256, 256)).unwrap();
    // Indicator quadrature converges at first order: doubling the grid must
    // (at least nearly) halve the defect, down to a small floor.
    let halves = fine.tv_defect <= 0.7 * coarse.tv_defect + 2e-4;
    check(
        id,
        name,
        coarse.tv_defect < 0.02 && halves,
        format!(
            "8x8 defect {:.3e} at n=128, {:.3e} at n=256",
            coarse.tv_defect, fine.tv_defect
        ),
    );
}

#[test]
fn criterion_05_douady_reconstruction() {
    let id = 5;
    let name = "four-corner reconstruction";
    let m = catalog::euclidean_disk(1.0);
    let grid = FanGrid { n_s: 128, n_theta: 128, n_theta_scan: 64, t_max: None, n_max: 5 };

    let e = BoundaryInterval::new(0, 0.2, 0.2 + PI / 2.0);
    let f = BoundaryInterval::new(0, 0.2 + PI, 0.2 + 1.5 * PI);
    let disjoint = measure::douady_reconstruct(&m, e, f, 0, &grid).unwrap();

    let dyadic = measure::douady_reconstruct(&m, e, e, 6, &grid).unwrap();
    let monotone = dyadic.levels.windows(2).all(|w| w[1] >= w[0] - 1e-12);

    check(
        id,
        name,
        disjoint.rel_defect <= 0.01 && dyadic.rel_defect <= 0.02 && monotone,
        format!(
            "disjoint defect {:.3e}, dyadic depth-6 defect {:.3e}, monotone {monotone}",
            disjoint.rel_defect, dyadic.rel_defect
        ),
    );
}

#[test]
fn criterion_06_conjugate_point_certificates() {
    let id = 6;
    let name = "conjugate points";
    let models = [catalog::euclidean_disk(1.0), catalog::poincare_disk(0.5)];
    let mut scanned = 0usize;
    for (mi, m) in models.iter().enumerate() {
        let horizon = 5.0 * m.diameter();
        for y in interior_phase_samples(m, 500, 1000 + mi as u64) {
            if let Some(t) = conjugate_scan(m, y, horizon).unwrap() {
                fail(id, name, &format!("unexpected conjugate point at t = {t} on {}", m.name));
            }
            scanned += 1;
        }
    }

    // K = +1 test metric: the equator orbit stays inside and J = sin t.
    let cap = catalog::sphere_cap(3.0);
    let mut worst = 0.0_f64;
    for k in 0..20 {
        let a = TAU * k as f64 / 20.0;
        let p = Vec2::new(a.cos(), a.sin());
        let tangent = cap.unit(p, Vec2::new(-a.sin(), a.cos()));
        let y = PhasePoint::new(p, tangent);
        match conjugate_scan(&cap, y, 4.0).unwrap() {
            Some(t) => worst = worst.max((t - PI).abs()),
            None => fail(id, name, "equator orbit lost its conjugate point"),
        }
    }
    check(
        id,
        name,
        worst <= 1e-4,
        format!("{scanned} flat/hyperbolic orbits clean; K=+1 first zero at pi +- {worst:.2e}"),
    );
}

#[test]
fn criterion_07_hyperbolic_trapping() {
    let id = 7;
    let name = "hyperbolic trapped set";
    let m = catalog::hyperbolic_cylinder(1.0, 6.0);
    let waist = PhasePoint::new(Vec2::ZERO, Vec2::new(1.0, 0.0));

    let lambda = lyapunov_estimate(&m, waist, 30.0).unwrap();
    let cone = cone_expansion_check(&m, waist, 2.0, 0.5, 0.5).unwrap();

    let survey = escape_length_survey(&m, 200_000, 40.0, 2024);
    let frac = |t: f64| {
        survey.iter().filter(|l| l.map_or(true, |v| v >= t)).count() as f64 / survey.len() as f64
    };
    let (f10, f40) = (frac(10.0), frac(40.0));
    let decayed = f10 > 0.0 && (f40 == 0.0 || f10 >= 10.0 * f40);

    check(
        id,
        name,
        (lambda - 1.0).abs() <= 0.05 && cone.contained && cone.min_factor >= 3.5 && decayed,
        format!(
            "lambda {lambda:.4}, cone contained {} factor {:.2}, fraction {f10:.2e} -> {f40:.2e}",
            cone.contained, cone.min_factor
        ),
    );
}

#[test]
fn criterion_08_rigid_pair_pipeline() {
    let id = 8;
    let name = "rigid pair pipeline";
    let start = Instant::now();
    let base = catalog::poincare_disk(0.5);
    let psi = catalog::twist(0.5, 0.3);
    let pair = MetricPair::pullback(&base, &psi).unwrap();

    // Theta(theta) = theta within 2 standard errors on an 11-point grid.
    let mut worst_ratio = 0.0_f64;
    let mut worst_invalid = 0.0_f64;
    for k in 0..=10 {
        let theta = PI * k as f64 / 10.0;
        let rep =
            rigidity::average_angle(&pair, theta, &SamplingSpec::new(10_000, 4000 + k)).unwrap();
        worst_ratio = worst_ratio.max((rep.value - theta).abs() / (2.0 * rep.stderr));
        worst_invalid = worst_invalid.max(rep.invalid_mass);
    }

    // psi recovered within 1e-4 at 50 interior points.
    let mut worst_psi = 0.0_f64;
    for (i, y) in interior_phase_samples(&base, 50, 88).iter().enumerate() {
        let x = y.p;
        let est = rigidity::psi_reconstruct(&pair, x, 3)
            .unwrap_or_else(|e| fail(id, name, &format!("psi failed at sample {i}: {e}")));
        worst_psi = worst_psi.max((est.point - psi.apply(x)).norm());
    }

    // Distance certificate below 1e-3.
    let pts = interior_phase_samples(&base, 16, 99);
    let pairs: Vec<(Vec2, Vec2)> =
        pts.chunks(2).map(|c| (c[0].p, c[1].p)).collect();
    let cert = rigidity::isometry_certificate(&pair, &pairs, 8).unwrap();

    let dt = start.elapsed().as_secs_f64();
    check(
        id,
        name,
        worst_ratio <= 1.0
            && worst_invalid < 0.01
            && worst_psi <= 1e-4
            && cert.max_distance_defect < 1e-3
            && cert.max_boundary_drift < 1e-3
            && dt < 600.0,
        format!(
            "max |Theta-theta|/2se {worst_ratio:.2}, invalid {worst_invalid:.2e}, psi err {worst_psi:.2e}, certificate ({:.2e}, {:.2e}), {dt:.0} s",
            cert.max_distance_defect, cert.max_boundary_drift
        ),
    );
}

#[test]
fn criterion_09_nonrigid_detection() {
    let id = 9;
    let name = "non-rigid detection";
    let base = catalog::poincare_disk(0.5);
    let spec = BumpSpec { amplitude: 0.1, center: Vec2::new(0.15, 0.0), width: 0.3 };
    let pair = MetricPair::conformal(&base, spec).unwrap();

    let lens_rep = lens::lens_vs_distance_check(&pair.g1, &pair.g2, 10, 5151).unwrap();
    let jensen = rigidity::jensen_gap(
        &pair,
        PI / 2.0,
        ConvexCatalog::Square,
        &SamplingSpec::new(4000, 616),
    )
    .unwrap();
    let est = rigidity::psi_reconstruct(&pair, Vec2::new(0.15, 0.02), 3).unwrap();

    check(
        id,
        name,
        lens_rep.max_distance_defect > 1e-6
            && jensen.gap > 3.0 * jensen.stderr
            && est.spread > 1e-5,
        format!(
            "distance defect {:.3e}, Jensen gap {:.3e} vs 3se {:.3e}, psi spread {:.3e}",
            lens_rep.max_distance_defect,
            jensen.gap,
            3.0 * jensen.stderr,
            est.spread
        ),
    );
}

#[test]
fn criterion_10_geodesics_minimize() {
    let id = 10;
    let name = "homotopic perturbations lengthen";
    use rand::Rng;
    let m = catalog::poincare_disk(0.5);
    let mut rng = lenslab_core::sampling::seeded_rng(1234);
    let mut min_margin = f64::INFINITY;
    let mut count = 0usize;
    for _ in 0..10 {
        let a = rng.gen::<f64>() * TAU;
        let gap = 0.8 + rng.gen::<f64>() * (TAU - 1.6);
        let rec = lens::boundary_distance(
            &m,
            BoundaryPoint::new(0, a),
            BoundaryPoint::new(0, a + gap),
            HomotopyClass(0),
        )
        .unwrap();
        let pts = rec.positions();
        for _ in 0..10 {
            let amp = 0.02 + 0.08 * rng.gen::<f64>();
            let mode = 1 + rng.gen_range(0..3) as i32;
            let mut perturbed = pts.clone();
            let n = perturbed.len();
            for (i, p) in perturbed.iter_mut().enumerate().skip(1).take(n - 2) {
                let t = i as f64 / (n - 1) as f64;
                let w = rec.nodes[i].1.w;
                let normal = Vec2::new(-w.v, w.u);
                *p = *p + normal.scale(amp * (PI * mode as f64 * t).sin());
            }
            let len = lens::polyline_g_length(&m, &perturbed);
            min_margin = min_margin.min(len - rec.length);
            count += 1;
        }
    }
    check(
        id,
        name,
        count == 100 && min_margin > 1e-8,
        format!("{count} perturbations, min excess length {min_margin:.3e}"),
    );
}

#[test]
fn criterion_11_cross_solver_agreement() {
    let id = 11;
    let name = "shooting vs shortening";
    use rand::Rng;
    let models =
        [catalog::euclidean_disk(1.0), catalog::poincare_disk(0.5), catalog::hyperbolic_cylinder(1.0, 6.0)];
    let counts = [40usize, 40, 20];
    let mut worst = 0.0_f64;
    let mut n_done = 0usize;
    for (m, n) in models.iter().zip(counts) {
        let mut rng = lenslab_core::sampling::seeded_rng(4242 + n as u64);
        let period = m.chart.boundary_param_period();
        for _ in 0..n {
            let (from, to, class) = match m.chart {
                lenslab_core::Chart::Disk { .. } => {
                    let a = rng.gen::<f64>() * period;
                    let gap = 0.5 + rng.gen::<f64>() * (period - 1.0);
                    (BoundaryPoint::new(0, a), BoundaryPoint::new(0, a + gap), HomotopyClass(0))
                }
                lenslab_core::Chart::Strip { .. } => {
                    let a = rng.gen::<f64>() * period;
                    let b = rng.gen::<f64>() * period;
                    let comp = rng.gen_range(0..2);
                    let class = HomotopyClass(rng.gen_range(-1..=1));
                    (BoundaryPoint::new(0, a), BoundaryPoint::new(comp, b), class)
                }
            };
            let shot = match lens::boundary_distance(m, from, to, class) {
                Ok(r) if matches!(r.solver, lens::SolverKind::Shooting) => r,
                _ => continue,
            };
            // Shortening route from the straight chart polyline between the
            // matched lifts.
            let b_pt = shot.nodes.last().unwrap().1.p;
            let a_pt = shot.nodes.first().unwrap().1.p;
            let init = BrokenGeodesic::from_endpoints(a_pt, b_pt, 12);
            let short = lens::curve_shorten(m, &init, class).unwrap();
            worst = worst.max((short.length - shot.length).abs() / shot.length);
            n_done += 1;
        }
    }
    check(
        id,
        name,
        n_done >= 100 && worst <= 1e-6,
        format!("{n_done} problems, worst relative disagreement {worst:.3e}"),
    );
}

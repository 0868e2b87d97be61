//! Seeded sampling of the incoming boundary measure |g(v, nu)| dvol d theta.
//!
//! Entry points are drawn with boundary-length density sigma(s) ds and entry
//! angles with density sin(theta) d theta on (0, pi); together these sample
//! d mu_{g,nu} exactly, with no rejection. A counter-based ChaCha generator
//! keeps runs reproducible given (seed, grid).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::flow::{boundary_phase, PhasePoint};
use crate::metric::{BoundaryPoint, SurfaceModel};

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

const CDF_GRID: usize = 512;

struct ComponentTable {
    /// Cumulative integral of sigma over [0, s_k], k = 0..=CDF_GRID.
    cdf: Vec<f64>,
    mass: f64,
}

/// Inverse-CDF sampler for the boundary measure of a model.
pub struct BoundarySampler {
    model: SurfaceModel,
    components: Vec<ComponentTable>,
    total_sigma: f64,
}

impl BoundarySampler {
    pub fn new(model: &SurfaceModel) -> Self {
        let period = model.chart.boundary_param_period();
        let mut components = Vec::new();
        let mut total = 0.0;
        for comp in 0..model.chart.num_boundary_components() {
            let mut cdf = Vec::with_capacity(CDF_GRID + 1);
            cdf.push(0.0);
            let ds = period / CDF_GRID as f64;
            let mut acc = 0.0;
            let mut prev = model.boundary_data(BoundaryPoint::new(comp, 0.0)).speed;
            for k in 1..=CDF_GRID {
                let s = ds * k as f64;
                let cur = model.boundary_data(BoundaryPoint::new(comp, s)).speed;
                acc += 0.5 * (prev + cur) * ds;
                cdf.push(acc);
                prev = cur;
            }
            total += acc;
            components.push(ComponentTable { cdf, mass: acc });
        }
        BoundarySampler { model: model.clone(), components, total_sigma: total }
    }

    /// Total mass of mu_{g,nu} on the incoming boundary: 2 * boundary length.
    pub fn total_mass(&self) -> f64 {
        2.0 * self.total_sigma
    }

    /// Boundary g-length (one period per component).
    pub fn boundary_length(&self) -> f64 {
        self.total_sigma
    }

    pub fn sample_entry(&self, rng: &mut ChaCha12Rng) -> (BoundaryPoint, f64) {
        // Component proportional to its boundary mass.
        let mut pick = rng.gen::<f64>() * self.total_sigma;
        let mut comp = 0;
        for (i, table) in self.components.iter().enumerate() {
            if pick <= table.mass || i + 1 == self.components.len() {
                comp = i;
                break;
            }
            pick -= table.mass;
        }
        let table = &self.components[comp];
        let target = rng.gen::<f64>() * table.mass;
        let idx = table.cdf.partition_point(|&c| c < target).max(1).min(CDF_GRID);
        let (c0, c1) = (table.cdf[idx - 1], table.cdf[idx]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.5 };
        let period = self.model.chart.boundary_param_period();
        let ds = period / CDF_GRID as f64;
        let s = ds * ((idx - 1) as f64 + frac);

        // sin-distributed entry angle from the tangent.
        let theta = (1.0 - 2.0 * rng.gen::<f64>()).clamp(-1.0, 1.0).acos();
        (BoundaryPoint::new(comp, s), theta)
    }

    pub fn sample_phase(&self, rng: &mut ChaCha12Rng) -> (BoundaryPoint, PhasePoint) {
        let (bp, theta) = self.sample_entry(rng);
        (bp, boundary_phase(&self.model, bp, theta))
    }
}

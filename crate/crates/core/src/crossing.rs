//! Polyline crossing queries between sampled geodesics, with a uniform-grid
//! spatial hash over the reference curve's segments.
//!
//! On covers without conjugate points two distinct geodesics cross at most
//! once, so queries return the single transverse hit. Crossings with chart
//! sine below 1e-6 are treated as tangential and discarded.

use std::collections::HashMap;

use crate::flow::PhasePoint;
use crate::geom::Vec2;
use crate::metric::SurfaceModel;

pub(crate) struct CrossingHit {
    /// Arclength along the reference curve at the crossing.
    pub record_tau: f64,
    /// Arclength along the probe at the crossing.
    pub probe_tau: f64,
    pub point: Vec2,
    pub record_dir: Vec2,
    pub probe_dir: Vec2,
    /// Chart sign of (record_dir x probe_dir): positive means the probe
    /// crosses in the orientation of the fan.
    pub positive: bool,
}

pub(crate) struct SegmentIndex<'a> {
    nodes: &'a [(f64, PhasePoint)],
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> SegmentIndex<'a> {
    pub fn new(nodes: &'a [(f64, PhasePoint)], model: &SurfaceModel) -> Self {
        let mut cell = 1e-3 * model.diameter();
        for pair in nodes.windows(2) {
            cell = cell.max((pair[1].1.p - pair[0].1.p).norm());
        }
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, pair) in nodes.windows(2).enumerate() {
            let (a, b) = (pair[0].1.p, pair[1].1.p);
            for iu in cell_range(a.u, b.u, cell) {
                for iv in cell_range(a.v, b.v, cell) {
                    buckets.entry((iu, iv)).or_default().push(i);
                }
            }
        }
        SegmentIndex { nodes, cell, buckets }
    }

    /// The transverse crossing with the probe polyline, if any.
    pub fn crossing(&self, probe: &[(f64, PhasePoint)]) -> Option<CrossingHit> {
        for pair in probe.windows(2) {
            let (tb0, yb0) = pair[0];
            let (tb1, yb1) = pair[1];
            let (b1, b2) = (yb0.p, yb1.p);
            let mut candidates: Vec<usize> = Vec::new();
            for iu in cell_range(b1.u, b2.u, self.cell) {
                for iv in cell_range(b1.v, b2.v, self.cell) {
                    if let Some(list) = self.buckets.get(&(iu, iv)) {
                        for &i in list {
                            if !candidates.contains(&i) {
                                candidates.push(i);
                            }
                        }
                    }
                }
            }
            candidates.sort_unstable();
            let mut best: Option<(f64, CrossingHit)> = None;
            for i in candidates {
                let (ta0, ya0) = self.nodes[i];
                let (ta1, ya1) = self.nodes[i + 1];
                let (a1, a2) = (ya0.p, ya1.p);
                let d1 = a2 - a1;
                let d2 = b2 - b1;
                let den = d1.cross(d2);
                let sine = den / (d1.norm() * d2.norm()).max(1e-300);
                if sine.abs() < 1e-6 {
                    continue;
                }
                let r = b1 - a1;
                let t = r.cross(d2) / den;
                let u = r.cross(d1) / den;
                if !(0.0..1.0).contains(&t) || !(0.0..1.0).contains(&u) {
                    continue;
                }
                let hit = CrossingHit {
                    record_tau: ta0 + t * (ta1 - ta0),
                    probe_tau: tb0 + u * (tb1 - tb0),
                    point: a1 + d1.scale(t),
                    record_dir: ya0.w + (ya1.w - ya0.w).scale(t),
                    probe_dir: yb0.w + (yb1.w - yb0.w).scale(u),
                    positive: sine > 0.0,
                };
                if best.as_ref().map_or(true, |(bu, _)| u < *bu) {
                    best = Some((u, hit));
                }
            }
            if let Some((_, hit)) = best {
                return Some(hit);
            }
        }
        None
    }

    /// The crossing, filtered to positive orientation.
    pub fn positive_crossing(&self, probe: &[(f64, PhasePoint)]) -> Option<CrossingHit> {
        self.crossing(probe).filter(|h| h.positive)
    }
}

fn cell_range(a: f64, b: f64, cell: f64) -> std::ops::RangeInclusive<i64> {
    let lo = (a.min(b) / cell).floor() as i64;
    let hi = (a.max(b) / cell).floor() as i64;
    lo..=hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    fn seg(points: &[(f64, f64, f64, f64, f64)]) -> Vec<(f64, PhasePoint)> {
        points
            .iter()
            .map(|&(t, u, v, wu, wv)| (t, PhasePoint::new(Vec2::new(u, v), Vec2::new(wu, wv))))
            .collect()
    }

    #[test]
    fn perpendicular_chords_cross_positively() {
        let m = catalog::euclidean_disk(1.0);
        // Horizontal reference, upward probe: cross product +1.
        let record = seg(&[(0.0, -1.0, 0.0, 1.0, 0.0), (2.0, 1.0, 0.0, 1.0, 0.0)]);
        let probe = seg(&[(0.0, 0.3, -1.0, 0.0, 1.0), (2.0, 0.3, 1.0, 0.0, 1.0)]);
        let idx = SegmentIndex::new(&record, &m);
        let hit = idx.positive_crossing(&probe).expect("must cross");
        assert!((hit.record_tau - 1.3).abs() < 1e-12);
        assert!((hit.point.u - 0.3).abs() < 1e-12);
        assert!(hit.positive);
        // Reversed probe crosses negatively.
        let probe_rev = seg(&[(0.0, 0.3, 1.0, 0.0, -1.0), (2.0, 0.3, -1.0, 0.0, -1.0)]);
        assert!(idx.positive_crossing(&probe_rev).is_none());
        assert!(idx.crossing(&probe_rev).is_some());
    }

    #[test]
    fn parallel_chords_do_not_cross() {
        let m = catalog::euclidean_disk(1.0);
        let record = seg(&[(0.0, -1.0, 0.0, 1.0, 0.0), (2.0, 1.0, 0.0, 1.0, 0.0)]);
        let probe = seg(&[(0.0, -1.0, 0.5, 1.0, 0.0), (2.0, 1.0, 0.5, 1.0, 0.0)]);
        let idx = SegmentIndex::new(&record, &m);
        assert!(idx.crossing(&probe).is_none());
    }
}

//! Numerical laboratory for geodesic flows on compact oriented surfaces with
//! boundary: lens data and marked boundary distances, boundary-fan integral
//! geometry on the space of geodesics, and comparative rigidity diagnostics
//! between metrics sharing a chart, all validated against analytic model
//! metrics.

pub mod catalog;
pub(crate) mod crossing;
pub mod error;
pub mod flow;
pub mod geom;
pub mod lens;
pub mod measure;
pub mod metric;
pub mod quad;
pub mod rigidity;
pub mod roots;
pub mod sampling;

pub use error::{Error, Result};
pub use geom::{Mat2, SymMat2, Vec2};
pub use metric::{BoundaryData, BoundaryPoint, Chart, Christoffel, MetricField, SurfaceModel};

pub use flow::{
    boundary_phase, cone_expansion_check, conjugate_scan, escape, escape_with_integral,
    flow_step, jacobi_evolve, lyapunov_estimate, scattering, trapped_fraction, ConeReport,
    EscapeResult, EscapeStatus, ExitData, FlowOptions, JacobiState, PhasePoint, Trajectory,
};

pub use lens::{
    boundary_distance, curve_shorten, interior_distance, lens_vs_distance_check, shoot_table,
    BrokenGeodesic, GeodesicRecord, HomotopyClass, LensRow, LensTable, SolverKind,
};

pub use measure::{
    area_quadrature, douady_reconstruct, eta_measure, fan_chart_check, intersection_number,
    santalo_integrate, volume_via_lens, BoundaryInterval, DouadyReport, EtaReport,
    FanChartReport, FanGrid, IntersectionReport, MeasureRegion, SantaloReport, VolumeReport,
};

pub use rigidity::{
    average_angle, croke_conformal_check, isometry_certificate, jensen_gap, psi_reconstruct,
    subadditivity_check, symmetry_check, theta_transfer, AngleSample, AverageAngle,
    CertificateReport, ConvexCatalog, CrokeReport, JensenReport, MetricPair, PairRelation,
    PsiEstimate, SamplingSpec, SubadditivityReport, SymmetryReport,
};

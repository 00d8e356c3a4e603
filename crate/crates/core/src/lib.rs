//! Guidance laboratory: classifier-free guidance and spatially adaptive
//! multi guidance (SAMG) over analytic Gaussian-mixture score models, with
//! numerical checks of the geometric bounds that motivate SAMG.

pub mod error;
pub mod field;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod scoremodel;
pub mod testbed;
pub mod verify;

pub use error::{Error, Result};
pub use field::{EnergyMap, LatentField, OmegaMap, SpatialMap};
pub use geometry::SphereManifold;
pub use guidance::{GuidanceConfig, GuidanceMode, GuidanceTrace};
pub use metrics::{evaluate_sample, pareto_table, Aggregates, SampleEvaluation};
pub use sampler::{run_sampler, AnalyticModel, Predictor, Solver, Trajectory};
pub use schedule::{DiffusionSchedule, FlowGrid};
pub use scoremodel::{ConditionField, PixelGMM, QueryTime, ScoreQuery};
pub use verify::{CheckFamily, CheckReport, VerifySettings};

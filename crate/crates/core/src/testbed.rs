//! The reference synthetic testbed: one-hot means on a square grid with a
//! disk-shaped condition that asks for component 0.

use crate::error::Result;
use crate::scoremodel::{ConditionField, MaskShape, PixelGMM, TargetShape};
use crate::schedule::DiffusionSchedule;
use crate::sampler::{AnalyticModel, Solver};

pub const TRAINING_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DiskTestbed {
    pub size: usize,
    pub channels: usize,
    pub sigma0: f64,
    /// Disk radius in pixels for a 16-pixel grid; scaled with `size`.
    pub radius: f64,
    pub inside: f64,
    pub outside: f64,
    pub target: usize,
}

impl Default for DiskTestbed {
    fn default() -> Self {
        Self {
            size: 16,
            channels: 4,
            sigma0: 0.1,
            radius: 5.5,
            inside: 0.75,
            outside: 0.05,
            target: 0,
        }
    }
}

impl DiskTestbed {
    /// Uniform mixture with means at the unit basis vectors.
    pub fn gmm(&self) -> Result<PixelGMM> {
        let means = (0..self.channels)
            .map(|k| (0..self.channels).map(|c| if c == k { 1.0 } else { 0.0 }).collect())
            .collect();
        PixelGMM::uniform(means, self.sigma0)
    }

    pub fn condition(&self) -> Result<ConditionField> {
        let mask = MaskShape::Disk {
            radius: self.radius * self.size as f64 / 16.0,
            center: None,
            inside: self.inside,
            outside: self.outside,
        };
        ConditionField::from_shapes(self.size, self.size, &mask, &TargetShape::Constant(self.target))
    }

    pub fn schedule() -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear_beta(TRAINING_STEPS, BETA_START, BETA_END)
    }

    pub fn model(&self) -> Result<AnalyticModel> {
        AnalyticModel::new(self.gmm()?, self.condition()?, Some(Self::schedule()?))
    }

    pub fn ddim() -> Result<Solver> {
        Ok(Solver::Ddim(Self::schedule()?))
    }
}

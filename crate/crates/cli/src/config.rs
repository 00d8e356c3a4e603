//! TOML experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use samg::guidance::{GuidanceConfig, DEFAULT_TAU};
use samg::schedule::DiffusionSchedule;
use samg::scoremodel::{ConditionField, MaskShape, PixelGMM, TargetShape};
use samg::sampler::{AnalyticModel, Solver};
use samg::verify::VerifySettings;

/// Half-open seed range `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(try_from = "String")]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn iter(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("seed range must look like a..b, got '{s}'"))?;
        let start: u64 = a.trim().parse().map_err(|e| format!("bad seed range start '{a}': {e}"))?;
        let end: u64 = b.trim().parse().map_err(|e| format!("bad seed range end '{b}': {e}"))?;
        if end <= start {
            return Err(format!("seed range {start}..{end} is empty"));
        }
        Ok(Self { start, end })
    }
}

impl TryFrom<String> for SeedRange {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Ddim,
    Euler,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Length of the underlying training schedule; the sampler takes a
    /// uniform subsequence of `steps` of these.
    pub training_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            training_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sigma0: f64,
    /// Component means; defaults to the `channels` unit basis vectors.
    pub means: Option<Vec<Vec<f64>>>,
    /// Defaults to uniform.
    pub weights: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 4,
            sigma0: 0.1,
            means: None,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskConfig {
    Constant {
        value: f64,
    },
    Disk {
        radius: f64,
        center: Option<[f64; 2]>,
        inside: f64,
        outside: f64,
    },
    Half {
        #[serde(default)]
        vertical: bool,
        inside: f64,
        outside: f64,
    },
    Stripes {
        period: usize,
        #[serde(default)]
        vertical: bool,
        inside: f64,
        outside: f64,
    },
    Grid {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetConfig {
    Constant {
        component: usize,
    },
    Stripes {
        period: usize,
        #[serde(default)]
        vertical: bool,
        components: usize,
    },
    Grid {
        values: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionConfig {
    pub mask: MaskConfig,
    pub target: TargetConfig,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            mask: MaskConfig::Disk {
                radius: 5.5,
                center: None,
                inside: 0.75,
                outside: 0.05,
            },
            target: TargetConfig::Constant { component: 0 },
        }
    }
}

/// Named SAMG bound pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsPreset {
    /// `[5, 12]`
    Wide,
    /// `[1, 3]`
    Narrow,
}

impl BoundsPreset {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            BoundsPreset::Wide => (5.0, 12.0),
            BoundsPreset::Narrow => (1.0, 3.0),
        }
    }
}

fn default_kernel() -> usize {
    1
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GuidanceEntry {
    Cfg {
        omega: f64,
    },
    Samg {
        preset: Option<BoundsPreset>,
        omega_min: Option<f64>,
        omega_max: Option<f64>,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_tau")]
        tau: f64,
    },
}

impl GuidanceEntry {
    /// Explicit bounds override the preset; with neither, the wide preset applies.
    pub fn to_config(&self) -> GuidanceConfig {
        match self {
            GuidanceEntry::Cfg { omega } => GuidanceConfig::uniform(*omega),
            GuidanceEntry::Samg {
                preset,
                omega_min,
                omega_max,
                kernel,
                tau,
            } => {
                let (lo, hi) = preset.unwrap_or(BoundsPreset::Wide).bounds();
                GuidanceConfig::samg(omega_min.unwrap_or(lo), omega_max.unwrap_or(hi))
                    .with_kernel(*kernel)
                    .with_tau(*tau)
            }
        }
    }
}

fn default_guidance() -> Vec<GuidanceEntry> {
    let samg = |kernel| GuidanceEntry::Samg {
        preset: None,
        omega_min: Some(2.0),
        omega_max: Some(8.0),
        kernel,
        tau: DEFAULT_TAU,
    };
    vec![
        GuidanceEntry::Cfg { omega: 2.0 },
        GuidanceEntry::Cfg { omega: 8.0 },
        samg(1),
        samg(3),
    ]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Uniform scales.
    pub cfg: Vec<f64>,
    /// SAMG `[omega_min, omega_max]` pairs, each crossed with every kernel.
    pub samg: Vec<[f64; 2]>,
    pub kernels: Vec<usize>,
    /// Fraction of highest-energy pixels for the top-energy distance column.
    pub top_fraction: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            cfg: vec![2.0, 8.0],
            samg: vec![[2.0, 8.0]],
            kernels: vec![1, 3],
            top_fraction: 0.1,
        }
    }
}

impl AblateConfig {
    pub fn grid(&self) -> Result<Vec<GuidanceConfig>> {
        let mut grid: Vec<GuidanceConfig> = self.cfg.iter().map(|w| GuidanceConfig::uniform(*w)).collect();
        for [lo, hi] in &self.samg {
            for k in &self.kernels {
                grid.push(GuidanceConfig::samg(*lo, *hi).with_kernel(*k));
            }
        }
        if grid.is_empty() {
            bail!("ablation grid is empty: set ablate.cfg, or ablate.samg together with ablate.kernels");
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub score_points: usize,
    pub taylor_samples: usize,
    pub gronwall_samples: usize,
    pub spectral_points: usize,
    pub jensen_maps: usize,
    pub flow_samples: usize,
    /// Test hook: flips the Hessian sign inside the spectral check.
    pub corrupt_hessian_sign: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let d = VerifySettings::default();
        Self {
            seed: d.seed,
            score_points: d.score_points,
            taylor_samples: d.taylor_samples,
            gronwall_samples: d.gronwall_samples,
            spectral_points: d.spectral_points,
            jensen_maps: d.jensen_maps,
            flow_samples: d.flow_samples,
            corrupt_hessian_sign: d.corrupt_hessian_sign,
        }
    }
}

impl VerifyConfig {
    pub fn settings(&self) -> VerifySettings {
        VerifySettings {
            seed: self.seed,
            score_points: self.score_points,
            taylor_samples: self.taylor_samples,
            gronwall_samples: self.gronwall_samples,
            spectral_points: self.spectral_points,
            jensen_maps: self.jensen_maps,
            flow_samples: self.flow_samples,
            corrupt_hessian_sign: self.corrupt_hessian_sign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyMapsConfig {
    /// Required inside/outside energy ratio over the late steps.
    pub min_ratio: f64,
    /// Trailing fraction of steps the ratio is averaged over.
    pub late_fraction: f64,
}

impl Default for EnergyMapsConfig {
    fn default() -> Self {
        Self {
            min_ratio: 5.0,
            late_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: Option<PathBuf>,
    pub solver: SolverKind,
    pub steps: usize,
    pub seeds: SeedRange,
    /// Pixels with mask above this count toward alignment and the "inside" region.
    pub mask_threshold: f64,
    /// Off-manifold distance threshold in units of sigma0.
    pub off_threshold: f64,
    /// Also write every intermediate state of each trajectory.
    pub save_trajectories: bool,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub condition: ConditionConfig,
    pub guidance: Vec<GuidanceEntry>,
    pub ablate: AblateConfig,
    pub verify: VerifyConfig,
    pub energy_maps: EnergyMapsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            solver: SolverKind::Ddim,
            steps: 50,
            seeds: SeedRange { start: 0, end: 1 },
            mask_threshold: 0.5,
            off_threshold: 3.0,
            save_trajectories: false,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            condition: ConditionConfig::default(),
            guidance: default_guidance(),
            ablate: AblateConfig::default(),
            verify: VerifyConfig::default(),
            energy_maps: EnergyMapsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Builds every sub-object once so invalid values fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail!("steps must be positive");
        }
        self.model_spec().context("model")?;
        let schedule = self.schedule().context("schedule")?;
        if self.solver == SolverKind::Ddim && self.steps > schedule.steps() {
            bail!(
                "steps = {} exceeds schedule.training_steps = {}",
                self.steps,
                schedule.steps()
            );
        }
        for (i, g) in self.guidance.iter().enumerate() {
            g.to_config().validate().with_context(|| format!("guidance[{i}]"))?;
        }
        if !(0.0..1.0).contains(&self.energy_maps.late_fraction) || self.energy_maps.late_fraction == 0.0 {
            bail!("energy_maps.late_fraction must be in (0, 1)");
        }
        if !(self.ablate.top_fraction > 0.0 && self.ablate.top_fraction <= 1.0) {
            bail!("ablate.top_fraction must be in (0, 1]");
        }
        if !(self.off_threshold > 0.0) {
            bail!("off_threshold must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let s = &self.schedule;
        Ok(DiffusionSchedule::linear_beta(s.training_steps, s.beta_start, s.beta_end)?)
    }

    pub fn gmm(&self) -> Result<PixelGMM> {
        let m = &self.model;
        let means = m.means.clone().unwrap_or_else(|| {
            (0..m.channels)
                .map(|k| (0..m.channels).map(|c| if c == k { 1.0 } else { 0.0 }).collect())
                .collect()
        });
        if means.iter().any(|mu| mu.len() != m.channels) {
            bail!("every mean must have model.channels = {} entries", m.channels);
        }
        let k = means.len();
        let weights = m.weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
        Ok(PixelGMM::new(means, m.sigma0, weights)?)
    }

    pub fn condition_field(&self) -> Result<ConditionField> {
        let (h, w) = (self.model.height, self.model.width);
        let mask = match &self.condition.mask {
            MaskConfig::Constant { value } => MaskShape::Constant(*value),
            MaskConfig::Disk {
                radius,
                center,
                inside,
                outside,
            } => MaskShape::Disk {
                radius: *radius,
                center: center.map(|[y, x]| (y, x)),
                inside: *inside,
                outside: *outside,
            },
            MaskConfig::Half {
                vertical,
                inside,
                outside,
            } => MaskShape::Half {
                vertical: *vertical,
                inside: *inside,
                outside: *outside,
            },
            MaskConfig::Stripes {
                period,
                vertical,
                inside,
                outside,
            } => MaskShape::Stripes {
                period: *period,
                vertical: *vertical,
                inside: *inside,
                outside: *outside,
            },
            MaskConfig::Grid { values } => MaskShape::Grid(values.clone()),
        };
        let target = match &self.condition.target {
            TargetConfig::Constant { component } => TargetShape::Constant(*component),
            TargetConfig::Stripes {
                period,
                vertical,
                components,
            } => TargetShape::Stripes {
                period: *period,
                vertical: *vertical,
                components: *components,
            },
            TargetConfig::Grid { values } => TargetShape::Grid(values.clone()),
        };
        Ok(ConditionField::from_shapes(h, w, &mask, &target)?)
    }

    /// The analytic model, its condition, and the schedule (diffusion only).
    pub fn model_spec(&self) -> Result<AnalyticModel> {
        let gmm = self.gmm()?;
        let cond = self.condition_field().context("condition")?;
        let schedule = match self.solver {
            SolverKind::Ddim => Some(self.schedule()?),
            SolverKind::Euler => None,
        };
        Ok(AnalyticModel::new(gmm, cond, schedule)?)
    }

    pub fn solver(&self) -> Result<Solver> {
        Ok(match self.solver {
            SolverKind::Ddim => Solver::Ddim(self.schedule()?),
            SolverKind::Euler => Solver::Euler,
        })
    }

    pub fn guidance_configs(&self) -> Vec<GuidanceConfig> {
        self.guidance.iter().map(GuidanceEntry::to_config).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use samg::guidance::GuidanceMode;

    #[test]
    fn empty_config_uses_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.guidance_configs().len(), 4);
        assert!(c.model_spec().is_ok());
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
steps = 20
seeds = "3..7"
solver = "euler"

[model]
height = 4
width = 6
channels = 2
sigma0 = 0.2
means = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]

[condition]
mask = { shape = "half", vertical = true, inside = 1.0, outside = 0.0 }
target = { shape = "stripes", period = 2, components = 3 }

[[guidance]]
kind = "cfg"
omega = 3.0

[[guidance]]
kind = "samg"
preset = "narrow"
kernel = 3
"#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.seeds, SeedRange { start: 3, end: 7 });
        assert_eq!(c.seeds.len(), 4);
        assert_eq!(c.solver, SolverKind::Euler);
        let g = c.guidance_configs();
        assert_eq!(g[1].mode, GuidanceMode::Samg { omega_min: 1.0, omega_max: 3.0 });
        assert_eq!(g[1].kernel, 3);
        assert_eq!(c.gmm().unwrap().components(), 3);
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let err = ExperimentConfig::from_toml_str("steps = 10\n[model]\nsigmaa = 0.1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("sigmaa"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");

        let err = ExperimentConfig::from_toml_str("steps = \"many\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 1"));
    }

    #[test]
    fn semantic_validation() {
        assert!(ExperimentConfig::from_toml_str("steps = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("steps = 5000").is_err());
        assert!(ExperimentConfig::from_toml_str("[[guidance]]\nkind = \"samg\"\nomega_min = 5.0\nomega_max = 2.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[condition]\ntarget = { shape = \"constant\", component = 9 }\n").is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = \"5..5\"").is_err());
    }

    #[test]
    fn seed_ranges() {
        assert_eq!("0..64".parse::<SeedRange>().unwrap().len(), 64);
        assert!("7".parse::<SeedRange>().is_err());
        assert!("4..2".parse::<SeedRange>().is_err());
        assert_eq!("2..5".parse::<SeedRange>().unwrap().iter().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn ablation_grid() {
        let a = AblateConfig::default();
        let g = a.grid().unwrap();
        let labels: Vec<String> = g.iter().map(|c| c.label()).collect();
        assert_eq!(labels.len(), 4);
        let empty = AblateConfig {
            cfg: vec![],
            samg: vec![],
            ..Default::default()
        };
        assert!(empty.grid().is_err());
        let no_kernels = AblateConfig {
            cfg: vec![],
            kernels: vec![],
            ..Default::default()
        };
        assert!(no_kernels.grid().is_err());
    }
}

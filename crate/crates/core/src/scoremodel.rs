//! Analytic stand-ins for the noise and velocity predictors.
//!
//! Every pixel is an independent draw from an isotropic Gaussian mixture in
//! `R^C`. The conditional model re-weights the mixture per pixel through a
//! spatial mask, so conditional and unconditional predictions differ only
//! where the mask is non-zero. All scores, Hessians and velocities are
//! closed form.

use crate::error::{invalid, Error, Result};
use crate::field::LatentField;
use crate::linalg::SquareMatrix;
use crate::schedule::DiffusionSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Per-pixel Gaussian mixture data model with a shared isotropic spread.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGMM {
    means: Vec<Vec<f64>>,
    sigma0: f64,
    weights: Vec<f64>,
}

impl PixelGMM {
    /// `sigma0 = 0` is accepted and yields point-mass components. A zero weight
    /// hides a component from the unconditional model.
    pub fn new(means: Vec<Vec<f64>>, sigma0: f64, weights: Vec<f64>) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(invalid("mixture needs at least one component"));
        }
        let c = means[0].len();
        if c == 0 || means.iter().any(|m| m.len() != c) {
            return Err(invalid("all component means must share a positive dimension"));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("component means must be finite"));
        }
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(invalid(format!("sigma0 must be finite and non-negative, got {sigma0}")));
        }
        if weights.len() != k {
            return Err(Error::ShapeMismatch {
                expected: format!("{k} weights"),
                got: format!("{} weights", weights.len()),
            });
        }
        // zero-weight components only appear through the condition
        if weights.iter().any(|w| !(*w >= 0.0)) || !weights.iter().any(|w| *w > 0.0) {
            return Err(invalid("mixture weights must be non-negative with one positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self {
            means,
            sigma0,
            weights,
        })
    }

    pub fn uniform(means: Vec<Vec<f64>>, sigma0: f64) -> Result<Self> {
        let k = means.len().max(1);
        Self::new(means, sigma0, vec![1.0 / k as f64; k])
    }

    pub fn channels(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture weights at pixel `p`: the base weights blended toward a one-hot
    /// on the target component by the mask value.
    pub fn pixel_weights(&self, condition: Option<&ConditionField>, p: usize) -> Vec<f64> {
        let mut w = self.weights.clone();
        if let Some(cond) = condition {
            let m = cond.mask[p];
            let target = cond.target[p];
            for (k, wk) in w.iter_mut().enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                *wk = (1.0 - m) * *wk + m * onehot;
            }
        }
        w
    }

    /// Marginal of `z_t = √ᾱ z₀ + √(1−ᾱ) ε`: means `√ᾱ μ_k`, variance `ᾱσ0² + 1 − ᾱ`.
    pub fn marginal_params(&self, s: &DiffusionSchedule, t: usize) -> Result<MarginalParams> {
        Ok(self.diffusion_marginal(s.alpha_bar(t)?))
    }

    pub fn diffusion_marginal(&self, alpha_bar: f64) -> MarginalParams {
        let a = alpha_bar.sqrt();
        MarginalParams {
            means: self.means.iter().map(|m| m.iter().map(|v| a * v).collect()).collect(),
            variance: alpha_bar * self.sigma0 * self.sigma0 + (1.0 - alpha_bar),
        }
    }

    /// Marginal of `z_t = (1−t) z₀ + t ε`: means `(1−t) μ_k`, variance `(1−t)²σ0² + t²`.
    pub fn flow_marginal(&self, t: f64) -> MarginalParams {
        let a = 1.0 - t;
        MarginalParams {
            means: self.means.iter().map(|m| m.iter().map(|v| a * v).collect()).collect(),
            variance: a * a * self.sigma0 * self.sigma0 + t * t,
        }
    }

    /// The isotropic mixture seen at one pixel with the given weights.
    pub fn pixel_mixture(&self, marginal: &MarginalParams, weights: &[f64]) -> IsoMixture {
        IsoMixture::new(marginal.means.clone(), weights, marginal.variance)
    }

    fn check_query(&self, q: &ScoreQuery<'_>) -> Result<()> {
        if q.z.channels() != self.channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.channels()),
                got: format!("{} channels", q.z.channels()),
            });
        }
        if let Some(cond) = q.condition {
            if (cond.height, cond.width) != (q.z.height(), q.z.width()) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{} condition", q.z.height(), q.z.width()),
                    got: format!("{}x{}", cond.height, cond.width),
                });
            }
            cond.validate_for(self)?;
        }
        Ok(())
    }

    fn step_of(q: &ScoreQuery<'_>) -> Result<usize> {
        match q.time {
            QueryTime::Step(t) => Ok(t),
            QueryTime::Flow(_) => Err(invalid("diffusion query needs a discrete step")),
        }
    }

    /// Maps each pixel through `f(mixture, z_pixel) -> output channels`.
    fn per_pixel(
        &self,
        q: &ScoreQuery<'_>,
        marginal: &MarginalParams,
        mut f: impl FnMut(&IsoMixture, &[f64], &mut [f64]),
    ) -> LatentField {
        let c = self.channels();
        let mut out = LatentField::zeros(c, q.z.height(), q.z.width());
        let mut z = vec![0.0; c];
        let mut o = vec![0.0; c];
        let uncond = q.condition.is_none();
        let shared = uncond.then(|| self.pixel_mixture(marginal, &self.weights));
        for p in 0..q.z.pixel_count() {
            q.z.pixel_into(p, &mut z);
            match &shared {
                Some(mix) => f(mix, &z, &mut o),
                None => {
                    let w = self.pixel_weights(q.condition, p);
                    f(&self.pixel_mixture(marginal, &w), &z, &mut o)
                }
            }
            out.set_pixel(p, &o);
        }
        out
    }

    /// Noise prediction `−√(1−ᾱ_t) ∇ log p_t(z)`.
    pub fn eps_prediction(&self, q: &ScoreQuery<'_>, s: &DiffusionSchedule) -> Result<LatentField> {
        self.check_query(q)?;
        let t = Self::step_of(q)?;
        let alpha_bar = s.alpha_bar(t)?;
        let marginal = self.diffusion_marginal(alpha_bar);
        if marginal.variance <= 0.0 {
            return Err(invalid(format!("degenerate marginal variance at step {t}")));
        }
        let k = -(1.0 - alpha_bar).sqrt();
        let mut r = vec![0.0; self.components()];
        Ok(self.per_pixel(q, &marginal, |mix, z, out| {
            mix.score_into(z, &mut r, out);
            out.iter_mut().for_each(|v| *v *= k);
        }))
    }

    /// Velocity `E[ε − z₀ | z_t]` under `z_t = (1−t) z₀ + t ε`.
    pub fn velocity_prediction(&self, q: &ScoreQuery<'_>) -> Result<LatentField> {
        self.check_query(q)?;
        let t = match q.time {
            QueryTime::Flow(t) => t,
            QueryTime::Step(_) => return Err(invalid("velocity query needs a flow time")),
        };
        if !(t > 0.0 && t <= 1.0) {
            return Err(invalid(format!("flow time must be in (0, 1], got {t}")));
        }
        let marginal = self.flow_marginal(t);
        let a = 1.0 - t;
        // posterior of z₀ within component k: μ_k + gain · (z − (1−t) μ_k)
        let gain = a * self.sigma0 * self.sigma0 / marginal.variance;
        let mut r = vec![0.0; self.components()];
        Ok(self.per_pixel(q, &marginal, |mix, z, out| {
            mix.responsibilities_into(z, &mut r);
            out.iter_mut().for_each(|v| *v = 0.0);
            for (k, rk) in r.iter().enumerate() {
                if *rk == 0.0 {
                    continue;
                }
                let mu = &self.means[k];
                for c in 0..out.len() {
                    out[c] += rk * (mu[c] + gain * (z[c] - a * mu[c]));
                }
            }
            for c in 0..out.len() {
                out[c] = (z[c] - out[c]) / t;
            }
        }))
    }

    /// Exact per-pixel log marginal density, in row-major pixel order.
    pub fn log_density(&self, q: &ScoreQuery<'_>, s: &DiffusionSchedule) -> Result<Vec<f64>> {
        self.check_query(q)?;
        let marginal = self.marginal_params(s, Self::step_of(q)?)?;
        let mut z = vec![0.0; self.channels()];
        Ok((0..q.z.pixel_count())
            .map(|p| {
                q.z.pixel_into(p, &mut z);
                let w = self.pixel_weights(q.condition, p);
                self.pixel_mixture(&marginal, &w).log_density(&z)
            })
            .collect())
    }

    /// Exact per-pixel Hessian of the log marginal density.
    pub fn score_hessian(&self, q: &ScoreQuery<'_>, s: &DiffusionSchedule) -> Result<Vec<SquareMatrix>> {
        self.check_query(q)?;
        let marginal = self.marginal_params(s, Self::step_of(q)?)?;
        let mut z = vec![0.0; self.channels()];
        Ok((0..q.z.pixel_count())
            .map(|p| {
                q.z.pixel_into(p, &mut z);
                let w = self.pixel_weights(q.condition, p);
                self.pixel_mixture(&marginal, &w).hessian(&z)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalParams {
    pub means: Vec<Vec<f64>>,
    pub variance: f64,
}

/// Isotropic Gaussian mixture `Σ_k w_k N(a_k, var·I)` in `R^C`.
#[derive(Debug, Clone)]
pub struct IsoMixture {
    means: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    variance: f64,
}

impl IsoMixture {
    pub fn new(means: Vec<Vec<f64>>, weights: &[f64], variance: f64) -> Self {
        assert_eq!(means.len(), weights.len());
        Self {
            means,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    fn log_terms_into(&self, z: &[f64], out: &mut [f64]) -> f64 {
        let inv2 = 0.5 / self.variance;
        let mut max = f64::NEG_INFINITY;
        for (k, (mu, lw)) in self.means.iter().zip(&self.log_weights).enumerate() {
            if *lw == f64::NEG_INFINITY {
                out[k] = f64::NEG_INFINITY;
                continue;
            }
            let d2: f64 = mu.iter().zip(z).map(|(m, x)| (x - m) * (x - m)).sum();
            out[k] = lw - d2 * inv2;
            max = max.max(out[k]);
        }
        max
    }

    /// Posterior component probabilities, written into `r`.
    pub fn responsibilities_into(&self, z: &[f64], r: &mut [f64]) {
        let max = self.log_terms_into(z, r);
        let mut total = 0.0;
        for v in r.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            total += *v;
        }
        r.iter_mut().for_each(|v| *v /= total);
    }

    pub fn responsibilities(&self, z: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.means.len()];
        self.responsibilities_into(z, &mut r);
        r
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let mut terms = vec![0.0; self.means.len()];
        let max = self.log_terms_into(z, &mut terms);
        let sum: f64 = terms
            .iter()
            .filter(|v| **v > f64::NEG_INFINITY)
            .map(|v| (v - max).exp())
            .sum();
        max + sum.ln() - 0.5 * self.dim() as f64 * (LN_2PI + self.variance.ln())
    }

    /// `∇ log p(z) = Σ_k r_k (a_k − z) / var`.
    pub fn score_into(&self, z: &[f64], r: &mut [f64], out: &mut [f64]) {
        self.responsibilities_into(z, r);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (mu, rk) in self.means.iter().zip(r.iter()) {
            if *rk == 0.0 {
                continue;
            }
            for c in 0..out.len() {
                out[c] += rk * mu[c];
            }
        }
        for c in 0..out.len() {
            out[c] = (out[c] - z[c]) / self.variance;
        }
    }

    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.means.len()];
        let mut out = vec![0.0; z.len()];
        self.score_into(z, &mut r, &mut out);
        out
    }

    /// `∇² log p(z) = −I/var + Cov_r[a] / var²`.
    pub fn hessian(&self, z: &[f64]) -> SquareMatrix {
        let n = self.dim();
        let r = self.responsibilities(z);
        let mut mean = vec![0.0; n];
        for (mu, rk) in self.means.iter().zip(&r) {
            for c in 0..n {
                mean[c] += rk * mu[c];
            }
        }
        let mut h = SquareMatrix::zeros(n);
        let inv2 = 1.0 / (self.variance * self.variance);
        for (mu, rk) in self.means.iter().zip(&r) {
            if *rk == 0.0 {
                continue;
            }
            for i in 0..n {
                let di = mu[i] - mean[i];
                for j in 0..n {
                    h.add_at(i, j, rk * di * (mu[j] - mean[j]) * inv2);
                }
            }
        }
        for i in 0..n {
            h.add_at(i, i, -1.0 / self.variance);
        }
        h
    }
}

/// Spatial conditioning: a mask `M(x) ∈ [0, 1]` and a target component per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionField {
    height: usize,
    width: usize,
    mask: Vec<f64>,
    target: Vec<usize>,
}

impl ConditionField {
    /// Mask values are clamped to `[0, 1]`.
    pub fn new(height: usize, width: usize, mask: Vec<f64>, target: Vec<usize>) -> Result<Self> {
        let n = height * width;
        if n == 0 {
            return Err(invalid("condition dimensions must be positive"));
        }
        if mask.len() != n || target.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} mask and target entries"),
                got: format!("{} mask, {} target", mask.len(), target.len()),
            });
        }
        if mask.iter().any(|v| v.is_nan()) {
            return Err(invalid("mask contains NaN"));
        }
        Ok(Self {
            height,
            width,
            mask: mask.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            target,
        })
    }

    pub fn from_shapes(height: usize, width: usize, mask: &MaskShape, target: &TargetShape) -> Result<Self> {
        Self::new(height, width, mask.render(height, width)?, target.render(height, width)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn validate_for(&self, model: &PixelGMM) -> Result<()> {
        match self.target.iter().find(|k| **k >= model.components()) {
            Some(k) => Err(invalid(format!(
                "target component {k} out of range for a {}-component mixture",
                model.components()
            ))),
            None => Ok(()),
        }
    }
}

/// Named mask generators.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskShape {
    Constant(f64),
    /// Disk centred at the grid centre unless a centre is given.
    Disk {
        radius: f64,
        center: Option<(f64, f64)>,
        inside: f64,
        outside: f64,
    },
    /// Left half (`vertical = true`) or top half set to `inside`.
    Half { vertical: bool, inside: f64, outside: f64 },
    /// Alternating bands of `period` pixels starting with `inside`.
    Stripes {
        period: usize,
        vertical: bool,
        inside: f64,
        outside: f64,
    },
    Grid(Vec<f64>),
}

impl MaskShape {
    pub fn render(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        let n = height * width;
        let cells = (0..height).flat_map(|y| (0..width).map(move |x| (y, x)));
        Ok(match self {
            MaskShape::Constant(v) => vec![*v; n],
            MaskShape::Disk {
                radius,
                center,
                inside,
                outside,
            } => {
                let (cy, cx) = center.unwrap_or(((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0));
                cells
                    .map(|(y, x)| {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dy * dy + dx * dx <= radius * radius {
                            *inside
                        } else {
                            *outside
                        }
                    })
                    .collect()
            }
            MaskShape::Half {
                vertical,
                inside,
                outside,
            } => cells
                .map(|(y, x)| {
                    let first = if *vertical { x < width / 2 } else { y < height / 2 };
                    if first {
                        *inside
                    } else {
                        *outside
                    }
                })
                .collect(),
            MaskShape::Stripes {
                period,
                vertical,
                inside,
                outside,
            } => {
                if *period == 0 {
                    return Err(invalid("stripe period must be positive"));
                }
                cells
                    .map(|(y, x)| {
                        let i = if *vertical { x } else { y };
                        if (i / period) % 2 == 0 {
                            *inside
                        } else {
                            *outside
                        }
                    })
                    .collect()
            }
            MaskShape::Grid(v) => {
                if v.len() != n {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{n} mask values"),
                        got: format!("{}", v.len()),
                    });
                }
                v.clone()
            }
        })
    }
}

/// Named target-component generators.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetShape {
    Constant(usize),
    /// Bands of `period` pixels cycling through components `0..components`.
    Stripes {
        period: usize,
        vertical: bool,
        components: usize,
    },
    Grid(Vec<usize>),
}

impl TargetShape {
    pub fn render(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        let n = height * width;
        Ok(match self {
            TargetShape::Constant(k) => vec![*k; n],
            TargetShape::Stripes {
                period,
                vertical,
                components,
            } => {
                if *period == 0 || *components == 0 {
                    return Err(invalid("stripe period and component count must be positive"));
                }
                (0..n)
                    .map(|p| {
                        let i = if *vertical { p % width } else { p / width };
                        (i / period) % components
                    })
                    .collect()
            }
            TargetShape::Grid(v) => {
                if v.len() != n {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{n} target indices"),
                        got: format!("{}", v.len()),
                    });
                }
                v.clone()
            }
        })
    }
}

/// Time argument of a model query: a diffusion step or a flow time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryTime {
    Step(usize),
    Flow(f64),
}

impl QueryTime {
    pub fn as_f64(&self) -> f64 {
        match self {
            QueryTime::Step(t) => *t as f64,
            QueryTime::Flow(t) => *t,
        }
    }
}

/// Arguments of one model evaluation; `condition = None` is the null condition.
#[derive(Debug, Clone, Copy)]
pub struct ScoreQuery<'a> {
    pub z: &'a LatentField,
    pub time: QueryTime,
    pub condition: Option<&'a ConditionField>,
}

impl<'a> ScoreQuery<'a> {
    pub fn unconditional(z: &'a LatentField, time: QueryTime) -> Self {
        Self {
            z,
            time,
            condition: None,
        }
    }

    pub fn conditional(z: &'a LatentField, time: QueryTime, condition: &'a ConditionField) -> Self {
        Self {
            z,
            time,
            condition: Some(condition),
        }
    }
}

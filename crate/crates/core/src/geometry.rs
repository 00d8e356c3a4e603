//! Closed-form geometry fixtures and the bounds checked against them:
//! sphere deviation law, guidance-scale limits, Grönwall accumulation,
//! level-set curvature versus the score-Jacobian norm, and smoothing of
//! energy peaks.

use crate::error::{invalid, Result};
use crate::field::{box_smooth, reflect_index, EnergyMap, SpatialMap};
use crate::linalg::{dot, norm, spectral_norm, SquareMatrix, POWER_ITERATIONS, POWER_TOLERANCE};
use crate::schedule::DiffusionSchedule;
use crate::scoremodel::PixelGMM;

const ON_SPHERE_TOL: f64 = 1e-9;

/// Round sphere of radius `R` in `R^d`; normal curvature `1/R` everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereManifold {
    radius: f64,
    dim: usize,
}

impl SphereManifold {
    pub fn new(radius: f64, dim: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!("sphere radius must be positive, got {radius}")));
        }
        if dim < 2 {
            return Err(invalid(format!("sphere needs ambient dimension >= 2, got {dim}")));
        }
        Ok(Self { radius, dim })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn curvature(&self) -> f64 {
        1.0 / self.radius
    }

    /// `R e₀`, with unit tangent `e₁`.
    pub fn base_point(&self) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.dim];
        let mut v = vec![0.0; self.dim];
        p[0] = self.radius;
        v[1] = 1.0;
        (p, v)
    }

    fn check_tangent(&self, p: &[f64], v: &[f64]) -> Result<()> {
        if p.len() != self.dim || v.len() != self.dim {
            return Err(invalid(format!(
                "expected vectors of length {}, got {} and {}",
                self.dim,
                p.len(),
                v.len()
            )));
        }
        if (norm(p) - self.radius).abs() >= ON_SPHERE_TOL {
            return Err(invalid(format!("point has norm {}, not {}", norm(p), self.radius)));
        }
        if dot(p, v).abs() >= ON_SPHERE_TOL {
            return Err(invalid(format!("direction is not tangent: <p, v> = {}", dot(p, v))));
        }
        if (norm(v) - 1.0).abs() >= ON_SPHERE_TOL {
            return Err(invalid(format!("tangent must be unit length, got {}", norm(v))));
        }
        Ok(())
    }

    /// Geodesic `cos(s/R) p + R sin(s/R) v`.
    pub fn exp(&self, p: &[f64], v: &[f64], s: f64) -> Result<Vec<f64>> {
        self.check_tangent(p, v)?;
        let theta = s / self.radius;
        let (c, sn) = (theta.cos(), self.radius * theta.sin());
        Ok(p.iter().zip(v).map(|(pi, vi)| c * pi + sn * vi).collect())
    }

    /// `‖(p + s v) − exp_p(s v)‖`.
    pub fn deviation(&self, p: &[f64], v: &[f64], s: f64) -> Result<f64> {
        let g = self.exp(p, v, s)?;
        Ok(p.iter()
            .zip(v)
            .zip(&g)
            .map(|((pi, vi), gi)| {
                let d = pi + s * vi - gi;
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }
}

pub fn sphere_exp(m: &SphereManifold, p: &[f64], v: &[f64], s: f64) -> Result<Vec<f64>> {
    m.exp(p, v, s)
}

pub fn linear_vs_geodesic_deviation(m: &SphereManifold, p: &[f64], v: &[f64], s: f64) -> Result<f64> {
    m.deviation(p, v, s)
}

/// Power-law fit `deviation ≈ coefficient · s^exponent`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub steps: Vec<f64>,
    pub deviations: Vec<f64>,
    pub exponent: f64,
    pub coefficient: f64,
    /// `κ/2` for the fixture.
    pub expected_coefficient: f64,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn fit_deviation_law(m: &SphereManifold, steps: &[f64]) -> Result<DeviationReport> {
    let (p, v) = m.base_point();
    fit_deviation_law_at(m, &p, &v, steps)
}

/// Least-squares line through `(log s, log deviation)`.
pub fn fit_deviation_law_at(m: &SphereManifold, p: &[f64], v: &[f64], steps: &[f64]) -> Result<DeviationReport> {
    if steps.len() < 3 {
        return Err(invalid(format!("need at least 3 step sizes, got {}", steps.len())));
    }
    if steps.iter().any(|s| !(*s > 0.0)) {
        return Err(invalid("step sizes must be positive"));
    }
    let lo = steps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = steps.iter().copied().fold(0.0, f64::max);
    if hi < 10.0 * lo {
        return Err(invalid(format!("step sizes must span a decade, got [{lo}, {hi}]")));
    }
    if hi > 0.25 * m.radius() {
        return Err(invalid(format!(
            "step sizes must be small against the radius {}, got {hi}",
            m.radius()
        )));
    }
    let deviations = steps
        .iter()
        .map(|s| m.deviation(p, v, *s))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = steps.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = deviations.iter().map(|d| d.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let exponent = sxy / sxx;
    let coefficient = (my - exponent * mx).exp();
    if !(exponent.is_finite() && coefficient.is_finite()) {
        return Err(invalid("deviation fit is not finite"));
    }
    Ok(DeviationReport {
        steps: steps.to_vec(),
        deviations,
        exponent,
        coefficient,
        expected_coefficient: 0.5 * m.curvature(),
    })
}

fn require_positive(args: &[(&str, f64)]) -> Result<()> {
    for (name, v) in args {
        if !(*v > 0.0) {
            return Err(invalid(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Largest per-pixel scale keeping the deviation under `delta`:
/// `√(2δ / (κ c_t E))`.
pub fn ideal_omega(delta: f64, kappa: f64, c_t: f64, energy: f64) -> Result<f64> {
    require_positive(&[("delta", delta), ("kappa", kappa), ("c_t", c_t), ("energy", energy)])?;
    Ok((2.0 * delta / (kappa * c_t * energy)).sqrt())
}

/// Local Euler deviation bound `½ κ_F ω² Δt² C E`.
pub fn flow_truncation_bound(kappa_f: f64, omega: f64, dt: f64, channels: usize, energy: f64) -> f64 {
    0.5 * kappa_f * omega * omega * dt * dt * channels as f64 * energy
}

/// Inverse of [`flow_truncation_bound`]: `(1/Δt) √(2δ / (κ_F C E))`.
pub fn flow_omega_limit(delta: f64, kappa_f: f64, dt: f64, channels: usize, energy: f64) -> f64 {
    (2.0 * delta / (kappa_f * channels as f64 * energy)).sqrt() / dt
}

/// `δ/(Lh) · (e^{LNh} − 1)`.
pub fn gronwall_bound(delta: f64, lipschitz: f64, h: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let lh = lipschitz * h;
    delta / lh * (lh * n as f64).exp_m1()
}

/// Iterates `e_k = (1 + Lh) e_{k−1} + δ` from `e₀ = 0` and returns `e_N`.
pub fn simulate_error_recursion(delta: f64, lipschitz: f64, h: f64, n: usize) -> f64 {
    let growth = 1.0 + lipschitz * h;
    (0..n).fold(0.0, |e, _| growth * e + delta)
}

/// Normal curvature `|vᵀHv| / ‖∇‖` of the level set through the point.
pub fn level_set_curvature(grad: &[f64], hess: &SquareMatrix, v: &[f64]) -> Result<f64> {
    let g = norm(grad);
    if !(g > 0.0) {
        return Err(invalid("zero gradient: level set is undefined"));
    }
    if grad.len() != hess.dim() || v.len() != hess.dim() {
        return Err(invalid("gradient, Hessian and direction sizes differ"));
    }
    if (norm(v) - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("direction must be unit length, got {}", norm(v))));
    }
    if dot(grad, v).abs() > 1e-6 * g {
        return Err(invalid("direction is not tangent to the level set"));
    }
    Ok(hess.quadratic_form(v).abs() / g)
}

/// Component of `d` orthogonal to `g`, normalized; `None` when it is shorter than `1e-9`.
pub fn tangent_direction(d: &[f64], g: &[f64]) -> Option<Vec<f64>> {
    let gg = dot(g, g);
    let k = if gg > 0.0 { dot(d, g) / gg } else { 0.0 };
    let t: Vec<f64> = d.iter().zip(g).map(|(di, gi)| di - k * gi).collect();
    let n = norm(&t);
    (n >= 1e-9).then(|| t.into_iter().map(|x| x / n).collect())
}

/// One evaluation point: a pixel value and the conditional weights that
/// define the guidance direction there.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProbe {
    pub z: Vec<f64>,
    pub cond_weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpectralOptions {
    /// Fault injection: flip the sign of the Hessian before forming the Jacobian.
    pub corrupt_hessian_sign: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectralReport {
    pub tested: usize,
    pub skipped: usize,
    /// Points where `κ > ρ(J)/‖ε_u‖ + 1e-9`.
    pub violations: usize,
    /// Largest `κ − ρ(J)/‖ε_u‖` seen.
    pub max_slack: f64,
    /// Points where the bound is attained within `1e-6` (relative).
    pub equality_points: usize,
    /// Points where `J = −√(1−ᾱ) H` disagrees with finite differences of `ε_u`.
    pub jacobian_mismatches: usize,
    pub max_jacobian_error: f64,
}

impl SpectralReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.jacobian_mismatches == 0
    }
}

/// `κ` and `ρ(J)/‖ε_u‖` at one point, with `J = −noise_scale · H`.
pub fn curvature_and_bound(grad: &[f64], hess: &SquareMatrix, v: &[f64], noise_scale: f64) -> Result<(f64, f64)> {
    let kappa = level_set_curvature(grad, hess, v)?;
    let jac = hess.scaled(-noise_scale);
    // a start that happens to be an eigenvector pins the iteration, so also run a generic start
    let rho = spectral_norm(&jac, Some(v), POWER_ITERATIONS, POWER_TOLERANCE)
        .max(spectral_norm(&jac, None, POWER_ITERATIONS, POWER_TOLERANCE));
    Ok((kappa, rho / (noise_scale * norm(grad))))
}

/// Checks `κ(x) ≤ ρ(J_ε(x)) / ‖ε_u(x)‖` at every probe on the step-`t`
/// marginal of `gmm`, along the tangential part of `−Δε`.
pub fn verify_spectral_bound(
    gmm: &PixelGMM,
    probes: &[SpectralProbe],
    schedule: &DiffusionSchedule,
    t: usize,
    opts: SpectralOptions,
) -> Result<SpectralReport> {
    let alpha_bar = schedule.alpha_bar(t)?;
    let noise_scale = (1.0 - alpha_bar).sqrt();
    if !(noise_scale > 0.0) {
        return Err(invalid("spectral check needs t >= 1"));
    }
    let marginal = gmm.diffusion_marginal(alpha_bar);
    let uncond = gmm.pixel_mixture(&marginal, gmm.weights());
    let mut report = SpectralReport {
        max_slack: f64::NEG_INFINITY,
        ..Default::default()
    };
    for probe in probes {
        if probe.z.len() != gmm.channels() || probe.cond_weights.len() != gmm.components() {
            return Err(invalid("probe does not match the mixture dimensions"));
        }
        let cond = gmm.pixel_mixture(&marginal, &probe.cond_weights);
        let grad = uncond.score(&probe.z);
        let eps_norm = noise_scale * norm(&grad);
        if eps_norm <= 1e-9 {
            report.skipped += 1;
            continue;
        }
        // −Δε = √(1−ᾱ) (∇ log p_c − ∇ log p_u)
        let neg_delta: Vec<f64> = cond
            .score(&probe.z)
            .iter()
            .zip(&grad)
            .map(|(c, u)| noise_scale * (c - u))
            .collect();
        let Some(v) = tangent_direction(&neg_delta, &grad) else {
            report.skipped += 1;
            continue;
        };
        let mut hess = uncond.hessian(&probe.z);
        if opts.corrupt_hessian_sign {
            hess = hess.scaled(-1.0);
        }
        let (kappa, bound) = curvature_and_bound(&grad, &hess, &v, noise_scale)?;
        report.tested += 1;
        let slack = kappa - bound;
        report.max_slack = report.max_slack.max(slack);
        if slack > 1e-9 {
            report.violations += 1;
        }
        if (kappa - bound).abs() <= 1e-6 * bound.max(f64::MIN_POSITIVE) {
            report.equality_points += 1;
        }

        let jac = hess.scaled(-noise_scale);
        let fd = eps_jacobian_fd(&uncond, &probe.z, noise_scale);
        let err = jac.max_abs_diff(&fd);
        report.max_jacobian_error = report.max_jacobian_error.max(err);
        if err > 1e-4 * (1.0 + jac.frobenius()) {
            report.jacobian_mismatches += 1;
        }
    }
    if report.tested == 0 {
        report.max_slack = 0.0;
    }
    Ok(report)
}

/// Central-difference Jacobian of `ε(z) = −noise_scale · ∇ log p(z)`.
fn eps_jacobian_fd(mix: &crate::scoremodel::IsoMixture, z: &[f64], noise_scale: f64) -> SquareMatrix {
    let n = z.len();
    let h = 1e-5 * mix.variance().sqrt();
    let mut jac = SquareMatrix::zeros(n);
    let mut zp = z.to_vec();
    for j in 0..n {
        zp[j] = z[j] + h;
        let up = mix.score(&zp);
        zp[j] = z[j] - h;
        let dn = mix.score(&zp);
        zp[j] = z[j];
        for i in 0..n {
            jac.set(i, j, -noise_scale * (up[i] - dn[i]) / (2.0 * h));
        }
    }
    jac
}

/// One strict local maximum and what smoothing does to it.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakRecord {
    pub y: usize,
    pub x: usize,
    pub raw: f64,
    pub smoothed: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JensenReport {
    pub peaks: Vec<PeakRecord>,
    /// Peaks where smoothing did not strictly lower the energy.
    pub energy_violations: usize,
    /// Peaks where `smoothed^{-1/2}` did not strictly exceed `raw^{-1/2}`.
    pub scale_violations: usize,
}

impl JensenReport {
    pub fn passed(&self) -> bool {
        self.energy_violations == 0 && self.scale_violations == 0
    }
}

/// Pixels strictly above every other distinct pixel of their `k × k`
/// reflected window (the support of the box filter).
pub fn strict_local_maxima<M: SpatialMap>(e: &M, k: usize) -> Vec<(usize, usize)> {
    let (h, w) = (e.height(), e.width());
    let r = (k / 2) as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = e.at(y, x);
            let mut has_other = false;
            let mut is_max = true;
            'window: for dy in -r..=r {
                let yy = reflect_index(y as isize + dy, h);
                for dx in -r..=r {
                    let xx = reflect_index(x as isize + dx, w);
                    if (yy, xx) == (y, x) {
                        continue;
                    }
                    has_other = true;
                    if e.at(yy, xx) >= v {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if has_other && is_max {
                out.push((y, x));
            }
        }
    }
    out
}

/// At each strict local maximum, smoothing must lower the energy and raise
/// the implied scale `E^{-1/2}`.
pub fn jensen_smoothing_check(e: &EnergyMap, k: usize) -> Result<JensenReport> {
    if k < 3 || k % 2 == 0 {
        return Err(invalid(format!("kernel must be odd and > 1, got {k}")));
    }
    let smoothed = box_smooth(e, k)?;
    let mut report = JensenReport::default();
    for (y, x) in strict_local_maxima(e, k) {
        let raw = e.at(y, x);
        let sm = smoothed.at(y, x);
        if !(sm < raw) {
            report.energy_violations += 1;
        }
        if !(sm.powf(-0.5) > raw.powf(-0.5)) {
            report.scale_violations += 1;
        }
        report.peaks.push(PeakRecord { y, x, raw, smoothed: sm });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit_circle() -> SphereManifold {
        SphereManifold::new(1.0, 2).unwrap()
    }

    #[test]
    fn sphere_rejects_bad_parameters() {
        assert!(SphereManifold::new(0.0, 3).is_err());
        assert!(SphereManifold::new(-1.0, 3).is_err());
        assert!(SphereManifold::new(1.0, 1).is_err());
    }

    #[test]
    fn exp_map_examples() {
        let m = unit_circle();
        let p = [1.0, 0.0];
        let v = [0.0, 1.0];
        assert_eq!(m.exp(&p, &v, 0.0).unwrap(), p.to_vec());
        let q = m.exp(&p, &v, PI / 2.0).unwrap();
        assert!(q[0].abs() < 1e-15 && (q[1] - 1.0).abs() < 1e-15);

        assert!(m.exp(&[1.1, 0.0], &v, 0.1).is_err());
        assert!(m.exp(&p, &[0.1, 1.0], 0.1).is_err());
        assert!(m.exp(&p, &[0.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn circle_deviation_example() {
        let m = unit_circle();
        let d = m.deviation(&[1.0, 0.0], &[0.0, 1.0], 0.1).unwrap();
        let expect = ((1.0 - 0.1f64.cos()).powi(2) + (0.1 - 0.1f64.sin()).powi(2)).sqrt();
        assert!((d - expect).abs() < 1e-15);
        assert!((d - 0.0049986).abs() < 5e-7);
        assert_eq!(m.deviation(&[1.0, 0.0], &[0.0, 1.0], 0.0).unwrap(), 0.0);

        let big = SphereManifold::new(2.0, 2).unwrap();
        let d2 = big.deviation(&[2.0, 0.0], &[0.0, 1.0], 0.01).unwrap();
        let d1 = m.deviation(&[1.0, 0.0], &[0.0, 1.0], 0.01).unwrap();
        assert!((d2 / d1 - 0.5).abs() < 1e-4, "{}", d2 / d1);
    }

    #[test]
    fn deviation_law_fit() {
        let s = log_space(1e-3, 1e-1, 25);
        let r = fit_deviation_law(&unit_circle(), &s).unwrap();
        assert!((r.exponent - 2.0).abs() < 0.02, "{}", r.exponent);
        assert!((r.coefficient - 0.5).abs() < 0.005, "{}", r.coefficient);

        let m = SphereManifold::new(2.0, 3).unwrap();
        let r = fit_deviation_law(&m, &log_space(2e-3, 2e-1, 25)).unwrap();
        assert!((r.coefficient - 0.25).abs() < 0.003);
        assert_eq!(r.expected_coefficient, 0.25);

        for d in [2, 3, 8] {
            let m = SphereManifold::new(1.0, d).unwrap();
            let r = fit_deviation_law(&m, &s).unwrap();
            assert!((r.exponent - 2.0).abs() < 0.02);
        }
        assert!(fit_deviation_law(&unit_circle(), &[1e-3, 1e-1]).is_err());
        assert!(fit_deviation_law(&unit_circle(), &[1e-2, 2e-2, 3e-2]).is_err());
    }

    #[test]
    fn log_space_endpoints() {
        let s = log_space(1e-3, 1e-1, 3);
        assert!((s[0] - 1e-3).abs() < 1e-18 && (s[1] - 1e-2).abs() < 1e-15 && (s[2] - 1e-1).abs() < 1e-15);
    }

    #[test]
    fn ideal_omega_examples() {
        assert!((ideal_omega(0.005, 1.0, 1.0, 0.01).unwrap() - 1.0).abs() < 1e-12);
        let a = ideal_omega(0.01, 2.0, 0.5, 1.0).unwrap();
        let b = ideal_omega(0.01, 2.0, 0.5, 4.0).unwrap();
        assert!((b - a / 2.0).abs() < 1e-12);
        assert!(ideal_omega(1e-300, 1.0, 1.0, 1.0).unwrap() < 1e-149);
        assert!(ideal_omega(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(ideal_omega(1.0, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn flow_bound_examples() {
        assert!((flow_truncation_bound(1.0, 1.0, 0.1, 1, 1.0) - 0.005).abs() < 1e-15);
        let a = flow_truncation_bound(0.7, 3.0, 0.2, 4, 0.3);
        let b = flow_truncation_bound(0.7, 3.0, 0.1, 4, 0.3);
        assert!((b - a / 4.0).abs() < 1e-15);
        assert!((flow_omega_limit(0.005, 1.0, 0.1, 1, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gronwall_examples() {
        let b = gronwall_bound(0.01, 1.0, 0.1, 10);
        assert!((b - 0.1 * (1f64.exp() - 1.0)).abs() < 1e-12);
        assert!((b - 0.171828).abs() < 1e-6);
        let e = simulate_error_recursion(0.01, 1.0, 0.1, 10);
        assert!((e - 0.01 * (1.1f64.powi(10) - 1.0) / 0.1).abs() < 1e-12);
        assert!((e - 0.15937).abs() < 1e-5);
        assert_eq!(gronwall_bound(0.3, 1.0, 0.1, 0), 0.0);
        assert_eq!(simulate_error_recursion(0.3, 1.0, 0.1, 1), 0.3);
    }

    #[test]
    fn curvature_of_isotropic_gaussian_is_inverse_radius() {
        let s2: f64 = 0.7;
        for (r, angle) in [(0.5, 0.3), (2.0, 1.0), (3.5, -2.0)] {
            let z = [r * f64::cos(angle), r * f64::sin(angle)];
            let grad = [-z[0] / s2, -z[1] / s2];
            let hess = SquareMatrix::identity(2).scaled(-1.0 / s2);
            let v = [-f64::sin(angle), f64::cos(angle)];
            let k = level_set_curvature(&grad, &hess, &v).unwrap();
            assert!((k - 1.0 / r).abs() < 1e-12);
            let (kappa, bound) = curvature_and_bound(&grad, &hess, &v, 0.6).unwrap();
            assert!((kappa - bound).abs() < 1e-9 * bound);

            let k3 = level_set_curvature(&grad, &hess.scaled(3.0), &v).unwrap();
            assert!((k3 - 3.0 * k).abs() < 1e-12);
            let g2 = [grad[0] * 2.0, grad[1] * 2.0];
            assert!((level_set_curvature(&g2, &hess, &v).unwrap() - k / 2.0).abs() < 1e-12);
        }
        let hess = SquareMatrix::identity(2);
        assert!(level_set_curvature(&[0.0, 0.0], &hess, &[1.0, 0.0]).is_err());
        assert!(level_set_curvature(&[1.0, 0.0], &hess, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bound_attained_along_top_eigenvector() {
        // gradient along e₁, Hessian with its largest |eigenvalue| along e₀
        let grad = [0.0, 2.0, 0.0];
        let hess = SquareMatrix::from_rows(&[vec![-5.0, 0.0, 0.0], vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 0.5]]);
        let (kappa, bound) = curvature_and_bound(&grad, &hess, &[1.0, 0.0, 0.0], 0.3).unwrap();
        assert!((kappa - bound).abs() < 1e-6 * bound);
        let (kappa, bound) = curvature_and_bound(&grad, &hess, &[0.0, 0.0, 1.0], 0.3).unwrap();
        assert!(kappa < bound - 1.0);
    }

    fn isotropic_gmm() -> PixelGMM {
        PixelGMM::uniform(vec![vec![0.0, 0.0]], 0.5).unwrap()
    }

    #[test]
    fn spectral_bound_isotropic_equality() {
        let s = DiffusionSchedule::linear_beta(100, 1e-4, 0.02).unwrap();
        // a single component has no conditional shift; use a second, zero-weight target
        let gmm = PixelGMM::new(vec![vec![0.0, 0.0], vec![3.0, 1.0]], 0.5, vec![1.0, 0.0]).unwrap();
        let probes: Vec<SpectralProbe> = [[1.0, 0.5], [1.5, -0.3], [0.6, 1.2]]
            .iter()
            .map(|z| SpectralProbe {
                z: z.to_vec(),
                cond_weights: vec![0.5, 0.5],
            })
            .collect();
        let r = verify_spectral_bound(&gmm, &probes, &s, 40, SpectralOptions::default()).unwrap();
        assert_eq!(r.tested, 3);
        assert_eq!(r.violations, 0);
        assert_eq!(r.equality_points, 3);
        assert!(r.max_slack.abs() < 1e-9);
        assert!(r.passed());
    }

    #[test]
    fn spectral_bound_skips_degenerate_points() {
        let s = DiffusionSchedule::linear_beta(100, 1e-4, 0.02).unwrap();
        let gmm = isotropic_gmm();
        // zero score at the mean, and no conditional shift anywhere
        let probes = vec![
            SpectralProbe {
                z: vec![0.0, 0.0],
                cond_weights: vec![1.0],
            },
            SpectralProbe {
                z: vec![1.0, 0.0],
                cond_weights: vec![1.0],
            },
        ];
        let r = verify_spectral_bound(&gmm, &probes, &s, 10, SpectralOptions::default()).unwrap();
        assert_eq!((r.tested, r.skipped), (0, 2));
    }

    #[test]
    fn corrupted_hessian_is_caught() {
        let s = DiffusionSchedule::linear_beta(100, 1e-4, 0.02).unwrap();
        let gmm = PixelGMM::uniform(vec![vec![1.0, 0.0], vec![-1.0, 0.5]], 0.3).unwrap();
        let probes = vec![SpectralProbe {
            z: vec![0.2, 0.4],
            cond_weights: vec![0.9, 0.1],
        }];
        let ok = verify_spectral_bound(&gmm, &probes, &s, 30, SpectralOptions::default()).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = verify_spectral_bound(
            &gmm,
            &probes,
            &s,
            30,
            SpectralOptions {
                corrupt_hessian_sign: true,
            },
        )
        .unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.jacobian_mismatches, 1);
    }

    #[test]
    fn jensen_examples() {
        let e = EnergyMap::new(1, 3, vec![0.0, 10.0, 0.0]).unwrap();
        let r = jensen_smoothing_check(&e, 3).unwrap();
        assert_eq!(r.peaks.len(), 1);
        let p = &r.peaks[0];
        assert_eq!((p.y, p.x), (0, 1));
        assert!((p.smoothed - 10.0 / 3.0).abs() < 1e-12);
        assert!((p.smoothed.powf(-0.5) - 0.5477).abs() < 1e-4);
        assert!((p.raw.powf(-0.5) - 0.3162).abs() < 1e-4);
        assert!(r.passed());

        let c = EnergyMap::new(4, 4, vec![1.5; 16]).unwrap();
        let r = jensen_smoothing_check(&c, 3).unwrap();
        assert!(r.peaks.is_empty() && r.passed());

        assert!(jensen_smoothing_check(&e, 1).is_err());
        assert!(jensen_smoothing_check(&e, 4).is_err());
    }

    #[test]
    fn maxima_must_dominate_the_whole_kernel_window() {
        // (2,2) beats its 3x3 neighbours but not the spike two pixels away
        let mut v = vec![0.0; 25];
        v[2 * 5 + 2] = 1.0;
        v[2 * 5 + 4] = 100.0;
        let e = EnergyMap::new(5, 5, v).unwrap();
        assert!(strict_local_maxima(&e, 3).contains(&(2, 2)));
        assert!(!strict_local_maxima(&e, 5).contains(&(2, 2)));
        assert!(jensen_smoothing_check(&e, 5).unwrap().passed());
    }

    proptest! {
        #[test]
        fn exp_stays_on_sphere(r in 0.1f64..10.0, d in 2usize..8, s in -20.0f64..20.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = SphereManifold::new(r, d).unwrap();
            let mut p: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let np = norm(&p);
            prop_assume!(np > 1e-3);
            p.iter_mut().for_each(|x| *x *= r / np);
            let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v = tangent_direction(&raw, &p);
            prop_assume!(v.is_some());
            let v = v.unwrap();
            prop_assume!(dot(&p, &v).abs() < 1e-10);
            let q = m.exp(&p, &v, s).unwrap();
            prop_assert!((norm(&q) - r).abs() < 1e-9 * r.max(1.0));
        }

        #[test]
        fn recursion_never_exceeds_bound(
            delta in 1e-6f64..1.0, l in 1e-3f64..5.0, h in 1e-4f64..0.5, n in 0usize..1000,
        ) {
            let e = simulate_error_recursion(delta, l, h, n);
            let b = gronwall_bound(delta, l, h, n);
            prop_assert!(e <= b, "{e} > {b}");
        }

        #[test]
        fn smoothing_lowers_planted_spikes(
            vals in proptest::collection::vec(0.0f64..1.0, 36), py in 0usize..6, px in 0usize..6, k in prop::sample::select(vec![3usize, 5]),
        ) {
            let mut vals = vals;
            vals[py * 6 + px] = 5.0;
            let e = EnergyMap::new(6, 6, vals).unwrap();
            let r = jensen_smoothing_check(&e, k).unwrap();
            prop_assert!(r.peaks.iter().any(|p| (p.y, p.x) == (py, px)));
            prop_assert!(r.passed());
        }
    }
}

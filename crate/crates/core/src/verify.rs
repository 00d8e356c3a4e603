//! Randomized check families over the analytic fixtures. Each family returns
//! one [`CheckReport`]; `max_slack` is the largest `measured − allowed` seen,
//! so a passing family has `max_slack <= 0`.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::field::{EnergyMap, LatentField};
use crate::geometry::{
    fit_deviation_law_at, flow_omega_limit, flow_truncation_bound, gronwall_bound, ideal_omega, jensen_smoothing_check,
    log_space, simulate_error_recursion, tangent_direction, verify_spectral_bound, SpectralOptions, SpectralProbe,
    SphereManifold,
};
use crate::guidance::taylor_bound_constants;
use crate::linalg::{norm, SquareMatrix};
use crate::schedule::{flow_coefficient, DiffusionSchedule};
use crate::scoremodel::{ConditionField, PixelGMM, QueryTime, ScoreQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckFamily {
    Score,
    Deviation,
    Taylor,
    Gronwall,
    Spectral,
    Jensen,
    Flow,
}

impl CheckFamily {
    pub const ALL: [CheckFamily; 7] = [
        CheckFamily::Score,
        CheckFamily::Deviation,
        CheckFamily::Taylor,
        CheckFamily::Gronwall,
        CheckFamily::Spectral,
        CheckFamily::Jensen,
        CheckFamily::Flow,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckFamily::Score => "score",
            CheckFamily::Deviation => "deviation",
            CheckFamily::Taylor => "taylor",
            CheckFamily::Gronwall => "gronwall",
            CheckFamily::Spectral => "spectral",
            CheckFamily::Jensen => "jensen",
            CheckFamily::Flow => "flow",
        }
    }

    fn salt(&self) -> u64 {
        *self as u64 + 1
    }
}

impl fmt::Display for CheckFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|c| c.name()).collect();
                invalid(format!("unknown check '{s}', expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    pub seed: u64,
    pub score_points: usize,
    pub taylor_samples: usize,
    pub gronwall_samples: usize,
    pub spectral_points: usize,
    pub jensen_maps: usize,
    pub flow_samples: usize,
    /// Fault injection for the spectral family.
    pub corrupt_hessian_sign: bool,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            seed: 0,
            score_points: 100,
            taylor_samples: 100_000,
            gronwall_samples: 1000,
            spectral_points: 1000,
            jensen_maps: 500,
            flow_samples: 1000,
            corrupt_hessian_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub points: usize,
    pub violations: usize,
    pub max_slack: f64,
    /// Parameters of the first few failing points.
    pub failures: Vec<String>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            points: 0,
            violations: 0,
            max_slack: f64::NEG_INFINITY,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Records one point with its slack; positive slack is a violation.
    fn record(&mut self, slack: f64, describe: impl FnOnce() -> String) {
        self.points += 1;
        self.max_slack = self.max_slack.max(slack);
        if !(slack <= 0.0) {
            self.fail(describe);
        }
    }

    fn fail(&mut self, describe: impl FnOnce() -> String) {
        self.violations += 1;
        if self.failures.len() < 5 {
            self.failures.push(describe());
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "check,points,violations,max_slack";

pub fn reports_csv(reports: &[CheckReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{},{},{},{:e}", r.name, r.points, r.violations, r.max_slack);
    }
    out
}

/// One human-readable line per family, plus the first failures.
pub fn reports_summary(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{status} {:<10} points={:<7} violations={:<5} max_slack={:e}",
            r.name, r.points, r.violations, r.max_slack
        );
        for f in &r.failures {
            let _ = writeln!(out, "    {f}");
        }
    }
    out
}

pub fn run_check(family: CheckFamily, settings: &VerifySettings) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ family.salt());
    match family {
        CheckFamily::Score => check_score(settings.score_points, &mut rng),
        CheckFamily::Deviation => check_deviation(&mut rng),
        CheckFamily::Taylor => Ok(check_taylor(settings.taylor_samples, &mut rng)),
        CheckFamily::Gronwall => Ok(check_gronwall(settings.gronwall_samples, &mut rng)),
        CheckFamily::Spectral => check_spectral(settings.spectral_points, settings.corrupt_hessian_sign, &mut rng),
        CheckFamily::Jensen => check_jensen(settings.jensen_maps, &mut rng),
        CheckFamily::Flow => Ok(check_flow(settings.flow_samples, &mut rng)),
    }
}

pub fn run_checks(families: &[CheckFamily], settings: &VerifySettings) -> Result<Vec<CheckReport>> {
    families.iter().map(|f| run_check(*f, settings)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Random mixture with `channels` channels and 1..=`max_k` components.
pub fn random_gmm(rng: &mut ChaCha8Rng, channels: usize, max_k: usize, sigma_range: (f64, f64)) -> PixelGMM {
    let k = rng.gen_range(1..=max_k);
    let means = (0..k)
        .map(|_| (0..channels).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let sigma0 = rng.gen_range(sigma_range.0..sigma_range.1);
    let weights = random_simplex(rng, k);
    PixelGMM::new(means, sigma0, weights).expect("random mixture is valid")
}

/// Point near a randomly chosen component of the step-`t` marginal.
fn random_marginal_point(rng: &mut ChaCha8Rng, gmm: &PixelGMM, alpha_bar: f64, spread: f64) -> Vec<f64> {
    let m = gmm.diffusion_marginal(alpha_bar);
    let k = rng.gen_range(0..gmm.components());
    let sd = m.variance.sqrt();
    m.means[k].iter().map(|mu| mu + spread * sd * normal(rng)).collect()
}

fn training_schedule() -> DiffusionSchedule {
    DiffusionSchedule::linear_beta(1000, 1e-4, 0.02).expect("valid schedule")
}

pub const SCORE_REL_TOL: f64 = 1e-5;
pub const HESSIAN_REL_TOL: f64 = 1e-4;

/// Analytic `ε` against central differences of the log density, and the
/// analytic Hessian against central differences of the score.
fn check_score(points: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut report = CheckReport::new("score");
    let schedule = training_schedule();
    for _ in 0..points {
        let c = rng.gen_range(1..=4);
        let gmm = random_gmm(rng, c, 4, (0.1, 1.0));
        let t = rng.gen_range(1..=schedule.steps());
        let alpha_bar = schedule.alpha_bar(t)?;
        let noise = (1.0 - alpha_bar).sqrt();
        let z = random_marginal_point(rng, &gmm, alpha_bar, 1.5);
        let cond = ConditionField::new(1, 1, vec![rng.gen_range(0.0..1.0)], vec![rng.gen_range(0..gmm.components())])?;
        let conditional = rng.gen_bool(0.5);
        let field = LatentField::new(c, 1, 1, z.clone())?;
        let q = ScoreQuery {
            z: &field,
            time: QueryTime::Step(t),
            condition: conditional.then_some(&cond),
        };
        let eps = gmm.eps_prediction(&q, &schedule)?.into_data();
        let sd = gmm.diffusion_marginal(alpha_bar).variance.sqrt();
        let h = 1e-4 * sd;

        let log_p = |x: &[f64]| -> Result<f64> {
            let f = LatentField::new(c, 1, 1, x.to_vec())?;
            let q = ScoreQuery {
                z: &f,
                time: QueryTime::Step(t),
                condition: conditional.then_some(&cond),
            };
            Ok(gmm.log_density(&q, &schedule)?[0])
        };
        let mut fd_eps = vec![0.0; c];
        let mut x = z.clone();
        for i in 0..c {
            x[i] = z[i] + h;
            let up = log_p(&x)?;
            x[i] = z[i] - h;
            let dn = log_p(&x)?;
            x[i] = z[i];
            fd_eps[i] = -noise * (up - dn) / (2.0 * h);
        }
        let diff: Vec<f64> = eps.iter().zip(&fd_eps).map(|(a, b)| a - b).collect();
        let scale = norm(&eps).max(1e-6 * noise / sd);
        let rel = norm(&diff) / scale;
        report.record(rel - SCORE_REL_TOL, || {
            format!("eps rel error {rel:e} at t={t} z={z:?} C={c} K={}", gmm.components())
        });

        let weights = if conditional { gmm.pixel_weights(Some(&cond), 0) } else { gmm.weights().to_vec() };
        let mix = gmm.pixel_mixture(&gmm.diffusion_marginal(alpha_bar), &weights);
        let hess = gmm.score_hessian(&q, &schedule)?.remove(0);
        let mut fd = SquareMatrix::zeros(c);
        for j in 0..c {
            x[j] = z[j] + h;
            let up = mix.score(&x);
            x[j] = z[j] - h;
            let dn = mix.score(&x);
            x[j] = z[j];
            for i in 0..c {
                fd.set(i, j, (up[i] - dn[i]) / (2.0 * h));
            }
        }
        let rel_h = hess.frobenius_diff(&fd) / hess.frobenius().max(f64::MIN_POSITIVE);
        report.record(rel_h - HESSIAN_REL_TOL, || {
            format!("hessian rel error {rel_h:e} at t={t} z={z:?} C={c} K={}", gmm.components())
        });
    }
    Ok(report)
}

pub const DEVIATION_EXPONENT_TOL: f64 = 0.02;
pub const DEVIATION_COEFFICIENT_REL_TOL: f64 = 0.01;

/// Log-log fit of the sphere deviation for every radius and dimension.
fn check_deviation(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut report = CheckReport::new("deviation");
    for radius in [0.5, 1.0, 2.0] {
        for dim in [2usize, 3, 8] {
            let m = SphereManifold::new(radius, dim)?;
            let (p, v) = random_point_and_tangent(rng, &m);
            let steps = log_space(1e-3 * radius, 1e-1 * radius, 25);
            let fit = fit_deviation_law_at(&m, &p, &v, &steps)?;
            let e_slack = (fit.exponent - 2.0).abs() - DEVIATION_EXPONENT_TOL;
            let c_slack = (fit.coefficient - fit.expected_coefficient).abs()
                - DEVIATION_COEFFICIENT_REL_TOL * fit.expected_coefficient;
            report.record(e_slack.max(c_slack), || {
                format!(
                    "R={radius} d={dim}: exponent {} coefficient {} (expected {})",
                    fit.exponent, fit.coefficient, fit.expected_coefficient
                )
            });
        }
    }
    Ok(report)
}

/// Uniformly random point on the sphere and a random unit tangent there.
pub fn random_point_and_tangent(rng: &mut ChaCha8Rng, m: &SphereManifold) -> (Vec<f64>, Vec<f64>) {
    let d = m.dim();
    loop {
        let g: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = norm(&g);
        if n < 1e-6 {
            continue;
        }
        let p: Vec<f64> = g.iter().map(|x| x * m.radius() / n).collect();
        let raw: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let Some(mut v) = tangent_direction(&raw, &p) else { continue };
        // one more projection pass to tighten orthogonality
        if let Some(w) = tangent_direction(&v, &p) {
            v = w;
        }
        if m.exp(&p, &v, 0.0).is_ok() {
            return (p, v);
        }
    }
}

/// Tangent-line bound `C1 − C2·E ≤ E^{-1/2}`, tight only at `E = η₀`.
fn check_taylor(samples: usize, rng: &mut ChaCha8Rng) -> CheckReport {
    let mut report = CheckReport::new("taylor");
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        if rng.gen_bool(0.5) {
            // uniform on (0, 1e6]
            1e6 * (1.0 - rng.gen::<f64>())
        } else {
            10f64.powf(rng.gen_range(-6.0..=6.0))
        }
    };
    for i in 0..samples {
        let eta0 = draw(rng);
        // every tenth sample sits exactly at the tangent point
        let e = if i % 10 == 0 { eta0 } else { draw(rng) };
        report_taylor_point(&mut report, e, eta0);
    }
    report
}

fn report_taylor_point(report: &mut CheckReport, e: f64, eta0: f64) {
    let (c1, c2) = taylor_bound_constants(eta0).expect("positive operating point");
    let f = e.powf(-0.5);
    let g = c1 - c2 * e;
    let tol = 1e-12 * (c1.abs() + (c2 * e).abs() + f);
    let mut slack = g - f - tol;
    // a (numerically) tight point must be the tangent point
    if f - g <= tol && (e - eta0).abs() > 1e-5 * eta0 {
        slack = slack.max(f64::MIN_POSITIVE);
    }
    report.record(slack, || format!("E={e:e} eta0={eta0:e}: g={g:e} f={f:e}"));
}

/// Recursion against the closed form, plus the worked example.
fn check_gronwall(samples: usize, rng: &mut ChaCha8Rng) -> CheckReport {
    let mut report = CheckReport::new("gronwall");
    let e = simulate_error_recursion(0.01, 1.0, 0.1, 10);
    let b = gronwall_bound(0.01, 1.0, 0.1, 10);
    report.record(((e - 0.15937).abs() - 1e-5).max((b - 0.171828).abs() - 1e-6), || {
        format!("worked example: recursion {e} bound {b}")
    });
    for _ in 0..samples {
        let delta = 10f64.powf(rng.gen_range(-6.0..0.0));
        let l = 10f64.powf(rng.gen_range(-3.0..1.0));
        let h = 10f64.powf(rng.gen_range(-4.0..0.0));
        let n = rng.gen_range(0..=1000);
        let e = simulate_error_recursion(delta, l, h, n);
        let b = gronwall_bound(delta, l, h, n);
        // relative slack; `inf <= inf` counts as holding
        let slack = if b.is_infinite() && e <= b { -0.0 } else { (e - b) / b.abs().max(f64::MIN_POSITIVE) };
        report.record(slack, || format!("delta={delta:e} L={l:e} h={h:e} N={n}: recursion {e:e} > bound {b:e}"));
    }
    report
}

/// Spectral curvature bound on random two-channel mixtures, the isotropic
/// equality case, and the Jacobian identity it relies on.
fn check_spectral(points: usize, corrupt: bool, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut report = CheckReport::new("spectral");
    let schedule = training_schedule();
    let opts = SpectralOptions {
        corrupt_hessian_sign: corrupt,
    };
    let per_model = 20;
    let mut skipped = 0;
    // keep drawing until enough points were actually tested
    while report.points < points {
        if skipped > 10 * points {
            let tested = report.points;
            report.fail(|| format!("only {tested} of {points} probes were testable"));
            break;
        }
        let remaining = points - report.points;
        let gmm = random_gmm(rng, 2, 4, (0.05, 1.0));
        let t = rng.gen_range(1..=schedule.steps());
        let alpha_bar = schedule.alpha_bar(t)?;
        let n = per_model.min(remaining);
        let probes: Vec<SpectralProbe> = (0..n)
            .map(|_| SpectralProbe {
                z: random_marginal_point(rng, &gmm, alpha_bar, 2.0),
                cond_weights: random_simplex(rng, gmm.components()),
            })
            .collect();
        let r = verify_spectral_bound(&gmm, &probes, &schedule, t, opts)?;
        skipped += r.skipped;
        fold_spectral(&mut report, &r, n, || format!("t={t} gmm={gmm:?}"));
    }

    // isotropic: a single live component plus a zero-weight conditional target
    for _ in 0..20 {
        let mu: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let other: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gmm = PixelGMM::new(vec![mu, other], rng.gen_range(0.1..1.0), vec![1.0, 0.0])?;
        let t = rng.gen_range(1..=schedule.steps());
        let alpha_bar = schedule.alpha_bar(t)?;
        let probes: Vec<SpectralProbe> = (0..5)
            .map(|_| SpectralProbe {
                z: random_marginal_point(rng, &gmm, alpha_bar, 2.0),
                cond_weights: random_simplex(rng, 2),
            })
            .collect();
        let r = verify_spectral_bound(&gmm, &probes, &schedule, t, opts)?;
        fold_spectral(&mut report, &r, 5, || format!("isotropic t={t} gmm={gmm:?}"));
        if r.equality_points != r.tested {
            report.fail(|| format!("isotropic equality missed at t={t}: {} of {}", r.equality_points, r.tested));
        }
    }
    if report.points == 0 {
        report.max_slack = 0.0;
    }
    Ok(report)
}

fn fold_spectral(
    report: &mut CheckReport,
    r: &crate::geometry::SpectralReport,
    probes: usize,
    describe: impl Fn() -> String,
) {
    report.points += r.tested;
    if r.tested > 0 {
        report.max_slack = report.max_slack.max(r.max_slack - 1e-9);
    }
    for _ in 0..r.violations {
        report.fail(|| format!("curvature above bound ({} of {probes} probes): {}", r.violations, describe()));
    }
    for _ in 0..r.jacobian_mismatches {
        report.fail(|| format!("Jacobian identity off by {:e}: {}", r.max_jacobian_error, describe()));
    }
}

/// Random maps with one planted spike; smoothing must lower every strict
/// maximum and raise its implied scale.
fn check_jensen(maps: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut report = CheckReport::new("jensen");
    for _ in 0..maps {
        let h = rng.gen_range(3..=16);
        let w = rng.gen_range(3..=16);
        let k = if rng.gen_bool(0.5) { 3 } else { 5 };
        let mut data: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let (py, px) = (rng.gen_range(0..h), rng.gen_range(0..w));
        data[py * w + px] = rng.gen_range(2.0..100.0);
        let e = EnergyMap::new(h, w, data)?;
        let r = jensen_smoothing_check(&e, k)?;
        if !r.peaks.iter().any(|p| (p.y, p.x) == (py, px)) {
            report.fail(|| format!("planted spike at ({py}, {px}) not detected in {h}x{w} map"));
        }
        for p in &r.peaks {
            let slack = (p.smoothed - p.raw).max(p.raw.powf(-0.5) - p.smoothed.powf(-0.5));
            report.record(slack, || format!("{h}x{w} k={k} peak ({}, {}): raw {} smoothed {}", p.y, p.x, p.raw, p.smoothed));
        }
    }
    Ok(report)
}

/// Flow truncation arithmetic: direct form, `Δt²` scaling, inverse, and
/// agreement with the diffusion-form limit under `c_t = C Δt²`.
fn check_flow(samples: usize, rng: &mut ChaCha8Rng) -> CheckReport {
    let mut report = CheckReport::new("flow");
    let ex = flow_truncation_bound(1.0, 1.0, 0.1, 1, 1.0);
    report.record((ex - 0.005).abs() - 1e-15, || format!("worked example gives {ex}"));
    let lim = flow_omega_limit(0.005, 1.0, 0.1, 1, 1.0);
    report.record((lim - 1.0).abs() - 1e-12, || format!("worked limit gives {lim}"));
    for _ in 0..samples {
        let kappa = 10f64.powf(rng.gen_range(-3.0..3.0));
        let omega = rng.gen_range(0.1..20.0);
        let dt = 10f64.powf(rng.gen_range(-4.0..0.0));
        let c = rng.gen_range(1..=8);
        let energy = 10f64.powf(rng.gen_range(-6.0..3.0));
        let delta = 10f64.powf(rng.gen_range(-6.0..0.0));

        let b = flow_truncation_bound(kappa, omega, dt, c, energy);
        let half = flow_truncation_bound(kappa, omega, dt / 2.0, c, energy);
        let s1 = (half * 4.0 - b).abs() / b - 1e-12;
        let limit = flow_omega_limit(delta, kappa, dt, c, energy);
        let back = flow_truncation_bound(kappa, limit, dt, c, energy);
        let s2 = (back - delta).abs() / delta - 1e-12;
        let diffusion_form = ideal_omega(delta, kappa, flow_coefficient(dt, c), energy).unwrap_or(f64::NAN);
        let s3 = (diffusion_form - limit).abs() / limit - 1e-12;
        report.record(s1.max(s2).max(s3), || {
            format!("kappa={kappa:e} omega={omega} dt={dt:e} C={c} E={energy:e} delta={delta:e}")
        });
    }
    report
}

//! Classifier-free guidance and spatially adaptive multi guidance (SAMG).
//!
//! Both strategies start from the delta score `Δε = ε_c − ε_u`. Uniform CFG
//! extrapolates every pixel by the same scale; SAMG measures the per-pixel
//! guidance energy `E(x) = ‖Δε(x)‖² / C`, min/max-normalizes it over the
//! current map, and assigns each pixel a scale affinely anti-correlated with
//! that energy inside `[ω_min, ω_max]`.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::field::{
    box_smooth, broadcast_scale, channel_mean_square, minmax_normalize, EnergyMap, LatentField,
    OmegaMap, SpatialMap,
};

pub const DEFAULT_TAU: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    Uniform { omega: f64 },
    Samg { omega_min: f64, omega_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Box-filter width applied to the raw energy map before normalization.
    pub kernel: usize,
    pub tau: f64,
}

impl GuidanceConfig {
    pub fn uniform(omega: f64) -> Self {
        Self {
            mode: GuidanceMode::Uniform { omega },
            kernel: 1,
            tau: DEFAULT_TAU,
        }
    }

    pub fn samg(omega_min: f64, omega_max: f64) -> Self {
        Self {
            mode: GuidanceMode::Samg {
                omega_min,
                omega_max,
            },
            kernel: 1,
            tau: DEFAULT_TAU,
        }
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            GuidanceMode::Uniform { omega } => {
                if !(omega > 0.0 && omega.is_finite()) {
                    return Err(invalid(format!("guidance scale must be positive, got {omega}")));
                }
            }
            GuidanceMode::Samg {
                omega_min,
                omega_max,
            } => {
                if !(omega_min > 0.0 && omega_min <= omega_max && omega_max.is_finite()) {
                    return Err(invalid(format!(
                        "SAMG bounds must satisfy 0 < omega_min <= omega_max, got [{omega_min}, {omega_max}]"
                    )));
                }
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(invalid(format!("kernel must be odd and positive, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Short human-readable label, also used for artifact file names.
    pub fn label(&self) -> String {
        match self.mode {
            GuidanceMode::Uniform { omega } => format!("cfg{omega}"),
            GuidanceMode::Samg {
                omega_min,
                omega_max,
            } => format!("samg{omega_min}-{omega_max}_k{}", self.kernel),
        }
    }
}

/// `Δε = ε_c − ε_u`.
pub fn delta_score(eps_c: &LatentField, eps_u: &LatentField) -> Result<LatentField> {
    eps_c.sub(eps_u)
}

/// `ε̃ = ε_u + ω Δε`.
pub fn apply_cfg(eps_u: &LatentField, delta: &LatentField, omega: f64) -> Result<LatentField> {
    eps_u.zip_with(delta, |u, d| u + omega * d)
}

fn omega_maps(energy: &EnergyMap, cfg: &GuidanceConfig) -> Result<(EnergyMap, OmegaMap)> {
    cfg.validate()?;
    let GuidanceMode::Samg {
        omega_min,
        omega_max,
    } = cfg.mode
    else {
        return Err(invalid("omega map requires SAMG mode"));
    };
    let smoothed = box_smooth(energy, cfg.kernel)?;
    let normalized = minmax_normalize(&smoothed, cfg.tau)?;
    let span = omega_max - omega_min;
    let omega = normalized
        .values()
        .iter()
        .map(|e| (omega_max - e * span).clamp(omega_min, omega_max))
        .collect();
    let map = OmegaMap::new(energy.height(), energy.width(), omega, omega_min, omega_max)?;
    Ok((normalized, map))
}

/// `Ω(x) = ω_max − Ê(x)(ω_max − ω_min)` with `Ê` the (optionally smoothed)
/// min/max-normalized energy.
pub fn build_omega_map(energy: &EnergyMap, cfg: &GuidanceConfig) -> Result<OmegaMap> {
    omega_maps(energy, cfg).map(|(_, omega)| omega)
}

/// Maps recorded for one guided evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Position in the sampling loop, 0 for the first (noisiest) step.
    pub step: usize,
    /// Diffusion timestep index or flow time of the evaluation.
    pub time: f64,
    pub energy: EnergyMap,
    pub normalized: EnergyMap,
    pub omega: OmegaMap,
}

impl TraceRecord {
    pub fn energy_stats(&self) -> (f64, f64, f64) {
        let e = &self.energy;
        (e.min_value(), e.max_value(), e.mean_value())
    }

    pub fn omega_stats(&self) -> (f64, f64, f64) {
        let o = &self.omega;
        (o.min_value(), o.max_value(), o.mean_value())
    }
}

/// `ε̃ = ε_u + Ω ⊙ Δε`, plus the maps that produced `Ω`.
pub fn apply_samg(
    eps_u: &LatentField,
    delta: &LatentField,
    cfg: &GuidanceConfig,
) -> Result<(LatentField, TraceRecord)> {
    let energy = channel_mean_square(delta);
    let (normalized, omega) = omega_maps(&energy, cfg)?;
    let guided = eps_u.add(&broadcast_scale(delta, &omega)?)?;
    Ok((
        guided,
        TraceRecord {
            step: 0,
            time: 0.0,
            energy,
            normalized,
            omega,
        },
    ))
}

/// Dispatches on the guidance mode. Uniform mode still records its energy
/// maps so both strategies produce comparable traces.
pub fn apply_guidance(
    eps_u: &LatentField,
    eps_c: &LatentField,
    cfg: &GuidanceConfig,
) -> Result<(LatentField, TraceRecord)> {
    cfg.validate()?;
    let delta = delta_score(eps_c, eps_u)?;
    match cfg.mode {
        GuidanceMode::Uniform { omega } => {
            let energy = channel_mean_square(&delta);
            let normalized = minmax_normalize(&energy, cfg.tau)?;
            let omega_map = OmegaMap::constant(energy.height(), energy.width(), omega)?;
            Ok((
                apply_cfg(eps_u, &delta, omega)?,
                TraceRecord {
                    step: 0,
                    time: 0.0,
                    energy,
                    normalized,
                    omega: omega_map,
                },
            ))
        }
        GuidanceMode::Samg { .. } => apply_samg(eps_u, &delta, cfg),
    }
}

/// Tangent-line constants of `f(E) = E^{-1/2}` at `η₀`:
/// `f(E) ≥ C1 − C2·E` with `C1 = 1.5 η₀^{-1/2}`, `C2 = 0.5 η₀^{-3/2}`.
pub fn taylor_bound_constants(eta0: f64) -> Result<(f64, f64)> {
    if !(eta0 > 0.0 && eta0.is_finite()) {
        return Err(invalid(format!("operating point must be positive, got {eta0}")));
    }
    let s = eta0.sqrt();
    Ok((1.5 / s, 0.5 / (eta0 * s)))
}

/// Per-timestep guidance records for one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuidanceTrace {
    pub records: Vec<TraceRecord>,
}

impl GuidanceTrace {
    pub const CSV_HEADER: &'static str = "t,E_min,E_max,E_mean,omega_min,omega_max,omega_mean";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let (e0, e1, em) = r.energy_stats();
            let (o0, o1, om) = r.omega_stats();
            let _ = writeln!(out, "{},{e0:e},{e1:e},{em:e},{o0},{o1},{om}", r.time);
        }
        out
    }

    /// Per-pixel energy averaged over every recorded step.
    pub fn mean_energy(&self) -> Option<Vec<f64>> {
        let first = self.records.first()?;
        let mut acc = vec![0.0; first.energy.values().len()];
        for r in &self.records {
            for (a, v) in acc.iter_mut().zip(r.energy.values()) {
                *a += v;
            }
        }
        let n = self.records.len() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(v: &[f64]) -> LatentField {
        LatentField::from_pixels(1, 1, &[v.to_vec()]).unwrap()
    }

    #[test]
    fn delta_score_examples() {
        let a = px(&[0.3, -1.0, 2.0]);
        assert!(delta_score(&a, &a).unwrap().data().iter().all(|v| *v == 0.0));

        let d = delta_score(&px(&[1.6, 3.2, -1.4]), &px(&[0.1, 0.2, 0.1])).unwrap();
        for (got, want) in d.pixel(0).iter().zip([1.5, 3.0, -1.5]) {
            assert!((got - want).abs() < 1e-12);
        }

        let b = px(&[1.0, 1.0, 1.0]);
        let ab = delta_score(&a, &b).unwrap();
        let ba = delta_score(&b, &a).unwrap();
        assert_eq!(ab, ba.scale(-1.0));

        assert!(delta_score(&a, &LatentField::zeros(2, 1, 1)).is_err());
    }

    #[test]
    fn cfg_examples() {
        let u = px(&[0.5, -0.25, 1.0]);
        let c = px(&[1.0, 0.25, -2.0]);
        let d = delta_score(&c, &u).unwrap();
        assert_eq!(apply_cfg(&u, &d, 1.0).unwrap(), c);

        let zero = px(&[0.0; 3]);
        let smooth = apply_cfg(&zero, &px(&[0.1, 0.2, -0.1]), 7.0).unwrap();
        for (g, w) in smooth.pixel(0).iter().zip([0.7, 1.4, -0.7]) {
            assert!((g - w).abs() < 1e-12);
        }
        let edge = apply_cfg(&zero, &px(&[1.5, 3.0, -1.5]), 7.0).unwrap();
        assert_eq!(edge.pixel(0), vec![10.5, 21.0, -10.5]);
    }

    #[test]
    fn omega_map_examples() {
        let cfg = GuidanceConfig::samg(5.0, 12.0);
        let constant = EnergyMap::new(2, 2, vec![3.0; 4]).unwrap();
        assert!(build_omega_map(&constant, &cfg).unwrap().values().iter().all(|v| *v == 12.0));

        let two = EnergyMap::new(1, 2, vec![0.0, 10.0]).unwrap();
        let om = build_omega_map(&two, &cfg).unwrap();
        assert_eq!(om.values()[0], 12.0);
        assert!((om.values()[1] - 5.0).abs() < 1e-8);
        // argmax sits within span·tau/(range+tau) of omega_min
        assert!(om.values()[1] - 5.0 <= 7.0 * 1e-8 / (10.0 + 1e-8) + 1e-15);

        // Ê = 0.5 at the middle pixel
        let three = EnergyMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let om = build_omega_map(&three, &cfg.with_tau(1e-300)).unwrap();
        assert!((om.values()[1] - 8.5).abs() < 1e-12);

        assert!(build_omega_map(&two, &GuidanceConfig::uniform(3.0)).is_err());
        assert!(build_omega_map(&two, &GuidanceConfig::samg(5.0, 4.0)).is_err());
        assert!(build_omega_map(&two, &cfg.with_kernel(2)).is_err());
    }

    #[test]
    fn samg_examples() {
        // two pixels, C = 1, ε_u = 0, Δ = {1, 2}
        let u = LatentField::zeros(1, 1, 2);
        let d = LatentField::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let (out, rec) = apply_samg(&u, &d, &GuidanceConfig::samg(5.0, 12.0)).unwrap();
        assert_eq!(rec.energy.values(), &[1.0, 4.0]);
        // scalar re-evaluation: Ê = {0, 3/(3+τ)}, Ω = 12 − 7Ê, out = Ω·Δ
        let e_hat = 3.0 / (3.0 + 1e-8);
        let omega2 = 12.0 - e_hat * 7.0;
        assert_eq!(rec.omega.values()[0], 12.0);
        assert!((rec.omega.values()[1] - omega2).abs() < 1e-14);
        assert_eq!(out.data()[0], 12.0);
        assert!((out.data()[1] - 2.0 * omega2).abs() < 1e-13);
        assert!((out.data()[1] - 10.0).abs() < 1e-7);

        let zero = LatentField::zeros(2, 3, 3);
        let eu = LatentField::filled(2, 3, 3, 0.75);
        let (out, _) = apply_samg(&eu, &zero, &GuidanceConfig::samg(1.0, 30.0)).unwrap();
        assert_eq!(out, eu);
    }

    #[test]
    fn taylor_examples() {
        assert_eq!(taylor_bound_constants(1.0).unwrap(), (1.5, 0.5));
        assert_eq!(taylor_bound_constants(4.0).unwrap(), (0.75, 0.0625));
        for eta in [0.01, 1.0, 37.5] {
            let (c1, c2) = taylor_bound_constants(eta).unwrap();
            assert!((c1 - c2 * eta - eta.powf(-0.5)).abs() < 1e-12 * eta.powf(-0.5));
        }
        assert!(taylor_bound_constants(0.0).is_err());
        assert!(taylor_bound_constants(-1.0).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let u = LatentField::zeros(1, 1, 2);
        let c = LatentField::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let (_, mut rec) = apply_guidance(&u, &c, &GuidanceConfig::uniform(3.0)).unwrap();
        rec.time = 20.0;
        let trace = GuidanceTrace { records: vec![rec] };
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), GuidanceTrace::CSV_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 7);
        assert_eq!(row[0], "20");
        assert_eq!(row[4..], ["3", "3", "3"]);
    }

    fn energy_map() -> impl Strategy<Value = EnergyMap> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop_oneof![0.0f64..1e-6, 0.0f64..1.0, 0.0f64..1e6], h * w)
                .prop_map(move |d| EnergyMap::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn omega_in_bounds(e in energy_map(), lo in 0.1f64..10.0, span in 0.0f64..20.0, k in prop::sample::select(vec![1usize, 3, 5])) {
            let cfg = GuidanceConfig::samg(lo, lo + span).with_kernel(k);
            let om = build_omega_map(&e, &cfg).unwrap();
            prop_assert!(om.values().iter().all(|v| *v >= lo && *v <= lo + span));
        }

        #[test]
        fn omega_anti_correlated(e in energy_map(), lo in 0.1f64..10.0, span in 0.0f64..20.0) {
            let om = build_omega_map(&e, &GuidanceConfig::samg(lo, lo + span)).unwrap();
            let ev = e.values();
            let ov = om.values();
            for i in 0..ev.len() {
                for j in 0..ev.len() {
                    if ev[i] < ev[j] {
                        prop_assert!(ov[i] >= ov[j]);
                    }
                }
            }
        }

        #[test]
        fn omega_scale_invariant(e in energy_map(), factor in 1e-3f64..1e3) {
            let range = e.max_value() - e.min_value();
            prop_assume!(range * factor.min(1.0) > 1e-2);
            let cfg = GuidanceConfig::samg(2.0, 8.0);
            let a = build_omega_map(&e, &cfg).unwrap();
            let scaled = EnergyMap::new(e.height(), e.width(), e.values().iter().map(|v| v * factor).collect()).unwrap();
            let b = build_omega_map(&scaled, &cfg).unwrap();
            // τ breaks exact invariance by about (ω_max − ω_min)·τ / range
            let tol = 6.0 * 2.0 * DEFAULT_TAU / (range * factor.min(1.0)) + 1e-12;
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= tol, "{x} vs {y}");
            }
        }

        #[test]
        fn collapsed_bounds_equal_cfg(data in proptest::collection::vec(-5.0f64..5.0, 24), omega in 0.5f64..20.0) {
            let u = LatentField::new(2, 3, 4, data[..24].iter().map(|v| v * 0.3).collect()).unwrap();
            let d = LatentField::new(2, 3, 4, data.clone()).unwrap();
            let (samg, _) = apply_samg(&u, &d, &GuidanceConfig::samg(omega, omega)).unwrap();
            prop_assert_eq!(samg, apply_cfg(&u, &d, omega).unwrap());
        }

        #[test]
        fn taylor_line_below_inverse_sqrt(e in 1e-6f64..1e6, eta in 1e-6f64..1e6) {
            let (c1, c2) = taylor_bound_constants(eta).unwrap();
            let f = e.powf(-0.5);
            prop_assert!(c1 - c2 * e <= f * (1.0 + 1e-12));
        }
    }
}

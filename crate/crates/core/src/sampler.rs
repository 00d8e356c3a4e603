//! Deterministic solvers and the guided reverse loop.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::field::{channel_mean_square, LatentField, SpatialMap};
use crate::guidance::{apply_guidance, GuidanceConfig, GuidanceTrace};
use crate::schedule::{DiffusionSchedule, FlowGrid};
use crate::scoremodel::{ConditionField, PixelGMM, QueryTime, ScoreQuery};

/// One DDIM (η = 0) update from step `t` to `t_prev`.
pub fn ddim_step(
    z: &LatentField,
    eps: &LatentField,
    t: usize,
    t_prev: usize,
    s: &DiffusionSchedule,
) -> Result<LatentField> {
    if t_prev >= t {
        return Err(invalid(format!("DDIM step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let a_t = s.alpha_bar(t)?;
    let a_prev = s.alpha_bar(t_prev)?;
    ddim_update(z, eps, a_t, a_prev)
}

/// The DDIM update written directly in terms of the two `ᾱ` values.
pub fn ddim_update(z: &LatentField, eps: &LatentField, alpha_bar_t: f64, alpha_bar_prev: f64) -> Result<LatentField> {
    let (sa, sn) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    z.zip_with(eps, |zi, ei| {
        let x0 = (zi - sn * ei) / sa;
        pa * x0 + pn * ei
    })
}

/// Predicted clean sample `ẑ₀ = (z − √(1−ᾱ) ε) / √ᾱ`.
pub fn predicted_x0(z: &LatentField, eps: &LatentField, alpha_bar: f64) -> Result<LatentField> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z.zip_with(eps, |zi, ei| (zi - sn * ei) / sa)
}

/// One explicit Euler step `z − dt·v` toward the data end of the flow.
pub fn euler_step(z: &LatentField, v: &LatentField, dt: f64) -> Result<LatentField> {
    if !(dt > 0.0) {
        return Err(invalid(format!("Euler step needs dt > 0, got {dt}")));
    }
    z.zip_with(v, |zi, vi| zi - dt * vi)
}

/// A conditional/unconditional predictor pair (noise for diffusion steps,
/// velocity for flow times).
pub trait Predictor: Sync {
    fn dims(&self) -> (usize, usize, usize);
    fn predict(&self, z: &LatentField, time: QueryTime, conditional: bool) -> Result<LatentField>;
}

/// The analytic mixture model together with its spatial condition.
#[derive(Debug, Clone)]
pub struct AnalyticModel {
    pub gmm: PixelGMM,
    pub condition: ConditionField,
    /// Needed for diffusion-step queries; flow queries ignore it.
    pub schedule: Option<DiffusionSchedule>,
}

impl AnalyticModel {
    pub fn new(gmm: PixelGMM, condition: ConditionField, schedule: Option<DiffusionSchedule>) -> Result<Self> {
        condition.validate_for(&gmm)?;
        Ok(Self {
            gmm,
            condition,
            schedule,
        })
    }
}

impl Predictor for AnalyticModel {
    fn dims(&self) -> (usize, usize, usize) {
        (self.gmm.channels(), self.condition.height(), self.condition.width())
    }

    fn predict(&self, z: &LatentField, time: QueryTime, conditional: bool) -> Result<LatentField> {
        let q = ScoreQuery {
            z,
            time,
            condition: conditional.then_some(&self.condition),
        };
        match time {
            QueryTime::Step(_) => {
                let s = self
                    .schedule
                    .as_ref()
                    .ok_or_else(|| invalid("diffusion query on a model without a schedule"))?;
                self.gmm.eps_prediction(&q, s)
            }
            QueryTime::Flow(_) => self.gmm.velocity_prediction(&q),
        }
    }
}

/// Counts model evaluations of the wrapped predictor.
#[derive(Debug)]
pub struct CountingPredictor<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: Predictor> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: Predictor> Predictor for CountingPredictor<P> {
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn predict(&self, z: &LatentField, time: QueryTime, conditional: bool) -> Result<LatentField> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(z, time, conditional)
    }
}

/// Which update rule advances the latent.
#[derive(Debug, Clone, PartialEq)]
pub enum Solver {
    Ddim(DiffusionSchedule),
    Euler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    /// Diffusion step index (or flow time) of each state, noisiest first.
    pub times: Vec<f64>,
    /// `steps + 1` states from the initial noise to the final sample.
    pub states: Vec<LatentField>,
    pub trace: GuidanceTrace,
}

impl Trajectory {
    pub fn final_sample(&self) -> &LatentField {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Standard-normal latent drawn from a seeded ChaCha stream in storage order.
pub fn initial_noise(dims: (usize, usize, usize), seed: u64) -> LatentField {
    let (c, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    LatentField::from_raw(c, h, w, data)
}

/// Runs the full guided reverse loop: at each of `steps` steps evaluate the
/// unconditional and conditional predictions, combine them by `guidance`,
/// and advance with the solver.
pub fn run_sampler<P: Predictor + ?Sized>(
    model: &P,
    solver: &Solver,
    guidance: &GuidanceConfig,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    guidance.validate()?;
    let z0 = initial_noise(model.dims(), seed);
    match solver {
        Solver::Ddim(schedule) => {
            let ts = schedule.sampling_timesteps(steps)?;
            let times = ts.iter().map(|t| *t as f64).collect();
            let pairs: Vec<(QueryTime, f64)> = ts.iter().map(|t| (QueryTime::Step(*t), *t as f64)).collect();
            run_loop(model, guidance, seed, z0, times, &pairs, |z, eps, i| {
                ddim_step(z, eps, ts[i], ts[i + 1], schedule)
            })
        }
        Solver::Euler => {
            let grid = FlowGrid::uniform(steps)?;
            let times = grid.times().to_vec();
            let pairs: Vec<(QueryTime, f64)> = grid.times().iter().map(|t| (QueryTime::Flow(*t), *t)).collect();
            run_loop(model, guidance, seed, z0, times, &pairs, |z, v, i| euler_step(z, v, grid.dt(i)))
        }
    }
}

fn run_loop<P: Predictor + ?Sized>(
    model: &P,
    guidance: &GuidanceConfig,
    seed: u64,
    z0: LatentField,
    times: Vec<f64>,
    query_times: &[(QueryTime, f64)],
    step: impl Fn(&LatentField, &LatentField, usize) -> Result<LatentField>,
) -> Result<Trajectory> {
    let n = query_times.len() - 1;
    let mut states = Vec::with_capacity(n + 1);
    let mut trace = GuidanceTrace::default();
    states.push(z0);
    for (i, (qt, time)) in query_times[..n].iter().enumerate() {
        let z = &states[i];
        let eps_u = model.predict(z, *qt, false)?;
        let eps_c = model.predict(z, *qt, true)?;
        let (guided, mut record) = match apply_guidance(&eps_u, &eps_c, guidance) {
            Ok(v) => v,
            // overflowing energies poison the normalization; report them as blow-up
            Err(_) if !guidance_inputs_finite(&eps_u, &eps_c) => {
                return Err(Error::NonFinite { step: i, time: *time })
            }
            Err(e) => return Err(e),
        };
        let next = step(z, &guided, i)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { step: i, time: *time });
        }
        record.step = i;
        record.time = *time;
        trace.records.push(record);
        states.push(next);
    }
    Ok(Trajectory {
        seed,
        times,
        states,
        trace,
    })
}

fn guidance_inputs_finite(eps_u: &LatentField, eps_c: &LatentField) -> bool {
    eps_u.is_finite()
        && eps_c.is_finite()
        && eps_c
            .sub(eps_u)
            .map(|d| channel_mean_square(&d).values().iter().all(|v| v.is_finite()))
            .unwrap_or(false)
}

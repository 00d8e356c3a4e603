//! Timestep discretizations for the diffusion (DDIM) and flow (Euler) solvers.

use crate::error::{invalid, Error, Result};

/// Cumulative noise schedule. Index 0 is clean data, index `steps()` is the
/// noisiest level.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(invalid("schedule needs at least one step"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(invalid(format!("alpha_bar[0] must be 1, got {}", alpha_bar[0])));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            if !(pair[1] > 0.0 && pair[1] < pair[0]) {
                return Err(invalid(format!(
                    "alpha_bar must be strictly decreasing in (0, 1]: alpha_bar[{}]={} alpha_bar[{}]={}",
                    t,
                    pair[0],
                    t + 1,
                    pair[1]
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// `alpha_bar[t] = Π_{i ≤ t} (1 − β_i)` with `β` linearly spaced over `n` steps.
    pub fn linear_beta(n: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(n + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..n {
            let beta = if n == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::StepOutOfRange {
            t,
            steps: self.steps(),
        })
    }

    /// `c_t = C (1 − ᾱ_t) / ᾱ_t`, the squared step-size factor of the Tweedie projection.
    pub fn tweedie_coefficient(&self, t: usize, channels: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        let a = self.alpha_bar[t];
        Ok(channels as f64 * (1.0 - a) / a)
    }

    /// Uniformly spaced timesteps `N = t_0 > t_1 > … > t_n = 0` for an `n`-step sampler.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(invalid(format!(
                "sampler steps must be in 1..={total}, got {n}"
            )));
        }
        Ok((0..=n)
            .rev()
            .map(|i| ((i * total) as f64 / n as f64).round() as usize)
            .collect())
    }
}

/// Uniform flow-time grid from 1 (noise) down to 0 (data).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid {
    times: Vec<f64>,
}

impl FlowGrid {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("flow grid needs at least one step"));
        }
        let times = (0..=n).map(|i| 1.0 - i as f64 / n as f64).collect::<Vec<_>>();
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(invalid("flow grid must run from 1 to 0"));
        }
        if times.windows(2).any(|p| p[1] >= p[0]) {
            return Err(invalid("flow grid must be strictly decreasing"));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Width of interval `i`, i.e. `times[i] - times[i + 1]`.
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i] - self.times[i + 1]
    }
}

/// `c_t = C Δt²` for Euler integration of a flow.
pub fn flow_coefficient(dt: f64, channels: usize) -> f64 {
    channels as f64 * dt * dt
}

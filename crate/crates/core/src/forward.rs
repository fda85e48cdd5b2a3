//! P1 finite elements in space, Crank–Nicolson in time, for
//! `∂U/∂t = ∂/∂x(ν ∂U/∂x)` on `[0, 1]` with `U(0,t) = -1`, `U(1,t) = 1`,
//! `U(x,0) = 0` and `ν = ν0 + exp(m)` constant on each element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Grid1D;
use crate::kl::FieldSample;

pub const BC_LEFT: f64 = -1.0;
pub const BC_RIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub nu0: f64,
    pub n_elems: usize,
    pub dt: f64,
    pub t_final: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            nu0: 0.1,
            n_elems: 56,
            dt: 1e-4,
            t_final: 0.05,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu0 > 0.0 && self.nu0.is_finite()) {
            return Err(Error::config("diffusivity floor nu0 must be positive"));
        }
        if self.n_elems < 2 {
            return Err(Error::config("mesh needs at least two elements"));
        }
        if !(self.dt > 0.0 && self.t_final > 0.0 && self.dt <= self.t_final) {
            return Err(Error::config("need 0 < dt <= t_final"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_final / self.dt).round() as usize).max(1)
    }

    /// Time step actually taken: `t_final` divided by the rounded step count.
    pub fn effective_dt(&self) -> f64 {
        self.t_final / self.n_steps() as f64
    }

    /// Shrinks `dt` so that every observation time is a whole number of steps.
    pub fn snapped_to(&self, op: &ObservationOperator) -> Result<DiffusionConfig> {
        self.validate()?;
        let start = (self.t_final / self.dt - 1e-9).ceil().max(1.0) as usize;
        let limit = start.saturating_mul(64).max(start + 10_000);
        for n in start..=limit {
            let on_grid = op.times.iter().all(|&t| {
                let k = t * n as f64 / self.t_final;
                (k - k.round()).abs() < 1e-9 * n as f64
            });
            if on_grid {
                return Ok(DiffusionConfig {
                    dt: self.t_final / n as f64,
                    ..*self
                });
            }
        }
        Err(Error::config("cannot align time step with observation times"))
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 / self.n_elems as f64
    }
}

/// Nodal history at every time level.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub n_elems: usize,
    pub times: Vec<f64>,
    values: Vec<f64>,
}

impl Solution {
    pub fn n_nodes(&self) -> usize {
        self.n_elems + 1
    }

    pub fn n_levels(&self) -> usize {
        self.times.len()
    }

    pub fn level(&self, k: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn level_at(&self, t: f64) -> Option<usize> {
        let t_final = *self.times.last()?;
        let tol = 1e-9 * t_final.max(1e-300);
        let k = self.times.partition_point(|&s| s < t - tol);
        (k < self.times.len() && (self.times[k] - t).abs() <= tol).then_some(k)
    }

    /// Linear interpolation of the P1 solution at level `k`.
    pub fn interpolate(&self, k: usize, x: f64) -> f64 {
        let u = self.level(k);
        let n = self.n_elems;
        let s = (x * n as f64).clamp(0.0, n as f64);
        let j = (s.floor() as usize).min(n - 1);
        let frac = s - j as f64;
        (1.0 - frac) * u[j] + frac * u[j + 1]
    }
}

/// Element-wise diffusivity from a cell field; fields on a different grid are
/// sampled at element midpoints.
pub fn element_diffusivity(m: &FieldSample, cfg: &DiffusionConfig) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(Error::config("empty field"));
    }
    if !m.is_finite() {
        return Err(Error::numeric("non-finite log-diffusivity field"));
    }
    let n = cfg.n_elems;
    let values: Vec<f64> = if m.len() == n {
        m.values.clone()
    } else {
        let grid = Grid1D::uniform(m.len())?;
        (0..n)
            .map(|e| m.values[grid.cell_of((e as f64 + 0.5) / n as f64)])
            .collect()
    };
    let nu: Vec<f64> = values.iter().map(|v| cfg.nu0 + v.exp()).collect();
    if nu.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("diffusivity overflow"));
    }
    Ok(nu)
}

pub fn solve(m: &FieldSample, cfg: &DiffusionConfig) -> Result<Solution> {
    cfg.validate()?;
    let nu = element_diffusivity(m, cfg)?;
    let n = cfg.n_elems;
    let h = 1.0 / n as f64;
    let steps = cfg.n_steps();
    let dt = cfg.effective_dt();
    let half = 0.5 * dt;
    let interior = n - 1;

    // Tridiagonal coefficients over all nodes: mass and stiffness couplings
    // between node i and i+1 live on element i.
    let mass_diag = |i: usize| if i == 0 || i == n { h / 3.0 } else { 2.0 * h / 3.0 };
    let mass_off = h / 6.0;
    let stiff_diag = |i: usize| {
        let left = if i > 0 { nu[i - 1] } else { 0.0 };
        let right = if i < n { nu[i] } else { 0.0 };
        (left + right) / h
    };
    let stiff_off = |e: usize| -nu[e] / h;

    // Left-hand operator M + dt/2 A on interior nodes 1..n-1, factored once.
    let mut lower = vec![0.0; interior];
    let mut diag = vec![0.0; interior];
    let mut upper = vec![0.0; interior];
    for r in 0..interior {
        let i = r + 1;
        diag[r] = mass_diag(i) + half * stiff_diag(i);
        lower[r] = mass_off + half * stiff_off(i - 1);
        upper[r] = mass_off + half * stiff_off(i);
    }
    let mut c_prime = vec![0.0; interior];
    let mut denom = vec![0.0; interior];
    for r in 0..interior {
        let d = diag[r] - if r > 0 { lower[r] * c_prime[r - 1] } else { 0.0 };
        if d.abs() < 1e-300 {
            return Err(Error::numeric("singular Crank–Nicolson system"));
        }
        denom[r] = d;
        c_prime[r] = upper[r] / d;
    }
    let lhs_left_bc = mass_off + half * stiff_off(0);
    let lhs_right_bc = mass_off + half * stiff_off(n - 1);

    let n_nodes = n + 1;
    let mut values = Vec::with_capacity((steps + 1) * n_nodes);
    let mut u = vec![0.0; n_nodes];
    u[0] = BC_LEFT;
    u[n] = BC_RIGHT;
    values.extend_from_slice(&u);

    let mut rhs = vec![0.0; interior];
    let mut d_prime = vec![0.0; interior];
    for _ in 0..steps {
        for (r, out) in rhs.iter_mut().enumerate() {
            let i = r + 1;
            *out = (mass_diag(i) - half * stiff_diag(i)) * u[i]
                + (mass_off - half * stiff_off(i - 1)) * u[i - 1]
                + (mass_off - half * stiff_off(i)) * u[i + 1];
        }
        rhs[0] -= lhs_left_bc * BC_LEFT;
        rhs[interior - 1] -= lhs_right_bc * BC_RIGHT;

        for r in 0..interior {
            let prev = if r > 0 { lower[r] * d_prime[r - 1] } else { 0.0 };
            d_prime[r] = (rhs[r] - prev) / denom[r];
        }
        for r in (0..interior).rev() {
            let next = if r + 1 < interior { c_prime[r] * u[r + 2] } else { 0.0 };
            u[r + 1] = d_prime[r] - next;
        }
        values.extend_from_slice(&u);
    }
    let times = (0..=steps).map(|k| k as f64 * dt).collect();
    Ok(Solution {
        n_elems: n,
        times,
        values,
    })
}

/// Observation sites and times; predictions are ordered time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationOperator {
    pub xs: Vec<f64>,
    pub times: Vec<f64>,
}

impl ObservationOperator {
    /// `n_x` sites `i/(n_x+1)` and `n_t` times `j T/n_t`, `j = 1..n_t`.
    pub fn uniform(n_x: usize, n_t: usize, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(Error::config("final time must be positive"));
        }
        let xs = (1..=n_x).map(|i| i as f64 / (n_x + 1) as f64).collect();
        let times = (1..=n_t).map(|j| j as f64 * t_final / n_t as f64).collect();
        Ok(ObservationOperator { xs, times })
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(x, t)` of each prediction in output order.
    pub fn sites(&self) -> Vec<(f64, f64)> {
        self.times
            .iter()
            .flat_map(|&t| self.xs.iter().map(move |&x| (x, t)))
            .collect()
    }

    pub fn validate(&self, t_final: f64) -> Result<()> {
        if self.xs.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::config("observation sites must be interior to (0, 1)"));
        }
        if self.times.iter().any(|&t| !(t > 0.0 && t <= t_final * (1.0 + 1e-12))) {
            return Err(Error::config("observation times must lie in (0, T]"));
        }
        Ok(())
    }
}

pub fn observe(sol: &Solution, op: &ObservationOperator) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(op.len());
    for &t in &op.times {
        let k = sol
            .level_at(t)
            .ok_or_else(|| Error::config(format!("time {t} is not a stored level")))?;
        for &x in &op.xs {
            out.push(sol.interpolate(k, x));
        }
    }
    Ok(out)
}

/// A map from a log-field to a vector of predictions.
pub trait ForwardModel: Sync {
    fn n_outputs(&self) -> usize;
    fn evaluate(&self, field: &FieldSample) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outputs {
    /// Point predictions at the observation sites.
    Observations,
    /// All nodal values on every `stride`-th time level (level-major).
    FullField { stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub cfg: DiffusionConfig,
    pub op: ObservationOperator,
    pub outputs: Outputs,
}

impl DiffusionModel {
    /// Snaps the time step to the observation times before storing `cfg`.
    pub fn new(cfg: DiffusionConfig, op: ObservationOperator, outputs: Outputs) -> Result<Self> {
        let cfg = cfg.snapped_to(&op)?;
        op.validate(cfg.t_final)?;
        if let Outputs::FullField { stride } = outputs {
            if stride == 0 || cfg.n_steps() % stride != 0 {
                return Err(Error::config(format!(
                    "full-field stride {stride} does not divide {} steps",
                    cfg.n_steps()
                )));
            }
        }
        Ok(DiffusionModel { cfg, op, outputs })
    }

    /// Times of the levels emitted by [`Outputs::FullField`].
    pub fn field_times(&self) -> Vec<f64> {
        match self.outputs {
            Outputs::FullField { stride } => {
                let dt = self.cfg.effective_dt();
                (0..=self.cfg.n_steps())
                    .step_by(stride)
                    .map(|k| k as f64 * dt)
                    .collect()
            }
            Outputs::Observations => Vec::new(),
        }
    }

    pub fn extract(&self, sol: &Solution) -> Result<Vec<f64>> {
        match self.outputs {
            Outputs::Observations => observe(sol, &self.op),
            Outputs::FullField { stride } => {
                let mut out = Vec::with_capacity(self.n_outputs());
                for k in (0..sol.n_levels()).step_by(stride) {
                    out.extend_from_slice(sol.level(k));
                }
                Ok(out)
            }
        }
    }
}

impl ForwardModel for DiffusionModel {
    fn n_outputs(&self) -> usize {
        match self.outputs {
            Outputs::Observations => self.op.len(),
            Outputs::FullField { stride } => (self.cfg.n_steps() / stride + 1) * (self.cfg.n_elems + 1),
        }
    }

    fn evaluate(&self, field: &FieldSample) -> Result<Vec<f64>> {
        let sol = solve(field, &self.cfg)?;
        self.extract(&sol)
    }
}

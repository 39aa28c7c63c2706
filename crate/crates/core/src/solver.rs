//! IMEX time stepping for the regularised system
//!
//! ```text
//! u_t = Δu − χ∇·(u∇v) + κu − μu²
//! v_t = Δv − v + u/(1 + εu)
//! ```
//!
//! Each step advances advection and reaction explicitly, then solves the
//! diffusion of u implicitly, then the v-equation implicitly with the
//! already-updated u as source.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimates::{evaluate_functionals, evaluate_step, EstimateSeries};
use crate::grid::{chemo_flux_divergence, clip_negative, grad_sup, DiffusionSolver, Field};
use crate::weight_phi::WeightPhi;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub chi: f64,
    pub kappa: f64,
    /// Logistic damping. Zero is accepted so that pure transport/diffusion
    /// reductions can be integrated exactly.
    pub mu: f64,
    /// Source saturation; 0 integrates the limit system.
    pub eps: f64,
    pub t_end: f64,
    pub dt_max: f64,
    pub cfl: f64,
    /// `u/(1 + εu)` when true, plain `u` otherwise.
    pub saturated_source: bool,
}

impl ModelParams {
    pub fn new(chi: f64, kappa: f64, mu: f64, eps: f64, t_end: f64) -> Self {
        Self {
            chi,
            kappa,
            mu,
            eps,
            t_end,
            dt_max: 1e-3,
            cfl: 0.2,
            saturated_source: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("model.{key}"), msg.to_string()))
            }
        };
        check(self.chi.is_finite(), "chi", "must be finite")?;
        check(self.kappa.is_finite(), "kappa", "must be finite")?;
        check(self.mu >= 0.0 && self.mu.is_finite(), "mu", "must be finite and >= 0")?;
        check(self.eps >= 0.0 && self.eps.is_finite(), "eps", "must be finite and >= 0")?;
        check(self.t_end >= 0.0 && self.t_end.is_finite(), "T", "must be finite and >= 0")?;
        check(self.dt_max > 0.0 && self.dt_max.is_finite(), "dt_max", "must be > 0")?;
        check(self.cfl > 0.0 && self.cfl <= 1.0, "cfl", "must lie in (0, 1]")?;
        Ok(())
    }

    /// The v-equation source for a cell density `u`.
    pub fn source(&self, u: f64) -> f64 {
        if self.saturated_source {
            u / (1.0 + self.eps * u)
        } else {
            u
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u: Field,
    pub v: Field,
    pub t: f64,
    pub step_index: usize,
    pub clipped_mass_cum: f64,
}

impl SimState {
    pub fn new(u: Field, v: Field) -> Result<Self> {
        if u.grid() != v.grid() {
            return Err(Error::InvalidArgument("u and v live on different grids".into()));
        }
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::InvalidArgument("initial fields must be finite".into()));
        }
        if u.min() < 0.0 || v.min() < 0.0 {
            return Err(Error::InvalidArgument("initial fields must be nonnegative".into()));
        }
        Ok(Self {
            u,
            v,
            t: 0.0,
            step_index: 0,
            clipped_mass_cum: 0.0,
        })
    }
}

/// Largest step allowed by the explicit parts:
/// `min(dt_max, cfl·h/(|χ|‖∇v‖_∞), cfl/(|κ| + 2μ‖u‖_∞ + 1))`.
pub fn stable_dt(state: &SimState, params: &ModelParams) -> f64 {
    let g = state.u.grid();
    let h = g.dx().min(g.dy());
    let mut dt = params.dt_max;
    let adv = params.chi.abs() * grad_sup(&state.v);
    if adv > 0.0 {
        dt = dt.min(params.cfl * h / adv);
    }
    let react = params.kappa.abs() + 2.0 * params.mu * state.u.sup_abs() + 1.0;
    dt.min(params.cfl / react)
}

/// Stepper holding the cached transforms for one grid.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: ModelParams,
    diffusion: DiffusionSolver,
}

impl Stepper {
    pub fn new(params: ModelParams, state: &SimState) -> Self {
        Self {
            params,
            diffusion: DiffusionSolver::new(*state.u.grid()),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn step(&self, state: &SimState, dt: f64) -> Result<SimState> {
        let p = &self.params;
        let flux = chemo_flux_divergence(&state.u, &state.v, p.chi);
        let explicit = Field::from_values(
            *state.u.grid(),
            state
                .u
                .values()
                .iter()
                .zip(flux.values())
                .map(|(&u, &div)| u + dt * (-div + p.kappa * u - p.mu * u * u))
                .collect(),
        )?;
        let mut u = self.diffusion.solve(&explicit, dt, 0.0);
        let mut clipped = clip_negative(&mut u);

        let rhs = state.v.zip_map(&u, |v, u| v + dt * p.source(u));
        let mut v = self.diffusion.solve(&rhs, dt, 1.0);
        clipped += clip_negative(&mut v);

        let next = SimState {
            u,
            v,
            t: state.t + dt,
            step_index: state.step_index + 1,
            clipped_mass_cum: state.clipped_mass_cum + clipped,
        };
        if !(next.u.is_finite() && next.v.is_finite()) {
            return Err(Error::NonFinite {
                step: next.step_index,
                t: next.t,
            });
        }
        Ok(next)
    }
}

/// One step with a freshly planned transform; prefer [`Stepper`] in loops.
pub fn step(state: &SimState, params: &ModelParams, dt: f64) -> Result<SimState> {
    Stepper::new(*params, state).step(state, dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub u: Field,
    pub v: Field,
}

/// What a run produced. `abort` is set when a step went non-finite; the
/// snapshots and series then cover the accepted steps only.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub snapshots: Vec<Snapshot>,
    pub series: EstimateSeries,
    pub final_state: SimState,
    pub abort: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Times at which to store (u, v); t = 0 is always stored. Times beyond
    /// the horizon are ignored.
    pub snapshot_times: Vec<f64>,
    pub phi: Option<&'a WeightPhi>,
}

/// Integrates from `initial` to `params.t_end`, landing exactly on every
/// snapshot time.
pub fn run(initial: SimState, params: &ModelParams, options: &RunOptions<'_>) -> Result<RunOutput> {
    params.validate()?;
    let mut targets: Vec<f64> = options
        .snapshot_times
        .iter()
        .copied()
        .filter(|&t| t > initial.t && t < params.t_end)
        .collect();
    targets.push(params.t_end);
    targets.sort_by(f64::total_cmp);
    targets.dedup();

    let stepper = Stepper::new(*params, &initial);
    let mut series = EstimateSeries::new(evaluate_functionals(&initial, options.phi));
    let mut snapshots = vec![Snapshot {
        t: initial.t,
        u: initial.u.clone(),
        v: initial.v.clone(),
    }];
    let mut state = initial;
    let mut abort = None;

    'targets: for &target in &targets {
        while state.t < target {
            let mut dt = stable_dt(&state, params);
            let remaining = target - state.t;
            // land on the target instead of leaving a sliver behind
            let snap = dt >= remaining || remaining - dt < 1e-9 * dt;
            if snap {
                dt = remaining;
            }
            let mut next = match stepper.step(&state, dt) {
                Ok(next) => next,
                Err(e) => {
                    abort = Some(e.to_string());
                    break 'targets;
                }
            };
            if snap {
                next.t = target;
            }
            series.push(evaluate_step(&state, &next, dt, options.phi));
            state = next;
        }
        if state.t > snapshots.last().map_or(f64::NEG_INFINITY, |s| s.t) {
            snapshots.push(Snapshot {
                t: state.t,
                u: state.u.clone(),
                v: state.v.clone(),
            });
        }
    }

    Ok(RunOutput {
        snapshots,
        series,
        final_state: state,
        abort,
    })
}

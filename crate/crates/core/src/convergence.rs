//! ε → 0 comparisons, behaviour at t = 0, and the smoothing probe.
//!
//! Everything here post-processes completed runs; [`run_parallel`] is the
//! only place that schedules work.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grad_norms, inner, integrate, Field, GridSpec};
use crate::solver::{RunOutput, Snapshot};

/// Runs `jobs` on at most `workers` threads and returns the results in
/// input order. Each job owns its data; nothing is shared between them.
pub fn run_parallel<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>, workers: usize) -> Vec<T> {
    let n = jobs.len();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let queue: Vec<Mutex<Option<Box<dyn FnOnce() -> T + Send + '_>>>> =
        jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= n {
                    break;
                }
                let job = queue[k].lock().unwrap().take().unwrap();
                let out = job();
                *results[k].lock().unwrap() = Some(out);
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

/// The snapshot stored at exactly time `t`.
pub fn snapshot_at(run: &RunOutput, t: f64) -> Result<&Snapshot> {
    run.snapshots
        .iter()
        .find(|s| (s.t - t).abs() <= 1e-12 * t.abs().max(1.0))
        .ok_or_else(|| Error::InvalidArgument(format!("run has no snapshot at t = {t}")))
}

fn l2_distance(a: &Field, b: &Field) -> f64 {
    integrate(&a.zip_map(b, |x, y| (x - y) * (x - y))).sqrt()
}

fn sup_distance(a: &Field, b: &Field) -> f64 {
    a.zip_map(b, |x, y| x - y).sup_abs()
}

/// Successive differences of an ε-family at one probe time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub t_probe: f64,
    pub eps: Vec<f64>,
    /// `‖u_{ε_k} − u_{ε_{k+1}}‖₂` at `t_probe`.
    pub du_l2: Vec<f64>,
    pub du_sup: Vec<f64>,
    /// Same for v.
    pub dv_l2: Vec<f64>,
    /// `‖u_{ε_k} − u_limit‖₂` when a limit run is supplied.
    pub limit_distance: Vec<f64>,
    pub differences_decreasing: bool,
    pub limit_distance_decreasing: bool,
}

impl SweepReport {
    pub fn passes(&self) -> bool {
        self.differences_decreasing && self.limit_distance_decreasing
    }
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

/// Compares members `(ε, run)` (ε strictly decreasing) at `t_probe`, and
/// each member against the `limit` run if given.
pub fn eps_sweep(members: &[(f64, &RunOutput)], limit: Option<&RunOutput>, t_probe: f64) -> Result<SweepReport> {
    if members.windows(2).any(|w| !(w[1].0 < w[0].0)) {
        return Err(Error::InvalidArgument("eps list must be strictly decreasing".into()));
    }
    let snaps: Vec<&Snapshot> = members
        .iter()
        .map(|(_, r)| snapshot_at(r, t_probe))
        .collect::<Result<_>>()?;
    let mut report = SweepReport {
        t_probe,
        eps: members.iter().map(|m| m.0).collect(),
        du_l2: Vec::new(),
        du_sup: Vec::new(),
        dv_l2: Vec::new(),
        limit_distance: Vec::new(),
        differences_decreasing: true,
        limit_distance_decreasing: true,
    };
    for w in snaps.windows(2) {
        report.du_l2.push(l2_distance(&w[0].u, &w[1].u));
        report.du_sup.push(sup_distance(&w[0].u, &w[1].u));
        report.dv_l2.push(l2_distance(&w[0].v, &w[1].v));
    }
    if let Some(limit) = limit {
        let l = snapshot_at(limit, t_probe)?;
        report.limit_distance = snaps.iter().map(|s| l2_distance(&s.u, &l.u)).collect();
    }
    report.differences_decreasing = strictly_decreasing(&report.du_l2);
    report.limit_distance_decreasing = strictly_decreasing(&report.limit_distance);
    Ok(report)
}

/// `cos(kπx/lx)·cos(lπy/ly)` for k, l ∈ {0, 1, 2}.
#[derive(Debug, Clone)]
pub struct CosineBasis {
    pub modes: Vec<(usize, usize)>,
    pub fields: Vec<Field>,
}

impl CosineBasis {
    pub fn new(grid: &GridSpec) -> Self {
        let modes: Vec<(usize, usize)> = (0..3).flat_map(|k| (0..3).map(move |l| (k, l))).collect();
        let (lx, ly) = (grid.lx(), grid.ly());
        let fields = modes
            .iter()
            .map(|&(k, l)| {
                Field::from_fn(*grid, |x, y| {
                    (k as f64 * PI * x / lx).cos() * (l as f64 * PI * y / ly).cos()
                })
            })
            .collect();
        Self { modes, fields }
    }
}

/// Probe times `2^{−j}`, j = 1..=depth.
pub fn ladder(depth: usize) -> Vec<f64> {
    (1..=depth).map(|j| 0.5f64.powi(j as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub mode: (usize, usize),
    /// `|∫(u(t) − u(0))ψ|` along the ladder, largest t first.
    pub errors: Vec<f64>,
    /// `max(|∫u(0)ψ|, 10⁻²·mass·‖ψ‖_∞)`.
    pub scale: f64,
    pub monotone: bool,
    /// Last error over scale.
    pub final_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTable {
    pub times: Vec<f64>,
    pub rows: Vec<TraceRow>,
}

impl TraceTable {
    pub fn passes(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Fraction of the reference scale the final ladder error must stay under.
pub const TRACE_THRESHOLD: f64 = 0.01;

/// Tabulates `e_ψ(t) = |∫(u(t) − u(0))ψ|` on the ladder for every basis
/// function. Monotone means nonincreasing as t decreases, up to a
/// round-off floor of 10⁻¹² of the scale.
pub fn weak_initial_trace(run: &RunOutput, basis: &CosineBasis, depth: usize) -> Result<TraceTable> {
    let times = ladder(depth);
    let u0 = &snapshot_at(run, 0.0)?.u;
    let snaps: Vec<&Snapshot> = times.iter().map(|&t| snapshot_at(run, t)).collect::<Result<_>>()?;
    let mass = integrate(u0);
    let mut rows = Vec::new();
    for (mode, psi) in basis.modes.iter().zip(&basis.fields) {
        let reference = inner(u0, psi);
        let scale = reference.abs().max(1e-2 * mass * psi.sup_abs());
        let errors: Vec<f64> = snaps.iter().map(|s| (inner(&s.u, psi) - reference).abs()).collect();
        let floor = 1e-12 * scale;
        let monotone = errors.windows(2).all(|w| w[1] <= w[0] + floor);
        let final_ratio = errors.last().copied().unwrap_or(0.0) / scale;
        rows.push(TraceRow {
            mode: *mode,
            errors,
            scale,
            monotone,
            final_ratio,
            pass: monotone && final_ratio < TRACE_THRESHOLD,
        });
    }
    Ok(TraceTable { times, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VTraceRow {
    pub t: f64,
    /// `‖v(t) − v(0)‖₂`
    pub distance: f64,
    /// `√(t ∫₀ᵗ∫v_t²)`
    pub bound: f64,
    pub pass: bool,
}

/// Relative slack admitted in the v-trace inequality.
pub const VTRACE_TOL: f64 = 0.02;

/// `‖v(t) − v(0)‖₂` against `√(t ∫₀ᵗ∫v_t²)` on the ladder, both from the
/// same run.
pub fn v_initial_trace(run: &RunOutput, depth: usize) -> Result<Vec<VTraceRow>> {
    let v0 = &snapshot_at(run, 0.0)?.v;
    let t0 = run.series.initial().t;
    let vt = run.series.vt_integral();
    let times: Vec<f64> = run.series.rows().map(|r| r.t).collect();
    let mut rows = vec![VTraceRow {
        t: t0,
        distance: 0.0,
        bound: 0.0,
        pass: true,
    }];
    for t in ladder(depth) {
        let s = snapshot_at(run, t)?;
        let k = times
            .iter()
            .position(|&x| (x - t).abs() <= 1e-12 * t.max(1.0))
            .ok_or_else(|| Error::InvalidArgument(format!("series has no record at t = {t}")))?;
        let distance = l2_distance(&s.v, v0);
        let bound = ((t - t0) * vt[k]).sqrt();
        rows.push(VTraceRow {
            t,
            distance,
            bound,
            pass: distance <= (1.0 + VTRACE_TOL) * bound + 1e-14 * (1.0 + bound),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingRow {
    pub nx: usize,
    pub sup_initial: f64,
    pub sup_tau: f64,
    pub gradu_l2_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub tau: f64,
    pub rough: bool,
    pub rows: Vec<SmoothingRow>,
    /// `sup_initial` ratio per resolution doubling.
    pub initial_growth: Vec<f64>,
    /// Relative change of `sup_tau` between the two finest grids.
    pub tau_change: f64,
    pub verdict: bool,
}

/// Minimal growth of the initial sup per doubling for rough data.
pub const SUP_GROWTH_MIN: f64 = 1.8;
/// Largest relative change of the sup at τ between the two finest grids.
pub const SUP_TAU_CHANGE_MAX: f64 = 0.1;

/// Builds the smoothing verdict from runs at increasing resolution, each
/// with a snapshot at `tau`. For smooth data the verdict is trivially
/// positive.
pub fn smoothing_probe(runs: &[&RunOutput], tau: f64, rough: bool) -> Result<SmoothingReport> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument("smoothing probe needs at least two resolutions".into()));
    }
    let mut rows = Vec::new();
    for r in runs {
        let s0 = snapshot_at(r, 0.0)?;
        let st = snapshot_at(r, tau)?;
        rows.push(SmoothingRow {
            nx: s0.u.grid().nx(),
            sup_initial: s0.u.sup_abs(),
            sup_tau: st.u.sup_abs(),
            gradu_l2_tau: grad_norms(&st.u).0.sqrt(),
        });
    }
    if rows.windows(2).any(|w| w[1].nx <= w[0].nx) {
        return Err(Error::InvalidArgument("resolutions must increase".into()));
    }
    let initial_growth: Vec<f64> = rows.windows(2).map(|w| w[1].sup_initial / w[0].sup_initial).collect();
    let (a, b) = (&rows[rows.len() - 2], &rows[rows.len() - 1]);
    let tau_change = (b.sup_tau - a.sup_tau).abs() / a.sup_tau.max(b.sup_tau);
    let verdict = if rough {
        initial_growth.iter().all(|&g| g >= SUP_GROWTH_MIN) && tau_change < SUP_TAU_CHANGE_MAX
    } else {
        true
    };
    Ok(SmoothingReport {
        tau,
        rough,
        rows,
        initial_growth,
        tau_change,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_preserves_order() {
        let jobs: Vec<Box<dyn FnOnce() -> usize + Send>> =
            (0..17usize).map(|k| Box::new(move || k * k) as Box<dyn FnOnce() -> usize + Send>).collect();
        assert_eq!(run_parallel(jobs, 4), (0..17).map(|k| k * k).collect::<Vec<_>>());
    }

    #[test]
    fn basis_has_nine_modes() {
        let g = GridSpec::unit_square(16).unwrap();
        let b = CosineBasis::new(&g);
        assert_eq!(b.fields.len(), 9);
        assert!((integrate(&b.fields[0]) - 1.0).abs() < 1e-14);
        assert_eq!(ladder(3), vec![0.5, 0.25, 0.125]);
    }
}

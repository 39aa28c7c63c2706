//! Functionals of a running solution and the inequalities they obey.
//!
//! Every accepted step produces a [`Record`]; [`check_bounds`] turns a
//! completed [`EstimateSeries`] into a [`BoundReport`] with one signed,
//! normalised margin per inequality.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cell_gradient, grad_norms, integrate, laplacian, Field, GridSpec};
use crate::rough_data::tail_mass;
use crate::solver::{ModelParams, SimState};
use crate::weight_phi::WeightPhi;

/// Series CSV columns in file order.
pub const COLUMNS: [&str; 19] = [
    "step",
    "t",
    "dt",
    "mass",
    "l2u_sq",
    "l3u",
    "linf_u",
    "l2v_sq",
    "gradv_l2_sq",
    "gradv_l4_4",
    "lap_v_l2_sq",
    "vt_l2_sq",
    "phi_u",
    "phiprime_u_usq",
    "clipped_mass",
    "gradu_l2_sq",
    "phiprime_u_u",
    "phi2sq_u4",
    "gradvt_l2_sq",
];

/// Functionals at one time level. Time-derivative columns (`vt_l2_sq`,
/// `gradvt_l2_sq`) describe the step that ended here and are zero on the
/// initial record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Record {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    /// ∫u
    pub mass: f64,
    /// ∫u²
    pub l2u_sq: f64,
    /// ‖u‖₃
    pub l3u: f64,
    pub linf_u: f64,
    /// ∫v²
    pub l2v_sq: f64,
    /// ∫|∇v|²
    pub gradv_l2_sq: f64,
    /// ∫|∇v|⁴
    pub gradv_l4_4: f64,
    /// ∫|Δv|²
    pub lap_v_l2_sq: f64,
    /// ∫((v⁺ − v)/dt)²
    pub vt_l2_sq: f64,
    /// ∫Φ(u)
    pub phi_u: f64,
    /// ∫Φ'(u)u²
    pub phiprime_u_usq: f64,
    /// Cumulative mass removed by clipping.
    pub clipped_mass: f64,
    /// ∫|∇u|²
    pub gradu_l2_sq: f64,
    /// ∫Φ'(u)u
    pub phiprime_u_u: f64,
    /// ∫Φ''(u)²u⁴
    pub phi2sq_u4: f64,
    /// ∫|∇(v⁺ − v)/dt|²
    pub gradvt_l2_sq: f64,
}

impl Record {
    fn to_row(self) -> [f64; 19] {
        [
            self.step as f64,
            self.t,
            self.dt,
            self.mass,
            self.l2u_sq,
            self.l3u,
            self.linf_u,
            self.l2v_sq,
            self.gradv_l2_sq,
            self.gradv_l4_4,
            self.lap_v_l2_sq,
            self.vt_l2_sq,
            self.phi_u,
            self.phiprime_u_usq,
            self.clipped_mass,
            self.gradu_l2_sq,
            self.phiprime_u_u,
            self.phi2sq_u4,
            self.gradvt_l2_sq,
        ]
    }

    fn from_row(r: &[f64; 19]) -> Self {
        Self {
            step: r[0] as usize,
            t: r[1],
            dt: r[2],
            mass: r[3],
            l2u_sq: r[4],
            l3u: r[5],
            linf_u: r[6],
            l2v_sq: r[7],
            gradv_l2_sq: r[8],
            gradv_l4_4: r[9],
            lap_v_l2_sq: r[10],
            vt_l2_sq: r[11],
            phi_u: r[12],
            phiprime_u_usq: r[13],
            clipped_mass: r[14],
            gradu_l2_sq: r[15],
            phiprime_u_u: r[16],
            phi2sq_u4: r[17],
            gradvt_l2_sq: r[18],
        }
    }

    fn is_finite(&self) -> bool {
        self.to_row().iter().all(|v| v.is_finite())
    }
}

/// Every column of a [`Record`] for the given state in one pass. Φ columns
/// are zero when no weight is supplied.
pub fn evaluate_functionals(state: &SimState, phi: Option<&WeightPhi>) -> Record {
    let (u, v) = (&state.u, &state.v);
    let ca = u.grid().cell_area();
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    for &x in u.values() {
        s1 += x;
        s2 += x * x;
        s3 += x.abs().powi(3);
    }
    let (gradv_l2_sq, gradv_l4_4) = grad_norms(v);
    let lap = laplacian(v);
    let (mut p0, mut p1, mut p1u, mut p2) = (0.0, 0.0, 0.0, 0.0);
    if let Some(phi) = phi {
        for &x in u.values() {
            let e = phi.eval(x);
            p0 += e.value;
            p1 += e.first * x * x;
            p1u += e.first * x;
            p2 += (e.second * x * x).powi(2);
        }
    }
    Record {
        step: state.step_index,
        t: state.t,
        dt: 0.0,
        mass: ca * s1,
        l2u_sq: ca * s2,
        l3u: (ca * s3).cbrt(),
        linf_u: u.sup_abs(),
        l2v_sq: ca * v.values().iter().map(|x| x * x).sum::<f64>(),
        gradv_l2_sq,
        gradv_l4_4,
        lap_v_l2_sq: ca * lap.values().iter().map(|x| x * x).sum::<f64>(),
        vt_l2_sq: 0.0,
        phi_u: ca * p0,
        phiprime_u_usq: ca * p1,
        clipped_mass: state.clipped_mass_cum,
        gradu_l2_sq: grad_norms(u).0,
        phiprime_u_u: ca * p1u,
        phi2sq_u4: ca * p2,
        gradvt_l2_sq: 0.0,
    }
}

/// [`evaluate_functionals`] at `next` plus the difference quotients of v
/// over the step `prev → next`.
pub fn evaluate_step(prev: &SimState, next: &SimState, dt: f64, phi: Option<&WeightPhi>) -> Record {
    let mut r = evaluate_functionals(next, phi);
    r.dt = dt;
    let vt = next.v.zip_map(&prev.v, |a, b| (a - b) / dt);
    r.vt_l2_sq = integrate(&vt.map(|x| x * x));
    r.gradvt_l2_sq = grad_norms(&vt).0;
    r
}

/// Initial record plus one record per accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSeries {
    initial: Record,
    records: Vec<Record>,
}

impl EstimateSeries {
    pub fn new(initial: Record) -> Self {
        Self {
            initial,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn initial(&self) -> &Record {
        &self.initial
    }

    /// Records of the accepted steps (the initial record excluded).
    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [Record] {
        &mut self.records
    }

    /// Initial record followed by the step records.
    pub fn rows(&self) -> impl Iterator<Item = &Record> {
        std::iter::once(&self.initial).chain(&self.records)
    }

    pub fn last(&self) -> &Record {
        self.records.last().unwrap_or(&self.initial)
    }

    /// `∫₀^{t_n} q` at every row, trapezoid rule.
    pub fn integral(&self, q: impl Fn(&Record) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len() + 1);
        let mut acc = 0.0;
        let mut prev = &self.initial;
        out.push(0.0);
        for r in &self.records {
            acc += 0.5 * (r.t - prev.t) * (q(prev) + q(r));
            out.push(acc);
            prev = r;
        }
        out
    }

    /// `∫₀^{t_n}∫v_t²` at every row: each step's difference quotient is
    /// constant over its step.
    pub fn vt_integral(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        let mut acc = 0.0;
        let mut prev_t = self.initial.t;
        for r in &self.records {
            acc += (r.t - prev_t) * r.vt_l2_sq;
            out.push(acc);
            prev_t = r.t;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", COLUMNS.join(","))?;
        for r in self.rows() {
            let row = r.to_row();
            let mut line = format!("{}", r.step);
            for v in &row[1..] {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty series file".into()))??;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        let mut index = [0usize; 19];
        for (k, col) in COLUMNS.iter().enumerate() {
            index[k] = names
                .iter()
                .position(|n| n == col)
                .ok_or_else(|| Error::MissingColumn(col.to_string()))?;
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != names.len() {
                return Err(Error::Parse(format!("series row {} has {} cells", n + 1, cells.len())));
            }
            let mut row = [0.0; 19];
            for k in 0..19 {
                row[k] = cells[index[k]]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("series row {}, column {}: {e}", n + 1, COLUMNS[k])))?;
            }
            rows.push(Record::from_row(&row));
        }
        let mut it = rows.into_iter();
        let initial = it.next().ok_or_else(|| Error::Parse("series has no rows".into()))?;
        let mut series = Self::new(initial);
        for r in it {
            if !(r.t > series.last().t) {
                return Err(Error::Parse(format!("series time not increasing at step {}", r.step)));
            }
            series.push(r);
        }
        Ok(series)
    }
}

/// Solution of `y' = κy − (μ/area) y²`, `y(0) = y0`.
pub fn mass_ode_bound(y0: f64, kappa: f64, mu: f64, area: f64, t: f64) -> f64 {
    let b = mu / area;
    let growth = if kappa == 0.0 {
        t
    } else {
        (kappa * t).exp_m1() / kappa
    };
    y0 * (kappa * t).exp() / (1.0 + b * y0 * growth)
}

/// One inequality of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub id: String,
    pub inequality: String,
    /// Worst `(rhs − lhs)/scale` over the series.
    pub margin: f64,
    pub tol: f64,
    pub pass: bool,
    pub at_step: usize,
    pub at_t: f64,
}

/// The margin of each check; `pass` holds iff `margin >= -tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundReport {
    pub checks: Vec<BoundCheck>,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, id: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<15} {:>12} {:>8} {:>10}  {:<4}  inequality", "check", "margin", "tol", "at_t", "ok")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<15} {:>12.4e} {:>8.3} {:>10.4e}  {:<4}  {}",
                c.id,
                c.margin,
                c.tol,
                c.at_t,
                if c.pass { "PASS" } else { "FAIL" },
                c.inequality
            )?;
        }
        Ok(())
    }
}

struct Worst {
    margin: f64,
    step: usize,
    t: f64,
}

impl Worst {
    fn new() -> Self {
        Self {
            margin: f64::INFINITY,
            step: 0,
            t: 0.0,
        }
    }

    fn see(&mut self, lhs: f64, rhs: f64, scale: f64, r: &Record) {
        let m = (rhs - lhs) / scale;
        // NaN margins count as the worst possible
        if !(m >= self.margin) {
            self.margin = if m.is_nan() { f64::NEG_INFINITY } else { m };
            self.step = r.step;
            self.t = r.t;
        }
    }

    fn finish(self, id: &str, inequality: &str, tol: f64) -> BoundCheck {
        let margin = if self.margin == f64::INFINITY { 0.0 } else { self.margin };
        BoundCheck {
            id: id.into(),
            inequality: inequality.into(),
            margin,
            tol,
            pass: margin >= -tol,
            at_step: self.step,
            at_t: self.t,
        }
    }
}

/// Window over which the growth exponent of ∫∫|∇v|⁴ is fitted.
pub const GRADV4_WINDOW: (f64, f64) = (0.1, 2.0);
/// Largest admitted growth exponent of ∫∫|∇v|⁴ against (1 + t).
pub const GRADV4_MAX_SLOPE: f64 = 3.2;
/// Horizon of the ∫Φ(u) check.
pub const PHI_HORIZON: f64 = 1.0;
/// Clipped mass admitted, relative to the initial mass.
pub const CLIP_BUDGET: f64 = 1e-6;

/// Least-squares slope of `ln ∫₀ᵗ∫|∇v|⁴` against `ln(1 + t)` over the step
/// records with t in [`GRADV4_WINDOW`]. `None` if fewer than three usable
/// records fall in the window.
pub fn gradv4_growth_exponent(series: &EstimateSeries) -> Option<f64> {
    let cum = series.integral(|r| r.gradv_l4_4);
    let pts: Vec<(f64, f64)> = series
        .rows()
        .zip(&cum)
        .filter(|(r, g)| r.t >= GRADV4_WINDOW.0 && r.t <= GRADV4_WINDOW.1 && **g > 0.0)
        .map(|(r, g)| ((1.0 + r.t).ln(), g.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Time-integrated numerical dissipation of the v-step,
/// `(Σ dt²‖v_t‖², Σ dt²‖∇v_t‖²)`: the amounts by which the discrete
/// energy balances for ∫v² and ∫|∇v|² fall short of their continuous
/// counterparts.
pub fn v_energy_slack(series: &EstimateSeries) -> (f64, f64) {
    series.records().iter().fold((0.0, 0.0), |(a, b), r| {
        (a + r.dt * r.dt * r.vt_l2_sq, b + r.dt * r.dt * r.gradvt_l2_sq)
    })
}

/// Evaluates every inequality on a completed series. `area` is |Ω|; `tol`
/// is the relative slack admitted for the integral and per-step checks.
pub fn check_bounds(series: &EstimateSeries, params: &ModelParams, area: f64, tol: f64) -> BoundReport {
    let mut checks = Vec::new();
    let init = series.initial();
    let m0 = init.mass;
    let floor = 1e-12 * m0.max(1e-300);

    let mut w = Worst::new();
    for r in series.rows() {
        let bound = mass_ode_bound(m0, params.kappa, params.mu, area, r.t);
        w.see(r.mass, bound, bound.max(floor), r);
    }
    checks.push(w.finish("mass", "mass(t) <= y(t), y' = kappa y - (mu/|Omega|) y^2, y(0) = mass(0)", tol));

    let u2 = series.integral(|r| r.l2u_sq);
    let u1 = series.integral(|r| r.mass);
    let mut w = Worst::new();
    for (k, r) in series.rows().enumerate() {
        let lhs = params.mu * u2[k];
        let rhs = params.kappa * u1[k] + m0 - r.mass;
        w.see(lhs, rhs, (lhs.abs() + rhs.abs()).max(floor), r);
    }
    checks.push(w.finish("u_l2_spacetime", "mu int int u^2 <= kappa int int u + |u0|_1 - mass(t)", tol));

    let mut w24 = Worst::new();
    let mut w25 = Worst::new();
    let mut prev = init;
    for r in series.records() {
        let dt = r.t - prev.t;
        let lhs = (r.l2v_sq - prev.l2v_sq) / dt + r.l2v_sq;
        w24.see(lhs, r.l2u_sq, (lhs.abs() + r.l2u_sq).max(floor), r);
        let lhs = (r.gradv_l2_sq - prev.gradv_l2_sq) / dt + r.lap_v_l2_sq;
        w25.see(lhs, r.l2u_sq, (lhs.abs() + r.l2u_sq).max(floor), r);
        prev = r;
    }
    checks.push(w24.finish("v_energy", "d/dt int v^2 + int v^2 <= int u^2", tol));
    checks.push(w25.finish("gradv_energy", "d/dt int |grad v|^2 + int |lap v|^2 <= int u^2", tol));

    let vt = series.vt_integral();
    let lapv = series.integral(|r| r.lap_v_l2_sq);
    let v2 = series.integral(|r| r.l2v_sq);
    let mut w = Worst::new();
    for (k, r) in series.rows().enumerate() {
        let rhs = 3.0 * (lapv[k] + v2[k] + u2[k]);
        w.see(vt[k], rhs, (vt[k] + rhs).max(floor), r);
    }
    checks.push(w.finish("vt_spacetime", "int int v_t^2 <= 3 (int int |lap v|^2 + int int v^2 + int int u^2)", tol));

    if let Some(slope) = gradv4_growth_exponent(series) {
        checks.push(BoundCheck {
            id: "gradv4_growth".into(),
            inequality: format!(
                "log-log slope of int_0^t int |grad v|^4 vs (1+t) on [{}, {}] <= {}",
                GRADV4_WINDOW.0, GRADV4_WINDOW.1, GRADV4_MAX_SLOPE
            ),
            margin: (GRADV4_MAX_SLOPE - slope) / GRADV4_MAX_SLOPE,
            tol: 0.0,
            pass: slope <= GRADV4_MAX_SLOPE,
            at_step: series.last().step,
            at_t: series.last().t.min(GRADV4_WINDOW.1),
        });
    }

    if series.rows().any(|r| r.phi_u > 0.0) {
        let chi4 = params.chi.powi(4);
        let src = series.integral(|r| {
            r.phi2sq_u4 + chi4 * r.gradv_l4_4 + params.kappa * r.phiprime_u_u - params.mu * r.phiprime_u_usq
        });
        let mut w = Worst::new();
        for (k, r) in series.rows().enumerate().filter(|(_, r)| r.t <= PHI_HORIZON) {
            let bound = init.phi_u + src[k];
            w.see(r.phi_u, bound, bound.abs().max(r.phi_u.abs()).max(floor), r);
        }
        checks.push(w.finish(
            "phi_bound",
            "int Phi(u(t)) <= int Phi(u0) + int_0^t [int Phi''(u)^2 u^4 + chi^4 int |grad v|^4 + kappa int Phi'(u)u - mu int Phi'(u)u^2], t <= 1",
            tol,
        ));
    }

    let budget = CLIP_BUDGET * m0.max(1e-300);
    let last = series.last();
    checks.push(BoundCheck {
        id: "positivity".into(),
        inequality: format!("clipped mass <= {CLIP_BUDGET:e} * mass(0)"),
        margin: (budget - last.clipped_mass) / budget,
        tol: 0.0,
        pass: last.clipped_mass <= budget,
        at_step: last.step,
        at_t: last.t,
    });

    BoundReport { checks }
}

/// `‖∇f‖₄⁴ / (‖Δf‖₂²‖∇f‖₂² + ‖∇f‖₂⁴)`; zero for constant fields.
pub fn gn_ratio(f: &Field) -> f64 {
    let (g2, g4) = grad_norms(f);
    if g2 == 0.0 {
        return 0.0;
    }
    let lap = laplacian(f);
    let l2 = integrate(&lap.map(|x| x * x));
    g4 / (l2 * g2 + g2 * g2)
}

/// Which component a seminorm is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    U,
    V,
}

/// `sup_{[t1,t2]} ‖w(t)‖₂ + (∫_{t1}^{t2} ‖∇w‖₂²)^{1/2}` for w = u or v,
/// from the series columns. The time integral treats the integrand as
/// piecewise linear between records.
pub fn v_seminorm(series: &EstimateSeries, which: Component, t1: f64, t2: f64) -> Result<f64> {
    let (first, last) = (series.initial().t, series.last().t);
    if !(t2 > t1) || t1 < first || t2 > last * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "seminorm window [{t1}, {t2}] must be nonempty inside [{first}, {last}]"
        )));
    }
    let (l2, grad): (fn(&Record) -> f64, fn(&Record) -> f64) = match which {
        Component::U => (|r| r.l2u_sq, |r| r.gradu_l2_sq),
        Component::V => (|r| r.l2v_sq, |r| r.gradv_l2_sq),
    };
    let rows: Vec<&Record> = series.rows().collect();
    let at = |t: f64, q: fn(&Record) -> f64| -> f64 {
        let k = rows.partition_point(|r| r.t < t);
        if k == 0 {
            return q(rows[0]);
        }
        if k >= rows.len() {
            return q(rows[rows.len() - 1]);
        }
        let (a, b) = (rows[k - 1], rows[k]);
        q(a) + (q(b) - q(a)) * (t - a.t) / (b.t - a.t)
    };
    let mut sup = at(t1, l2).max(at(t2, l2));
    let mut integral = 0.0;
    let mut prev = (t1, at(t1, grad));
    for r in rows.iter().filter(|r| r.t > t1 && r.t < t2) {
        sup = sup.max(l2(r));
        integral += 0.5 * (r.t - prev.0) * (prev.1 + grad(r));
        prev = (r.t, grad(r));
    }
    integral += 0.5 * (t2 - prev.0) * (prev.1 + at(t2, grad));
    Ok(sup.sqrt() + integral.sqrt())
}

/// Cut times `t₀ < t₁ < … ≤ T` where the cumulative ∫∫|∇v|⁴ first reaches
/// successive multiples of `budget`; the list starts at the first record
/// and ends at the last.
pub fn partition_by_gradient_budget(series: &EstimateSeries, budget: f64) -> Result<Vec<f64>> {
    if !(budget > 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")));
    }
    let cum = series.integral(|r| r.gradv_l4_4);
    let mut cuts = vec![series.initial().t];
    let mut next = budget;
    for (r, &g) in series.rows().zip(&cum) {
        if g >= next {
            cuts.push(r.t);
            while g >= next {
                next += budget;
            }
        }
    }
    let end = series.last().t;
    if *cuts.last().unwrap() < end {
        cuts.push(end);
    }
    Ok(cuts)
}

/// Smooth test functions with compact support in Ω, each stored with the
/// pieces the weak form needs.
#[derive(Debug, Clone)]
pub struct TestBasis {
    grid: GridSpec,
    members: Vec<TestFunction>,
}

#[derive(Debug, Clone)]
pub struct TestFunction {
    pub psi: Field,
    pub lap: Field,
    pub grad: (Field, Field),
    /// Discrete W^{3,3} norm used for normalisation.
    pub norm: f64,
}

impl TestFunction {
    pub fn new(psi: Field) -> Self {
        let lap = laplacian(&psi);
        let grad = cell_gradient(&psi);
        let norm = w33_norm(&psi);
        Self { psi, lap, grad, norm }
    }
}

impl TestBasis {
    /// Twelve functions `b(x, y)·cos(kπx/lx)·cos(lπy/ly)`, k ∈ 0..4,
    /// l ∈ 0..3, with the bump `b = sin⁴(πx/lx) sin⁴(πy/ly)`.
    pub fn standard(grid: &GridSpec) -> Self {
        use std::f64::consts::PI;
        let (lx, ly) = (grid.lx(), grid.ly());
        let mut members = Vec::new();
        for k in 0..4 {
            for l in 0..3 {
                let psi = Field::from_fn(*grid, |x, y| {
                    (PI * x / lx).sin().powi(4)
                        * (PI * y / ly).sin().powi(4)
                        * (k as f64 * PI * x / lx).cos()
                        * (l as f64 * PI * y / ly).cos()
                });
                members.push(TestFunction::new(psi));
            }
        }
        Self { grid: *grid, members }
    }

    pub fn from_functions(grid: &GridSpec, psis: Vec<Field>) -> Result<Self> {
        if psis.is_empty() {
            return Err(Error::InvalidArgument("test basis must not be empty".into()));
        }
        if psis.iter().any(|p| p.grid() != grid) {
            return Err(Error::InvalidArgument("test function on a different grid".into()));
        }
        Ok(Self {
            grid: *grid,
            members: psis.into_iter().map(TestFunction::new).collect(),
        })
    }

    pub fn members(&self) -> &[TestFunction] {
        &self.members
    }
}

/// `(Σ_{|α|≤3} ‖D^α f‖₃³)^{1/3}` with forward differences.
pub fn w33_norm(f: &Field) -> f64 {
    let g = f.grid();
    let ca = g.cell_area();
    let mut total = 0.0;
    // (values, width, height) of every derivative of the current order
    let mut level = vec![(f.values().to_vec(), g.nx(), g.ny())];
    for order in 0..=3 {
        for (vals, _, _) in &level {
            total += ca * vals.iter().map(|v| v.abs().powi(3)).sum::<f64>();
        }
        if order == 3 {
            break;
        }
        let mut next = Vec::new();
        for (k, (vals, w, h)) in level.iter().enumerate() {
            // d/dy of all but the first avoids duplicating mixed derivatives
            if k == 0 {
                next.push(diff_x(vals, *w, *h, g.dx()));
            }
            next.push(diff_y(vals, *w, *h, g.dy()));
        }
        level = next;
    }
    total.cbrt()
}

fn diff_x(v: &[f64], w: usize, h: usize, dx: f64) -> (Vec<f64>, usize, usize) {
    let mut out = Vec::with_capacity((w - 1) * h);
    for j in 0..h {
        for i in 0..w - 1 {
            out.push((v[j * w + i + 1] - v[j * w + i]) / dx);
        }
    }
    (out, w - 1, h)
}

fn diff_y(v: &[f64], w: usize, h: usize, dy: f64) -> (Vec<f64>, usize, usize) {
    let mut out = Vec::with_capacity(w * (h - 1));
    for j in 0..h - 1 {
        for i in 0..w {
            out.push((v[(j + 1) * w + i] - v[j * w + i]) / dy);
        }
    }
    (out, w, h - 1)
}

/// Weak-form residual of the u-equation against one test function:
/// `∫uΔψ − χ∫u∇v·∇ψ + κ∫uψ − μ∫u²ψ`.
pub fn weak_residual(state: &SimState, params: &ModelParams, tf: &TestFunction) -> f64 {
    let (u, v) = (state.u.values(), &state.v);
    let (vx, vy) = cell_gradient(v);
    let (px, py) = (&tf.grad.0, &tf.grad.1);
    let ca = state.u.grid().cell_area();
    let mut acc = 0.0;
    for k in 0..u.len() {
        let uk = u[k];
        let psi = tf.psi.values()[k];
        let dot = vx.values()[k] * px.values()[k] + vy.values()[k] * py.values()[k];
        acc += uk * tf.lap.values()[k] - params.chi * uk * dot + params.kappa * uk * psi - params.mu * uk * uk * psi;
    }
    ca * acc
}

/// `max_ψ |weak_residual(ψ)| / ‖ψ‖_{W^{3,3}}` over the basis.
pub fn dual_norm_proxy(state: &SimState, params: &ModelParams, basis: &TestBasis) -> Result<f64> {
    if basis.members.is_empty() {
        return Err(Error::InvalidArgument("test basis must not be empty".into()));
    }
    if *state.u.grid() != basis.grid {
        return Err(Error::InvalidArgument("test basis built on a different grid".into()));
    }
    Ok(basis
        .members
        .iter()
        .map(|tf| weak_residual(state, params, tf).abs() / tf.norm)
        .fold(0.0, f64::max))
}

/// Lower convex envelope of the samples `(xs, ys)`, evaluated at `xs`.
pub fn convex_envelope(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    assert_eq!(xs.len(), ys.len(), "abscissae and values differ in length");
    let n = xs.len();
    if n < 3 {
        return ys.to_vec();
    }
    let cross = |o: usize, a: usize, b: usize| {
        (xs[a] - xs[o]) * (ys[b] - ys[o]) - (ys[a] - ys[o]) * (xs[b] - xs[o])
    };
    let mut hull: Vec<usize> = Vec::new();
    for k in 0..n {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], k) <= 0.0 {
            hull.pop();
        }
        hull.push(k);
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        while seg + 1 < hull.len() && hull[seg + 1] < k {
            seg += 1;
        }
        let (a, b) = (hull[seg], hull[(seg + 1).min(hull.len() - 1)]);
        if k == a || a == b {
            out.push(ys[a]);
        } else if k == b {
            out.push(ys[b]);
        } else {
            let s = (xs[k] - xs[a]) / (xs[b] - xs[a]);
            out.push(ys[a] + s * (ys[b] - ys[a]));
        }
    }
    out
}

/// `F(x) = x Φ'(√(x/|Ω|))` sampled at `xs`, with its lower convex envelope.
pub fn square_integrability_weight(phi: &WeightPhi, area: f64, xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f: Vec<f64> = xs.iter().map(|&x| x * phi.first((x / area).sqrt())).collect();
    let hull = convex_envelope(xs, &f);
    (f, hull)
}

/// `sup_fields tail_mass(field, M)` for each M.
pub fn equiintegrability_profile(fields: &[&Field], m_list: &[f64]) -> Result<Vec<f64>> {
    if fields.is_empty() || m_list.is_empty() {
        return Err(Error::InvalidArgument("profile needs at least one field and one level".into()));
    }
    Ok(m_list
        .iter()
        .map(|&m| fields.iter().map(|f| tail_mass(f, m)).fold(0.0, f64::max))
        .collect())
}

/// Checks series invariants: increasing time, finite values.
pub fn validate_series(series: &EstimateSeries) -> Result<()> {
    let mut prev = series.initial();
    if !prev.is_finite() {
        return Err(Error::Parse("non-finite initial record".into()));
    }
    for r in series.records() {
        if !(r.t > prev.t) || !r.is_finite() {
            return Err(Error::Parse(format!("invalid record at step {}", r.step)));
        }
        prev = r;
    }
    Ok(())
}

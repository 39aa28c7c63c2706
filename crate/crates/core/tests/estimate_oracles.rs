//! Estimates and convergence diagnostics against closed forms, ODE
//! integrators and brute-force recomputation.

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ks_lab::convergence::{eps_sweep, ladder, v_initial_trace, weak_initial_trace, CosineBasis};
use ks_lab::estimates::{
    check_bounds, equiintegrability_profile, evaluate_functionals, gn_ratio, mass_ode_bound,
    partition_by_gradient_budget, v_seminorm, Component, EstimateSeries, Record,
};
use ks_lab::grid::{Field, GridSpec};
use ks_lab::rough_data::{sample_u0, tail_mass, ApproxFamily, RoughDatumSpec};
use ks_lab::solver::{run, ModelParams, RunOptions, RunOutput, SimState};
use ks_lab::weight_phi::build_weight;

/// Classical RK4 for `u' = κu − μu²`, `v' = −v + u/(1 + εu)`.
fn rk4(u0: f64, v0: f64, kappa: f64, mu: f64, eps: f64, t: f64, dt: f64) -> (f64, f64) {
    let f = |u: f64, v: f64| (kappa * u - mu * u * u, -v + u / (1.0 + eps * u));
    let n = (t / dt).round() as usize;
    let (mut u, mut v) = (u0, v0);
    for _ in 0..n {
        let k1 = f(u, v);
        let k2 = f(u + 0.5 * dt * k1.0, v + 0.5 * dt * k1.1);
        let k3 = f(u + 0.5 * dt * k2.0, v + 0.5 * dt * k2.1);
        let k4 = f(u + dt * k3.0, v + dt * k3.1);
        u += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        v += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (u, v)
}

/// First nonzero cell-centred Neumann eigenvalue on (0, 1) with n cells.
fn lambda1(n: usize) -> f64 {
    let h = 1.0 / n as f64;
    -4.0 / (h * h) * (PI * h / 2.0).sin().powi(2)
}

fn heat_params(t_end: f64) -> ModelParams {
    ModelParams::new(0.0, 0.0, 0.0, 0.0, t_end)
}

fn simulate(u: Field, v: Field, params: &ModelParams, times: Vec<f64>) -> RunOutput {
    let options = RunOptions {
        snapshot_times: times,
        phi: None,
    };
    let out = run(SimState::new(u, v).unwrap(), params, &options).unwrap();
    assert!(out.abort.is_none());
    out
}

/// Product of the implicit-Euler factors `1/(1 − dt·λ)` along the series.
fn discrete_decay(series: &EstimateSeries, lambda: f64, until: f64) -> f64 {
    series
        .records()
        .iter()
        .filter(|r| r.t <= until * (1.0 + 1e-12))
        .map(|r| 1.0 / (1.0 - r.dt * lambda))
        .product()
}

#[test]
fn mass_bound_logistic_matches_rk4() {
    let closed = mass_ode_bound(2.0, 1.0, 1.0, 1.0, 1.0);
    let (y, _) = rk4(2.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1e-4);
    assert!((closed - y).abs() < 1e-10, "{closed} vs {y}");
    assert!((closed - 2.0 * 1f64.exp() / (2.0 * 1f64.exp() - 1.0)).abs() < 1e-14);
}

#[test]
fn gn_ratio_sup_stable_across_resolutions() {
    // 10³ random fields spanned by cos(kπx)cos(lπy), k, l ≤ 4
    let sup_at = |n: usize| -> f64 {
        let grid = GridSpec::unit_square(n).unwrap();
        let modes: Vec<Field> = (0..5)
            .flat_map(|k| (0..5).map(move |l| (k, l)))
            .filter(|&m| m != (0, 0))
            .map(|(k, l)| {
                Field::from_fn(grid, |x, y| (k as f64 * PI * x).cos() * (l as f64 * PI * y).cos())
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut sup: f64 = 0.0;
        for _ in 0..1000 {
            let mut f = Field::zeros(grid);
            for m in &modes {
                let a: f64 = rng.random_range(-1.0..1.0);
                f = f.zip_map(m, |x, y| x + a * y);
            }
            let r = gn_ratio(&f);
            assert!(r.is_finite() && r >= 0.0);
            sup = sup.max(r);
        }
        sup
    };
    let (coarse, fine) = (sup_at(64), sup_at(128));
    assert!((fine - coarse).abs() <= 0.1 * coarse, "sup ratio {coarse} at 64² vs {fine} at 128²");
}

#[test]
fn functionals_of_zero_and_uniform_states() {
    let grid = GridSpec::unit_square(16).unwrap();
    let phi = build_weight(|m| if m < 2f64.powi(12) { 1.0 / m.max(1.0) } else { 0.0 }, 10, 2f64.powi(20), 1e-3)
        .unwrap();
    let zero = SimState::new(Field::zeros(grid), Field::zeros(grid)).unwrap();
    let r = evaluate_functionals(&zero, Some(&phi));
    assert_eq!(r, Record::default());
    for c in [0.5, 3.0, 40.0] {
        let s = SimState::new(Field::constant(grid, c), Field::constant(grid, 1.0)).unwrap();
        let r = evaluate_functionals(&s, Some(&phi));
        let expected = grid.area() * phi.value(c);
        assert!((r.phi_u - expected).abs() <= 1e-12 * expected, "c = {c}: {} vs {expected}", r.phi_u);
        assert!((r.mass - c).abs() < 1e-12);
        assert_eq!(r.gradv_l2_sq, 0.0);
    }
}

#[test]
fn heat_reduction_passes_every_check() {
    let grid = GridSpec::unit_square(32).unwrap();
    let mut params = ModelParams::new(0.0, 0.0, 1e-6, 0.0, 0.5);
    params.saturated_source = false;
    let u = Field::from_fn(grid, |x, y| 1.0 + 0.5 * (PI * x).cos() * (PI * y).cos());
    let out = simulate(u, Field::constant(grid, 0.2), &params, vec![]);
    let report = check_bounds(&out.series, &params, grid.area(), 0.05);
    for c in &report.checks {
        assert!(c.pass && c.margin > -1e-9, "{} margin {}", c.id, c.margin);
    }
}

#[test]
fn inflated_mass_fails_at_the_inflated_step() {
    let grid = GridSpec::unit_square(16).unwrap();
    let params = ModelParams::new(1.0, 0.5, 1.0, 0.01, 0.2);
    let u = Field::from_fn(grid, |x, _| 1.0 + 0.5 * (PI * x).cos());
    let out = simulate(u, Field::constant(grid, 0.5), &params, vec![]);
    let clean = check_bounds(&out.series, &params, grid.area(), 0.05);
    assert!(clean.get("mass").unwrap().pass);
    let mut tampered = out.series.clone();
    let k = 57;
    tampered.records_mut()[k].mass *= 10.0;
    let report = check_bounds(&tampered, &params, grid.area(), 0.05);
    let mass = report.get("mass").unwrap();
    assert!(!mass.pass, "margin {}", mass.margin);
    assert_eq!(mass.at_step, tampered.records()[k].step);
    assert_eq!(mass.at_t, tampered.records()[k].t);
}

fn constant_rate_series(rate: f64, dt: f64, steps: usize) -> EstimateSeries {
    let rec = |k: usize| Record {
        step: k,
        t: k as f64 * dt,
        dt: if k == 0 { 0.0 } else { dt },
        gradv_l4_4: rate,
        ..Record::default()
    };
    let mut s = EstimateSeries::new(rec(0));
    for k in 1..=steps {
        s.push(rec(k));
    }
    s
}

#[test]
fn partition_of_constant_rate_is_equally_spaced() {
    let (rate, dt, steps) = (3.0, 1e-3, 2000);
    let series = constant_rate_series(rate, dt, steps);
    let budget = 0.75;
    let cuts = partition_by_gradient_budget(&series, budget).unwrap();
    assert_eq!(cuts[0], 0.0);
    assert!((cuts.last().unwrap() - 2.0).abs() < 1e-12);
    for w in cuts[..cuts.len() - 1].windows(2) {
        assert!((w[1] - w[0] - budget / rate).abs() <= dt + 1e-12, "gap {}", w[1] - w[0]);
    }
    let total = rate * 2.0;
    assert!((cuts.len() - 1) as f64 <= 1.0 + total / budget);
    assert_eq!(partition_by_gradient_budget(&series, 10.0 * total).unwrap(), vec![0.0, 2.0]);
}

#[test]
fn seminorm_of_decaying_cosine() {
    let n = 32;
    let grid = GridSpec::unit_square(n).unwrap();
    let params = heat_params(0.3);
    let u = Field::from_fn(grid, |x, _| 1.0 + (PI * x).cos());
    let out = simulate(u, Field::zeros(grid), &params, vec![]);
    let lam = lambda1(n).abs();
    // uniform dt: the cosine amplitude is e^{−ρt} with ρ = ln(1 + dtλ)/dt
    let dt = params.dt_max;
    assert!(out.series.records().iter().skip(1).all(|r| (r.dt - dt).abs() < 1e-15));
    let rho = (1.0 + dt * lam).ln() / dt;
    for (t1, t2) in [(0.0, 0.1), (0.05, 0.2), (0.1, 0.3)] {
        let (b1, b2) = ((-rho * t1).exp(), (-rho * t2).exp());
        let sup = (1.0 + 0.5 * b1 * b1).sqrt();
        let grad = (lam * 0.5 * (b1 * b1 - b2 * b2) / (2.0 * rho)).sqrt();
        let expected = sup + grad;
        let got = v_seminorm(&out.series, Component::U, t1, t2).unwrap();
        assert!((got - expected).abs() <= 0.01 * expected, "({t1}, {t2}): {got} vs {expected}");
    }
    let inner = v_seminorm(&out.series, Component::U, 0.05, 0.1).unwrap();
    let outer = v_seminorm(&out.series, Component::U, 0.05, 0.2).unwrap();
    assert!(inner <= outer);
}

#[test]
fn heat_weak_trace_closed_form() {
    let n = 32;
    let grid = GridSpec::unit_square(n).unwrap();
    let params = heat_params(0.5);
    let depth = 8;
    let u = Field::from_fn(grid, |x, _| 1.0 + (PI * x).cos());
    let out = simulate(u, Field::zeros(grid), &params, ladder(depth));
    let basis = CosineBasis::new(&grid);
    let table = weak_initial_trace(&out, &basis, depth).unwrap();
    let row = table.rows.iter().find(|r| r.mode == (1, 0)).unwrap();
    for (&t, &e) in table.times.iter().zip(&row.errors) {
        let b = discrete_decay(&out.series, lambda1(n), t);
        let expected = 0.5 * grid.area() * (b - 1.0).abs();
        assert!((e - expected).abs() <= 1e-10 * expected, "t = {t}: {e} vs {expected}");
        let continuous = 0.5 * grid.area() * ((lambda1(n) * t).exp() - 1.0).abs();
        assert!((e - continuous).abs() <= 0.01 * continuous, "t = {t}: {e} vs {continuous}");
    }
    assert!(row.monotone);
    // ψ ≡ 1 reduces to the (conserved) mass
    let constant = table.rows.iter().find(|r| r.mode == (0, 0)).unwrap();
    assert!(constant.errors.iter().all(|&e| e < 1e-12));
}

#[test]
fn heat_type_v_trace_closed_form() {
    // u ≡ 0 switches the source off: v_t = Δv − v
    let n = 32;
    let grid = GridSpec::unit_square(n).unwrap();
    let params = heat_params(0.5);
    let depth = 8;
    let v0 = Field::from_fn(grid, |x, _| 1.0 + (PI * x).cos());
    let out = simulate(Field::zeros(grid), v0, &params, ladder(depth));
    let rows = v_initial_trace(&out, depth).unwrap();
    assert_eq!(rows[0].distance, 0.0);
    assert_eq!(rows[0].bound, 0.0);
    for r in rows.iter().skip(1) {
        let a = discrete_decay(&out.series, -1.0, r.t);
        let b = discrete_decay(&out.series, lambda1(n) - 1.0, r.t);
        let expected = (grid.area() * (a - 1.0).powi(2) + 0.5 * grid.area() * (b - 1.0).powi(2)).sqrt();
        assert!((r.distance - expected).abs() <= 0.01 * expected, "t = {}: {} vs {expected}", r.t, r.distance);
        assert!(r.pass, "t = {}: distance {} bound {}", r.t, r.distance, r.bound);
    }
}

#[test]
fn uniform_eps_sweep_matches_ode() {
    let grid = GridSpec::unit_square(8).unwrap();
    let (c, c2, t_probe) = (2.0, 0.5, 0.5);
    let eps = [0.04, 0.02, 0.01];
    let runs: Vec<RunOutput> = eps
        .iter()
        .map(|&e| {
            let mut p = ModelParams::new(3.0, 0.5, 1.0, e, 1.0);
            p.dt_max = 1e-4;
            simulate(Field::constant(grid, c), Field::constant(grid, c2), &p, vec![t_probe])
        })
        .collect();
    let members: Vec<(f64, &RunOutput)> = eps.iter().copied().zip(runs.iter()).collect();
    let report = eps_sweep(&members, None, t_probe).unwrap();
    let ode: Vec<(f64, f64)> = eps.iter().map(|&e| rk4(c, c2, 0.5, 1.0, e, t_probe, 1e-6)).collect();
    let root_area = grid.area().sqrt();
    for k in 0..2 {
        let du = (ode[k].0 - ode[k + 1].0).abs() * root_area;
        let dv = (ode[k].1 - ode[k + 1].1).abs() * root_area;
        assert!((report.du_l2[k] - du).abs() < 1e-4, "du {k}: {} vs {du}", report.du_l2[k]);
        assert!((report.dv_l2[k] - dv).abs() < 1e-4, "dv {k}: {} vs {dv}", report.dv_l2[k]);
    }
    let single = eps_sweep(&members[..1], None, t_probe).unwrap();
    assert!(single.du_l2.is_empty());
}

#[test]
fn spike_family_is_equiintegrable_along_the_run() {
    let grid = GridSpec::unit_square(128).unwrap();
    let spec = RoughDatumSpec::spike((0.5, 0.5), 1.0, 1.0);
    let member = ApproxFamily::new(spec.clone()).member(&grid, 0.01).unwrap();
    let params = ModelParams::new(5.0, 0.5, 1.0, 0.01, 0.1);
    let out = simulate(member.u, member.v, &params, vec![0.01]);
    let fields: Vec<&Field> = out.snapshots.iter().map(|s| &s.u).collect();
    assert_eq!(fields.len(), 3);
    let levels: Vec<f64> = (0..=10).map(|k| 2f64.powi(k)).collect();
    let profile = equiintegrability_profile(&fields, &levels).unwrap();
    assert!(profile.windows(2).all(|w| w[1] <= w[0]), "{profile:?}");
    let mass = out.series.initial().mass;
    assert!(profile[10] < 0.05 * mass, "tail at 2^10: {}", profile[10]);
    // the datum itself at the same level, for reference
    let raw = sample_u0(&spec, &grid).unwrap();
    assert!(tail_mass(&raw, 1024.0) <= spec.l1_norm());

    // segment count of the budget partition against a direct scan
    let budget = 1e-6;
    let cuts = partition_by_gradient_budget(&out.series, budget).unwrap();
    let rows: Vec<&Record> = out.series.rows().collect();
    let mut scan = vec![rows[0].t];
    let (mut cum, mut next) = (0.0, budget);
    for w in rows.windows(2) {
        cum += 0.5 * (w[1].t - w[0].t) * (w[0].gradv_l4_4 + w[1].gradv_l4_4);
        if cum >= next {
            scan.push(w[1].t);
            while cum >= next {
                next += budget;
            }
        }
    }
    let end = rows.last().unwrap().t;
    if *scan.last().unwrap() < end {
        scan.push(end);
    }
    assert!(scan.len() > 3);
    assert_eq!(cuts.len(), scan.len());
    for (a, b) in cuts.iter().zip(&scan) {
        assert_eq!(a, b);
    }
}

//! Constructive superlinear convex weight Φ.
//!
//! Two stages:
//!
//! 1. [`construct_phi`] picks a knot ladder `0 = M₀ < M₁ < …` from a measured
//!    tail profile `M ↦ sup_ε ∫_{u₀ε ≥ M} u₀ε` and defines the slope `φ = Ψ'`
//!    rising from `1/ε_{k−1}` to `1/ε_k` across `[M_k, M_{k+1}]` through the
//!    flat smoothstep ζ, with `ε_k = 2^{−k}`.
//! 2. [`adjust_weight`] replaces `f = Ψ''` by `h` with `0 ≤ h ≤ 1/x` and
//!    `∫₀ˣ h ≤ ∫₀ˣ f`, marching forward in x while tracking
//!    `ψ(x) = ∫₀ˣ (h − f)`: where `f ≥ g` take `h = g`, otherwise blend
//!    `h = φ_c(ψ) g + (1 − φ_c(ψ)) f` with a smooth cutoff φ_c.
//!
//! [`finalize_phi`] integrates twice: `Φ(x) = ∫₀ˣ (Ψ'(0) + ∫₀ʸ h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Knots beyond the measured ladder are extended by doubling up to here.
const LADDER_LIMIT: f64 = 1e12;
/// Largest power of two probed when searching for a knot.
const MAX_PROBE_EXPONENT: i32 = 200;
/// Width of the cutoff's transition band `[−1, −½]`.
const CUTOFF_BAND: f64 = 0.5;

fn sigma(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

fn sigma_derivative(s: f64) -> f64 {
    if s > 0.0 {
        sigma(s) / (s * s)
    } else {
        0.0
    }
}

/// C^∞ smoothstep `ζ(s) = σ(s) / (σ(s) + σ(1 − s))`, `σ(s) = e^{−1/s}`,
/// with every derivative vanishing at both ends.
pub fn smoothstep_zeta(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let (a, b) = (sigma(s), sigma(1.0 - s));
    a / (a + b)
}

pub fn smoothstep_zeta_derivative(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let (a, b) = (sigma(s), sigma(1.0 - s));
    let (da, db) = (sigma_derivative(s), sigma_derivative(1.0 - s));
    (da * b + a * db) / ((a + b) * (a + b))
}

/// Cutoff φ_c: ≡ 1 on (−∞, −1], ≡ 0 on [−½, ∞), nonincreasing, C^∞.
pub fn cutoff(s: f64) -> f64 {
    smoothstep_zeta((-0.5 - s) / CUTOFF_BAND)
}

/// Lipschitz constant of [`cutoff`], measured on a fine sample of the band.
pub fn cutoff_lipschitz() -> f64 {
    let n = 20_000;
    (0..=n)
        .map(|k| smoothstep_zeta_derivative(k as f64 / n as f64))
        .fold(0.0, f64::max)
        / CUTOFF_BAND
}

/// `ε_k`: `ε_{−1} = ε₀ = 1`, `ε_k = 2^{−k}`.
pub fn eps_k(k: isize) -> f64 {
    if k <= 0 {
        1.0
    } else {
        0.5f64.powi(k as i32)
    }
}

/// Pre-adjustment weight Ψ with slope φ interpolating `1/ε_{k−1} → 1/ε_k`
/// over `[M_k, M_{k+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiSpec {
    knots: Vec<f64>,
    ladder: Vec<f64>,
    /// Ψ at each ladder knot.
    cumulative: Vec<f64>,
}

impl PhiSpec {
    /// Builds Ψ from a measured ladder `0 = M₀ < M₁ < … < M_K`.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 {
            return Err(Error::Weight("knot ladder must start at 0 and have at least two knots".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::Weight(format!("knots must increase strictly: {knots:?}")));
        }
        let mut ladder = knots.clone();
        while *ladder.last().unwrap() < LADDER_LIMIT {
            let last = *ladder.last().unwrap();
            ladder.push(2.0 * last);
        }
        let mut spec = Self {
            knots,
            ladder,
            cumulative: Vec::new(),
        };
        let mut acc = 0.0;
        spec.cumulative.push(0.0);
        for k in 0..spec.ladder.len() - 1 {
            let (a, b) = (spec.ladder[k], spec.ladder[k + 1]);
            acc += gauss_legendre(|x| spec.slope_in(k, x), a, b, 8);
            spec.cumulative.push(acc);
        }
        Ok(spec)
    }

    /// The measured ladder `M₀ … M_K`.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `ε₀ … ε_K` matching [`PhiSpec::knots`].
    pub fn eps_sequence(&self) -> Vec<f64> {
        (0..self.knots.len()).map(|k| eps_k(k as isize)).collect()
    }

    fn interval(&self, x: f64) -> Option<usize> {
        if x < 0.0 || x >= *self.ladder.last().unwrap() {
            return None;
        }
        Some(self.ladder.partition_point(|&m| m <= x) - 1)
    }

    fn slope_in(&self, k: usize, x: f64) -> f64 {
        let (a, b) = (self.ladder[k], self.ladder[k + 1]);
        let z = smoothstep_zeta((b - x) / (b - a));
        (1.0 - z) / eps_k(k as isize) + z / eps_k(k as isize - 1)
    }

    /// φ = Ψ'. Constant beyond the extended ladder.
    pub fn slope(&self, x: f64) -> f64 {
        match self.interval(x) {
            Some(k) => self.slope_in(k, x),
            None if x < 0.0 => 1.0,
            None => 1.0 / eps_k(self.ladder.len() as isize - 2),
        }
    }

    /// Ψ'' = φ'.
    pub fn slope_derivative(&self, x: f64) -> f64 {
        match self.interval(x) {
            Some(k) => {
                let (a, b) = (self.ladder[k], self.ladder[k + 1]);
                let dz = smoothstep_zeta_derivative((b - x) / (b - a));
                dz * (1.0 / eps_k(k as isize) - 1.0 / eps_k(k as isize - 1)) / (b - a)
            }
            None => 0.0,
        }
    }

    /// Ψ(x) = ∫₀ˣ φ.
    pub fn value(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self.interval(x) {
            Some(k) => {
                let a = self.ladder[k];
                self.cumulative[k] + gauss_legendre(|y| self.slope_in(k, y), a, x, 4)
            }
            None => {
                let last = self.ladder.len() - 1;
                self.cumulative[last] + self.slope(x) * (x - self.ladder[last])
            }
        }
    }

    /// Ψ(M_k)/M_k for k ≥ 1: the superlinearity witnessed at the knots.
    pub fn knot_ratios(&self) -> Vec<f64> {
        self.knots[1..].iter().map(|&m| self.value(m) / m).collect()
    }
}

/// Chooses `M_k` as the smallest power of two, at least `2 M_{k−1}` (and at
/// least 2), whose tail `tail_profile(M_k)` is below `ε_k²`.
pub fn construct_phi(tail_profile: impl Fn(f64) -> f64, k_max: usize) -> Result<PhiSpec> {
    if k_max == 0 {
        return Err(Error::Weight("k_max must be at least 1".into()));
    }
    let mut knots = vec![0.0];
    for k in 1..=k_max {
        let target = eps_k(k as isize).powi(2);
        let mut m: f64 = if k == 1 { 2.0 } else { 2.0 * knots[k - 1] };
        loop {
            let tail = tail_profile(m);
            if !(tail.is_finite() && tail >= 0.0) {
                return Err(Error::Weight(format!("tail profile returned {tail} at M = {m}")));
            }
            if tail < target {
                break;
            }
            m *= 2.0;
            if m > 2f64.powi(MAX_PROBE_EXPONENT) {
                return Err(Error::Weight(format!(
                    "tail profile does not decay: still {tail} >= {target} at M = {m:e} (knot {k})"
                )));
            }
        }
        knots.push(m);
    }
    PhiSpec::from_knots(knots)
}

/// Output of [`adjust_weight`]: samples of `f`, `g = 1/x`, the adjusted
/// `h`, `ψ = ∫₀ˣ (h − f)` and `H = ∫₀ˣ h` on a grid that is uniform up to 1
/// and geometric beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedWeight {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub psi: Vec<f64>,
    pub cum_h: Vec<f64>,
    /// `f(0)`; h interpolates linearly from it on `(0, x₀]`.
    pub f0: f64,
    pub step: f64,
    pub x_max: f64,
    pub cutoff_lipschitz: f64,
}

fn march_grid(step: f64, x_max: f64) -> Vec<f64> {
    let mut xs = vec![step];
    let mut x = step;
    while x < x_max {
        let next = x + step * x.max(1.0);
        x = if next > x_max || x_max - next < 1e-9 * x_max { x_max } else { next };
        xs.push(x);
    }
    xs
}

fn blend(psi: f64, f: f64, g: f64) -> f64 {
    let c = cutoff(psi);
    c * g + (1.0 - c) * f
}

/// Forward march realising `0 ≤ h ≤ g`, `∫₀ˣ h ≤ ∫₀ˣ f` with `g(x) = 1/x`.
///
/// Steps are `step` up to x = 1 and relative (`step · x`) beyond. Refuses
/// when a single step moves ψ by more than a quarter of the cutoff band while
/// inside it.
pub fn adjust_weight(f: impl Fn(f64) -> f64, x_max: f64, step: f64) -> Result<AdjustedWeight> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::Weight(format!("march step must lie in (0, 1), got {step}")));
    }
    if !(x_max > step && x_max.is_finite()) {
        return Err(Error::Weight(format!("x_max must exceed the step, got {x_max}")));
    }
    let xs = march_grid(step, x_max);
    let n = xs.len();
    let f0 = f(0.0);
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    if let Some(bad) = std::iter::once(&f0).chain(&fs).find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Weight(format!("target second derivative must be finite and >= 0, got {bad}")));
    }
    let gs: Vec<f64> = xs.iter().map(|&x| 1.0 / x).collect();
    let mut h = Vec::with_capacity(n);
    let mut psi = Vec::with_capacity(n);
    let mut cum_h = Vec::with_capacity(n);

    let x0 = xs[0];
    let h0 = fs[0].min(gs[0]);
    h.push(h0);
    psi.push(0.5 * x0 * (h0 - fs[0]));
    cum_h.push(0.5 * x0 * (f0 + h0));

    for k in 1..n {
        let dx = xs[k] - xs[k - 1];
        let (fk, gk) = (fs[k], gs[k]);
        let prev = h[k - 1] - fs[k - 1];
        let hk = if fk >= gk {
            gk
        } else {
            // trapezoid step is implicit in h; iterate the contraction
            let mut hk = blend(psi[k - 1] + dx * prev, fk, gk);
            for _ in 0..50 {
                let next = blend(psi[k - 1] + 0.5 * dx * (prev + hk - fk), fk, gk);
                let done = (next - hk).abs() <= 1e-15 * gk;
                hk = next;
                if done {
                    break;
                }
            }
            hk
        };
        let new_psi = psi[k - 1] + 0.5 * dx * (prev + hk - fk);
        if fk < gk {
            let (lo, hi) = (psi[k - 1].min(new_psi), psi[k - 1].max(new_psi));
            if hi >= -1.0 && lo <= -0.5 && hi - lo > 0.25 * CUTOFF_BAND {
                return Err(Error::Weight(format!(
                    "march step too coarse: psi moved {:.3} across the cutoff band at x = {}; use a smaller step",
                    hi - lo,
                    xs[k]
                )));
            }
        }
        h.push(hk);
        psi.push(new_psi);
        cum_h.push(cum_h[k - 1] + 0.5 * dx * (h[k - 1] + hk));
    }

    Ok(AdjustedWeight {
        x: xs,
        f: fs,
        g: gs,
        h,
        psi,
        cum_h,
        f0,
        step,
        x_max,
        cutoff_lipschitz: cutoff_lipschitz(),
    })
}

impl AdjustedWeight {
    /// Largest `|h − T(h)|/g` where `T` re-applies the blending rule to the
    /// stored ψ.
    pub fn self_consistency_defect(&self) -> f64 {
        (0..self.x.len())
            .map(|k| {
                let (f, g) = (self.f[k], self.g[k]);
                let t = if f >= g { g } else { blend(self.psi[k], f, g) };
                (self.h[k] - t).abs() / g
            })
            .fold(0.0, f64::max)
    }

    /// `∫₀ˣ h` by linear interpolation of the stored cumulative integral.
    pub fn integral_to(&self, x: f64) -> f64 {
        let k = self.x.partition_point(|&s| s < x);
        if k == 0 {
            return self.cum_h[0] * (x / self.x[0]).clamp(0.0, 1.0);
        }
        if k >= self.x.len() {
            return *self.cum_h.last().unwrap();
        }
        let (a, b) = (self.x[k - 1], self.x[k]);
        let (ha, hb) = (self.h[k - 1], self.h[k]);
        let d = x - a;
        self.cum_h[k - 1] + ha * d + (hb - ha) * d * d / (2.0 * (b - a))
    }

    /// `(X, ∫₀^X h)` at X = 10, 10², … up to x_max: unbounded growth across
    /// decades witnesses non-integrability on the probed range.
    pub fn growth_witness(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut x = 10.0;
        while x <= self.x_max * (1.0 + 1e-12) {
            out.push((x, self.integral_to(x)));
            x *= 10.0;
        }
        out
    }
}

/// The final weight: `Φ(x) = ∫₀ˣ (Ψ'(0) + ∫₀ʸ h)`. Between samples `h` is
/// linear, so Φ' is piecewise quadratic and Φ piecewise cubic. Beyond the
/// march range `h` continues as `1/x`.
#[derive(Debug, Clone)]
pub struct WeightPhi {
    psi_spec: PhiSpec,
    weight: AdjustedWeight,
    slope0: f64,
    /// Φ at each sample.
    phi: Vec<f64>,
}

pub fn finalize_phi(psi_spec: &PhiSpec, weight: AdjustedWeight) -> WeightPhi {
    let slope0 = psi_spec.slope(0.0);
    let w = &weight;
    let n = w.x.len();
    let mut phi = Vec::with_capacity(n);
    let x0 = w.x[0];
    phi.push(slope0 * x0 + w.f0 * x0 * x0 / 2.0 + (w.h[0] - w.f0) * x0 * x0 / 6.0);
    for k in 1..n {
        let d = w.x[k] - w.x[k - 1];
        let dp = slope0 + w.cum_h[k - 1];
        phi.push(phi[k - 1] + dp * d + w.h[k - 1] * d * d / 2.0 + (w.h[k] - w.h[k - 1]) * d * d / 6.0);
    }
    WeightPhi {
        psi_spec: psi_spec.clone(),
        weight,
        slope0,
        phi,
    }
}

/// `(Φ(x), Φ'(x), Φ''(x))` of a [`WeightPhi`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiValues {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

impl WeightPhi {
    pub fn psi_spec(&self) -> &PhiSpec {
        &self.psi_spec
    }

    pub fn weight(&self) -> &AdjustedWeight {
        &self.weight
    }

    pub fn eval(&self, x: f64) -> PhiValues {
        let w = &self.weight;
        if x <= 0.0 {
            return PhiValues {
                value: 0.0,
                first: self.slope0,
                second: w.f0,
            };
        }
        let k = w.x.partition_point(|&s| s < x);
        if k == 0 {
            let x0 = w.x[0];
            let slope = (w.h[0] - w.f0) / x0;
            return PhiValues {
                value: self.slope0 * x + w.f0 * x * x / 2.0 + slope * x * x * x / 6.0,
                first: self.slope0 + w.f0 * x + slope * x * x / 2.0,
                second: w.f0 + slope * x,
            };
        }
        let last = w.x.len() - 1;
        if k > last {
            let xm = w.x[last];
            let dp = self.slope0 + w.cum_h[last];
            let r = (x / xm).ln();
            return PhiValues {
                value: self.phi[last] + dp * (x - xm) + x * r - (x - xm),
                first: dp + r,
                second: 1.0 / x,
            };
        }
        let (a, b) = (w.x[k - 1], w.x[k]);
        let (ha, hb) = (w.h[k - 1], w.h[k]);
        let d = x - a;
        let slope = (hb - ha) / (b - a);
        let dp = self.slope0 + w.cum_h[k - 1];
        PhiValues {
            value: self.phi[k - 1] + dp * d + ha * d * d / 2.0 + slope * d * d * d / 6.0,
            first: dp + ha * d + slope * d * d / 2.0,
            second: ha + slope * d,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).value
    }

    pub fn first(&self, x: f64) -> f64 {
        self.eval(x).first
    }

    pub fn second(&self, x: f64) -> f64 {
        self.eval(x).second
    }

    /// Checks the finished weight against its defining properties.
    pub fn invariants(&self) -> PhiInvariants {
        let w = &self.weight;
        let max_x_second = w
            .x
            .iter()
            .zip(&w.h)
            .map(|(x, h)| x * h)
            .fold(0.0, f64::max);
        let max_psi = w.psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut max_excess_over_psi: f64 = 0.0;
        for (k, &x) in w.x.iter().enumerate() {
            let psi_val = self.psi_spec.value(x);
            let excess = (self.phi[k] - psi_val) / psi_val.max(1e-300);
            max_excess_over_psi = max_excess_over_psi.max(excess);
        }
        let knot_ratios = self.psi_spec.knot_ratios();
        let knots_increasing = knot_ratios.windows(2).all(|r| r[1] > r[0]);
        PhiInvariants {
            phi_at_zero: self.value(0.0),
            max_x_second,
            max_psi,
            max_excess_over_psi,
            knot_ratios,
            knots_increasing,
            growth_witness: w.growth_witness(),
            self_consistency_defect: w.self_consistency_defect(),
            cutoff_lipschitz: w.cutoff_lipschitz,
        }
    }

    pub fn to_file(&self) -> PhiFile {
        let w = &self.weight;
        PhiFile {
            phi_format: 1,
            knots: self.psi_spec.knots().to_vec(),
            eps: self.psi_spec.eps_sequence(),
            march_step: w.step,
            x_max: w.x_max,
            cutoff_lipschitz: w.cutoff_lipschitz,
            h_samples: w.x.iter().copied().zip(w.h.iter().copied()).collect(),
        }
    }

    /// Rebuilds the weight from a stored file: Ψ from the knots, the march
    /// from the stored `h` samples.
    pub fn from_file(file: &PhiFile) -> Result<Self> {
        if file.phi_format != 1 {
            return Err(Error::Parse(format!("unsupported phi_format {}", file.phi_format)));
        }
        let spec = PhiSpec::from_knots(file.knots.clone())?;
        let x: Vec<f64> = file.h_samples.iter().map(|p| p.0).collect();
        let h: Vec<f64> = file.h_samples.iter().map(|p| p.1).collect();
        if x.is_empty() {
            return Err(Error::Parse("phi file has no h samples".into()));
        }
        let f: Vec<f64> = x.iter().map(|&v| spec.slope_derivative(v)).collect();
        let g: Vec<f64> = x.iter().map(|&v| 1.0 / v).collect();
        let f0 = spec.slope_derivative(0.0);
        let mut psi = vec![0.5 * x[0] * (h[0] - f[0])];
        let mut cum_h = vec![0.5 * x[0] * (f0 + h[0])];
        for k in 1..x.len() {
            let d = x[k] - x[k - 1];
            psi.push(psi[k - 1] + 0.5 * d * (h[k - 1] - f[k - 1] + h[k] - f[k]));
            cum_h.push(cum_h[k - 1] + 0.5 * d * (h[k - 1] + h[k]));
        }
        let weight = AdjustedWeight {
            x,
            f,
            g,
            h,
            psi,
            cum_h,
            f0,
            step: file.march_step,
            x_max: file.x_max,
            cutoff_lipschitz: file.cutoff_lipschitz,
        };
        Ok(finalize_phi(&spec, weight))
    }
}

/// Report of the checks performed by [`WeightPhi::invariants`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiInvariants {
    pub phi_at_zero: f64,
    /// max over samples of `x Φ''(x)`; must not exceed 1.
    pub max_x_second: f64,
    /// max over samples of ψ; must not exceed 0.
    pub max_psi: f64,
    /// max over samples of `(Φ − Ψ)/Ψ`; nonpositive up to round-off.
    pub max_excess_over_psi: f64,
    pub knot_ratios: Vec<f64>,
    pub knots_increasing: bool,
    pub growth_witness: Vec<(f64, f64)>,
    pub self_consistency_defect: f64,
    pub cutoff_lipschitz: f64,
}

impl PhiInvariants {
    pub fn passes(&self, tol: f64) -> bool {
        self.phi_at_zero == 0.0
            && self.max_x_second <= 1.0 + tol
            && self.max_psi <= tol
            && self.max_excess_over_psi <= tol
            && self.knots_increasing
            && self.growth_witness.windows(2).all(|w| w[1].1 > w[0].1)
    }
}

/// JSON form of a finished weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiFile {
    pub phi_format: u32,
    pub knots: Vec<f64>,
    pub eps: Vec<f64>,
    pub march_step: f64,
    pub x_max: f64,
    pub cutoff_lipschitz: f64,
    pub h_samples: Vec<(f64, f64)>,
}

/// Runs the full pipeline: knots from the tail profile, adjusted second
/// derivative, final weight.
pub fn build_weight(
    tail_profile: impl Fn(f64) -> f64,
    k_max: usize,
    x_max: f64,
    step: f64,
) -> Result<WeightPhi> {
    let spec = construct_phi(tail_profile, k_max)?;
    let weight = adjust_weight(|x| spec.slope_derivative(x), x_max, step)?;
    Ok(finalize_phi(&spec, weight))
}

//! Rough initial data and the regularised family built from it.
//!
//! A [`RoughDatumSpec`] describes `u₀` analytically (point spikes
//! `c |x − x₀|^{−α}`, a noisy plateau, or a smooth bump) together with a
//! signal `v₀ ∈ W^{1,2}`. [`ApproxFamily`] turns it into grid fields
//! `(u₀ε, v₀ε)`: clamp at `M(ε) = 1/ε`, mollify with a Neumann-reflected
//! Gaussian of width `δ(ε) = √ε`, then rescale if the L¹ or W^{1,2} budget
//! (twice the datum's norm) would be exceeded.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grad_norms, integrate, lp_norm, Field, GridSpec};
use crate::quadrature::{gauss_legendre, gauss_legendre_points};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatumKind {
    Spike,
    MultiSpike,
    PlateauNoise,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Constant,
    CosineMix,
    Kink,
}

impl FromStr for DatumKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "spike" => Ok(Self::Spike),
            "multi_spike" => Ok(Self::MultiSpike),
            "plateau_noise" => Ok(Self::PlateauNoise),
            "smooth" => Ok(Self::Smooth),
            other => Err(format!(
                "unknown kind `{other}` (spike, multi_spike, plateau_noise, smooth)"
            )),
        }
    }
}

impl FromStr for SignalKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine_mix" => Ok(Self::CosineMix),
            "kink" => Ok(Self::Kink),
            other => Err(format!("unknown v_kind `{other}` (constant, cosine_mix, kink)")),
        }
    }
}

impl fmt::Display for DatumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Spike => "spike",
            Self::MultiSpike => "multi_spike",
            Self::PlateauNoise => "plateau_noise",
            Self::Smooth => "smooth",
        })
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::CosineMix => "cosine_mix",
            Self::Kink => "kink",
        })
    }
}

/// Radius of the plateau in `plateau_noise`, as a fraction of min(lx, ly).
const PLATEAU_RADIUS: f64 = 0.25;
/// Relative amplitude of the cosine terms in `cosine_mix`.
const COSINE_MIX_WEIGHT: f64 = 0.25;

/// Analytic description of `(u₀, v₀)`.
///
/// `amplitude` is the L¹ mass `‖u₀‖₁`; the pointwise coefficient is derived
/// from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughDatumSpec {
    pub kind: DatumKind,
    pub centers: Vec<(f64, f64)>,
    pub alpha: f64,
    pub amplitude: f64,
    pub v_kind: SignalKind,
    pub v_amplitude: f64,
}

impl RoughDatumSpec {
    /// Single spike of mass `amplitude` centred at `center`, with a
    /// `cosine_mix` signal of unit amplitude.
    pub fn spike(center: (f64, f64), alpha: f64, amplitude: f64) -> Self {
        Self {
            kind: DatumKind::Spike,
            centers: vec![center],
            alpha,
            amplitude,
            v_kind: SignalKind::CosineMix,
            v_amplitude: 1.0,
        }
    }

    pub fn smooth(amplitude: f64) -> Self {
        Self {
            kind: DatumKind::Smooth,
            centers: Vec::new(),
            alpha: 0.0,
            amplitude,
            v_kind: SignalKind::CosineMix,
            v_amplitude: 1.0,
        }
    }

    pub fn with_signal(mut self, kind: SignalKind, amplitude: f64) -> Self {
        self.v_kind = kind;
        self.v_amplitude = amplitude;
        self
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidDatum(format!(
                "amplitude must be finite and >= 0, got {}",
                self.amplitude
            )));
        }
        if !(self.v_amplitude >= 0.0 && self.v_amplitude.is_finite()) {
            return Err(Error::InvalidDatum(format!(
                "v_amplitude must be finite and >= 0, got {}",
                self.v_amplitude
            )));
        }
        match self.kind {
            DatumKind::Spike | DatumKind::MultiSpike | DatumKind::PlateauNoise => {
                if self.centers.is_empty() {
                    return Err(Error::InvalidDatum(format!("{} needs a center", self.kind)));
                }
                if self.kind == DatumKind::Spike && self.centers.len() != 1 {
                    return Err(Error::InvalidDatum(
                        "spike takes exactly one center; use multi_spike".into(),
                    ));
                }
            }
            DatumKind::Smooth => {}
        }
        for &(x, y) in &self.centers {
            if !grid.contains(x, y) {
                return Err(Error::InvalidDatum(format!(
                    "center ({x}, {y}) lies outside the domain {grid}"
                )));
            }
        }
        if self.is_spike() && !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::InvalidDatum(format!(
                "spike exponent must satisfy 0 < alpha < 2, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn is_spike(&self) -> bool {
        matches!(self.kind, DatumKind::Spike | DatumKind::MultiSpike)
    }

    /// Whether the datum fails to be square integrable.
    pub fn is_rougher_than_l2(&self) -> bool {
        self.is_spike() && self.alpha >= 1.0 && self.amplitude > 0.0
    }

    /// Pointwise coefficients: one per spike, or a single overall factor.
    fn coefficients(&self, grid: &GridSpec) -> Vec<f64> {
        let rect = Rect::domain(grid);
        match self.kind {
            DatumKind::Spike | DatumKind::MultiSpike => {
                let share = self.amplitude / self.centers.len() as f64;
                self.centers
                    .iter()
                    .map(|&p| share / spike_integral(p, &rect, self.alpha, f64::INFINITY))
                    .collect()
            }
            DatumKind::PlateauNoise => {
                let shape = polar_integral(self.centers[0], &rect, plateau_radius(grid), |x, y| {
                    plateau_noise_shape(grid, x, y)
                });
                vec![self.amplitude / shape]
            }
            DatumKind::Smooth => vec![self.amplitude / grid.area()],
        }
    }

    /// Closed-form (or quadrature) value of `‖u₀‖₁`.
    pub fn l1_norm(&self) -> f64 {
        self.amplitude
    }

    /// Evaluates the analytic `u₀` at a point.
    pub fn u0_at(&self, grid: &GridSpec, x: f64, y: f64) -> f64 {
        let coef = self.coefficients(grid);
        self.u0_with(&coef, grid, x, y)
    }

    fn u0_with(&self, coef: &[f64], grid: &GridSpec, x: f64, y: f64) -> f64 {
        match self.kind {
            DatumKind::Spike | DatumKind::MultiSpike => self
                .centers
                .iter()
                .zip(coef)
                .map(|(&(cx, cy), &c)| c * (x - cx).hypot(y - cy).powf(-self.alpha))
                .sum(),
            DatumKind::PlateauNoise => {
                let (cx, cy) = self.centers[0];
                if (x - cx).hypot(y - cy) < plateau_radius(grid) {
                    coef[0] * plateau_noise_shape(grid, x, y)
                } else {
                    0.0
                }
            }
            DatumKind::Smooth => {
                coef[0]
                    * (1.0 + 0.5 * (PI * x / grid.lx()).cos() * (PI * y / grid.ly()).cos())
            }
        }
    }

    /// Analytic `∫_{u₀ ≥ M} u₀` for a single spike; `None` for other kinds.
    pub fn analytic_tail_mass(&self, grid: &GridSpec, m: f64) -> Option<f64> {
        if self.kind != DatumKind::Spike {
            return None;
        }
        let c = self.coefficients(grid)[0];
        if m <= 0.0 {
            return Some(self.amplitude);
        }
        if c == 0.0 {
            return Some(0.0);
        }
        // u₀ ≥ M  ⇔  r ≤ (c/M)^{1/α}
        let r_m = (c / m).powf(1.0 / self.alpha);
        Some(c * spike_integral(self.centers[0], &Rect::domain(grid), self.alpha, r_m))
    }

    /// Evaluates the analytic `v₀`.
    pub fn v0_at(&self, grid: &GridSpec, x: f64, y: f64) -> f64 {
        let a = self.v_amplitude;
        match self.v_kind {
            SignalKind::Constant => a,
            SignalKind::CosineMix => {
                a * (1.0
                    + COSINE_MIX_WEIGHT
                        * ((2.0 * PI * x / grid.lx()).cos() + (2.0 * PI * y / grid.ly()).cos()))
            }
            SignalKind::Kink => a * (1.0 + (x - 0.5 * grid.lx()).abs() / grid.lx()),
        }
    }

    /// Closed form of `‖v₀‖²_{W^{1,2}} = ∫v₀² + ∫|∇v₀|²`.
    pub fn v0_w12_sq(&self, grid: &GridSpec) -> f64 {
        let a2 = self.v_amplitude * self.v_amplitude;
        let area = grid.area();
        match self.v_kind {
            SignalKind::Constant => a2 * area,
            SignalKind::CosineMix => {
                let w2 = COSINE_MIX_WEIGHT * COSINE_MIX_WEIGHT;
                let kx = 2.0 * PI / grid.lx();
                let ky = 2.0 * PI / grid.ly();
                a2 * area * (1.0 + w2) + a2 * w2 * (kx * kx + ky * ky) * area / 2.0
            }
            SignalKind::Kink => {
                a2 * area * (2.0 * (1.5f64.powi(3) - 1.0) / 3.0) + a2 * area / grid.lx().powi(2)
            }
        }
    }
}

fn plateau_radius(grid: &GridSpec) -> f64 {
    PLATEAU_RADIUS * grid.lx().min(grid.ly())
}

/// Deterministic high-frequency modulation of the plateau, in [½, 3/2].
fn plateau_noise_shape(grid: &GridSpec, x: f64, y: f64) -> f64 {
    1.0 + 0.5 * (14.0 * PI * x / grid.lx()).sin() * (10.0 * PI * y / grid.ly()).sin()
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    fn domain(grid: &GridSpec) -> Self {
        Self {
            x0: 0.0,
            x1: grid.lx(),
            y0: 0.0,
            y1: grid.ly(),
        }
    }

    fn cell(grid: &GridSpec, i: usize, j: usize) -> Self {
        let (dx, dy) = (grid.dx(), grid.dy());
        Self {
            x0: i as f64 * dx,
            x1: (i + 1) as f64 * dx,
            y0: j as f64 * dy,
            y1: (j + 1) as f64 * dy,
        }
    }

    fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn contains(&self, (x, y): (f64, f64)) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// The four sides seen from `p`: (distance to the side's line, signed
    /// tangential offsets of its two end points).
    fn sides_from(&self, (px, py): (f64, f64)) -> [(f64, f64, f64); 4] {
        [
            (self.x1 - px, self.y0 - py, self.y1 - py),
            (px - self.x0, self.y0 - py, self.y1 - py),
            (self.y1 - py, self.x0 - px, self.x1 - px),
            (py - self.y0, self.x0 - px, self.x1 - px),
        ]
    }
}

/// Sums `per_side(k, phi_lo, phi_hi, d)` over the side triangles of `rect`
/// seen from `p`. Along a ray at angle φ from the normal of side `k` the
/// boundary sits at `R = d / cos φ`.
fn sum_side_triangles(
    p: (f64, f64),
    rect: &Rect,
    mut per_side: impl FnMut(usize, f64, f64, f64) -> f64,
) -> f64 {
    rect.sides_from(p)
        .iter()
        .enumerate()
        .filter(|(_, (d, _, _))| *d > 0.0)
        .map(|(k, &(d, t0, t1))| per_side(k, (t0 / d).atan(), (t1 / d).atan(), d))
        .sum()
}

/// Splits `[lo, hi]` at the angles where `d / cos φ = r_cut`.
fn cut_angles(lo: f64, hi: f64, d: f64, r_cut: f64) -> Vec<f64> {
    let mut pts = vec![lo];
    if r_cut.is_finite() && r_cut > d {
        let c = (d / r_cut).acos();
        for a in [-c, c] {
            if a > lo && a < hi {
                pts.push(a);
            }
        }
    }
    pts.push(hi);
    pts
}

/// `∫_{rect ∩ B(p, r_cut)} |x − p|^{−α} dx` for `p` in the closed rectangle.
fn spike_integral(p: (f64, f64), rect: &Rect, alpha: f64, r_cut: f64) -> f64 {
    let e = 2.0 - alpha;
    sum_side_triangles(p, rect, |_, lo, hi, d| {
        let pts = cut_angles(lo, hi, d, r_cut);
        pts.windows(2)
            .map(|w| {
                gauss_legendre(
                    |phi| (d / phi.cos()).min(r_cut).powf(e) / e,
                    w[0],
                    w[1],
                    8,
                )
            })
            .sum()
    })
}

/// `∫_{rect ∩ B(p, r_cut)} f` in polar coordinates about `p`, for bounded `f`.
fn polar_integral(
    p: (f64, f64),
    rect: &Rect,
    r_cut: f64,
    f: impl Fn(f64, f64) -> f64,
) -> f64 {
    let (px, py) = p;
    sum_side_triangles(p, rect, |k, lo, hi, d| {
        // side normals +x, -x, +y, -y with tangents +y, +y, +x, +x
        let point = |phi: f64, r: f64| {
            let (s, c) = phi.sin_cos();
            match k {
                0 => (px + r * c, py + r * s),
                1 => (px - r * c, py + r * s),
                2 => (px + r * s, py + r * c),
                _ => (px + r * s, py - r * c),
            }
        };
        let pts = cut_angles(lo, hi, d, r_cut);
        pts.windows(2)
            .map(|w| {
                gauss_legendre(
                    |phi| {
                        let r_max = (d / phi.cos()).min(r_cut);
                        gauss_legendre(
                            |r| {
                                let (x, y) = point(phi, r);
                                r * f(x, y)
                            },
                            0.0,
                            r_max,
                            12,
                        )
                    },
                    w[0],
                    w[1],
                    24,
                )
            })
            .sum()
    })
}

/// Cells whose centre lies within this many cell widths (per axis) of a
/// spike centre take that spike's exact cell average instead of its centre
/// value.
const SPIKE_AVERAGE_RADIUS: f64 = 6.5;

/// Samples `u₀` at cell centres. Near each spike centre the spike's term is
/// replaced by its cell average, so the sampled mass stays close to the
/// analytic one even for strong singularities.
pub fn sample_u0(spec: &RoughDatumSpec, grid: &GridSpec) -> Result<Field> {
    spec.validate(grid)?;
    let coef = spec.coefficients(grid);
    if !spec.is_spike() {
        return Ok(Field::from_fn(*grid, |x, y| spec.u0_with(&coef, grid, x, y)));
    }
    let (dx, dy) = (grid.dx(), grid.dy());
    let near = |p: (f64, f64), x: f64, y: f64| {
        (x - p.0).abs() <= SPIKE_AVERAGE_RADIUS * dx && (y - p.1).abs() <= SPIKE_AVERAGE_RADIUS * dy
    };
    let mut field = Field::zeros(*grid);
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            let (x, y) = grid.center(i, j);
            let value = spec
                .centers
                .iter()
                .zip(&coef)
                .map(|(&p, &c)| {
                    if near(p, x, y) {
                        c * spike_cell_average(p, &Rect::cell(grid, i, j), spec.alpha)
                    } else {
                        c * (x - p.0).hypot(y - p.1).powf(-spec.alpha)
                    }
                })
                .sum();
            let k = grid.index(i, j);
            field.values_mut()[k] = value;
        }
    }
    Ok(field)
}

/// `|cell|⁻¹ ∫_cell |x − p|^{−α}`: exact polar pieces when `p` lies in the
/// closed cell, tensor Gauss–Legendre otherwise.
fn spike_cell_average(p: (f64, f64), cell: &Rect, alpha: f64) -> f64 {
    if cell.contains(p) {
        return spike_integral(p, cell, alpha, f64::INFINITY) / cell.area();
    }
    let xs = gauss_legendre_points(cell.x0, cell.x1, 2);
    let ys = gauss_legendre_points(cell.y0, cell.y1, 2);
    let mut total = 0.0;
    for &(y, wy) in &ys {
        for &(x, wx) in &xs {
            total += wx * wy * (x - p.0).hypot(y - p.1).powf(-alpha);
        }
    }
    total / cell.area()
}

/// Samples `v₀` at cell centres.
pub fn sample_v0(spec: &RoughDatumSpec, grid: &GridSpec) -> Field {
    Field::from_fn(*grid, |x, y| spec.v0_at(grid, x, y))
}

/// `∫_{f ≥ M} f` by masked quadrature.
pub fn tail_mass(f: &Field, m: f64) -> f64 {
    f.grid().cell_area() * f.values().iter().filter(|&&v| v >= m).sum::<f64>()
}

/// Discrete `‖f‖²_{W^{1,2}}` (face-gradient form).
pub fn w12_sq(f: &Field) -> f64 {
    let l2 = lp_norm(f, 2.0).expect("p = 2 is valid");
    l2 * l2 + grad_norms(f).0
}

/// Convolution with a Gaussian of standard deviation `width`, reflected at
/// the boundary (even extension), applied separably.
///
/// Weights are normalised on the grid, so the operator is symmetric with unit
/// row sums: it preserves mass and never exceeds the input's maximum.
pub fn mollify(f: &Field, width: f64) -> Field {
    let g = *f.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let kx = gaussian_weights(width, g.dx());
    let ky = gaussian_weights(width, g.dy());
    let src = f.values();
    let mut tmp = vec![0.0; g.len()];
    for j in 0..ny {
        let row = &src[j * nx..(j + 1) * nx];
        convolve_reflected(row, &kx, &mut tmp[j * nx..(j + 1) * nx]);
    }
    let mut out = vec![0.0; g.len()];
    let mut col = vec![0.0; ny];
    let mut col_out = vec![0.0; ny];
    for i in 0..nx {
        for j in 0..ny {
            col[j] = tmp[j * nx + i];
        }
        convolve_reflected(&col, &ky, &mut col_out);
        for j in 0..ny {
            out[j * nx + i] = col_out[j];
        }
    }
    Field::from_values(g, out).expect("same grid")
}

fn gaussian_weights(width: f64, h: f64) -> Vec<f64> {
    if width <= 0.0 {
        return vec![1.0];
    }
    let half = (4.0 * width / h).ceil() as usize;
    let mut w: Vec<f64> = (0..=2 * half)
        .map(|k| {
            let s = (k as f64 - half as f64) * h / width;
            (-0.5 * s * s).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn convolve_reflected(src: &[f64], w: &[f64], out: &mut [f64]) {
    let n = src.len() as isize;
    let half = (w.len() / 2) as isize;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &wk) in w.iter().enumerate() {
            let mut m = (i as isize + k as isize - half).rem_euclid(2 * n);
            if m >= n {
                m = 2 * n - 1 - m;
            }
            acc += wk * src[m as usize];
        }
        *o = acc;
    }
}

/// The ε-indexed regularisation of a rough datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxFamily {
    pub base: RoughDatumSpec,
    /// Rescale members whose norms exceed twice the datum's norms.
    pub rescale_guard: bool,
    /// Recorded only; grid fields are bounded, so it drives no computation.
    pub q0: f64,
}

/// One member `(u₀ε, v₀ε)` of the family with its guard factors.
#[derive(Debug, Clone)]
pub struct FamilyMember {
    pub eps: f64,
    pub u: Field,
    pub v: Field,
    pub u_scale: f64,
    pub v_scale: f64,
}

impl ApproxFamily {
    pub fn new(base: RoughDatumSpec) -> Self {
        Self {
            base,
            rescale_guard: true,
            q0: 4.0,
        }
    }

    /// Clamp level M(ε) = 1/ε.
    pub fn clamp_level(eps: f64) -> f64 {
        1.0 / eps
    }

    /// Mollification width δ(ε) = √ε.
    pub fn width(eps: f64) -> f64 {
        eps.sqrt()
    }

    pub fn member(&self, grid: &GridSpec, eps: f64) -> Result<FamilyMember> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("family needs eps > 0, got {eps}")));
        }
        let level = Self::clamp_level(eps);
        let width = Self::width(eps);
        let u_raw = sample_u0(&self.base, grid)?;
        let mut u = mollify(&u_raw.map(|v| v.min(level)), width);
        let mut v = mollify(&sample_v0(&self.base, grid), width);
        let (mut u_scale, mut v_scale) = (1.0, 1.0);
        if self.rescale_guard {
            let budget_u = 2.0 * self.base.l1_norm();
            let mass = integrate(&u);
            if mass > budget_u {
                u_scale = budget_u / mass;
                u = u.scale(u_scale);
            }
            let budget_v = 2.0 * self.base.v0_w12_sq(grid).sqrt();
            let norm_v = w12_sq(&v).sqrt();
            if norm_v > budget_v {
                v_scale = budget_v / norm_v;
                v = v.scale(v_scale);
            }
        }
        Ok(FamilyMember {
            eps,
            u,
            v,
            u_scale,
            v_scale,
        })
    }
}

/// `(u₀ε, v₀ε)` with the rescale guard enabled.
pub fn build_family(spec: &RoughDatumSpec, grid: &GridSpec, eps: f64) -> Result<(Field, Field)> {
    let m = ApproxFamily::new(spec.clone()).member(grid, eps)?;
    Ok((m.u, m.v))
}

//! Fixed-order Gauss–Legendre rules.

const NODES_8: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];

const WEIGHTS_8: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// ∫_a^b f with `panels` equal 8-point Gauss–Legendre panels.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    if b == a {
        return 0.0;
    }
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        let s: f64 = NODES_8
            .iter()
            .zip(WEIGHTS_8)
            .map(|(&x, w)| w * f(mid + half * x))
            .sum();
        total += half * s;
    }
    total
}

/// Nodes and weights of the composite rule on `[a, b]`.
pub fn gauss_legendre_points(a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(8 * panels);
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (&x, w) in NODES_8.iter().zip(WEIGHTS_8) {
            out.push((mid + 0.5 * h * x, 0.5 * h * w));
        }
    }
    out
}

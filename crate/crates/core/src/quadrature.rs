//! Fixed-order Gauss-Legendre rules.

const NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Eight-point Gauss-Legendre nodes and weights mapped onto `[lo, hi]`.
pub fn gauss_legendre_8(lo: f64, hi: f64) -> [(f64, f64); 8] {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut out = [(0.0, 0.0); 8];
    for (i, (&x, &w)) in NODES.iter().zip(WEIGHTS.iter()).enumerate() {
        out[2 * i] = (mid - half * x, half * w);
        out[2 * i + 1] = (mid + half * x, half * w);
    }
    out
}

/// Integrate `f` over `[lo, hi]` with one eight-point panel.
pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> f64 {
    gauss_legendre_8(lo, hi)
        .iter()
        .map(|&(x, w)| w * f(x))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_degree_fifteen() {
        // x^15 on [0, 2] integrates to 2^16 / 16.
        let got = integrate(|x| x.powi(15), 0.0, 2.0);
        assert!((got - 4096.0).abs() < 1e-9);
    }

    #[test]
    fn weights_sum_to_length() {
        let s: f64 = gauss_legendre_8(-0.5, 1.25).iter().map(|p| p.1).sum();
        assert!((s - 1.75).abs() < 1e-14);
    }
}

//! Special functions for closed-form solenoid fields.

use std::f64::consts::FRAC_PI_2;

/// Bulirsch's general complete elliptic integral
///
/// `cel(kc, p, c, s) = ∫₀^{π/2} (c cos²φ + s sin²φ) / ((cos²φ + p sin²φ) √(cos²φ + kc² sin²φ)) dφ`
///
/// Evaluated with Bulirsch's iterative algorithm, valid for `kc ≠ 0` and any
/// sign of `p` (the Cauchy principal value is returned for `p < 0`).
pub fn cel(kc: f64, p: f64, c: f64, s: f64) -> f64 {
    const TOL: f64 = 1e-15;
    if kc == 0.0 {
        return f64::INFINITY;
    }
    let mut k = kc.abs();
    let mut em = 1.0;
    let (mut pp, mut cc, mut ss);
    if p > 0.0 {
        pp = p.sqrt();
        cc = c;
        ss = s / pp;
    } else {
        let mut f = kc * kc;
        let mut q = 1.0 - f;
        let g = 1.0 - p;
        f -= p;
        q *= s - c * p;
        pp = (f / g).sqrt();
        cc = (c - s) / g;
        ss = -q / (g * g * pp) + cc * pp;
    }
    let mut f = cc;
    cc += ss / pp;
    let mut g = k / pp;
    ss = 2.0 * (ss + f * g);
    pp += g;
    g = em;
    em += k;
    let mut kk = k;
    while (g - k).abs() > g * TOL {
        k = 2.0 * kk.sqrt();
        kk = k * em;
        f = cc;
        cc += ss / pp;
        g = kk / pp;
        ss = 2.0 * (ss + f * g);
        pp += g;
        g = em;
        em += k;
    }
    FRAC_PI_2 * (ss + cc * em) / (em * (em + pp))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                x
            } else {
                p1
            };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cel_matches_direct_quadrature() {
        // Reference values from 30-digit adaptive quadrature of the defining integral.
        let cases = [
            ((0.5, 1.0, 1.0, -1.0), -0.364_710_005_650_179_99),
            ((0.1, 1.0, 1.0, -1.0), -1.717_784_491_484_167_1),
            ((0.9, 0.25, 1.0, 0.5), 2.225_773_043_895_794_8),
            ((0.3, 0.04, 1.0, 0.2), 5.522_280_614_427_001_8),
            ((0.05, 0.81, 1.0, 0.9), 4.752_675_439_886_663_8),
            ((1.0, 1.0, 1.0, 1.0), FRAC_PI_2),
        ];
        for ((kc, p, c, s), expected) in cases {
            let got = cel(kc, p, c, s);
            assert!(
                (got - expected).abs() < 1e-13 * expected.abs().max(1.0),
                "cel({kc},{p},{c},{s}) = {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn cel_reduces_to_complete_k() {
        // cel(kc, 1, 1, 1) = K(k) with k² = 1 - kc²; K(0.5²) from tables.
        let kc = (1.0f64 - 0.25).sqrt();
        assert!((cel(kc, 1.0, 1.0, 1.0) - 1.685_750_354_812_596).abs() < 1e-13);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [1, 2, 5, 8, 13] {
            let (x, w) = gauss_legendre(n);
            let sum_w: f64 = w.iter().sum();
            assert!((sum_w - 2.0).abs() < 1e-13, "n={n}");
            // exact up to degree 2n-1
            let deg = 2 * n - 1;
            let integral: f64 = x
                .iter()
                .zip(&w)
                .map(|(xi, wi)| wi * xi.powi(deg as i32 - 1))
                .sum();
            let exact = if (deg - 1) % 2 == 0 {
                2.0 / deg as f64
            } else {
                0.0
            };
            assert!((integral - exact).abs() < 1e-12, "n={n}");
        }
    }
}

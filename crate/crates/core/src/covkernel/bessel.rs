//! Modified Bessel function of the second kind, K_ν(x), for real order and
//! positive argument.
//!
//! The fractional part μ ∈ [-1/2, 1/2] of the order is handled by Temme's
//! series for x < 2 and by Steed's continued fraction (CF2) for x ≥ 2; both
//! yield the pair (K_μ, K_{μ+1}), from which the forward recurrence
//! K_{a+1} = K_{a-1} + (2a/x) K_a climbs to the requested order. Forward
//! recurrence is stable for K. Values are carried in exponentially scaled
//! form e^x·K_ν(x) so that large arguments do not underflow.

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;
const SERIES_CUTOVER: f64 = 2.0;

/// Taylor coefficients of 1/Γ(1+x) around 0.
const RGAMMA_1P: [f64; 27] = [
    1.0,
    0.577_215_664_901_532_86,
    -0.655_878_071_520_253_88,
    -0.042_002_635_034_095_236,
    0.166_538_611_382_291_49,
    -0.042_197_734_555_544_337,
    -0.009_621_971_527_876_973_6,
    0.007_218_943_246_663_099_5,
    -0.001_165_167_591_859_065_1,
    -0.000_215_241_674_114_950_97,
    0.000_128_050_282_388_116_19,
    -2.013_485_478_078_823_9e-5,
    -1.250_493_482_142_670_7e-6,
    1.133_027_231_981_695_9e-6,
    -2.056_338_416_977_607_1e-7,
    6.116_095_104_481_415_8e-9,
    5.002_007_644_469_222_9e-9,
    -1.181_274_570_487_020_1e-9,
    1.043_426_711_691_100_5e-10,
    7.782_263_439_905_071_3e-12,
    -3.696_805_618_642_205_7e-12,
    5.100_370_287_454_476e-13,
    -2.058_326_053_566_506_8e-14,
    -5.348_122_539_423_018e-15,
    1.226_778_628_238_260_8e-15,
    -1.181_259_301_697_458_8e-16,
    1.186_692_254_751_600_3e-18,
];

/// Returns (gam1, gam2, 1/Γ(1+μ), 1/Γ(1-μ)) for |μ| ≤ 1/2, where
/// gam1 = (1/Γ(1-μ) - 1/Γ(1+μ)) / (2μ) and gam2 = (1/Γ(1-μ) + 1/Γ(1+μ)) / 2.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    // Even coefficients build gam2, odd ones build gam1; both are exact
    // power series in μ so there is no cancellation near μ = 0.
    let mu2 = mu * mu;
    let mut gam2 = 0.0;
    let mut gam1 = 0.0;
    let mut p = 1.0;
    for k in (0..RGAMMA_1P.len()).step_by(2) {
        gam2 += RGAMMA_1P[k] * p;
        if k + 1 < RGAMMA_1P.len() {
            gam1 -= RGAMMA_1P[k + 1] * p;
        }
        p *= mu2;
    }
    let gampl = gam2 - mu * gam1;
    let gammi = gam2 + mu * gam1;
    (gam1, gam2, gampl, gammi)
}

/// (e^x K_μ(x), e^x K_{μ+1}(x)) for |μ| ≤ 1/2, x > 0.
fn k_pair_scaled(mu: f64, x: f64) -> (f64, f64) {
    debug_assert!(mu.abs() <= 0.5 + 1e-12);
    let mu2 = mu * mu;
    let xi = 1.0 / x;
    if x < SERIES_CUTOVER {
        let x2 = 0.5 * x;
        let pimu = std::f64::consts::PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        let scale = x.exp();
        (sum * scale, sum1 * 2.0 * xi * scale)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        let kmu = (std::f64::consts::PI / (2.0 * x)).sqrt() / s;
        let k1 = kmu * (mu + x + 0.5 - h) * xi;
        (kmu, k1)
    }
}

/// Climbs from the base pair at order μ up `steps` orders.
/// Returns scaled (K_{μ+steps}, K_{μ+steps+1}).
fn climb(mu: f64, x: f64, steps: usize) -> (f64, f64) {
    let (mut k0, mut k1) = k_pair_scaled(mu, x);
    let two_over_x = 2.0 / x;
    for i in 1..=steps {
        let next = (mu + i as f64) * two_over_x * k1 + k0;
        k0 = k1;
        k1 = next;
    }
    (k0, k1)
}

fn check_domain(nu: f64, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::arg(format!("bessel_k requires x > 0, got {x}")));
    }
    if !nu.is_finite() {
        return Err(Error::arg(format!("bessel_k requires a finite order, got {nu}")));
    }
    Ok(())
}

/// e^x · K_ν(x).
pub fn bessel_k_scaled(nu: f64, x: f64) -> Result<f64> {
    check_domain(nu, x)?;
    let a = nu.abs();
    let nl = (a + 0.5).floor();
    let mu = a - nl;
    Ok(climb(mu, x, nl as usize).0)
}

/// K_ν(x) for real ν and x > 0. K is even in the order.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    Ok(bessel_k_scaled(nu, x)? * (-x).exp())
}

/// Scaled pair (e^x K_{ν-1}(x), e^x K_ν(x)) from one series/fraction
/// evaluation. Used for the Matérn range derivative.
pub fn bessel_k_adjacent_scaled(nu: f64, x: f64) -> Result<(f64, f64)> {
    check_domain(nu, x)?;
    let lower = nu - 1.0;
    if lower >= -0.5 {
        let nl = (lower + 0.5).floor();
        let mu = lower - nl;
        Ok(climb(mu, x, nl as usize))
    } else if nu >= -0.5 {
        // ν ∈ [-1/2, 1/2): the pair at μ = -ν is (K_{-ν}, K_{1-ν}) = (K_ν, K_{ν-1}).
        let (k_nu, k_lower) = k_pair_scaled(-nu, x);
        Ok((k_lower, k_nu))
    } else {
        // Negative orders: reflect both members.
        Ok((bessel_k_scaled(lower, x)?, bessel_k_scaled(nu, x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference values computed with 30-digit arbitrary precision arithmetic.
    const REFERENCE: [(f64, f64, f64); 19] = [
        (0.1, 1e-06, 19.043892581433072),
        (0.1, 0.5, 0.930_086_529_131_478_5),
        (0.2, 3.0, 0.034_942_427_790_006_61),
        (0.35, 1.7, 0.170_381_675_966_615_93),
        (0.5, 1.0, 0.461_068_504_447_894_56),
        (0.7, 0.01, 26.433878465829248),
        (0.9, 2.0, 0.134_550_462_165_725_58),
        (1.0, 1.0, 0.601_907_230_197_234_6),
        (1.3, 0.2, 8.736_632_532_664_886),
        (1.5, 5.0, 0.004_531_936_049_571_459),
        (2.2, 10.0, 2.238_459_053_532_703_3e-5),
        (2.5, 0.3, 75.15214016437489),
        (3.7, 0.001, 3_411_810_326_257.287),
        (4.4, 25.0, 5.059_954_613_481_893_5e-12),
        (5.0, 50.0, 4.367_182_254_100_986_3e-23),
        (0.25, 49.0, 9.369_354_481_460_099_4e-23),
        (0.45, 1.99, 0.120_257_093_950_130_72),
        (0.45, 2.01, 0.117_297_671_077_875_66),
        (3.0, 1e-06, 7.999_999_999_999_001e18),
    ];

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn matches_high_precision_reference() {
        for &(nu, x, want) in &REFERENCE {
            let got = bessel_k(nu, x).unwrap();
            assert!(rel(got, want) <= 1e-10, "K_{nu}({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn half_order_closed_form() {
        let got = bessel_k(0.5, 1.0).unwrap();
        let closed = (std::f64::consts::PI / 2.0).sqrt() * (-1.0f64).exp();
        assert!(rel(got, closed) < 1e-13);
        assert!((got - 0.461_068_504_4).abs() < 1e-10);
        for &x in &[1e-6, 0.01, 0.7, 1.99, 2.0, 3.5, 20.0, 50.0] {
            let k12 = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
            let k32 = k12 * (1.0 + 1.0 / x);
            let k52 = k12 * (1.0 + 3.0 / x + 3.0 / (x * x));
            assert!(rel(bessel_k(0.5, x).unwrap(), k12) < 1e-12, "x={x}");
            assert!(rel(bessel_k(1.5, x).unwrap(), k32) < 1e-12, "x={x}");
            assert!(rel(bessel_k(2.5, x).unwrap(), k52) < 1e-12, "x={x}");
        }
    }

    #[test]
    fn even_in_order() {
        for &(nu, x) in &[(0.3, 0.4), (1.7, 2.5), (4.2, 11.0), (0.5, 0.1)] {
            assert_eq!(bessel_k(nu, x).unwrap(), bessel_k(-nu, x).unwrap());
        }
    }

    #[test]
    fn three_term_recurrence() {
        for i in 0..40 {
            let nu = 0.1 + 4.9 * (i as f64) / 39.0;
            for &x in &[1e-3, 0.3, 1.5, 2.5, 8.0, 40.0] {
                let lhs = bessel_k(nu + 1.0, x).unwrap();
                let rhs = bessel_k(nu - 1.0, x).unwrap() + 2.0 * nu / x * bessel_k(nu, x).unwrap();
                assert!(rel(lhs, rhs) < 1e-9, "nu={nu} x={x}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn adjacent_pair_agrees_with_single_orders() {
        for &nu in &[0.05, 0.2, 0.49, 0.5, 0.51, 0.9, 1.0, 1.5, 2.3, 4.9] {
            for &x in &[1e-4, 0.2, 1.9, 2.1, 9.0, 45.0] {
                let (lo, hi) = bessel_k_adjacent_scaled(nu, x).unwrap();
                assert!(rel(lo, bessel_k_scaled(nu - 1.0, x).unwrap()) < 1e-12, "nu={nu} x={x}");
                assert!(rel(hi, bessel_k_scaled(nu, x).unwrap()) < 1e-12, "nu={nu} x={x}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_argument() {
        assert!(matches!(bessel_k(0.5, 0.0), Err(Error::Argument(_))));
        assert!(matches!(bessel_k(0.5, -1.0), Err(Error::Argument(_))));
    }
}

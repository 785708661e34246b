//! Paired two-sided t-test, self-contained (log-gamma via Lanczos, Student-t
//! tail via the regularized incomplete beta continued fraction).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Paired two-sided t-test on aligned per-sample scores.
///
/// Degenerate inputs are defined, not errors: identical vectors give t = 0,
/// p = 1; a constant non-zero difference (zero variance) gives p = 0.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "paired t-test needs aligned samples: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    one_sample_t_test(&diffs, 0.0)
}

/// Two-sided one-sample t-test of mean(xs) against `mu`.
pub fn one_sample_t_test(xs: &[f64], mu: f64) -> Result<TTest> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::Data("t-test needs at least two samples".into()));
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf - mu;
    let var = xs
        .iter()
        .map(|x| {
            let d = x - mu - mean;
            d * d
        })
        .sum::<f64>()
        / (nf - 1.0);
    let df = nf - 1.0;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: if mean > 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                p: 0.0,
                df,
            }
        });
    }
    let t = mean / (var / nf).sqrt();
    Ok(TTest {
        t,
        p: students_t_two_sided_p(t, df),
        df,
    })
}

/// Conventional significance marks: `**` for p < 0.01, `*` for p < 0.05,
/// `/` otherwise.
pub fn significance_mark(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "/"
    }
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom:
/// I_{df/(df+t²)}(df/2, 1/2).
pub fn students_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    reg_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.999_999_999_999_809_9;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
fn reg_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(2.0)).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-10);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-10);
    }

    #[test]
    fn identical_vectors_give_p_one() {
        let a = [0.3, 0.5, 0.1, 0.9];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn constant_nonzero_difference_gives_p_zero() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.5, 1.5, 2.5];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite());
    }

    #[test]
    fn t_critical_values_reproduce_table_p() {
        // d_i = c + e_i with e = k·[-5..5] gives t = c exactly (sample sd of
        // e is √11 = √n). Critical values from the two-sided t table, df=10.
        let build = |c: f64| -> Vec<f64> { (-5..=5).map(|e| c + e as f64).collect() };
        let p05 = one_sample_t_test(&build(2.228138852), 0.0).unwrap();
        assert!((p05.t - 2.228138852).abs() < 1e-9);
        assert!((p05.p - 0.05).abs() < 1e-3, "p = {}", p05.p);

        let p01 = one_sample_t_test(&build(3.169272673), 0.0).unwrap();
        assert!((p01.p - 0.01).abs() < 1e-3, "p = {}", p01.p);

        let p10 = one_sample_t_test(&build(1.812461123), 0.0).unwrap();
        assert!((p10.p - 0.10).abs() < 1e-3, "p = {}", p10.p);
    }

    #[test]
    fn marks_follow_paper_thresholds() {
        assert_eq!(significance_mark(0.005), "**");
        assert_eq!(significance_mark(0.03), "*");
        assert_eq!(significance_mark(0.5), "/");
        assert_eq!(significance_mark(0.05), "/");
        assert_eq!(significance_mark(0.01), "*");
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(paired_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }
}

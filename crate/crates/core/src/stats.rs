//! Statistical kernels used by the trap detectors.
//!
//! The binomial pmf is evaluated in log space through `lgamma`, which keeps it
//! finite for trial counts up to at least 10^6. The chi-square survival
//! function for one degree of freedom is the complementary error function of
//! `sqrt(x / 2)`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// `ln C(n, k)`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    let lg = |x: u64| libm::lgamma(x as f64 + 1.0);
    // Sum the two smaller terms first so that (k, n-k) and (n-k, k) give
    // bit-identical results.
    lg(n) - (lg(k) + lg(n - k))
}

/// Natural log of the binomial pmf. Returns `-inf` for impossible outcomes.
pub fn ln_binomial_pmf(k: u64, n: u64, p: f64) -> Result<f64> {
    if k > n {
        return Err(Error::Domain(format!("k = {k} exceeds n = {n}")));
    }
    check_probability(p)?;
    if p == 0.0 {
        return Ok(if k == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if p == 1.0 {
        return Ok(if k == n { 0.0 } else { f64::NEG_INFINITY });
    }
    let successes = k as f64 * p.ln();
    let failures = (n - k) as f64 * (-p).ln_1p();
    Ok(ln_choose(n, k) + (successes + failures))
}

/// `C(n, k) p^k (1 - p)^(n - k)`.
pub fn binomial_pmf(k: u64, n: u64, p: f64) -> Result<f64> {
    ln_binomial_pmf(k, n, p).map(f64::exp)
}

/// Upper-tail probability of the chi-square distribution with one degree of
/// freedom.
pub fn chisq1_sf(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!(
            "chi-square statistic {x} is negative"
        )));
    }
    Ok(libm::erfc((0.5 * x).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-cell Pearson goodness-of-fit test of `observed` successes in `trials`
/// against a binomial with success probability `p0`.
pub fn pearson_chi2_1dof(observed: u64, trials: u64, p0: f64) -> Result<PearsonResult> {
    pearson_chi2_1dof_with(observed, trials, p0, false)
}

/// As [`pearson_chi2_1dof`], optionally with Yates' continuity correction.
pub fn pearson_chi2_1dof_with(
    observed: u64,
    trials: u64,
    p0: f64,
    continuity_correction: bool,
) -> Result<PearsonResult> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Domain(format!("p0 = {p0} outside (0, 1)")));
    }
    if trials == 0 {
        return Err(Error::Domain(
            "Pearson test needs at least one trial".into(),
        ));
    }
    if observed > trials {
        return Err(Error::Domain(format!(
            "observed = {observed} exceeds trials = {trials}"
        )));
    }
    let n = trials as f64;
    let expected_hit = n * p0;
    let expected_miss = n * (1.0 - p0);
    let o_hit = observed as f64;
    let o_miss = (trials - observed) as f64;

    let cell = |o: f64, e: f64| {
        let mut d = (o - e).abs();
        if continuity_correction {
            d = (d - 0.5).max(0.0);
        }
        d * d / e
    };
    let statistic = cell(o_hit, expected_hit) + cell(o_miss, expected_miss);
    let p_value = chisq1_sf(statistic)?;
    Ok(PearsonResult { statistic, p_value })
}

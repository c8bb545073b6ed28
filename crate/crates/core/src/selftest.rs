//! Embedded oracle suites, run by `uts-sim selftest`.
//!
//! Each suite takes the implementation under test as a function argument so
//! that deliberately broken variants can be fed through the same oracle.

use std::collections::BTreeSet;

use crate::attacker::pr_in_challenge_given_trap;
use crate::error::Result;
use crate::sim::{
    AnswerVector, Challenge, GradeOutcome, ImageId, ImagePool, ServerConfig, ServerState,
};
use crate::stats::{binomial_pmf, chisq1_sf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn binom_exact(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * u128::from(n - i) / u128::from(i + 1))
}

/// Trap-appearance rate against subset counting: a fixed element lies in
/// `C(k,t) - C(k-1,t)` of the `C(k,t)` t-subsets. Exact equality.
pub fn trap_rate_suite(rate: impl Fn(f64, u32) -> Result<f64>) -> SuiteReport {
    let mut report = SuiteReport {
        name: "trap-rate exhaustive (1 <= t <= k <= 12)",
        cases: 0,
        failures: Vec::new(),
    };
    for k in 1..=12u64 {
        for t in 1..=k {
            report.cases += 1;
            let den = binom_exact(k, t);
            let num = den - binom_exact(k - 1, t);
            let expected = num as f64 / den as f64;
            match rate(t as f64, k as u32) {
                Ok(got) if got == expected => {}
                Ok(got) => report
                    .failures
                    .push(format!("t={t} k={k}: {got} != {expected}")),
                Err(e) => report.failures.push(format!("t={t} k={k}: {e}")),
            }
        }
    }
    report
}

pub type Grader<'a> =
    dyn FnMut(&mut ServerState, &Challenge, &AnswerVector) -> Result<GradeOutcome> + 'a;

/// Grades every answer vector for every placement of `NE` and of at most one
/// trap on a four-image challenge, and compares outcome and trap-set side
/// effects with a direct reading of the grading rule.
pub fn grading_suite(grader: &mut Grader<'_>) -> SuiteReport {
    let mut report = SuiteReport {
        name: "grading brute force (|C| = 4)",
        cases: 0,
        failures: Vec::new(),
    };
    let target: BTreeSet<u32> = [0, 1, 4].into();
    let pool = ImagePool::new(
        vec![ImageId(0), ImageId(1), ImageId(4)],
        vec![ImageId(2), ImageId(3), ImageId(5)],
    )
    .expect("static pool");
    let config = ServerConfig {
        challenge_size: 4,
        ne_min: 0,
        ne_max: 2,
        trap_per_challenge_min: 0,
        trap_per_challenge_max: 1,
        m_per_challenge_min: 0,
        m_per_challenge_max: 2,
        rng_seed: 0,
    };
    let images: Vec<u32> = vec![0, 1, 2, 3];
    // Image 5 sits in the trap set but outside the challenge.
    let bystander = 5u32;

    let trap_choices: Vec<Option<u32>> = std::iter::once(None)
        .chain(images.iter().map(|&i| Some(i)))
        .collect();
    for trap in trap_choices {
        let free: Vec<u32> = images
            .iter()
            .copied()
            .filter(|&i| Some(i) != trap)
            .collect();
        for ne_mask in 0u32..(1 << free.len()) {
            if ne_mask.count_ones() > 2 {
                continue;
            }
            let ne: BTreeSet<u32> = free
                .iter()
                .enumerate()
                .filter(|(bit, _)| ne_mask & (1 << bit) != 0)
                .map(|(_, &i)| i)
                .collect();
            for answer_mask in 0u32..16 {
                report.cases += 1;
                let picks: Vec<(u32, bool)> = images
                    .iter()
                    .enumerate()
                    .map(|(bit, &i)| (i, answer_mask & (1 << bit) != 0))
                    .collect();

                // Oracle.
                let correct = |i: u32, pick: bool| pick == target.contains(&i);
                let passed = picks
                    .iter()
                    .filter(|(i, _)| !ne.contains(i))
                    .all(|&(i, p)| correct(i, p));
                let added: BTreeSet<u32> = if passed {
                    picks
                        .iter()
                        .filter(|(i, p)| ne.contains(i) && !correct(*i, *p))
                        .map(|&(i, _)| i)
                        .collect()
                } else {
                    BTreeSet::new()
                };
                let removed: BTreeSet<u32> = picks
                    .iter()
                    .filter(|&&(i, p)| Some(i) == trap && correct(i, p))
                    .map(|&(i, _)| i)
                    .collect();
                let mut ti_after: BTreeSet<u32> = [bystander].into();
                ti_after.extend(trap);
                ti_after.extend(&added);
                for r in &removed {
                    ti_after.remove(r);
                }

                // Implementation.
                let case = format!("trap={trap:?} ne={ne:?} answer={answer_mask:04b}");
                let outcome = (|| -> Result<(GradeOutcome, BTreeSet<u32>)> {
                    let mut server = ServerState::new(pool.clone(), config.clone())?;
                    server.insert_traps(std::iter::once(bystander).chain(trap).map(ImageId))?;
                    let challenge = server.register_challenge(
                        images.iter().copied().map(ImageId).collect(),
                        ne.iter().copied().map(ImageId).collect(),
                        trap.into_iter().map(ImageId).collect(),
                    )?;
                    let answer: AnswerVector =
                        picks.iter().map(|&(i, p)| (ImageId(i), p)).collect();
                    let out = grader(&mut server, &challenge, &answer)?;
                    let ti = server.trap_set().iter().map(|id| id.0).collect();
                    Ok((out, ti))
                })();
                let (out, ti) = match outcome {
                    Ok(v) => v,
                    Err(e) => {
                        report.failures.push(format!("{case}: {e}"));
                        continue;
                    }
                };
                let ids =
                    |s: &BTreeSet<ImageId>| s.iter().map(|id| id.0).collect::<BTreeSet<u32>>();
                if out.passed != passed {
                    report
                        .failures
                        .push(format!("{case}: passed {} != {passed}", out.passed));
                }
                if ids(&out.traps_added) != added {
                    report.failures.push(format!(
                        "{case}: traps_added {:?} != {added:?}",
                        out.traps_added
                    ));
                }
                if ids(&out.traps_removed) != removed {
                    report.failures.push(format!(
                        "{case}: traps_removed {:?} != {removed:?}",
                        out.traps_removed
                    ));
                }
                if ti != ti_after {
                    report
                        .failures
                        .push(format!("{case}: TI {ti:?} != {ti_after:?}"));
                }
            }
        }
    }
    report
}

/// Chi-square(1) upper tail at selected points, 30-digit reference values.
pub const CHISQ1_REFERENCE: [(f64, f64); 10] = [
    (0.001, 0.974_772_879_369_960_4),
    (0.5, 0.479_500_122_186_953_5),
    (1.0, 0.317_310_507_862_914_1),
    (2.0, 0.157_299_207_050_285_13),
    (3.841_458_820_694_124, 0.050_000_000_000_000_06),
    (6.634_896_601_021_213, 0.010_000_000_000_000_012),
    (10.0, 0.001_565_402_258_002_549_7),
    (25.0, 5.733_031_437_583_878e-7),
    (50.0, 1.537_459_794_428_034_8e-12),
    (100.0, 1.523_970_604_832_105e-23),
];

/// Binomial pmf against log-factorial sums, and the chi-square tail against
/// [`CHISQ1_REFERENCE`]. Both at 1e-9 relative.
pub fn stats_suite(
    pmf: impl Fn(u64, u64, f64) -> Result<f64>,
    sf: impl Fn(f64) -> Result<f64>,
) -> SuiteReport {
    let mut report = SuiteReport {
        name: "stats kernels vs reference values",
        cases: 0,
        failures: Vec::new(),
    };
    let mut ln_fact = vec![0.0f64; 201];
    for i in 2..=200 {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    for n in [1u64, 5, 22, 60, 200] {
        for p in [0.011, 0.1, 0.5, 0.75] {
            for k in 0..=n {
                let ln_ref = ln_fact[n as usize] - ln_fact[k as usize] - ln_fact[(n - k) as usize]
                    + k as f64 * f64::ln(p)
                    + (n - k) as f64 * f64::ln(1.0 - p);
                let reference = ln_ref.exp();
                if reference < 1e-280 {
                    continue;
                }
                report.cases += 1;
                match pmf(k, n, p) {
                    Ok(v) if ((v - reference) / reference).abs() <= 1e-9 => {}
                    Ok(v) => report
                        .failures
                        .push(format!("pmf({k},{n},{p}) = {v}, reference {reference}")),
                    Err(e) => report.failures.push(format!("pmf({k},{n},{p}): {e}")),
                }
            }
        }
    }
    for (x, reference) in CHISQ1_REFERENCE {
        report.cases += 1;
        match sf(x) {
            Ok(v) if ((v - reference) / reference).abs() <= 1e-9 => {}
            Ok(v) => report
                .failures
                .push(format!("chisq1_sf({x}) = {v}, reference {reference}")),
            Err(e) => report.failures.push(format!("chisq1_sf({x}): {e}")),
        }
    }
    report
}

/// All suites against the shipped implementation.
pub fn run_all() -> Vec<SuiteReport> {
    vec![
        trap_rate_suite(pr_in_challenge_given_trap),
        grading_suite(
            &mut |s: &mut ServerState, c: &Challenge, a: &AnswerVector| s.grade_answer(c, a),
        ),
        stats_suite(binomial_pmf, chisq1_sf),
    ]
}

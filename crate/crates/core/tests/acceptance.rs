//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uts_core::attacker::{posterior_from_rates, pr_in_challenge_given_trap};
use uts_core::harness::{run_experiment, write_outputs, Experiment, RunConfig, CSV_FILE};
use uts_core::sim::{AnswerVector, ImageId, ImagePool, ServerConfig, ServerState};
use uts_core::stats::{binomial_pmf, chisq1_sf};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn default_run() -> RunConfig {
    RunConfig::default()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn rank_correlation(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn block_means(exp: &Experiment) -> Vec<f64> {
    let blocks = exp.replicates[0].blocks.len();
    (0..blocks)
        .map(|b| {
            exp.replicates
                .iter()
                .map(|r| r.blocks[b].success_rate)
                .sum::<f64>()
                / exp.replicates.len() as f64
        })
        .collect()
}

fn learning_escalation(exp: &Experiment) -> Outcome {
    let means = block_means(exp);
    let final_mean = *means.last().expect("blocks");
    let index: Vec<f64> = (0..means.len()).map(|i| i as f64).collect();
    let rho = rank_correlation(&index, &means);
    let betas: Vec<f64> = exp.replicates.iter().map(|r| r.realized_beta).collect();
    let beta = betas.iter().sum::<f64>() / betas.len() as f64;
    let pass = exp.replicates.len() == 5
        && means.len() == 14
        && final_mean >= 0.95
        && rho > 0.9
        && (0.01..=0.03).contains(&beta);
    let curve: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    outcome(
        pass,
        format!(
            "final-block mean {final_mean:.4} (>= 0.95), spearman {rho:.4} (> 0.9), realized beta {:.2}% (in [1%, 3%]); curve [{}]",
            beta * 100.0,
            curve.join(", ")
        ),
    )
}

fn defense_without_learning() -> Outcome {
    let mut config = default_run();
    config.learner.knowledge_threshold = 1.0 + 1e-9;
    let exp = match run_experiment(&config) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let means = block_means(&exp);
    let first = means[0];
    let tail = means[means.len() - 3..].iter().sum::<f64>() / 3.0;
    outcome(
        tail <= 0.2 * first,
        format!(
            "first block {first:.4}, final three blocks {tail:.6} (<= {:.6})",
            0.2 * first
        ),
    )
}

fn choose(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * u128::from(n - i) / u128::from(i + 1))
}

fn trap_rate_equivalence() -> Outcome {
    let mut cases = 0;
    let mut failures = Vec::new();
    for k in 1..=12u64 {
        for t in 1..=k {
            cases += 1;
            let all = choose(k, t);
            let containing = all - choose(k - 1, t);
            // t/k and the subset fraction are the same rational number.
            let rational_equal = u128::from(t) * all == u128::from(k) * containing;
            let expected = containing as f64 / all as f64;
            let got = pr_in_challenge_given_trap(t as f64, k as u32);
            if !rational_equal || got.as_ref().ok() != Some(&expected) {
                failures.push(format!("t={t} k={k}: {got:?} vs {expected}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{cases} (t, k) pairs, mismatches {failures:?}"),
    )
}

fn grading_brute_force() -> Outcome {
    let target: BTreeSet<u32> = [10, 12, 20].into();
    let pool = ImagePool::new(
        target.iter().map(|&i| ImageId(i)).collect(),
        vec![ImageId(11), ImageId(13), ImageId(21)],
    )
    .expect("pool");
    let config = ServerConfig {
        challenge_size: 4,
        ne_min: 0,
        ne_max: 2,
        trap_per_challenge_min: 0,
        trap_per_challenge_max: 1,
        m_per_challenge_min: 0,
        m_per_challenge_max: 2,
        rng_seed: 3,
    };
    let images = [10u32, 11, 12, 13];
    let outside_trap = 21u32;

    let mut cases = 0;
    let mut failures = Vec::new();
    let mut placements = vec![None];
    placements.extend(images.iter().map(|&i| Some(i)));
    for trap in placements {
        for ne_bits in 0u32..16 {
            let ne: BTreeSet<u32> = (0..4)
                .filter(|b| ne_bits >> b & 1 == 1)
                .map(|b| images[b])
                .collect();
            if ne.len() > 2 || trap.is_some_and(|t| ne.contains(&t)) {
                continue;
            }
            for answer_bits in 0u32..16 {
                cases += 1;
                let answer: Vec<(u32, bool)> = (0..4)
                    .map(|b| (images[b], answer_bits >> b & 1 == 1))
                    .collect();
                let right = |&(i, pick): &(u32, bool)| pick == target.contains(&i);

                let graded_ok = answer.iter().filter(|a| !ne.contains(&a.0)).all(right);
                let mut want_ti: BTreeSet<u32> = [outside_trap].into_iter().chain(trap).collect();
                let want_added: BTreeSet<u32> = if graded_ok {
                    answer
                        .iter()
                        .filter(|a| ne.contains(&a.0) && !right(a))
                        .map(|a| a.0)
                        .collect()
                } else {
                    BTreeSet::new()
                };
                let want_removed: BTreeSet<u32> = answer
                    .iter()
                    .filter(|a| Some(a.0) == trap && right(a))
                    .map(|a| a.0)
                    .collect();
                want_ti.extend(&want_added);
                want_ti.retain(|i| !want_removed.contains(i));

                let result = (|| {
                    let mut server = ServerState::new(pool.clone(), config.clone())?;
                    server.insert_traps([outside_trap].into_iter().chain(trap).map(ImageId))?;
                    let challenge = server.register_challenge(
                        images.iter().map(|&i| ImageId(i)).collect(),
                        ne.iter().map(|&i| ImageId(i)).collect(),
                        trap.iter().map(|&i| ImageId(i)).collect(),
                    )?;
                    let vector: AnswerVector =
                        answer.iter().map(|&(i, p)| (ImageId(i), p)).collect();
                    let out = server.grade_answer(&challenge, &vector)?;
                    let ti: BTreeSet<u32> = server.trap_set().iter().map(|i| i.0).collect();
                    uts_core::Result::Ok((out, ti))
                })();
                let ok = match &result {
                    Ok((out, ti)) => {
                        let ids = |s: &BTreeSet<ImageId>| {
                            s.iter().map(|i| i.0).collect::<BTreeSet<u32>>()
                        };
                        out.passed == graded_ok
                            && ids(&out.traps_added) == want_added
                            && ids(&out.traps_removed) == want_removed
                            && *ti == want_ti
                    }
                    Err(_) => false,
                };
                if !ok {
                    failures.push(format!(
                        "trap={trap:?} ne={ne:?} answer={answer_bits:04b}: {result:?}"
                    ));
                }
            }
        }
    }
    outcome(
        cases >= 500 && failures.is_empty(),
        format!(
            "{cases} cases, {} mismatches {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn posterior_correctness() -> Outcome {
    let (prior, p_trap, p_nontrap, n, k) = (0.5, 0.1, 0.022, 20u64, 4u64);
    let closed = match posterior_from_rates(k, n, prior, p_trap, p_nontrap) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("posterior failed: {e}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let (mut hits, mut traps) = (0u64, 0u64);
    for _ in 0..1_000_000 {
        let is_trap = rng.gen_bool(prior);
        let p = if is_trap { p_trap } else { p_nontrap };
        let count = (0..n).filter(|_| rng.gen_bool(p)).count() as u64;
        if count == k {
            hits += 1;
            traps += u64::from(is_trap);
        }
    }
    let estimate = traps as f64 / hits as f64;
    let se = (estimate * (1.0 - estimate) / hits as f64).sqrt();
    let within_mc = (closed - estimate).abs() <= 3.0 * se;
    let within_direct = (closed - 0.991).abs() <= 1e-3;
    outcome(
        within_mc && within_direct,
        format!(
            "closed form {closed:.6}; Monte Carlo {estimate:.6} +- {se:.6} over {hits} matching samples; |closed - 0.991| = {:.2e}",
            (closed - 0.991).abs()
        ),
    )
}

fn stats_kernels() -> Outcome {
    let mut ln_fact = vec![0.0f64; 201];
    for i in 1..=200 {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let mut worst_rel = 0.0f64;
    let mut worst_row = 0.0f64;
    let mut errors = Vec::new();
    for n in 1..=200u64 {
        for p in [0.001, 0.011, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.999] {
            let mut row = 0.0;
            for k in 0..=n {
                let got = match binomial_pmf(k, n, p) {
                    Ok(v) => v,
                    Err(e) => {
                        errors.push(format!("pmf({k},{n},{p}): {e}"));
                        continue;
                    }
                };
                row += got;
                let ln_ref = ln_fact[n as usize] - ln_fact[k as usize] - ln_fact[(n - k) as usize]
                    + k as f64 * p.ln()
                    + (n - k) as f64 * (-p).ln_1p();
                let reference = ln_ref.exp();
                if reference > 1e-300 {
                    worst_rel = worst_rel.max(((got - reference) / reference).abs());
                }
            }
            worst_row = worst_row.max((row - 1.0).abs());
        }
    }
    let sf = chisq1_sf(3.841458820694124).unwrap_or(f64::NAN);
    let pass =
        errors.is_empty() && worst_rel <= 1e-10 && worst_row <= 1e-9 && (sf - 0.05).abs() <= 1e-6;
    outcome(
        pass,
        format!(
            "max pmf relative error {worst_rel:.2e} (<= 1e-10), max |row sum - 1| {worst_row:.2e} (<= 1e-9), chisq1_sf(3.8414588) = {sf:.9}; errors {errors:?}"
        ),
    )
}

fn trap_exposure_rate() -> Outcome {
    let pool = ImagePool::with_sizes(200, 1800);
    let config = ServerConfig {
        rng_seed: 0x7ab5,
        ..ServerConfig::default()
    };
    let mut server = match ServerState::new(pool, config) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("server: {e}")),
    };
    let traps: Vec<ImageId> = (0..10).map(|i| ImageId(i * 97)).collect();
    if let Err(e) = server.insert_traps(traps.iter().copied()) {
        return outcome(false, format!("insert: {e}"));
    }
    // Challenges are generated but never graded, so TI stays at these 10.
    let challenges = 10_000;
    let mut per_challenge = Vec::with_capacity(challenges);
    let mut first_trap_hits = 0u64;
    for _ in 0..challenges {
        let ch = match server.generate_challenge() {
            Ok(c) => c,
            Err(e) => return outcome(false, format!("generate: {e}")),
        };
        let present = traps.iter().filter(|t| ch.images().contains(t)).count();
        per_challenge.push(present as f64 / traps.len() as f64);
        first_trap_hits += u64::from(ch.images().contains(&traps[0]));
    }
    let ti_pinned = server.trap_set().len() == 10;
    let n = challenges as f64;
    let mean = per_challenge.iter().sum::<f64>() / n;
    let var = per_challenge
        .iter()
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let se = (var / n).sqrt();
    let single = first_trap_hits as f64 / n;
    let single_se = (0.15 * 0.85 / n).sqrt();
    let pass =
        ti_pinned && (mean - 0.15).abs() <= 3.0 * se && (single - 0.15).abs() <= 3.0 * single_se;
    outcome(
        pass,
        format!(
            "per-trap frequency {mean:.5} +- {se:.5} (target 0.15); single trap {single:.4} +- {single_se:.4}; |TI| = {}",
            server.trap_set().len()
        ),
    )
}

fn flip_correctness(exp: &Experiment) -> Outcome {
    let violations: u64 = exp.replicates.iter().map(|r| r.flip_violations).sum();
    let flags: u64 = exp
        .replicates
        .iter()
        .flat_map(|r| &r.blocks)
        .map(|b| b.flags_true_positive)
        .sum();
    outcome(
        violations == 0,
        format!("{violations} violations over {flags} flags on true traps"),
    )
}

fn determinism(first: &Experiment) -> Outcome {
    let second = match run_experiment(&first.config) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("second run failed: {e}")),
    };
    let read = |exp: &Experiment| -> uts_core::Result<Vec<u8>> {
        let dir = tempfile::tempdir()?;
        write_outputs(dir.path(), exp)?;
        Ok(fs::read(dir.path().join(CSV_FILE))?)
    };
    match (read(first), read(&second)) {
        (Ok(a), Ok(b)) => outcome(
            a == b && !a.is_empty(),
            format!("{} bytes, identical: {}", a.len(), a == b),
        ),
        (a, b) => outcome(false, format!("write failed: {:?} {:?}", a.err(), b.err())),
    }
}

fn main() -> ExitCode {
    let run1 = run_experiment(&default_run());
    let run1_outcome = |f: fn(&Experiment) -> Outcome| match &run1 {
        Ok(exp) => f(exp),
        Err(e) => outcome(false, format!("default run failed: {e}")),
    };

    let results = [
        (
            "1 learning attack escalates to >= 0.95",
            run1_outcome(learning_escalation),
        ),
        (
            "2 traps defeat a non-learning bot",
            defense_without_learning(),
        ),
        (
            "3 trap-rate closed form equals subset count",
            trap_rate_equivalence(),
        ),
        (
            "4 grading matches brute-force oracle",
            grading_brute_force(),
        ),
        (
            "5 posterior matches Monte Carlo and direct value",
            posterior_correctness(),
        ),
        ("6 stats kernels within tolerance", stats_kernels()),
        ("7 trap exposure rate with |TI| = 10", trap_exposure_rate()),
        (
            "8 flips on true traps are always correct",
            run1_outcome(flip_correctness),
        ),
        (
            "9 identical seeds give byte-identical CSV",
            run1_outcome(determinism),
        ),
    ];

    let mut failed = 0;
    for (name, result) in &results {
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {name}: {}", result.detail);
        failed += usize::from(!result.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Experiment driver: runs server and learner against each other, collects
//! per-block statistics and scores the learner's trap flags against the
//! server's ground truth.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacker::{BaselineBot, Learner, LearnerConfig};
use crate::error::{Error, Result};
use crate::seed::{derive, replicate_seed, BOT_STREAM, CALIBRATION_STREAM, SERVER_STREAM};
use crate::sim::{AnswerVector, ImagePool, MembershipOracle, ServerConfig, ServerState};

/// Interval (in challenges) at which true `|TI|` and the estimate are logged.
pub const TI_TRACE_INTERVAL: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub total_challenges: u64,
    pub block_size: u64,
    pub replicates: u32,
    pub master_seed: u64,
    /// Opaque; recorded in metadata only.
    pub mr: i64,
    pub baseline_accuracy: f64,
    pub pool_target: usize,
    pub pool_other: usize,
    /// Challenges used to measure the baseline pass rate on the
    /// unstrengthened CAPTCHA.
    pub beta_calibration_challenges: u64,
    #[serde(flatten)]
    pub server: ServerConfig,
    #[serde(flatten)]
    pub learner: LearnerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_challenges: 70_000,
            block_size: 5_000,
            replicates: 5,
            master_seed: 1,
            mr: 5,
            baseline_accuracy: 0.8236,
            pool_target: 200,
            pool_other: 1800,
            beta_calibration_challenges: 20_000,
            server: ServerConfig::default(),
            learner: LearnerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn pool(&self) -> ImagePool {
        ImagePool::with_sizes(self.pool_target, self.pool_other)
    }

    pub fn block_count(&self) -> u64 {
        self.total_challenges / self.block_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.total_challenges == 0 {
            return Err(Error::Config(
                "total_challenges and block_size must be positive".into(),
            ));
        }
        if !self.total_challenges.is_multiple_of(self.block_size) {
            return Err(Error::Config(format!(
                "block_size {} does not divide total_challenges {}",
                self.block_size, self.total_challenges
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if !(self.baseline_accuracy > 0.0 && self.baseline_accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "baseline_accuracy {} outside (0, 1]",
                self.baseline_accuracy
            )));
        }
        self.server.validate(&self.pool())?;
        self.learner.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block_index: u64,
    pub challenges: u64,
    pub successes: u64,
    pub success_rate: f64,
    pub true_ti_size_end: usize,
    #[serde(rename = "eTIs_end")]
    pub eti_size_end: u32,
    pub flags_true_positive: u64,
    pub flags_false_positive: u64,
    pub confirmed_cumulative: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiSample {
    pub challenge: u64,
    pub true_ti_size: usize,
    pub eti_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateSeeds {
    pub replicate: u32,
    pub replicate_seed: u64,
    pub server_seed: u64,
    pub bot_seed: u64,
    pub calibration_seed: u64,
}

impl ReplicateSeeds {
    pub fn derive(master: u64, replicate: u32) -> Self {
        let replicate_seed = replicate_seed(master, u64::from(replicate));
        Self {
            replicate,
            replicate_seed,
            server_seed: derive(replicate_seed, SERVER_STREAM),
            bot_seed: derive(replicate_seed, BOT_STREAM),
            calibration_seed: derive(replicate_seed, CALIBRATION_STREAM),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub seeds: ReplicateSeeds,
    pub blocks: Vec<BlockStats>,
    /// Pass rate of the baseline bot on the unstrengthened CAPTCHA.
    pub realized_beta: f64,
    /// Flags on true traps whose learned label disagrees with ground truth.
    pub flip_violations: u64,
    pub server_passed: u64,
    pub ti_trace: Vec<TiSample>,
}

/// Pass rate of `bot` on the original CAPTCHA (no ungraded images, no traps).
pub fn measure_baseline_pass_rate(
    pool: &ImagePool,
    server: &ServerConfig,
    mut bot: BaselineBot,
    seed: u64,
    challenges: u64,
) -> Result<f64> {
    if challenges == 0 {
        return Ok(0.0);
    }
    let config = ServerConfig {
        rng_seed: seed,
        ..server.unstrengthened()
    };
    let mut state = ServerState::new(pool.clone(), config)?;
    let mut passed = 0u64;
    for _ in 0..challenges {
        let ch = state.generate_challenge()?;
        let answer: AnswerVector = ch
            .images()
            .iter()
            .map(|&id| (id, bot.classify(id, pool)))
            .collect();
        passed += u64::from(state.grade_answer(&ch, &answer)?.passed);
    }
    Ok(passed as f64 / challenges as f64)
}

pub fn run_replicate(config: &RunConfig, replicate_index: u32) -> Result<ReplicateResult> {
    config.validate()?;
    let seeds = ReplicateSeeds::derive(config.master_seed, replicate_index);
    let pool = config.pool();
    let mut server = ServerState::new(
        pool.clone(),
        ServerConfig {
            rng_seed: seeds.server_seed,
            ..config.server.clone()
        },
    )?;
    let bot = BaselineBot::new(config.baseline_accuracy, seeds.bot_seed)?;
    let realized_beta = measure_baseline_pass_rate(
        &pool,
        &config.server,
        bot.clone(),
        seeds.calibration_seed,
        config.beta_calibration_challenges,
    )?;
    let mut learner = Learner::new(
        config.learner.clone(),
        bot,
        pool.len() as u64,
        config.server.challenge_size as u32,
    )?;

    let mut blocks = Vec::with_capacity(config.block_count() as usize);
    let mut flip_violations = 0;
    let mut confirmed_cumulative = 0;
    let mut ti_trace = Vec::new();

    for block_index in 0..config.block_count() {
        let mut successes = 0;
        let mut tp = 0;
        let mut fp = 0;
        for _ in 0..config.block_size {
            let challenge = server.generate_challenge()?;
            let view = challenge.view();
            let answer = learner.observe_and_answer(&view, &pool);
            let outcome = server.grade_answer(&challenge, &answer)?;
            let report = learner.record_outcome(&view, &answer, outcome.passed);

            successes += u64::from(outcome.passed);
            for &(image, label) in &report.flagged {
                if server.trap_set().contains(image) {
                    tp += 1;
                    if label != pool.is_target(image) {
                        flip_violations += 1;
                    }
                } else {
                    fp += 1;
                }
            }
            confirmed_cumulative += report.confirmed.len() as u64;
            if view.index % TI_TRACE_INTERVAL == 0 {
                ti_trace.push(TiSample {
                    challenge: view.index,
                    true_ti_size: server.trap_set().len(),
                    eti_size: learner.belief().eti_size,
                });
            }
        }
        blocks.push(BlockStats {
            block_index,
            challenges: config.block_size,
            successes,
            success_rate: successes as f64 / config.block_size as f64,
            true_ti_size_end: server.trap_set().len(),
            eti_size_end: learner.belief().eti_size,
            flags_true_positive: tp,
            flags_false_positive: fp,
            confirmed_cumulative,
        });
    }

    Ok(ReplicateResult {
        seeds,
        blocks,
        realized_beta,
        flip_violations,
        server_passed: server.passed_count(),
        ti_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block_index: u64,
    pub success_rate_mean: f64,
    pub success_rate_sd: f64,
    pub true_ti_size_mean: f64,
    pub eti_size_mean: f64,
    pub flags_tp_mean: f64,
    pub flags_tp_sd: f64,
    pub flags_fp_mean: f64,
    pub flags_fp_sd: f64,
    pub confirmed_mean: f64,
}

/// Sample mean and standard deviation; the deviation of a single value is 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Element-wise summary across replicates.
pub fn aggregate(replicates: &[Vec<BlockStats>]) -> Result<Vec<BlockSummary>> {
    let Some(first) = replicates.first() else {
        return Err(Error::ShapeMismatch("no replicates to aggregate".into()));
    };
    let blocks = first.len();
    if let Some(bad) = replicates.iter().find(|r| r.len() != blocks) {
        return Err(Error::ShapeMismatch(format!(
            "replicates have {} and {} blocks",
            blocks,
            bad.len()
        )));
    }
    Ok((0..blocks)
        .map(|b| {
            let column = |f: &dyn Fn(&BlockStats) -> f64| -> Vec<f64> {
                replicates.iter().map(|r| f(&r[b])).collect()
            };
            let (success_rate_mean, success_rate_sd) = mean_sd(&column(&|s| s.success_rate));
            let (flags_tp_mean, flags_tp_sd) = mean_sd(&column(&|s| s.flags_true_positive as f64));
            let (flags_fp_mean, flags_fp_sd) = mean_sd(&column(&|s| s.flags_false_positive as f64));
            BlockSummary {
                block_index: first[b].block_index,
                success_rate_mean,
                success_rate_sd,
                true_ti_size_mean: mean_sd(&column(&|s| s.true_ti_size_end as f64)).0,
                eti_size_mean: mean_sd(&column(&|s| f64::from(s.eti_size_end))).0,
                flags_tp_mean,
                flags_tp_sd,
                flags_fp_mean,
                flags_fp_sd,
                confirmed_mean: mean_sd(&column(&|s| s.confirmed_cumulative as f64)).0,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub replicates: Vec<ReplicateResult>,
    pub summary: Vec<BlockSummary>,
}

/// Runs all replicates in parallel; results are ordered by replicate index.
pub fn run_experiment(config: &RunConfig) -> Result<Experiment> {
    config.validate()?;
    let replicates = (0..config.replicates)
        .into_par_iter()
        .map(|i| run_replicate(config, i))
        .collect::<Result<Vec<_>>>()?;
    let blocks: Vec<Vec<BlockStats>> = replicates.iter().map(|r| r.blocks.clone()).collect();
    let summary = aggregate(&blocks)?;
    Ok(Experiment {
        config: config.clone(),
        replicates,
        summary,
    })
}

pub const CSV_HEADER: &str =
    "replicate,block_index,challenges,successes,success_rate,true_ti_size_end,eTIs_end,flags_tp,flags_fp,confirmed_cum";

pub fn write_blocks_csv<W: Write>(mut out: W, replicates: &[ReplicateResult]) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in replicates {
        for b in &r.blocks {
            writeln!(
                out,
                "{},{},{},{},{:.6},{},{},{},{},{}",
                r.seeds.replicate,
                b.block_index,
                b.challenges,
                b.successes,
                b.success_rate,
                b.true_ti_size_end,
                b.eti_size_end,
                b.flags_true_positive,
                b.flags_false_positive,
                b.confirmed_cumulative
            )?;
        }
    }
    Ok(())
}

pub fn metadata_json(experiment: &Experiment) -> Result<serde_json::Value> {
    let config = serde_json::to_value(&experiment.config)?;
    let seeds: Vec<ReplicateSeeds> = experiment.replicates.iter().map(|r| r.seeds).collect();
    let betas: Vec<f64> = experiment
        .replicates
        .iter()
        .map(|r| r.realized_beta)
        .collect();
    let violations: Vec<u64> = experiment
        .replicates
        .iter()
        .map(|r| r.flip_violations)
        .collect();
    Ok(serde_json::json!({
        "generator": concat!("uts-core ", env!("CARGO_PKG_VERSION")),
        "config": config,
        "seeds": seeds,
        "realized_beta": betas,
        "flip_violations": violations,
        "summary": experiment.summary,
    }))
}

pub const CSV_FILE: &str = "blocks.csv";
pub const METADATA_FILE: &str = "metadata.json";

/// Writes `blocks.csv` and `metadata.json` into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, experiment: &Experiment) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    write_blocks_csv(&mut csv, &experiment.replicates)?;
    fs::write(dir.join(CSV_FILE), csv)?;
    let meta = serde_json::to_string_pretty(&metadata_json(experiment)?)?;
    fs::write(dir.join(METADATA_FILE), meta + "\n")?;
    Ok(())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

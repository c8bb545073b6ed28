//! The learning attack.
//!
//! A baseline bot `b` answers with a fixed, per-image label. The learning bot
//! `l_b` tracks, for every image, the last passed challenge that contained it
//! (`h1`), the answer it gave there, and how often the image has shown up
//! since. Trap images reappear far more often than the `|C| / |M ∪ MN|`
//! rate of ordinary images and only in failed challenges, so a Bayesian
//! posterior (or a Pearson test) on that count exposes them. Once an image is
//! recognised as a trap its true label is the opposite of the answer given at
//! `h1`, and `l_b` answers with that learned label from then on.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{mix64, unit_f64};
use crate::sim::{AnswerVector, ChallengeView, ImageId, MembershipOracle};
use crate::stats::{ln_binomial_pmf, pearson_chi2_1dof_with};

const PRIOR_FLOOR: f64 = 1e-6;
const PRIOR_CEIL: f64 = 0.5;

/// The non-learning classifier `b`.
///
/// Whether `b` is right about an image is decided once, from a draw keyed by
/// `(seed, image)`, and memoised. Keying the draw by image makes the label
/// independent of the order in which images are encountered, so the same
/// seed yields the same bot against any challenge sequence.
#[derive(Debug, Clone)]
pub struct BaselineBot {
    per_image_accuracy: f64,
    seed: u64,
    memo: HashMap<ImageId, bool>,
}

impl BaselineBot {
    pub fn new(per_image_accuracy: f64, seed: u64) -> Result<Self> {
        if !(per_image_accuracy > 0.0 && per_image_accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "baseline accuracy {per_image_accuracy} outside (0, 1]"
            )));
        }
        Ok(Self {
            per_image_accuracy,
            seed,
            memo: HashMap::new(),
        })
    }

    pub fn per_image_accuracy(&self) -> f64 {
        self.per_image_accuracy
    }

    /// Returns the bot's pick for `image` (true = "in M").
    pub fn classify(&mut self, image: ImageId, truth: &impl MembershipOracle) -> bool {
        if let Some(&label) = self.memo.get(&image) {
            return label;
        }
        let draw = unit_f64(mix64(self.seed ^ mix64(u64::from(image.0) + 1)));
        let correct = draw < self.per_image_accuracy;
        let label = truth.is_target(image) == correct;
        self.memo.insert(image, label);
        label
    }
}

/// Per-image observation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: ImageId,
    /// Index of the latest passed challenge that contained the image.
    pub h1: Option<u64>,
    pub answer_at_h1: Option<bool>,
    /// Appearances in challenges with index > h1.
    pub appearances_since_h1: u64,
    pub total_appearances: u64,
    pub first_seen: u64,
    pub last_seen: u64,
    /// Entry in the learned-classification map `lc`.
    pub learned_class: Option<bool>,
    /// The learned label has since appeared in a passed challenge.
    pub confirmed: bool,
    /// Most recently computed trap posterior.
    pub posterior: f64,
}

impl ImageRecord {
    pub fn new(image: ImageId, first_seen: u64) -> Self {
        Self {
            image,
            h1: None,
            answer_at_h1: None,
            appearances_since_h1: 0,
            total_appearances: 0,
            first_seen,
            last_seen: first_seen,
            learned_class: None,
            confirmed: false,
            posterior: 0.0,
        }
    }
}

/// The attacker's model of the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerBelief {
    /// Estimated size of the trap set.
    pub eti_size: u32,
    pub pool_size_estimate: u64,
    pub prior_trap: f64,
    pub expected_traps_per_challenge: f64,
    pub challenge_size: u32,
}

impl AttackerBelief {
    pub fn new(
        eti_size: u32,
        pool_size_estimate: u64,
        expected_traps: f64,
        challenge_size: u32,
    ) -> Self {
        let mut belief = Self {
            eti_size: eti_size.max(1),
            pool_size_estimate: pool_size_estimate.max(1),
            prior_trap: 0.0,
            expected_traps_per_challenge: expected_traps,
            challenge_size,
        };
        belief.refresh_prior();
        belief
    }

    pub fn refresh_prior(&mut self) {
        self.prior_trap = (f64::from(self.eti_size) / self.pool_size_estimate as f64)
            .clamp(PRIOR_FLOOR, PRIOR_CEIL);
    }

    /// Appearance rate of an ordinary image.
    pub fn p_nontrap(&self) -> f64 {
        (f64::from(self.challenge_size) / self.pool_size_estimate as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Bayes,
    Chisq,
    Both,
}

impl std::fmt::Display for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Detector::Bayes => "bayes",
            Detector::Chisq => "chisq",
            Detector::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKnowledge {
    Known,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub detector: Detector,
    /// Posterior at or above which an image is declared a trap. Values above
    /// 1 disable learning for the Bayesian detector.
    pub knowledge_threshold: f64,
    /// Posterior threshold used when counting images for the trap-set size
    /// estimate; defaults to `knowledge_threshold`.
    pub ti_membership_threshold: Option<f64>,
    pub chisq_alpha: f64,
    pub continuity_correction: bool,
    pub pool_knowledge: PoolKnowledge,
    pub expected_traps_per_challenge: f64,
    /// Starting value of the trap-set size estimate.
    pub initial_eti_size: u32,
    /// Every this many challenges, all posteriors are recomputed.
    pub sweep_interval: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            detector: Detector::Bayes,
            knowledge_threshold: 0.9,
            ti_membership_threshold: None,
            chisq_alpha: 0.05,
            continuity_correction: false,
            pool_knowledge: PoolKnowledge::Known,
            expected_traps_per_challenge: 1.5,
            initial_eti_size: 2,
            sweep_interval: 100,
        }
    }
}

impl LearnerConfig {
    pub fn membership_threshold(&self) -> f64 {
        self.ti_membership_threshold
            .unwrap_or(self.knowledge_threshold)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.chisq_alpha > 0.0 && self.chisq_alpha < 1.0) {
            return Err(Error::Config(format!(
                "chisq_alpha {} outside (0, 1)",
                self.chisq_alpha
            )));
        }
        if self.knowledge_threshold.is_nan() || self.knowledge_threshold <= 0.0 {
            return Err(Error::Config("knowledge_threshold must be positive".into()));
        }
        if self.membership_threshold().is_nan() || self.membership_threshold() <= 0.0 {
            return Err(Error::Config(
                "ti_membership_threshold must be positive".into(),
            ));
        }
        if self.expected_traps_per_challenge.is_nan() || self.expected_traps_per_challenge <= 0.0 {
            return Err(Error::Config(
                "expected_traps_per_challenge must be positive".into(),
            ));
        }
        if self.initial_eti_size == 0 || self.sweep_interval == 0 {
            return Err(Error::Config(
                "initial_eti_size and sweep_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Probability that a given trap shows up in one challenge when `eti_size`
/// traps share `expected_traps` slots: `t / k`, which equals
/// `1 - C(k-1, t) / C(k, t)`, saturating at 1 once `t >= k`.
pub fn pr_in_challenge_given_trap(expected_traps: f64, eti_size: u32) -> Result<f64> {
    if eti_size < 1 {
        return Err(Error::Domain(
            "trap-set size estimate must be at least 1".into(),
        ));
    }
    if expected_traps.is_nan() || expected_traps <= 0.0 {
        return Err(Error::Domain(format!(
            "expected traps {expected_traps} must be positive"
        )));
    }
    if expected_traps >= f64::from(eti_size) {
        return Ok(1.0);
    }
    Ok(expected_traps / f64::from(eti_size))
}

/// Bayes posterior of "trap" after `k` appearances in `n` challenges,
/// evaluated in log space.
pub fn posterior_from_rates(
    k: u64,
    n: u64,
    prior: f64,
    p_trap: f64,
    p_nontrap: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&prior) {
        return Err(Error::Domain(format!("prior {prior} outside [0, 1]")));
    }
    let ln_trap = ln_binomial_pmf(k, n, p_trap)? + prior.ln();
    let ln_other = ln_binomial_pmf(k, n, p_nontrap)? + (-prior).ln_1p();
    match (ln_trap.is_finite(), ln_other.is_finite()) {
        (false, false) => Err(Error::IndeterminatePosterior),
        (true, false) => Ok(1.0),
        (false, true) => Ok(0.0),
        // 1 / (1 + exp(ln_other - ln_trap))
        (true, true) => Ok(1.0 / (1.0 + (ln_other - ln_trap).exp())),
    }
}

/// Posterior that `record` is a trap at challenge `h`.
pub fn posterior_trap(record: &ImageRecord, belief: &AttackerBelief, h: u64) -> Result<f64> {
    let h1 = record
        .h1
        .ok_or_else(|| Error::Domain(format!("{} has no passed challenge yet", record.image)))?;
    if h < h1 {
        return Err(Error::Domain(format!("h = {h} precedes h1 = {h1}")));
    }
    let n = h - h1;
    if n == 0 {
        return Ok(belief.prior_trap);
    }
    let p_trap = pr_in_challenge_given_trap(belief.expected_traps_per_challenge, belief.eti_size)?;
    posterior_from_rates(
        record.appearances_since_h1.min(n),
        n,
        belief.prior_trap,
        p_trap,
        belief.p_nontrap(),
    )
}

/// Pearson-test trap heuristic: the image has appeared in a passed
/// challenge, every challenge containing it since then failed, and it shows
/// up significantly more often than an ordinary image.
pub fn chisq_trap_flag(
    record: &ImageRecord,
    config: &LearnerConfig,
    belief: &AttackerBelief,
    h: u64,
    failed_since_h1: bool,
) -> bool {
    let Some(h1) = record.h1 else {
        return false;
    };
    if !failed_since_h1 || h <= h1 {
        return false;
    }
    let n = h - h1;
    let k = record.appearances_since_h1.min(n);
    let p0 = belief.p_nontrap();
    if !(p0 > 0.0 && p0 < 1.0) {
        return false;
    }
    let over_expected = (k as f64) > n as f64 * p0;
    match pearson_chi2_1dof_with(k, n, p0, config.continuity_correction) {
        Ok(r) => over_expected && r.p_value < config.chisq_alpha,
        Err(_) => false,
    }
}

/// Lincoln–Petersen estimate from two capture occasions.
pub fn lincoln_petersen(first: u64, second: u64, overlap: u64) -> Result<u64> {
    if overlap == 0 {
        return Err(Error::InsufficientData(
            "capture occasions do not overlap".into(),
        ));
    }
    Ok(((first as f64) * (second as f64) / overlap as f64).round() as u64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetectionReport {
    /// Images that received a (new) learned label, with that label.
    pub flagged: Vec<(ImageId, bool)>,
    pub confirmed: Vec<ImageId>,
}

/// The learning bot `l_b` together with its tracker.
#[derive(Debug, Clone)]
pub struct Learner {
    config: LearnerConfig,
    bot: BaselineBot,
    records: BTreeMap<ImageId, ImageRecord>,
    belief: AttackerBelief,
    known_pool_size: Option<u64>,
    h: u64,
}

impl Learner {
    /// `known_pool_size` is used when `pool_knowledge = known`.
    pub fn new(
        config: LearnerConfig,
        bot: BaselineBot,
        known_pool_size: u64,
        challenge_size: u32,
    ) -> Result<Self> {
        config.validate()?;
        let belief = AttackerBelief::new(
            config.initial_eti_size,
            known_pool_size,
            config.expected_traps_per_challenge,
            challenge_size,
        );
        let known_pool_size = match config.pool_knowledge {
            PoolKnowledge::Known => Some(known_pool_size),
            PoolKnowledge::Estimated => None,
        };
        let mut learner = Self {
            config,
            bot,
            records: BTreeMap::new(),
            belief,
            known_pool_size,
            h: 0,
        };
        if learner.known_pool_size.is_none() {
            learner.belief.pool_size_estimate = u64::from(challenge_size).max(1);
            learner.belief.refresh_prior();
        }
        Ok(learner)
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn belief(&self) -> &AttackerBelief {
        &self.belief
    }

    pub fn record(&self, image: ImageId) -> Option<&ImageRecord> {
        self.records.get(&image)
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values()
    }

    pub fn current_index(&self) -> u64 {
        self.h
    }

    /// Updates appearance counters and answers per `lc`, falling back to `b`.
    pub fn observe_and_answer(
        &mut self,
        view: &ChallengeView,
        truth: &impl MembershipOracle,
    ) -> AnswerVector {
        self.h = view.index;
        let mut answer = AnswerVector::default();
        for &image in &view.images {
            let record = self
                .records
                .entry(image)
                .or_insert_with(|| ImageRecord::new(image, view.index));
            record.total_appearances += 1;
            record.last_seen = view.index;
            if record.h1.is_some() {
                record.appearances_since_h1 += 1;
            }
            let pick = match record.learned_class {
                Some(label) => label,
                None => self.bot.classify(image, truth),
            };
            answer.picks.insert(image, pick);
        }
        answer
    }

    /// Feeds back the pass/fail bit of a challenge answered by
    /// [`Learner::observe_and_answer`].
    pub fn record_outcome(
        &mut self,
        view: &ChallengeView,
        answer: &AnswerVector,
        passed: bool,
    ) -> DetectionReport {
        let h = view.index;
        self.h = h;
        let mut report = DetectionReport::default();

        if passed {
            for &image in &view.images {
                let Some(record) = self.records.get_mut(&image) else {
                    continue;
                };
                let given = answer.pick(image).unwrap_or(false);
                if record.learned_class.is_some() && !record.confirmed {
                    record.confirmed = true;
                    report.confirmed.push(image);
                }
                record.h1 = Some(h);
                record.answer_at_h1 = Some(given);
                record.appearances_since_h1 = 0;
            }
        }

        self.belief.refresh_prior();
        for &image in &view.images {
            if let Some((label, changed)) = self.evaluate(image, h, !passed) {
                if changed {
                    report.flagged.push((image, label));
                }
            }
        }

        if h.is_multiple_of(self.config.sweep_interval) {
            self.sweep(h);
        }
        let computed = self.estimate_ti_size();
        self.belief.eti_size = (self.belief.eti_size + computed).div_ceil(2);
        self.belief.refresh_prior();
        report
    }

    /// Recomputes the detectors for one image. Returns the learned label and
    /// whether it changed, when the image is flagged.
    fn evaluate(&mut self, image: ImageId, h: u64, failed_since_h1: bool) -> Option<(bool, bool)> {
        let record = self.records.get(&image)?;
        record.h1?;
        let mut flagged = false;
        let mut posterior = record.posterior;
        if matches!(self.config.detector, Detector::Bayes | Detector::Both) {
            if let Ok(p) = posterior_trap(record, &self.belief, h) {
                posterior = p;
                flagged |= p >= self.config.knowledge_threshold;
            }
        }
        if matches!(self.config.detector, Detector::Chisq | Detector::Both) {
            flagged |= chisq_trap_flag(record, &self.config, &self.belief, h, failed_since_h1);
        }
        let record = self.records.get_mut(&image)?;
        record.posterior = posterior;
        if !flagged {
            return None;
        }
        let label = !record.answer_at_h1?;
        let changed = record.learned_class != Some(label);
        if changed {
            // A confirmed label that keeps behaving like a trap was wrong.
            record.confirmed = false;
        }
        record.learned_class = Some(label);
        Some((label, changed))
    }

    fn sweep(&mut self, h: u64) {
        if self.known_pool_size.is_none() {
            let estimate = self.estimate_pool_size().unwrap_or_else(|_| {
                (self.records.len() as u64).max(u64::from(self.belief.challenge_size))
            });
            self.belief.pool_size_estimate = estimate.max(1);
            self.belief.refresh_prior();
        }
        if !matches!(self.config.detector, Detector::Bayes | Detector::Both) {
            return;
        }
        let belief = self.belief.clone();
        for record in self.records.values_mut() {
            if record.h1.is_none() {
                continue;
            }
            if let Ok(p) = posterior_trap(record, &belief, h) {
                record.posterior = p;
            }
        }
    }

    /// `max(1, #{unconfirmed images with posterior >= Th_TI} + 1)`.
    pub fn estimate_ti_size(&self) -> u32 {
        let threshold = self.config.membership_threshold();
        let count = self
            .records
            .values()
            .filter(|r| !r.confirmed && r.h1.is_some() && r.posterior >= threshold)
            .count() as u32;
        (count + 1).max(1)
    }

    /// Pool-size estimate: the configured size when known, otherwise a
    /// Lincoln–Petersen estimate that treats the first and second halves of
    /// the challenge history as two capture occasions.
    pub fn estimate_pool_size(&self) -> Result<u64> {
        if let Some(n) = self.known_pool_size {
            return Ok(n);
        }
        let needed = 2 * self.belief.challenge_size as usize;
        if self.records.len() < needed {
            return Err(Error::InsufficientData(format!(
                "{} distinct images observed, need {needed}",
                self.records.len()
            )));
        }
        let split = self.h / 2;
        let (mut first, mut second, mut both) = (0u64, 0u64, 0u64);
        for r in self.records.values() {
            let in_first = r.first_seen <= split;
            let in_second = r.last_seen > split;
            first += u64::from(in_first);
            second += u64::from(in_second);
            both += u64::from(in_first && in_second);
        }
        lincoln_petersen(first, second, both)
    }
}

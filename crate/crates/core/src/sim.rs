//! The strengthened CAPTCHA server.
//!
//! A one-class image CAPTCHA `(M, MN, |C|)` extended with two mechanisms:
//! a random subset `NE` of every challenge is left ungraded, and images that
//! were misclassified inside `NE` of a passed challenge become trap images
//! for the session. Later challenges carry one or two traps, and traps are
//! always graded.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Ground-truth membership of an image in the target class `M`.
pub trait MembershipOracle {
    fn is_target(&self, image: ImageId) -> bool;
}

/// The labelled image universe `M ∪ MN`.
#[derive(Debug, Clone)]
pub struct ImagePool {
    target: Vec<ImageId>,
    other: Vec<ImageId>,
    labels: HashMap<ImageId, bool>,
}

impl ImagePool {
    pub fn new(target: Vec<ImageId>, other: Vec<ImageId>) -> Result<Self> {
        let mut labels = HashMap::with_capacity(target.len() + other.len());
        for &id in &target {
            if labels.insert(id, true).is_some() {
                return Err(Error::ConfigInfeasible(format!(
                    "duplicate image {id} in M"
                )));
            }
        }
        for &id in &other {
            if labels.insert(id, false).is_some() {
                return Err(Error::ConfigInfeasible(format!(
                    "image {id} is listed twice or in both M and MN"
                )));
            }
        }
        Ok(Self {
            target,
            other,
            labels,
        })
    }

    /// Dense pool: ids `0..target` form `M`, the next `other` ids form `MN`.
    pub fn with_sizes(target: usize, other: usize) -> Self {
        let t = (0..target as u32).map(ImageId).collect();
        let o = (target as u32..(target + other) as u32)
            .map(ImageId)
            .collect();
        Self::new(t, o).expect("dense ids are unique")
    }

    pub fn target(&self) -> &[ImageId] {
        &self.target
    }

    pub fn other(&self) -> &[ImageId] {
        &self.other
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, image: ImageId) -> bool {
        self.labels.contains_key(&image)
    }
}

impl MembershipOracle for ImagePool {
    fn is_target(&self, image: ImageId) -> bool {
        self.labels.get(&image).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub challenge_size: usize,
    pub ne_min: usize,
    pub ne_max: usize,
    pub trap_per_challenge_min: usize,
    pub trap_per_challenge_max: usize,
    pub m_per_challenge_min: usize,
    pub m_per_challenge_max: usize,
    /// Set per replicate from the master seed; not part of the config file.
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            challenge_size: 22,
            ne_min: 0,
            ne_max: 8,
            trap_per_challenge_min: 1,
            trap_per_challenge_max: 2,
            m_per_challenge_min: 4,
            m_per_challenge_max: 8,
            rng_seed: 0,
        }
    }
}

impl ServerConfig {
    /// The original CAPTCHA: every image graded, no traps ever presented.
    pub fn unstrengthened(&self) -> Self {
        Self {
            ne_min: 0,
            ne_max: 0,
            trap_per_challenge_min: 0,
            trap_per_challenge_max: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self, pool: &ImagePool) -> Result<()> {
        let infeasible = |msg: String| Err(Error::ConfigInfeasible(msg));
        let size = self.challenge_size;
        if size == 0 {
            return infeasible("challenge_size must be positive".into());
        }
        if self.ne_min > self.ne_max || self.ne_max >= size {
            return infeasible(format!(
                "need ne_min <= ne_max < challenge_size, got {} / {} / {size}",
                self.ne_min, self.ne_max
            ));
        }
        if self.trap_per_challenge_min > self.trap_per_challenge_max
            || self.trap_per_challenge_max > size - self.ne_max
        {
            return infeasible(format!(
                "need trap_per_challenge_min <= trap_per_challenge_max <= challenge_size - ne_max, got {} / {}",
                self.trap_per_challenge_min, self.trap_per_challenge_max
            ));
        }
        if self.m_per_challenge_min > self.m_per_challenge_max || self.m_per_challenge_max > size {
            return infeasible(format!(
                "need m_per_challenge_min <= m_per_challenge_max <= challenge_size, got {} / {}",
                self.m_per_challenge_min, self.m_per_challenge_max
            ));
        }
        if pool.len() < size {
            return infeasible(format!(
                "pool has {} images, fewer than challenge_size {size}",
                pool.len()
            ));
        }
        if pool.target().len() < self.m_per_challenge_max {
            return infeasible(format!(
                "|M| = {} is below m_per_challenge_max {}",
                pool.target().len(),
                self.m_per_challenge_max
            ));
        }
        if pool.other().len() < size - self.m_per_challenge_max {
            return infeasible(format!(
                "|MN| = {} cannot fill {} non-target slots",
                pool.other().len(),
                size - self.m_per_challenge_max
            ));
        }
        Ok(())
    }
}

/// The attacker-visible projection of a challenge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeView {
    pub index: u64,
    pub images: Vec<ImageId>,
}

/// One challenge including the server-secret ungraded and trap subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    index: u64,
    images: Vec<ImageId>,
    ne: BTreeSet<ImageId>,
    traps: BTreeSet<ImageId>,
}

impl Challenge {
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn images(&self) -> &[ImageId] {
        &self.images
    }

    pub fn ne(&self) -> &BTreeSet<ImageId> {
        &self.ne
    }

    pub fn traps(&self) -> &BTreeSet<ImageId> {
        &self.traps
    }

    pub fn view(&self) -> ChallengeView {
        ChallengeView {
            index: self.index,
            images: self.images.clone(),
        }
    }
}

/// A user's answer: `true` means "picked as a member of M".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVector {
    pub picks: BTreeMap<ImageId, bool>,
}

impl AnswerVector {
    pub fn pick(&self, image: ImageId) -> Option<bool> {
        self.picks.get(&image).copied()
    }
}

impl FromIterator<(ImageId, bool)> for AnswerVector {
    fn from_iter<I: IntoIterator<Item = (ImageId, bool)>>(iter: I) -> Self {
        Self {
            picks: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradeOutcome {
    pub passed: bool,
    /// Server-internal; only the harness may look at this.
    pub per_image_correct: BTreeMap<ImageId, bool>,
    pub traps_added: BTreeSet<ImageId>,
    pub traps_removed: BTreeSet<ImageId>,
}

/// The per-session trap set `TI_u`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrapSet {
    members: BTreeSet<ImageId>,
}

impl TrapSet {
    pub fn contains(&self, image: ImageId) -> bool {
        self.members.contains(&image)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.members.iter().copied()
    }

    /// Returns false when the image was already a member.
    fn insert(&mut self, image: ImageId) -> bool {
        self.members.insert(image)
    }

    fn remove(&mut self, image: ImageId) -> bool {
        self.members.remove(&image)
    }
}

/// Server state for one attacker session.
///
/// Random draws per challenge happen in this order: trap count, trap
/// selection (both only when the trap set is non-empty and traps are
/// enabled), M-class count, M-class images, MN-class images, slot shuffle,
/// `|NE|`, `NE` selection.
#[derive(Debug, Clone)]
pub struct ServerState {
    pool: ImagePool,
    config: ServerConfig,
    trap_set: TrapSet,
    challenge_counter: u64,
    rng: ChaCha8Rng,
    pending: BTreeMap<u64, Challenge>,
    graded_count: u64,
    passed_count: u64,
}

impl ServerState {
    pub fn new(pool: ImagePool, config: ServerConfig) -> Result<Self> {
        config.validate(&pool)?;
        let rng = rng_from(config.rng_seed);
        Ok(Self {
            pool,
            config,
            trap_set: TrapSet::default(),
            challenge_counter: 0,
            rng,
            pending: BTreeMap::new(),
            graded_count: 0,
            passed_count: 0,
        })
    }

    pub fn pool(&self) -> &ImagePool {
        &self.pool
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn trap_set(&self) -> &TrapSet {
        &self.trap_set
    }

    pub fn challenge_counter(&self) -> u64 {
        self.challenge_counter
    }

    pub fn graded_count(&self) -> u64 {
        self.graded_count
    }

    pub fn passed_count(&self) -> u64 {
        self.passed_count
    }

    /// Places images directly into the trap set. Used by the harness and by
    /// tests that need a pinned `TI`.
    pub fn insert_traps<I: IntoIterator<Item = ImageId>>(&mut self, images: I) -> Result<()> {
        for image in images {
            if !self.pool.contains(image) {
                return Err(Error::ConfigInfeasible(format!(
                    "{image} is not in the pool"
                )));
            }
            self.trap_set.insert(image);
        }
        Ok(())
    }

    pub fn generate_challenge(&mut self) -> Result<Challenge> {
        let cfg = &self.config;
        let size = cfg.challenge_size;

        let mut traps = BTreeSet::new();
        if !self.trap_set.is_empty() && cfg.trap_per_challenge_max > 0 {
            let drawn = self
                .rng
                .gen_range(cfg.trap_per_challenge_min..=cfg.trap_per_challenge_max);
            let count = drawn.min(self.trap_set.len());
            let members: Vec<ImageId> = self.trap_set.iter().collect();
            for i in index::sample(&mut self.rng, members.len(), count) {
                traps.insert(members[i]);
            }
        }

        let slots = size - traps.len();
        let ti_targets = self
            .trap_set
            .iter()
            .filter(|&id| self.pool.is_target(id))
            .count();
        let avail_target = self.pool.target().len() - ti_targets;
        let avail_other = self.pool.other().len() - (self.trap_set.len() - ti_targets);
        if avail_target + avail_other < slots {
            return Err(Error::ConfigInfeasible(format!(
                "trap set of size {} leaves too few images to fill a challenge",
                self.trap_set.len()
            )));
        }

        let drawn = self
            .rng
            .gen_range(cfg.m_per_challenge_min..=cfg.m_per_challenge_max);
        let lo = slots.saturating_sub(avail_other);
        let hi = avail_target.min(slots);
        let m_count = drawn.clamp(lo, hi);

        let mut images: Vec<ImageId> = traps.iter().copied().collect();
        images.extend(sample_excluding(
            &mut self.rng,
            self.pool.target(),
            avail_target,
            &self.trap_set,
            m_count,
        ));
        images.extend(sample_excluding(
            &mut self.rng,
            self.pool.other(),
            avail_other,
            &self.trap_set,
            slots - m_count,
        ));
        images.shuffle(&mut self.rng);

        let free: Vec<ImageId> = images
            .iter()
            .copied()
            .filter(|id| !traps.contains(id))
            .collect();
        let ne_count = self.rng.gen_range(cfg.ne_min..=cfg.ne_max).min(free.len());
        let ne: BTreeSet<ImageId> = index::sample(&mut self.rng, free.len(), ne_count)
            .into_iter()
            .map(|i| free[i])
            .collect();

        self.challenge_counter += 1;
        let challenge = Challenge {
            index: self.challenge_counter,
            images,
            ne,
            traps,
        };
        self.pending.insert(challenge.index, challenge.clone());
        Ok(challenge)
    }

    /// Issues a hand-built challenge. The server validates it the same way it
    /// validates its own draws; used by the grading oracle suites.
    pub fn register_challenge(
        &mut self,
        images: Vec<ImageId>,
        ne: BTreeSet<ImageId>,
        traps: BTreeSet<ImageId>,
    ) -> Result<Challenge> {
        let bad = |msg: &str| Err(Error::ConfigInfeasible(msg.to_string()));
        let distinct: BTreeSet<ImageId> = images.iter().copied().collect();
        if distinct.len() != images.len() {
            return bad("challenge images contain duplicates");
        }
        if images.len() != self.config.challenge_size {
            return bad("challenge length differs from challenge_size");
        }
        if images.iter().any(|&id| !self.pool.contains(id)) {
            return bad("challenge contains an image outside the pool");
        }
        if !ne.is_subset(&distinct) || !traps.is_subset(&distinct) || !ne.is_disjoint(&traps) {
            return bad("NE and traps must be disjoint subsets of the challenge");
        }
        if ne.len() < self.config.ne_min || ne.len() > self.config.ne_max {
            return bad("|NE| outside [ne_min, ne_max]");
        }
        if traps.iter().any(|&id| !self.trap_set.contains(id)) {
            return bad("trap slots must hold members of the trap set");
        }
        if images
            .iter()
            .any(|&id| self.trap_set.contains(id) && !traps.contains(&id))
        {
            return bad("trap-set members may only occupy trap slots");
        }
        self.challenge_counter += 1;
        let challenge = Challenge {
            index: self.challenge_counter,
            images,
            ne,
            traps,
        };
        self.pending.insert(challenge.index, challenge.clone());
        Ok(challenge)
    }

    pub fn grade_answer(
        &mut self,
        challenge: &Challenge,
        answer: &AnswerVector,
    ) -> Result<GradeOutcome> {
        let index = challenge.index;
        match self.pending.get(&index) {
            Some(issued) if issued == challenge => {}
            Some(_) => return Err(Error::UnknownChallenge(index)),
            None if index >= 1 && index <= self.challenge_counter => {
                return Err(Error::DuplicateGrade(index))
            }
            None => return Err(Error::UnknownChallenge(index)),
        }
        if answer.picks.len() != challenge.images.len()
            || challenge
                .images
                .iter()
                .any(|id| !answer.picks.contains_key(id))
        {
            return Err(Error::AnswerDomainMismatch(index));
        }
        let challenge = self.pending.remove(&index).expect("checked above");

        let per_image_correct: BTreeMap<ImageId, bool> = challenge
            .images
            .iter()
            .map(|&id| (id, answer.picks[&id] == self.pool.is_target(id)))
            .collect();
        let passed = challenge
            .images
            .iter()
            .filter(|id| !challenge.ne.contains(id))
            .all(|id| per_image_correct[id]);

        let mut traps_added = BTreeSet::new();
        if passed {
            for &id in &challenge.ne {
                if !per_image_correct[&id] && self.trap_set.insert(id) {
                    traps_added.insert(id);
                }
            }
        }
        let mut traps_removed = BTreeSet::new();
        for &id in &challenge.traps {
            if per_image_correct[&id] && self.trap_set.remove(id) {
                traps_removed.insert(id);
            }
        }

        self.graded_count += 1;
        self.passed_count += u64::from(passed);
        Ok(GradeOutcome {
            passed,
            per_image_correct,
            traps_added,
            traps_removed,
        })
    }
}

/// Draws `amount` distinct images from `from \ exclude`, where `available`
/// is the size of that difference.
fn sample_excluding(
    rng: &mut ChaCha8Rng,
    from: &[ImageId],
    available: usize,
    exclude: &TrapSet,
    amount: usize,
) -> Vec<ImageId> {
    debug_assert!(amount <= available);
    if amount == 0 {
        return Vec::new();
    }
    if available * 2 >= from.len() {
        // Rejection sampling; at least half of the draws are usable.
        let mut chosen = Vec::with_capacity(amount);
        while chosen.len() < amount {
            let id = from[rng.gen_range(0..from.len())];
            if !exclude.contains(id) && !chosen.contains(&id) {
                chosen.push(id);
            }
        }
        chosen
    } else {
        let candidates: Vec<ImageId> = from
            .iter()
            .copied()
            .filter(|&id| !exclude.contains(id))
            .collect();
        index::sample(rng, candidates.len(), amount)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    }
}

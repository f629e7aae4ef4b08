//! Sufficient statistics for the sampler: per-scope topic counts, factor
//! usage counts, topic-word counts, the decayed epoch history, and the
//! epoch rollover that couples consecutive epochs.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Post, RegionId, RelationshipKind, UserId, VocabId};
use crate::error::{Error, Result};

pub type TopicId = u64;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Per-factor concentration (α_w, α_u, α_n, α_g), indexed by
    /// `RelationshipKind::index`.
    pub alpha: [f64; 4],
    /// New-table mass α.
    pub alpha_new: f64,
    /// Topic-word smoothing β.
    pub beta: f64,
    /// Decay factor λ for historical counts.
    pub lambda: f64,
    /// History window Δ in epochs.
    pub delta_max: usize,
    /// Relationship kinds the model mixes over; non-empty. A strict
    /// subset gives the single- and partial-relation ablation variants.
    pub enabled_factors: Vec<RelationshipKind>,
    /// false recovers the static model: historical terms forced to zero
    /// and counts never roll over at epoch boundaries.
    pub dynamic: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: [0.1; 4],
            alpha_new: 0.1,
            beta: 0.1,
            lambda: 1.0,
            delta_max: 3,
            enabled_factors: RelationshipKind::ALL.to_vec(),
            dynamic: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|&a| a <= 0.0) {
            return Err(Error::Config("all alpha must be positive".into()));
        }
        if self.alpha_new <= 0.0 || self.beta <= 0.0 || self.lambda <= 0.0 {
            return Err(Error::Config(
                "alpha_new, beta and lambda must be positive".into(),
            ));
        }
        if self.enabled_factors.is_empty() {
            return Err(Error::Config(
                "at least one relationship factor must be enabled".into(),
            ));
        }
        let mut seen = [false; 4];
        for f in &self.enabled_factors {
            if seen[f.index()] {
                return Err(Error::Config(format!("factor {} enabled twice", f.label())));
            }
            seen[f.index()] = true;
        }
        Ok(())
    }

    pub fn alpha_for(&self, f: RelationshipKind) -> f64 {
        self.alpha[f.index()]
    }

    pub fn factor_enabled(&self, f: RelationshipKind) -> bool {
        self.enabled_factors.contains(&f)
    }
}

/// Exponential decay weight e^{-delta/lambda} for a history offset.
pub fn decay_weight(delta: usize, lambda: f64) -> Result<f64> {
    if delta < 1 {
        return Err(Error::Config("decay offset must be at least 1".into()));
    }
    Ok((-(delta as f64) / lambda).exp())
}

/// Decayed history sum: Σ_{δ=1..min(len,Δ)} e^{-δ/λ}·history[δ-1].
/// `history[0]` is the most recent completed epoch.
pub fn decayed_sum(history: &[u64], lambda: f64, delta_max: usize) -> f64 {
    history
        .iter()
        .take(delta_max)
        .enumerate()
        .map(|(i, &c)| (-((i + 1) as f64) / lambda).exp() * c as f64)
        .sum()
}

/// All integer count tables maintained for one epoch (or cumulatively, in
/// static mode).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountLedger {
    /// n_{k,t}: posts per topic, all users.
    pub topic_total: HashMap<TopicId, u64>,
    /// n^{u}_{k,t}: posts per (user, topic).
    pub user_topic: HashMap<UserId, HashMap<TopicId, u64>>,
    /// Fan-out network aggregates: for each user u, posts on topic k by
    /// the users u follows.
    pub network_topic: HashMap<UserId, HashMap<TopicId, u64>>,
    /// Posts per (region, topic).
    pub region_topic: HashMap<RegionId, HashMap<TopicId, u64>>,
    /// n_{k,v,t}: word occurrences per (topic, word).
    pub topic_word: HashMap<TopicId, HashMap<VocabId, u64>>,
    /// Σ_v n_{k,v,t}.
    pub topic_word_total: HashMap<TopicId, u64>,
    /// m_{u,f,t}: influence factor usage per user.
    pub user_factor: HashMap<UserId, [u64; 4]>,
}

fn bump(map: &mut HashMap<TopicId, u64>, k: TopicId, by: i64) {
    let e = map.entry(k).or_insert(0);
    if by >= 0 {
        *e += by as u64;
    } else {
        let d = (-by) as u64;
        if *e < d {
            panic!("count underflow for topic {k}");
        }
        *e -= d;
        if *e == 0 {
            map.remove(&k);
        }
    }
}

fn bump2<K: std::hash::Hash + Eq + Copy>(
    map: &mut HashMap<K, HashMap<TopicId, u64>>,
    outer: K,
    k: TopicId,
    by: i64,
) {
    let inner = map.entry(outer).or_default();
    bump(inner, k, by);
    if by < 0 && inner.is_empty() {
        map.remove(&outer);
    }
}

impl CountLedger {
    pub fn topic_total(&self, k: TopicId) -> u64 {
        self.topic_total.get(&k).copied().unwrap_or(0)
    }

    pub fn user_topic(&self, u: UserId, k: TopicId) -> u64 {
        self.user_topic
            .get(&u)
            .and_then(|m| m.get(&k))
            .copied()
            .unwrap_or(0)
    }

    pub fn network_topic(&self, u: UserId, k: TopicId) -> u64 {
        self.network_topic
            .get(&u)
            .and_then(|m| m.get(&k))
            .copied()
            .unwrap_or(0)
    }

    pub fn region_topic(&self, r: RegionId, k: TopicId) -> u64 {
        self.region_topic
            .get(&r)
            .and_then(|m| m.get(&k))
            .copied()
            .unwrap_or(0)
    }

    pub fn topic_word(&self, k: TopicId, v: VocabId) -> u64 {
        self.topic_word
            .get(&k)
            .and_then(|m| m.get(&v))
            .copied()
            .unwrap_or(0)
    }

    pub fn topic_word_total(&self, k: TopicId) -> u64 {
        self.topic_word_total.get(&k).copied().unwrap_or(0)
    }

    pub fn user_factor(&self, u: UserId) -> [u64; 4] {
        self.user_factor.get(&u).copied().unwrap_or([0; 4])
    }

    fn update(&mut self, post: &Post, z: TopicId, f: RelationshipKind, corpus: &Corpus, by: i64) {
        let u = post.user;
        let region = corpus.users[u as usize].region;
        bump(&mut self.topic_total, z, by);
        bump2(&mut self.user_topic, u, z, by);
        bump2(&mut self.region_topic, region, z, by);
        for &follower in &corpus.followers[u as usize] {
            bump2(&mut self.network_topic, follower, z, by);
        }
        {
            let uf = self.user_factor.entry(u).or_insert([0; 4]);
            if by >= 0 {
                uf[f.index()] += by as u64;
            } else {
                let d = (-by) as u64;
                if uf[f.index()] < d {
                    panic!("factor count underflow for user {u}");
                }
                uf[f.index()] -= d;
            }
            if uf.iter().all(|&c| c == 0) {
                self.user_factor.remove(&u);
            }
        }
        for &v in &post.tokens {
            let inner = self.topic_word.entry(z).or_default();
            let e = inner.entry(v).or_insert(0);
            if by >= 0 {
                *e += by as u64;
            } else {
                let d = (-by) as u64;
                if *e < d {
                    panic!("word count underflow for topic {z}");
                }
                *e -= d;
                if *e == 0 {
                    inner.remove(&v);
                }
            }
            if by < 0 && self.topic_word.get(&z).is_some_and(|m| m.is_empty()) {
                self.topic_word.remove(&z);
            }
            bump(&mut self.topic_word_total, z, by);
        }
    }

    /// Folds `other` into self (used when merging worker deltas).
    pub fn add(&mut self, other: &CountLedger) {
        for (&k, &c) in &other.topic_total {
            *self.topic_total.entry(k).or_insert(0) += c;
        }
        for (&u, inner) in &other.user_topic {
            let m = self.user_topic.entry(u).or_default();
            for (&k, &c) in inner {
                *m.entry(k).or_insert(0) += c;
            }
        }
        for (&u, inner) in &other.network_topic {
            let m = self.network_topic.entry(u).or_default();
            for (&k, &c) in inner {
                *m.entry(k).or_insert(0) += c;
            }
        }
        for (&r, inner) in &other.region_topic {
            let m = self.region_topic.entry(r).or_default();
            for (&k, &c) in inner {
                *m.entry(k).or_insert(0) += c;
            }
        }
        for (&k, inner) in &other.topic_word {
            let m = self.topic_word.entry(k).or_default();
            for (&v, &c) in inner {
                *m.entry(v).or_insert(0) += c;
            }
        }
        for (&k, &c) in &other.topic_word_total {
            *self.topic_word_total.entry(k).or_insert(0) += c;
        }
        for (&u, uf) in &other.user_factor {
            let e = self.user_factor.entry(u).or_insert([0; 4]);
            for i in 0..4 {
                e[i] += uf[i];
            }
        }
    }

    /// Pointwise difference self - base. Panics if any entry would go
    /// negative; worker ledgers only ever grow relative to their snapshot.
    pub fn diff(&self, base: &CountLedger) -> CountLedger {
        fn sub1<K: std::hash::Hash + Eq + Copy>(
            a: &HashMap<K, u64>,
            b: &HashMap<K, u64>,
        ) -> HashMap<K, u64> {
            let mut out = HashMap::new();
            for (&k, &c) in a {
                let base = b.get(&k).copied().unwrap_or(0);
                assert!(c >= base, "delta underflow");
                if c > base {
                    out.insert(k, c - base);
                }
            }
            out
        }
        fn sub2<K: std::hash::Hash + Eq + Copy, K2: std::hash::Hash + Eq + Copy>(
            a: &HashMap<K, HashMap<K2, u64>>,
            b: &HashMap<K, HashMap<K2, u64>>,
        ) -> HashMap<K, HashMap<K2, u64>> {
            let mut out: HashMap<K, HashMap<K2, u64>> = HashMap::new();
            for (&outer, inner) in a {
                let empty = HashMap::new();
                let base = b.get(&outer).unwrap_or(&empty);
                let d = sub1(inner, base);
                if !d.is_empty() {
                    out.insert(outer, d);
                }
            }
            out
        }
        let mut user_factor = HashMap::new();
        for (&u, uf) in &self.user_factor {
            let base = base.user_factor.get(&u).copied().unwrap_or([0; 4]);
            let mut d = [0u64; 4];
            let mut any = false;
            for i in 0..4 {
                assert!(uf[i] >= base[i], "delta underflow");
                d[i] = uf[i] - base[i];
                any |= d[i] > 0;
            }
            if any {
                user_factor.insert(u, d);
            }
        }
        CountLedger {
            topic_total: sub1(&self.topic_total, &base.topic_total),
            user_topic: sub2(&self.user_topic, &base.user_topic),
            network_topic: sub2(&self.network_topic, &base.network_topic),
            region_topic: sub2(&self.region_topic, &base.region_topic),
            topic_word: sub2(&self.topic_word, &base.topic_word),
            topic_word_total: sub1(&self.topic_word_total, &base.topic_word_total),
            user_factor,
        }
    }

    /// Rewrites topic ids according to `map` (ids absent from the map are
    /// kept). Used when folding worker-provisional topics into the master.
    pub fn remap_topics(&mut self, map: &HashMap<TopicId, TopicId>) {
        if map.is_empty() {
            return;
        }
        fn remap1(m: &mut HashMap<TopicId, u64>, map: &HashMap<TopicId, TopicId>) {
            let old = std::mem::take(m);
            for (k, c) in old {
                let k = map.get(&k).copied().unwrap_or(k);
                *m.entry(k).or_insert(0) += c;
            }
        }
        remap1(&mut self.topic_total, map);
        remap1(&mut self.topic_word_total, map);
        for inner in self.user_topic.values_mut() {
            remap1(inner, map);
        }
        for inner in self.network_topic.values_mut() {
            remap1(inner, map);
        }
        for inner in self.region_topic.values_mut() {
            remap1(inner, map);
        }
        let old = std::mem::take(&mut self.topic_word);
        for (k, inner) in old {
            let k = map.get(&k).copied().unwrap_or(k);
            let dst = self.topic_word.entry(k).or_default();
            for (v, c) in inner {
                *dst.entry(v).or_insert(0) += c;
            }
        }
    }

    pub fn referenced_topics(&self) -> BTreeSet<TopicId> {
        let mut s: BTreeSet<TopicId> = self.topic_total.keys().copied().collect();
        s.extend(self.topic_word_total.keys().copied());
        s
    }
}

/// Per-epoch tallies kept for trend analysis: n_{k,u,t} and the joint
/// factor counts behind p_{f|k,t}.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochStats {
    pub topic_user: HashMap<TopicId, HashMap<UserId, u64>>,
    pub user_factor: HashMap<UserId, [u64; 4]>,
    pub topic_factor: HashMap<TopicId, [u64; 4]>,
}

impl EpochStats {
    fn update(&mut self, post: &Post, z: TopicId, f: RelationshipKind, by: i64) {
        let tu = self.topic_user.entry(z).or_default();
        let e = tu.entry(post.user).or_insert(0);
        if by >= 0 {
            *e += by as u64;
        } else {
            let d = (-by) as u64;
            assert!(*e >= d, "epoch tally underflow");
            *e -= d;
            if *e == 0 {
                tu.remove(&post.user);
            }
        }
        if by < 0 && self.topic_user.get(&z).is_some_and(|m| m.is_empty()) {
            self.topic_user.remove(&z);
        }
        let uf = self.user_factor.entry(post.user).or_insert([0; 4]);
        let tf = self.topic_factor.entry(z).or_insert([0; 4]);
        if by >= 0 {
            uf[f.index()] += by as u64;
            tf[f.index()] += by as u64;
        } else {
            let d = (-by) as u64;
            assert!(
                uf[f.index()] >= d && tf[f.index()] >= d,
                "epoch tally underflow"
            );
            uf[f.index()] -= d;
            tf[f.index()] -= d;
        }
        if self
            .user_factor
            .get(&post.user)
            .is_some_and(|a| a.iter().all(|&c| c == 0))
        {
            self.user_factor.remove(&post.user);
        }
        if self
            .topic_factor
            .get(&z)
            .is_some_and(|a| a.iter().all(|&c| c == 0))
        {
            self.topic_factor.remove(&z);
        }
    }

    pub fn add(&mut self, other: &EpochStats) {
        for (&k, inner) in &other.topic_user {
            let m = self.topic_user.entry(k).or_default();
            for (&u, &c) in inner {
                *m.entry(u).or_insert(0) += c;
            }
        }
        for (&u, uf) in &other.user_factor {
            let e = self.user_factor.entry(u).or_insert([0; 4]);
            for i in 0..4 {
                e[i] += uf[i];
            }
        }
        for (&k, tf) in &other.topic_factor {
            let e = self.topic_factor.entry(k).or_insert([0; 4]);
            for i in 0..4 {
                e[i] += tf[i];
            }
        }
    }

    pub fn diff(&self, base: &EpochStats) -> EpochStats {
        let mut out = EpochStats::default();
        for (&k, inner) in &self.topic_user {
            for (&u, &c) in inner {
                let b = base
                    .topic_user
                    .get(&k)
                    .and_then(|m| m.get(&u))
                    .copied()
                    .unwrap_or(0);
                if c > b {
                    out.topic_user.entry(k).or_default().insert(u, c - b);
                }
            }
        }
        for (&u, uf) in &self.user_factor {
            let b = base.user_factor.get(&u).copied().unwrap_or([0; 4]);
            let d = [uf[0] - b[0], uf[1] - b[1], uf[2] - b[2], uf[3] - b[3]];
            if d.iter().any(|&x| x > 0) {
                out.user_factor.insert(u, d);
            }
        }
        for (&k, tf) in &self.topic_factor {
            let b = base.topic_factor.get(&k).copied().unwrap_or([0; 4]);
            let d = [tf[0] - b[0], tf[1] - b[1], tf[2] - b[2], tf[3] - b[3]];
            if d.iter().any(|&x| x > 0) {
                out.topic_factor.insert(k, d);
            }
        }
        out
    }

    pub fn remap_topics(&mut self, map: &HashMap<TopicId, TopicId>) {
        if map.is_empty() {
            return;
        }
        let old = std::mem::take(&mut self.topic_user);
        for (k, inner) in old {
            let k = map.get(&k).copied().unwrap_or(k);
            let dst = self.topic_user.entry(k).or_default();
            for (u, c) in inner {
                *dst.entry(u).or_insert(0) += c;
            }
        }
        let old = std::mem::take(&mut self.topic_factor);
        for (k, tf) in old {
            let k = map.get(&k).copied().unwrap_or(k);
            let dst = self.topic_factor.entry(k).or_insert([0; 4]);
            for i in 0..4 {
                dst[i] += tf[i];
            }
        }
    }
}

/// Ring of the last Δ epoch-end count snapshots; front is δ=1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRing {
    pub slots: VecDeque<CountLedger>,
}

impl HistoryRing {
    pub fn push_epoch(&mut self, ledger: CountLedger, delta_max: usize) {
        self.slots.push_front(ledger);
        self.slots.truncate(delta_max);
    }

    pub fn referenced_topics(&self) -> BTreeSet<TopicId> {
        let mut s = BTreeSet::new();
        for slot in &self.slots {
            s.extend(slot.referenced_topics());
        }
        s
    }
}

/// Floating-point decayed sums over the history ring, frozen for the
/// duration of an epoch.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DecayedCaches {
    pub topic_total: HashMap<TopicId, f64>,
    pub user_topic: HashMap<UserId, HashMap<TopicId, f64>>,
    pub network_topic: HashMap<UserId, HashMap<TopicId, f64>>,
    pub region_topic: HashMap<RegionId, HashMap<TopicId, f64>>,
    pub topic_word: HashMap<TopicId, HashMap<VocabId, f64>>,
    pub topic_word_total: HashMap<TopicId, f64>,
    pub user_factor: HashMap<UserId, [f64; 4]>,
}

impl DecayedCaches {
    pub fn recompute(ring: &HistoryRing, lambda: f64, delta_max: usize) -> Self {
        let mut out = DecayedCaches::default();
        for (i, slot) in ring.slots.iter().take(delta_max).enumerate() {
            let w = (-((i + 1) as f64) / lambda).exp();
            for (&k, &c) in &slot.topic_total {
                *out.topic_total.entry(k).or_insert(0.0) += w * c as f64;
            }
            for (&u, inner) in &slot.user_topic {
                let m = out.user_topic.entry(u).or_default();
                for (&k, &c) in inner {
                    *m.entry(k).or_insert(0.0) += w * c as f64;
                }
            }
            for (&u, inner) in &slot.network_topic {
                let m = out.network_topic.entry(u).or_default();
                for (&k, &c) in inner {
                    *m.entry(k).or_insert(0.0) += w * c as f64;
                }
            }
            for (&r, inner) in &slot.region_topic {
                let m = out.region_topic.entry(r).or_default();
                for (&k, &c) in inner {
                    *m.entry(k).or_insert(0.0) += w * c as f64;
                }
            }
            for (&k, inner) in &slot.topic_word {
                let m = out.topic_word.entry(k).or_default();
                for (&v, &c) in inner {
                    *m.entry(v).or_insert(0.0) += w * c as f64;
                }
            }
            for (&k, &c) in &slot.topic_word_total {
                *out.topic_word_total.entry(k).or_insert(0.0) += w * c as f64;
            }
            for (&u, uf) in &slot.user_factor {
                let e = out.user_factor.entry(u).or_insert([0.0; 4]);
                for (j, &c) in uf.iter().enumerate() {
                    e[j] += w * c as f64;
                }
            }
        }
        out
    }

    pub fn topic_total(&self, k: TopicId) -> f64 {
        self.topic_total.get(&k).copied().unwrap_or(0.0)
    }

    pub fn user_topic(&self, u: UserId, k: TopicId) -> f64 {
        self.user_topic
            .get(&u)
            .and_then(|m| m.get(&k))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn network_topic(&self, u: UserId, k: TopicId) -> f64 {
        self.network_topic
            .get(&u)
            .and_then(|m| m.get(&k))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn region_topic(&self, r: RegionId, k: TopicId) -> f64 {
        self.region_topic
            .get(&r)
            .and_then(|m| m.get(&k))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn topic_word(&self, k: TopicId, v: VocabId) -> f64 {
        self.topic_word
            .get(&k)
            .and_then(|m| m.get(&v))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn topic_word_total(&self, k: TopicId) -> f64 {
        self.topic_word_total.get(&k).copied().unwrap_or(0.0)
    }

    pub fn user_factor(&self, u: UserId) -> [f64; 4] {
        self.user_factor.get(&u).copied().unwrap_or([0.0; 4])
    }
}

/// Monotone topic id allocator. Ids are never reused.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TopicTable {
    next_id: TopicId,
    live: BTreeSet<TopicId>,
    retired: Vec<TopicId>,
}

impl TopicTable {
    pub fn spawn(&mut self) -> TopicId {
        let id = self.next_id;
        self.next_id += 1;
        self.live.insert(id);
        id
    }

    pub fn retire(&mut self, id: TopicId) {
        if self.live.remove(&id) {
            self.retired.push(id);
        }
    }

    pub fn is_live(&self, id: TopicId) -> bool {
        self.live.contains(&id)
    }

    pub fn live_topics(&self) -> impl Iterator<Item = TopicId> + '_ {
        self.live.iter().copied()
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn next_id(&self) -> TopicId {
        self.next_id
    }
}

/// The sampler's mutable world: hyperparameters, current-epoch ledgers,
/// history ring with decayed caches, topic table, and per-epoch archives
/// for trend analysis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelState {
    pub hyper: Hyperparams,
    pub ledger: CountLedger,
    pub tally: EpochStats,
    pub ring: HistoryRing,
    pub caches: DecayedCaches,
    pub topics: TopicTable,
    pub epoch: u32,
    pub archive: Vec<EpochStats>,
    pub seed: u64,
}

impl ModelState {
    pub fn new(hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        Ok(ModelState {
            hyper,
            ledger: CountLedger::default(),
            tally: EpochStats::default(),
            ring: HistoryRing::default(),
            caches: DecayedCaches::default(),
            topics: TopicTable::default(),
            epoch: 0,
            archive: Vec::new(),
            seed: 0,
        })
    }

    /// Adds one post's assignment to every count table, fanning out to
    /// the network aggregates of the user's followers.
    pub fn apply_assignment(
        &mut self,
        post: &Post,
        z: TopicId,
        f: RelationshipKind,
        corpus: &Corpus,
    ) {
        self.ledger.update(post, z, f, corpus, 1);
        self.tally.update(post, z, f, 1);
    }

    /// Exact inverse of `apply_assignment`. Panics on decrement below
    /// zero, which means the pairing discipline was broken.
    pub fn remove_assignment(
        &mut self,
        post: &Post,
        z: TopicId,
        f: RelationshipKind,
        corpus: &Corpus,
    ) {
        self.ledger.update(post, z, f, corpus, -1);
        self.tally.update(post, z, f, -1);
    }

    /// Combined current + decayed neighbor count n + n̄ used when
    /// scoring under factor `f`.
    pub fn neighbor_weight(
        &self,
        corpus: &Corpus,
        u: UserId,
        f: RelationshipKind,
        k: TopicId,
    ) -> f64 {
        match f {
            RelationshipKind::World => {
                self.ledger.topic_total(k) as f64 + self.caches.topic_total(k)
            }
            RelationshipKind::SelfPref => {
                self.ledger.user_topic(u, k) as f64 + self.caches.user_topic(u, k)
            }
            RelationshipKind::Network => {
                self.ledger.network_topic(u, k) as f64 + self.caches.network_topic(u, k)
            }
            RelationshipKind::Geography => {
                let r = corpus.users[u as usize].region;
                let cur = self
                    .ledger
                    .region_topic(r, k)
                    .saturating_sub(self.ledger.user_topic(u, k));
                let dec = (self.caches.region_topic(r, k) - self.caches.user_topic(u, k)).max(0.0);
                cur as f64 + dec
            }
        }
    }

    /// m_{u,f,t} + ᾱ_{u,f,t} + α_f for one enabled factor.
    pub fn personality_weight(&self, u: UserId, f: RelationshipKind) -> f64 {
        let m = self.ledger.user_factor(u)[f.index()] as f64;
        let bar = self.caches.user_factor(u)[f.index()];
        m + bar + self.hyper.alpha_for(f)
    }

    /// Closes the current epoch: archives trend tallies, pushes the
    /// epoch's ledgers into the history ring, refreshes decayed caches,
    /// zeroes current counts, and retires dead topics. In static mode
    /// counts simply keep accumulating.
    pub fn advance_epoch(&mut self) {
        self.archive.push(std::mem::take(&mut self.tally));
        if self.hyper.dynamic {
            let closing = std::mem::take(&mut self.ledger);
            self.ring.push_epoch(closing, self.hyper.delta_max);
            self.caches =
                DecayedCaches::recompute(&self.ring, self.hyper.lambda, self.hyper.delta_max);
            let reachable = self.ring.referenced_topics();
            let dead: Vec<TopicId> = self
                .topics
                .live_topics()
                .filter(|k| !reachable.contains(k))
                .collect();
            for k in dead {
                self.topics.retire(k);
            }
        }
        self.epoch += 1;
    }

    /// Posterior-mean topic-word distribution φ̂_k over the vocabulary.
    pub fn phi_hat(&self, k: TopicId, vocab_size: usize) -> Vec<f64> {
        let beta = self.hyper.beta;
        let denom = self.ledger.topic_word_total(k) as f64
            + self.caches.topic_word_total(k)
            + vocab_size as f64 * beta;
        (0..vocab_size as u32)
            .map(|v| {
                (self.ledger.topic_word(k, v) as f64 + self.caches.topic_word(k, v) + beta) / denom
            })
            .collect()
    }

    /// Posterior-mean personality π̂_u over enabled factors, in
    /// `enabled_factors` order.
    pub fn pi_hat(&self, u: UserId) -> Vec<f64> {
        let w: Vec<f64> = self
            .hyper
            .enabled_factors
            .iter()
            .map(|&f| self.personality_weight(u, f))
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// Debug-mode ledger consistency check: per-topic global counts
    /// equal the per-user and per-region sums, network aggregates match a
    /// brute-force pass over followees, word totals match per-word sums.
    pub fn check_consistency(&self, corpus: &Corpus) -> Result<()> {
        for (&k, &total) in &self.ledger.topic_total {
            let by_user: u64 = self
                .ledger
                .user_topic
                .values()
                .map(|m| m.get(&k).copied().unwrap_or(0))
                .sum();
            let by_region: u64 = self
                .ledger
                .region_topic
                .values()
                .map(|m| m.get(&k).copied().unwrap_or(0))
                .sum();
            if by_user != total || by_region != total {
                return Err(Error::Invariant(format!(
                    "topic {k}: total {total}, user sum {by_user}, region sum {by_region}"
                )));
            }
        }
        for u in 0..corpus.users.len() as UserId {
            let mut expect: HashMap<TopicId, u64> = HashMap::new();
            for &fe in &corpus.users[u as usize].followees {
                if let Some(inner) = self.ledger.user_topic.get(&fe) {
                    for (&k, &c) in inner {
                        *expect.entry(k).or_insert(0) += c;
                    }
                }
            }
            let empty = HashMap::new();
            let got = self.ledger.network_topic.get(&u).unwrap_or(&empty);
            if &expect != got {
                return Err(Error::Invariant(format!(
                    "network aggregate mismatch for user {u}"
                )));
            }
        }
        for (&k, &total) in &self.ledger.topic_word_total {
            let sum: u64 = self
                .ledger
                .topic_word
                .get(&k)
                .map(|m| m.values().sum())
                .unwrap_or(0);
            if sum != total {
                return Err(Error::Invariant(format!(
                    "word total mismatch for topic {k}"
                )));
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub state: ModelState,
}

pub fn save_checkpoint(state: &ModelState, path: &std::path::Path) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        state: state.clone(),
    };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &ck)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelState> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let ck: Checkpoint = serde_json::from_reader(f)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} unsupported (expected {})",
            ck.version, CHECKPOINT_VERSION
        )));
    }
    Ok(ck.state)
}

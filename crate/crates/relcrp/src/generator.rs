//! Synthetic corpus generation by running the model forward, emitting
//! posts together with the full ground truth (personalities, topic-word
//! distributions, true labels) for recovery and oracle tests.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Post, User, UserId};
use crate::error::{Error, Result};
use crate::model::{sample_weighted, topic_prior_weights, Assignment, TopicSlot};
use crate::stats::{Hyperparams, ModelState, TopicId};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub users: usize,
    pub regions: usize,
    /// Mean out-degree of the uniform-random followee graph; ignored when
    /// explicit edges are given.
    pub mean_degree: f64,
    /// Explicit directed followee edges, overriding the random graph.
    pub edges: Option<Vec<(usize, usize)>>,
    pub epochs: u32,
    pub posts_per_epoch: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub vocab_size: usize,
    pub hyper: Hyperparams,
    /// Explicit topic-word rows for well-separated ground truth; the
    /// first spawned topics take these instead of a Dir(β) draw.
    pub seed_topics: Option<Vec<Vec<f64>>>,
    /// Phantom per-(user, seed-topic) count making seeded topics
    /// reachable under every relationship from the first post on.
    pub seed_boost: u64,
    /// Where each seed topic's phantom counts go (aligned with
    /// `seed_topics`). None places every seed topic in every scope.
    pub seed_plan: Option<Vec<SeedScope>>,
    /// Epoch each seed topic first becomes reachable (aligned with
    /// `seed_topics`). None makes every seed topic available from epoch
    /// zero; scheduling some later models short-lived bursts whose
    /// phantom support decays away after their epoch.
    pub seed_epochs: Option<Vec<usize>>,
}

/// Scope a seed topic starts out reachable from. `Everywhere` seeds all
/// four relationships; `World` only the global restaurant; `Region` only
/// one region's geographic neighbourhood; `Followers(u)` the network
/// neighbourhoods of everyone following user `u`; `User(u)` only user
/// `u`'s own history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedScope {
    Everywhere,
    World,
    Region(u32),
    Followers(u32),
    User(u32),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            users: 50,
            regions: 5,
            mean_degree: 4.0,
            edges: None,
            epochs: 3,
            posts_per_epoch: 2000,
            tokens_min: 5,
            tokens_max: 15,
            vocab_size: 500,
            hyper: Hyperparams::default(),
            seed_topics: None,
            seed_boost: 1,
            seed_plan: None,
            seed_epochs: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.users == 0 || self.regions == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "users, regions and vocabulary must be non-empty".into(),
            ));
        }
        if self.epochs == 0 || self.posts_per_epoch == 0 {
            return Err(Error::Config("need at least one epoch of posts".into()));
        }
        if self.tokens_min == 0 || self.tokens_max < self.tokens_min {
            return Err(Error::Config("bad token-count range".into()));
        }
        if let Some(plan) = &self.seed_plan {
            let rows = self.seed_topics.as_ref().map(|s| s.len()).unwrap_or(0);
            if plan.len() != rows {
                return Err(Error::Config("seed plan length != seed topic count".into()));
            }
            for scope in plan {
                match scope {
                    SeedScope::Region(r) if (*r as usize) >= self.regions => {
                        return Err(Error::Config(format!("seed plan region {r} out of range")));
                    }
                    SeedScope::Followers(u) | SeedScope::User(u) if (*u as usize) >= self.users => {
                        return Err(Error::Config(format!("seed plan user {u} out of range")));
                    }
                    _ => {}
                }
            }
        }
        if let Some(epochs) = &self.seed_epochs {
            let rows = self.seed_topics.as_ref().map(|s| s.len()).unwrap_or(0);
            if epochs.len() != rows {
                return Err(Error::Config(
                    "seed epochs length != seed topic count".into(),
                ));
            }
            if let Some(&e) = epochs.iter().find(|&&e| e >= self.epochs as usize) {
                return Err(Error::Config(format!("seed epoch {e} out of range")));
            }
        }
        if let Some(seeds) = &self.seed_topics {
            for row in seeds {
                if row.len() != self.vocab_size {
                    return Err(Error::Config(
                        "seed topic row length != vocabulary size".into(),
                    ));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Config("seed topic rows must be normalized".into()));
                }
            }
        }
        Ok(())
    }
}

/// Generator-side record of the true parameters and labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    /// pi[epoch][user]: personality over the four factor slots (disabled
    /// factors carry zero mass).
    pub pi: Vec<Vec<[f64; 4]>>,
    /// phi[epoch]: topic-word distribution per live topic.
    pub phi: Vec<HashMap<TopicId, Vec<f64>>>,
    /// True (z, f) per post, aligned with the corpus post order.
    pub assignments: Vec<Assignment>,
}

/// `count` topic rows with disjoint uniform vocabulary blocks.
pub fn disjoint_seed_topics(count: usize, vocab_size: usize) -> Vec<Vec<f64>> {
    assert!(count > 0 && vocab_size >= count);
    let block = vocab_size / count;
    (0..count)
        .map(|k| {
            let lo = k * block;
            let hi = if k + 1 == count {
                vocab_size
            } else {
                lo + block
            };
            let mass = 1.0 / (hi - lo) as f64;
            (0..vocab_size)
                .map(|v| if v >= lo && v < hi { mass } else { 0.0 })
                .collect()
        })
        .collect()
}

fn sample_dirichlet<R: Rng + ?Sized>(conc: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = conc
            .iter()
            .map(|&a| Gamma::new(a.max(1e-12), 1.0).unwrap().sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|x| x / total).collect();
        }
    }
}

struct TopicSampler {
    cumsum: Vec<f64>,
}

impl TopicSampler {
    fn new(phi: &[f64]) -> Self {
        let mut cumsum = Vec::with_capacity(phi.len());
        let mut acc = 0.0;
        for &p in phi {
            acc += p;
            cumsum.push(acc);
        }
        TopicSampler { cumsum }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u = rng.random::<f64>() * self.cumsum.last().copied().unwrap_or(1.0);
        self.cumsum
            .partition_point(|&c| c <= u)
            .min(self.cumsum.len() - 1) as u32
    }
}

fn build_users<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Vec<User> {
    let n = config.users;
    let mut users: Vec<User> = (0..n)
        .map(|i| User {
            id: i as UserId,
            region: (i % config.regions) as u32,
            followees: Vec::new(),
        })
        .collect();
    match &config.edges {
        Some(edges) => {
            for &(a, b) in edges {
                if a < n && b < n && a != b {
                    users[a].followees.push(b as UserId);
                }
            }
            for u in &mut users {
                u.followees.sort_unstable();
                u.followees.dedup();
            }
        }
        None => {
            let p = (config.mean_degree / (n.max(2) - 1) as f64).min(1.0);
            for a in 0..n {
                for b in 0..n {
                    if a != b && rng.random::<f64>() < p {
                        users[a].followees.push(b as UserId);
                    }
                }
            }
        }
    }
    users
}

fn empty_corpus(config: &GenConfig, users: Vec<User>) -> Corpus {
    let mut region_members = vec![Vec::new(); config.regions];
    for u in &users {
        region_members[u.region as usize].push(u.id);
    }
    let mut followers = vec![Vec::new(); users.len()];
    for u in &users {
        for &f in &u.followees {
            followers[f as usize].push(u.id);
        }
    }
    Corpus {
        posts: Vec::new(),
        user_labels: (0..users.len()).map(|i| format!("u{i}")).collect(),
        region_labels: (0..config.regions).map(|r| format!("r{r}")).collect(),
        region_members,
        followers,
        users,
        vocab: (0..config.vocab_size).map(|v| format!("w{v}")).collect(),
        epoch_count: config.epochs,
        dropped_posts: 0,
    }
}

/// Phantom counts making one seeded topic reachable from its planned
/// scope before any real post exists. These live only in the generator's
/// state; the corpus itself carries no trace of them.
fn inject_seed_topic(
    state: &mut ModelState,
    corpus: &Corpus,
    k: TopicId,
    scope: SeedScope,
    boost: u64,
) {
    if boost == 0 {
        return;
    }
    match scope {
        SeedScope::Everywhere => {
            for u in &corpus.users {
                *state.ledger.topic_total.entry(k).or_insert(0) += boost;
                *state
                    .ledger
                    .user_topic
                    .entry(u.id)
                    .or_default()
                    .entry(k)
                    .or_insert(0) += boost;
                *state
                    .ledger
                    .region_topic
                    .entry(u.region)
                    .or_default()
                    .entry(k)
                    .or_insert(0) += boost;
                for &f in &corpus.followers[u.id as usize] {
                    *state
                        .ledger
                        .network_topic
                        .entry(f)
                        .or_default()
                        .entry(k)
                        .or_insert(0) += boost;
                }
            }
        }
        SeedScope::World => {
            *state.ledger.topic_total.entry(k).or_insert(0) += boost * corpus.users.len() as u64;
        }
        SeedScope::Region(r) => {
            *state
                .ledger
                .region_topic
                .entry(r)
                .or_default()
                .entry(k)
                .or_insert(0) += boost * corpus.region_members[r as usize].len() as u64;
        }
        SeedScope::Followers(u) => {
            for &f in &corpus.followers[u as usize] {
                *state
                    .ledger
                    .network_topic
                    .entry(f)
                    .or_default()
                    .entry(k)
                    .or_insert(0) += boost;
            }
        }
        SeedScope::User(u) => {
            *state
                .ledger
                .user_topic
                .entry(u)
                .or_default()
                .entry(k)
                .or_insert(0) += boost;
        }
    }
}

/// Runs the generative process forward and returns the corpus plus its
/// ground truth. The topic conditional goes through the same prior-weight
/// code the sampler uses.
pub fn generate(config: &GenConfig, seed: u64) -> Result<(Corpus, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let hyper = config.hyper.clone();
    let enabled = hyper.enabled_factors.clone();
    let users = build_users(config, &mut rng);
    let mut corpus = empty_corpus(config, users);
    let mut state = ModelState::new(hyper.clone())?;
    state.seed = seed;

    let vocab_size = config.vocab_size;
    let mut phi: HashMap<TopicId, Vec<f64>> = HashMap::new();
    let mut samplers: HashMap<TopicId, TopicSampler> = HashMap::new();

    let seed_rows = config.seed_topics.clone().unwrap_or_default();
    let mut seeds_by_epoch: Vec<Vec<usize>> = vec![Vec::new(); config.epochs as usize];
    for i in 0..seed_rows.len() {
        let e = config.seed_epochs.as_ref().map(|v| v[i]).unwrap_or(0);
        seeds_by_epoch[e].push(i);
    }

    // Epoch-0 personalities from the base Dirichlet prior.
    let base_conc: Vec<f64> = enabled.iter().map(|&f| hyper.alpha_for(f)).collect();
    let mut pi_enabled: Vec<Vec<f64>> = (0..config.users)
        .map(|_| sample_dirichlet(&base_conc, &mut rng))
        .collect();

    let expand = |pe: &[f64]| -> [f64; 4] {
        let mut out = [0.0; 4];
        for (f, &p) in enabled.iter().zip(pe) {
            out[f.index()] = p;
        }
        out
    };

    let mut truth = GroundTruth {
        pi: Vec::new(),
        phi: Vec::new(),
        assignments: Vec::new(),
    };
    let mut next_post_id: u64 = 0;

    for epoch in 0..config.epochs {
        for &i in &seeds_by_epoch[epoch as usize] {
            let k = state.topics.spawn();
            let row = seed_rows[i].clone();
            samplers.insert(k, TopicSampler::new(&row));
            phi.insert(k, row);
            let scope = config
                .seed_plan
                .as_ref()
                .map(|p| p[i])
                .unwrap_or(SeedScope::Everywhere);
            inject_seed_topic(&mut state, &corpus, k, scope, config.seed_boost);
        }
        truth
            .pi
            .push(pi_enabled.iter().map(|pe| expand(pe)).collect());
        for i in 0..config.posts_per_epoch {
            let u = rng.random_range(0..config.users) as UserId;
            let f = enabled[sample_weighted(&pi_enabled[u as usize], &mut rng)];
            let weights = topic_prior_weights(u, f, &state, &corpus);
            let raw: Vec<f64> = weights.iter().map(|e| e.1).collect();
            let slot = weights[sample_weighted(&raw, &mut rng)].0;
            let z = match slot {
                TopicSlot::Existing(k) => k,
                TopicSlot::New => {
                    let k = state.topics.spawn();
                    let conc: Vec<f64> = (0..vocab_size as u32)
                        .map(|v| hyper.beta + state.caches.topic_word(k, v))
                        .collect();
                    let row = sample_dirichlet(&conc, &mut rng);
                    samplers.insert(k, TopicSampler::new(&row));
                    phi.insert(k, row);
                    k
                }
            };
            let len = rng.random_range(config.tokens_min..=config.tokens_max);
            let sampler = &samplers[&z];
            let tokens: Vec<u32> = (0..len).map(|_| sampler.draw(&mut rng)).collect();
            let post = Post {
                id: next_post_id,
                user: u,
                epoch,
                tokens,
                gold_topic: Some(z),
            };
            next_post_id += 1;
            state.apply_assignment(&post, z, f, &corpus);
            truth.assignments.push(Assignment {
                post: post.id,
                z,
                f,
            });
            corpus.posts.push(post);
            let _ = i;
        }
        truth.phi.push(
            state
                .topics
                .live_topics()
                .filter_map(|k| phi.get(&k).map(|row| (k, row.clone())))
                .collect(),
        );

        if epoch + 1 < config.epochs {
            state.advance_epoch();
            if hyper.dynamic {
                // History-shifted re-draws of personalities and topics.
                for u in 0..config.users {
                    let hist = state.caches.user_factor(u as UserId);
                    let conc: Vec<f64> = enabled
                        .iter()
                        .map(|&f| hyper.alpha_for(f) + hist[f.index()])
                        .collect();
                    pi_enabled[u] = sample_dirichlet(&conc, &mut rng);
                }
                let live: Vec<TopicId> = state.topics.live_topics().collect();
                for k in live {
                    let conc: Vec<f64> = (0..vocab_size as u32)
                        .map(|v| hyper.beta + state.caches.topic_word(k, v))
                        .collect();
                    let row = sample_dirichlet(&conc, &mut rng);
                    samplers.insert(k, TopicSampler::new(&row));
                    phi.insert(k, row);
                }
            }
        }
    }

    Ok((corpus, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ingest_posts, IngestConfig, RelationshipKind};
    use std::io::Cursor;

    #[test]
    fn dominant_self_preference() {
        let config = GenConfig {
            users: 10,
            regions: 2,
            epochs: 1,
            posts_per_epoch: 500,
            vocab_size: 50,
            hyper: Hyperparams {
                alpha: [0.01, 100.0, 0.01, 0.01],
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, truth) = generate(&config, 3).unwrap();
        let selfpref = truth
            .assignments
            .iter()
            .filter(|a| a.f == RelationshipKind::SelfPref)
            .count();
        assert!(selfpref as f64 >= 0.99 * truth.assignments.len() as f64);
    }

    #[test]
    fn disjoint_seed_blocks_pin_tokens() {
        let vocab = 100;
        let n_topics = 5;
        let config = GenConfig {
            users: 10,
            regions: 2,
            epochs: 2,
            posts_per_epoch: 300,
            vocab_size: vocab,
            seed_topics: Some(disjoint_seed_topics(n_topics, vocab)),
            hyper: Hyperparams {
                alpha_new: 1e-9,
                dynamic: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let (corpus, truth) = generate(&config, 11).unwrap();
        assert_eq!(corpus.posts.len(), 600);
        let block = vocab / n_topics;
        for (post, a) in corpus.posts.iter().zip(&truth.assignments) {
            assert!(
                (a.z as usize) < n_topics,
                "unexpected unseeded topic {}",
                a.z
            );
            let lo = a.z as usize * block;
            let hi = lo + block;
            for &t in &post.tokens {
                assert!((t as usize) >= lo && (t as usize) < hi);
            }
            assert_eq!(post.gold_topic, Some(a.z));
        }
    }

    #[test]
    fn factor_frequencies_match_personalities() {
        // With one user and many posts, the empirical factor frequencies
        // should sit within 3 sigma of the sampled personality.
        let config = GenConfig {
            users: 1,
            regions: 1,
            epochs: 1,
            posts_per_epoch: 4000,
            vocab_size: 30,
            hyper: Hyperparams {
                alpha: [5.0, 5.0, 5.0, 5.0],
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, truth) = generate(&config, 7).unwrap();
        let pi = truth.pi[0][0];
        let n = truth.assignments.len() as f64;
        let mut counts = [0usize; 4];
        for a in &truth.assignments {
            counts[a.f.index()] += 1;
        }
        for f in RelationshipKind::ALL {
            let p = pi[f.index()];
            let sigma = (p * (1.0 - p) / n).sqrt();
            let obs = counts[f.index()] as f64 / n;
            assert!(
                (obs - p).abs() <= 3.0 * sigma + 1e-9,
                "factor {:?}: observed {obs}, expected {p}",
                f
            );
        }
    }

    #[test]
    fn static_mode_keeps_topics_fixed() {
        let config = GenConfig {
            users: 6,
            regions: 2,
            epochs: 3,
            posts_per_epoch: 50,
            vocab_size: 40,
            seed_topics: Some(disjoint_seed_topics(2, 40)),
            hyper: Hyperparams {
                alpha_new: 1e-9,
                dynamic: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, truth) = generate(&config, 5).unwrap();
        assert_eq!(truth.phi[0], truth.phi[1]);
        assert_eq!(truth.phi[1], truth.phi[2]);
    }

    #[test]
    fn roundtrip_through_ingestion() {
        let config = GenConfig {
            users: 8,
            regions: 2,
            epochs: 2,
            posts_per_epoch: 100,
            vocab_size: 40,
            ..Default::default()
        };
        let (corpus, _) = generate(&config, 21).unwrap();
        let mut pbuf = Vec::new();
        let mut ubuf = Vec::new();
        corpus.write_posts(&mut pbuf, 1000, 0).unwrap();
        corpus.write_users(&mut ubuf).unwrap();
        let cfg = IngestConfig {
            epoch_length: 1000,
            origin: Some(0),
            ..Default::default()
        };
        let re = ingest_posts(Cursor::new(pbuf), Cursor::new(ubuf), &cfg).unwrap();
        assert_eq!(re.posts.len(), corpus.posts.len());
        assert_eq!(re.users.len(), corpus.users.len());
        for (a, b) in corpus.posts.iter().zip(&re.posts) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.gold_topic, b.gold_topic);
            assert_eq!(
                a.tokens
                    .iter()
                    .map(|&t| corpus.vocab[t as usize].clone())
                    .collect::<Vec<_>>(),
                b.tokens
                    .iter()
                    .map(|&t| re.vocab[t as usize].clone())
                    .collect::<Vec<_>>()
            );
        }
        for (a, b) in corpus.users.iter().zip(&re.users) {
            assert_eq!(a.followees, b.followees);
        }
    }
}

//! The per-post conditionals: factor scoring, topic scoring with
//! new-topic mass, and sampling of the (z, f) pair for one post.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Post, PostId, RelationshipKind, UserId};
use crate::stats::{ModelState, TopicId};

/// The latent pair for one post.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub post: PostId,
    pub z: TopicId,
    pub f: RelationshipKind,
}

/// Unnormalized nonnegative weights over enabled factors.
#[derive(Clone, Debug)]
pub struct FactorScores {
    pub entries: Vec<(RelationshipKind, f64)>,
}

impl FactorScores {
    pub fn normalized(&self) -> Vec<(RelationshipKind, f64)> {
        let total: f64 = self.entries.iter().map(|e| e.1).sum();
        assert!(total > 0.0, "all-zero factor score vector");
        self.entries.iter().map(|&(f, w)| (f, w / total)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopicSlot {
    Existing(TopicId),
    New,
}

/// Log-weights over live topics plus the new-topic slot. Topics whose
/// neighbor term is zero under the conditioning factor are excluded.
#[derive(Clone, Debug)]
pub struct TopicScores {
    pub entries: Vec<(TopicSlot, f64)>,
}

impl TopicScores {
    /// Exponentiates with max-shift and normalizes to probabilities.
    pub fn normalized(&self) -> Vec<(TopicSlot, f64)> {
        let max = self
            .entries
            .iter()
            .map(|e| e.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = self.entries.iter().map(|e| (e.1 - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        self.entries
            .iter()
            .zip(weights)
            .map(|(&(s, _), w)| (s, w / total))
            .collect()
    }
}

/// Personality-prior weights (m + ᾱ + α_f) alone, used for the first
/// visit of a post when no topic label exists yet.
pub fn personality_prior_scores(state: &ModelState, u: UserId) -> FactorScores {
    let entries = state
        .hyper
        .enabled_factors
        .iter()
        .map(|&f| (f, state.personality_weight(u, f)))
        .collect();
    FactorScores { entries }
}

/// Influence-factor conditional given the post's current topic label:
/// (m + ᾱ + α_f) × (n + n̄ + α). The trailing α keeps a freshly spawned
/// topic (all neighbor counts zero) from collapsing the vector to zero.
pub fn score_factor(
    post: &Post,
    z_current: TopicId,
    state: &ModelState,
    corpus: &Corpus,
) -> FactorScores {
    let u = post.user;
    let entries: Vec<(RelationshipKind, f64)> = state
        .hyper
        .enabled_factors
        .iter()
        .map(|&f| {
            let personality = state.personality_weight(u, f);
            let reach = state.neighbor_weight(corpus, u, f, z_current) + state.hyper.alpha_new;
            (f, personality * reach)
        })
        .collect();
    assert!(
        entries.iter().any(|e| e.1 > 0.0),
        "factor scores degenerate for post {}",
        post.id
    );
    FactorScores { entries }
}

/// Word log-likelihood of the post's tokens under topic `k`, with all
/// tokens scored against the same fixed counts.
fn word_loglik(post: &Post, k: TopicId, state: &ModelState, vocab_size: usize) -> f64 {
    let beta = state.hyper.beta;
    let denom = state.ledger.topic_word_total(k) as f64
        + state.caches.topic_word_total(k)
        + vocab_size as f64 * beta;
    post.tokens
        .iter()
        .map(|&v| {
            let num = state.ledger.topic_word(k, v) as f64 + state.caches.topic_word(k, v) + beta;
            (num / denom).ln()
        })
        .sum()
}

/// Prior part of the topic conditional under factor `f`: (n + n̄) per
/// reachable live topic plus α for the new-topic slot. Shared by the
/// sampler and the forward generator so the two can never diverge.
pub fn topic_prior_weights(
    u: UserId,
    f: RelationshipKind,
    state: &ModelState,
    corpus: &Corpus,
) -> Vec<(TopicSlot, f64)> {
    let mut out = Vec::with_capacity(state.topics.live_count() + 1);
    for k in state.topics.live_topics() {
        let reach = state.neighbor_weight(corpus, u, f, k);
        if reach > 0.0 {
            out.push((TopicSlot::Existing(k), reach));
        }
    }
    out.push((TopicSlot::New, state.hyper.alpha_new));
    out
}

/// Topic conditional given factor `f`: log[(n + n̄)] plus the word terms
/// for live topics, log α + N·log(1/V) for the new-topic slot. Topics
/// unreachable under `f` (zero neighbor term) are omitted.
pub fn score_topic(
    post: &Post,
    f: RelationshipKind,
    state: &ModelState,
    corpus: &Corpus,
) -> TopicScores {
    debug_assert!(!post.tokens.is_empty(), "post {} has no tokens", post.id);
    let vocab_size = corpus.vocab_size();
    let uniform = (1.0 / vocab_size as f64).ln();
    let entries = topic_prior_weights(post.user, f, state, corpus)
        .into_iter()
        .map(|(slot, w)| match slot {
            TopicSlot::Existing(k) => (slot, w.ln() + word_loglik(post, k, state, vocab_size)),
            TopicSlot::New => (slot, w.ln() + post.tokens.len() as f64 * uniform),
        })
        .collect();
    TopicScores { entries }
}

pub fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0 && total.is_finite(), "bad weight vector");
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

pub fn sample_log_weighted<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> usize {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|&l| (l - max).exp()).collect();
    sample_weighted(&weights, rng)
}

/// Draws (f, z) for one post and applies the result to the ledgers.
///
/// First visit (`prev` = None): f comes from the personality prior alone,
/// then z from the topic conditional. Revisits: the post must already be
/// decremented; f is drawn from the full factor conditional given the
/// current z, then z given the new f.
pub fn sample_assignment<R: Rng + ?Sized>(
    post: &Post,
    prev: Option<&Assignment>,
    state: &mut ModelState,
    corpus: &Corpus,
    rng: &mut R,
) -> Assignment {
    let fs = match prev {
        None => personality_prior_scores(state, post.user),
        Some(p) => score_factor(post, p.z, state, corpus),
    };
    let weights: Vec<f64> = fs.entries.iter().map(|e| e.1).collect();
    let f = fs.entries[sample_weighted(&weights, rng)].0;

    let ts = score_topic(post, f, state, corpus);
    let logw: Vec<f64> = ts.entries.iter().map(|e| e.1).collect();
    let slot = ts.entries[sample_log_weighted(&logw, rng)].0;
    let z = match slot {
        TopicSlot::Existing(k) => k,
        TopicSlot::New => state.topics.spawn(),
    };
    state.apply_assignment(post, z, f, corpus);
    Assignment {
        post: post.id,
        z,
        f,
    }
}

/// Joint log-probability of a full assignment sequence processed in the
/// given order: the product of sequential factor priors, topic priors and
/// the exact collapsed word likelihood (within-post token increments
/// included, so the World and SelfPref cases are exchangeable).
pub fn sequential_joint_logprob(
    corpus: &Corpus,
    order: &[usize],
    assignments: &[Assignment],
    state_template: &ModelState,
) -> f64 {
    let mut state = state_template.clone();
    let vocab_size = corpus.vocab_size();
    let beta = state.hyper.beta;
    // Assignment topic ids are treated as opaque: a topic is "new" the
    // first time it appears in this processing order.
    let mut seen: HashMap<TopicId, TopicId> = HashMap::new();
    let mut logp = 0.0;

    for &i in order {
        let post = &corpus.posts[i];
        let a = &assignments[i];

        let fs = personality_prior_scores(&state, post.user);
        let total: f64 = fs.entries.iter().map(|e| e.1).sum();
        let fw = fs
            .entries
            .iter()
            .find(|e| e.0 == a.f)
            .map(|e| e.1)
            .expect("assignment uses a disabled factor");
        logp += (fw / total).ln();

        let mut denom = state.hyper.alpha_new;
        for k in state.topics.live_topics() {
            denom += state.neighbor_weight(corpus, post.user, a.f, k);
        }
        let (z_local, prior) = match seen.get(&a.z) {
            Some(&k) => (k, state.neighbor_weight(corpus, post.user, a.f, k)),
            None => {
                let k = state.topics.spawn();
                seen.insert(a.z, k);
                (k, state.hyper.alpha_new)
            }
        };
        logp += (prior / denom).ln();

        // Exact Polya word predictive with within-post increments.
        let mut local: HashMap<u32, u64> = HashMap::new();
        let base_total =
            state.ledger.topic_word_total(z_local) as f64 + state.caches.topic_word_total(z_local);
        for (l, &v) in post.tokens.iter().enumerate() {
            let n = state.ledger.topic_word(z_local, v) as f64
                + state.caches.topic_word(z_local, v)
                + *local.get(&v).unwrap_or(&0) as f64;
            let tot = base_total + l as f64;
            logp += ((n + beta) / (tot + vocab_size as f64 * beta)).ln();
            *local.entry(v).or_insert(0) += 1;
        }

        state.apply_assignment(post, z_local, a.f, corpus);
    }
    logp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ingest_posts, IngestConfig};
    use crate::stats::Hyperparams;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::io::Cursor;

    fn single_user_corpus(n_posts: usize, token: &str) -> Corpus {
        let posts: String = (0..n_posts)
            .map(|i| format!("{i}\tu\t0\t{token}\n"))
            .collect();
        let users = "u\tA\t\n";
        ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn fresh_model_factor_prior_uniform() {
        let corpus = single_user_corpus(1, "x");
        let mut st = ModelState::new(Hyperparams::default()).unwrap();
        let k = st.topics.spawn();
        let fs = score_factor(&corpus.posts[0], k, &st, &corpus);
        let probs = fs.normalized();
        assert_eq!(probs.len(), 4);
        for &(_, p) in &probs {
            assert_relative_eq!(p, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn ablation_has_two_entries() {
        let corpus = single_user_corpus(1, "x");
        let hyper = Hyperparams {
            enabled_factors: vec![RelationshipKind::SelfPref, RelationshipKind::Network],
            ..Default::default()
        };
        let mut st = ModelState::new(hyper).unwrap();
        let k = st.topics.spawn();
        let fs = score_factor(&corpus.posts[0], k, &st, &corpus);
        assert_eq!(fs.entries.len(), 2);
    }

    #[test]
    fn factor_ratio_matches_hand_evaluation() {
        // Single user, so World and SelfPref neighbor counts coincide and
        // the second factor cancels: ratio = (3 + α_w) / (1 + α_u).
        let corpus = single_user_corpus(5, "x");
        let mut st = ModelState::new(Hyperparams::default()).unwrap();
        let k = st.topics.spawn();
        for i in 0..3 {
            st.apply_assignment(&corpus.posts[i], k, RelationshipKind::World, &corpus);
        }
        st.apply_assignment(&corpus.posts[3], k, RelationshipKind::SelfPref, &corpus);
        let fs = score_factor(&corpus.posts[4], k, &st, &corpus);
        let get = |f: RelationshipKind| fs.entries.iter().find(|e| e.0 == f).unwrap().1;
        let ratio = get(RelationshipKind::World) / get(RelationshipKind::SelfPref);
        assert_relative_eq!(ratio, 3.1 / 1.1, epsilon = 1e-12);
    }

    #[test]
    fn no_live_topics_forces_new_slot() {
        let corpus = single_user_corpus(1, "x");
        let st = ModelState::new(Hyperparams::default()).unwrap();
        let ts = score_topic(&corpus.posts[0], RelationshipKind::World, &st, &corpus);
        let probs = ts.normalized();
        assert_eq!(probs.len(), 1);
        assert_eq!(probs[0].0, TopicSlot::New);
        assert_relative_eq!(probs[0].1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn crp_reduction_two_one() {
        // World factor, unique user labels, V = 1 so word evidence is
        // flat: weights (2, 1, α=1) normalize to (0.5, 0.25, 0.25).
        let posts = "0\ta\t0\tx\n1\tb\t0\tx\n2\tc\t0\tx\n3\td\t0\tx\n";
        let users = "a\tA\t\nb\tA\t\nc\tA\t\nd\tA\t\n";
        let corpus = ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap();
        let hyper = Hyperparams {
            alpha_new: 1.0,
            ..Default::default()
        };
        let mut st = ModelState::new(hyper).unwrap();
        let k0 = st.topics.spawn();
        let k1 = st.topics.spawn();
        st.apply_assignment(&corpus.posts[0], k0, RelationshipKind::World, &corpus);
        st.apply_assignment(&corpus.posts[1], k0, RelationshipKind::World, &corpus);
        st.apply_assignment(&corpus.posts[2], k1, RelationshipKind::World, &corpus);
        let ts = score_topic(&corpus.posts[3], RelationshipKind::World, &st, &corpus);
        let probs = ts.normalized();
        let get = |slot: TopicSlot| probs.iter().find(|e| e.0 == slot).unwrap().1;
        assert_relative_eq!(get(TopicSlot::Existing(k0)), 0.5, epsilon = 1e-12);
        assert_relative_eq!(get(TopicSlot::Existing(k1)), 0.25, epsilon = 1e-12);
        assert_relative_eq!(get(TopicSlot::New), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn topic_conditional_hand_case() {
        // Three single-token posts of word v on topic k (two by u, one by
        // another user); V = 2, β = 0.1, SelfPref neighbor count = 2.
        let posts = "0\tu\t0\tv\n1\tu\t0\tv\n2\tw\t0\tv\n3\tu\t0\tv\n4\tu\t0\tq\n";
        let users = "u\tA\t\nw\tA\t\n";
        let corpus = ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap();
        assert_eq!(corpus.vocab_size(), 2);
        let mut st = ModelState::new(Hyperparams::default()).unwrap();
        let k = st.topics.spawn();
        st.apply_assignment(&corpus.posts[0], k, RelationshipKind::SelfPref, &corpus);
        st.apply_assignment(&corpus.posts[1], k, RelationshipKind::SelfPref, &corpus);
        st.apply_assignment(&corpus.posts[2], k, RelationshipKind::World, &corpus);
        let ts = score_topic(&corpus.posts[3], RelationshipKind::SelfPref, &st, &corpus);
        let probs = ts.normalized();
        let w_k = 2.0 * (3.1 / 3.2);
        let w_new = 0.1 * 0.5;
        let get = |slot: TopicSlot| probs.iter().find(|e| e.0 == slot).unwrap().1;
        assert_relative_eq!(
            get(TopicSlot::Existing(k)),
            w_k / (w_k + w_new),
            epsilon = 1e-12
        );
        assert_relative_eq!(get(TopicSlot::New), w_new / (w_k + w_new), epsilon = 1e-12);
    }

    #[test]
    fn unreachable_topic_excluded() {
        // Topic only used by a user outside w's self scope.
        let posts = "0\tu\t0\tv\n1\tw\t0\tv\n";
        let users = "u\tA\t\nw\tB\t\n";
        let corpus = ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap();
        let mut st = ModelState::new(Hyperparams::default()).unwrap();
        let k = st.topics.spawn();
        st.apply_assignment(&corpus.posts[0], k, RelationshipKind::World, &corpus);
        let ts = score_topic(&corpus.posts[1], RelationshipKind::SelfPref, &st, &corpus);
        assert_eq!(ts.entries.len(), 1);
        assert_eq!(ts.entries[0].0, TopicSlot::New);
    }

    #[test]
    fn sampling_deterministic_under_fixed_seed() {
        let corpus = single_user_corpus(3, "x y z");
        let draw = || {
            let mut st = ModelState::new(Hyperparams::default()).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(7);
            let mut out = Vec::new();
            for p in &corpus.posts {
                out.push(sample_assignment(p, None, &mut st, &corpus, &mut rng));
            }
            out
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn degenerate_scores_are_point_mass() {
        let corpus = single_user_corpus(2, "x");
        let hyper = Hyperparams {
            alpha_new: 1e-300,
            ..Default::default()
        };
        let mut st = ModelState::new(hyper).unwrap();
        let k = st.topics.spawn();
        st.apply_assignment(&corpus.posts[0], k, RelationshipKind::SelfPref, &corpus);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let ts = score_topic(&corpus.posts[1], RelationshipKind::SelfPref, &st, &corpus);
            let logw: Vec<f64> = ts.entries.iter().map(|e| e.1).collect();
            let slot = ts.entries[sample_log_weighted(&logw, &mut rng)].0;
            assert_eq!(slot, TopicSlot::Existing(k));
        }
    }

    #[test]
    fn empirical_frequencies_match_weights() {
        // 3-way fixed score vector, 100k draws, 3σ binomial bounds.
        let logw = [1.0f64.ln(), 2.0f64.ln(), 5.0f64.ln()];
        let probs = [1.0 / 8.0, 2.0 / 8.0, 5.0 / 8.0];
        let n = 100_000usize;
        let mut counts = [0usize; 3];
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..n {
            counts[sample_log_weighted(&logw, &mut rng)] += 1;
        }
        for i in 0..3 {
            let mean = n as f64 * probs[i];
            let sd = (n as f64 * probs[i] * (1.0 - probs[i])).sqrt();
            assert!(
                (counts[i] as f64 - mean).abs() < 3.0 * sd,
                "slot {i}: {} vs {mean}±{sd}",
                counts[i]
            );
        }
    }

    #[test]
    fn spawn_ids_start_at_zero_and_increase() {
        let mut st = ModelState::new(Hyperparams::default()).unwrap();
        assert_eq!(st.topics.spawn(), 0);
        let b = st.topics.spawn();
        st.topics.retire(b);
        let c = st.topics.spawn();
        assert!(c > b);
    }

    #[test]
    fn topic_scores_normalize_to_one() {
        let corpus = single_user_corpus(4, "x y");
        let mut st = ModelState::new(Hyperparams::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for p in &corpus.posts {
            sample_assignment(p, None, &mut st, &corpus, &mut rng);
        }
        let ts = score_topic(&corpus.posts[0], RelationshipKind::World, &st, &corpus);
        let total: f64 = ts.normalized().iter().map(|e| e.1).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }
}

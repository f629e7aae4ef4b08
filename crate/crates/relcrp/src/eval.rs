//! Held-out evaluation, clustering agreement scores, trend extraction and
//! the neighbourhood-vote topic predictor.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Post, RelationshipKind, UserId, OOV_TOKEN};
use crate::error::{Error, Result};
use crate::model::{personality_prior_scores, topic_prior_weights, TopicSlot};
use crate::stats::{ModelState, TopicId};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub log_likelihood: f64,
    pub tokens: u64,
    pub posts: usize,
}

/// Held-out perplexity. Each post's token probability marginalizes over
/// the enabled factors (personality weight) and over reachable topics
/// plus a uniform new-topic slot; out-of-vocabulary tokens score 1/V.
pub fn perplexity(
    state: &ModelState,
    corpus: &Corpus,
    heldout: &[Post],
) -> Result<PerplexityReport> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out set".into()));
    }
    let vocab_size = corpus.vocab.len();
    if vocab_size == 0 {
        return Err(Error::Empty("vocabulary".into()));
    }
    let v = vocab_size as f64;
    let beta = state.hyper.beta;
    let mut log_likelihood = 0.0;
    let mut tokens: u64 = 0;
    for post in heldout {
        if (post.user as usize) >= corpus.users.len() {
            return Err(Error::UnknownUser(format!("user id {}", post.user)));
        }
        // p(v | u) = sum_f pi_f sum_k p(k | f, u) p(v | k), per token.
        let factor = personality_prior_scores(state, post.user);
        let mut token_prob: HashMap<u32, f64> = HashMap::new();
        let mut new_mass = 0.0;
        for (f, pf) in factor.normalized() {
            let weights = topic_prior_weights(post.user, f, state, corpus);
            let total: f64 = weights.iter().map(|e| e.1).sum();
            if total <= 0.0 {
                new_mass += pf;
                continue;
            }
            for (slot, w) in weights {
                let pk = pf * w / total;
                match slot {
                    TopicSlot::New => new_mass += pk,
                    TopicSlot::Existing(k) => {
                        let denom = state.ledger.topic_word_total(k) as f64
                            + state.caches.topic_word_total(k)
                            + v * beta;
                        for &t in &post.tokens {
                            if t == OOV_TOKEN {
                                continue;
                            }
                            let num = state.ledger.topic_word(k, t) as f64
                                + state.caches.topic_word(k, t)
                                + beta;
                            *token_prob.entry(t).or_insert(0.0) += pk * num / denom;
                        }
                    }
                }
            }
        }
        for &t in &post.tokens {
            tokens += 1;
            let p = if t == OOV_TOKEN {
                1.0 / v
            } else {
                token_prob.get(&t).copied().unwrap_or(0.0) + new_mass / v
            };
            log_likelihood += p.max(f64::MIN_POSITIVE).ln();
        }
    }
    if tokens == 0 {
        return Err(Error::Empty("held-out tokens".into()));
    }
    Ok(PerplexityReport {
        perplexity: (-log_likelihood / tokens as f64).exp(),
        log_likelihood,
        tokens,
        posts: heldout.len(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusteringScores {
    pub nmi: f64,
    pub rand_index: f64,
    pub pair_f1: f64,
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Agreement between a predicted labelling and gold labels: normalized
/// mutual information (arithmetic-mean normalization), Rand index and the
/// pairwise F1.
pub fn clustering_scores(pred: &[u64], gold: &[u64]) -> Result<ClusteringScores> {
    if pred.len() < 2 || pred.len() != gold.len() {
        return Err(Error::Config(
            "label vectors must be equal-length with at least 2 items".into(),
        ));
    }
    let n = pred.len() as f64;
    let mut joint: HashMap<(u64, u64), u64> = HashMap::new();
    let mut pc: HashMap<u64, u64> = HashMap::new();
    let mut gc: HashMap<u64, u64> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gold) {
        *joint.entry((p, g)).or_insert(0) += 1;
        *pc.entry(p).or_insert(0) += 1;
        *gc.entry(g).or_insert(0) += 1;
    }
    let hp = entropy(&pc.values().copied().collect::<Vec<_>>(), n);
    let hg = entropy(&gc.values().copied().collect::<Vec<_>>(), n);
    let mut mi = 0.0;
    for (&(p, g), &c) in &joint {
        let pj = c as f64 / n;
        mi += pj * (pj / ((pc[&p] as f64 / n) * (gc[&g] as f64 / n))).ln();
    }
    let nmi = if hp + hg > 0.0 {
        2.0 * mi / (hp + hg)
    } else {
        1.0
    };

    let pairs = |m: &HashMap<u64, u64>| -> f64 {
        m.values().map(|&c| c as f64 * (c as f64 - 1.0) / 2.0).sum()
    };
    let same_both: f64 = joint
        .values()
        .map(|&c| c as f64 * (c as f64 - 1.0) / 2.0)
        .sum();
    let same_pred = pairs(&pc);
    let same_gold = pairs(&gc);
    let total_pairs = n * (n - 1.0) / 2.0;
    let rand_index = if total_pairs > 0.0 {
        (total_pairs + 2.0 * same_both - same_pred - same_gold) / total_pairs
    } else {
        1.0
    };
    let precision = if same_pred > 0.0 {
        same_both / same_pred
    } else {
        1.0
    };
    let recall = if same_gold > 0.0 {
        same_both / same_gold
    } else {
        1.0
    };
    let pair_f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClusteringScores {
        nmi: nmi.clamp(0.0, 1.0),
        rand_index,
        pair_f1,
    })
}

/// A per-epoch matrix of named rows, written as CSV or JSON. A column
/// with no observations is emitted as zeros with its mask entry false.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrendMatrix {
    pub row_labels: Vec<String>,
    pub epochs: Vec<u32>,
    /// values[row][epoch_index]
    pub values: Vec<Vec<f64>>,
    /// column_mask[epoch_index]: true when the column holds real data.
    pub column_mask: Vec<bool>,
}

impl TrendMatrix {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "label")?;
        for e in &self.epochs {
            write!(w, ",epoch_{e}")?;
        }
        writeln!(w)?;
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            write!(w, "{label}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn archived_epochs(state: &ModelState) -> Vec<(u32, &crate::stats::EpochStats)> {
    let mut out: Vec<(u32, &crate::stats::EpochStats)> = state
        .archive
        .iter()
        .enumerate()
        .map(|(e, s)| (e as u32, s))
        .collect();
    out.push((state.epoch, &state.tally));
    out
}

/// Share of each topic's posts per epoch, counted over `users` (all
/// users when empty is an error), over archived epochs plus the one in
/// progress.
pub fn topic_trends(state: &ModelState, users: &[UserId]) -> Result<TrendMatrix> {
    if users.is_empty() {
        return Err(Error::Empty("user subset".into()));
    }
    let epochs = archived_epochs(state);
    let subset: std::collections::HashSet<UserId> = users.iter().copied().collect();
    let mut topic_ids: BTreeMap<TopicId, ()> = BTreeMap::new();
    for (_, s) in &epochs {
        for (&k, m) in &s.topic_user {
            if m.keys().any(|u| subset.contains(u)) {
                topic_ids.insert(k, ());
            }
        }
    }
    let mut values = vec![Vec::with_capacity(epochs.len()); topic_ids.len()];
    let mut column_mask = Vec::with_capacity(epochs.len());
    for (_, s) in &epochs {
        let count = |k: TopicId| -> u64 {
            s.topic_user
                .get(&k)
                .map(|m| {
                    m.iter()
                        .filter(|(u, _)| subset.contains(u))
                        .map(|(_, &c)| c)
                        .sum()
                })
                .unwrap_or(0)
        };
        let total: u64 = topic_ids.keys().map(|&k| count(k)).sum();
        column_mask.push(total > 0);
        for (row, (&k, _)) in topic_ids.iter().enumerate() {
            values[row].push(if total > 0 {
                count(k) as f64 / total as f64
            } else {
                0.0
            });
        }
    }
    Ok(TrendMatrix {
        row_labels: topic_ids.keys().map(|k| format!("topic_{k}")).collect(),
        epochs: epochs.iter().map(|&(e, _)| e).collect(),
        values,
        column_mask,
    })
}

/// Per-epoch share of each relationship factor, aggregated over `users`.
pub fn personality_trends(state: &ModelState, users: &[UserId]) -> Result<TrendMatrix> {
    if users.is_empty() {
        return Err(Error::Empty("user subset".into()));
    }
    let epochs = archived_epochs(state);
    let mut values = vec![Vec::with_capacity(epochs.len()); 4];
    let mut column_mask = Vec::with_capacity(epochs.len());
    for (_, s) in &epochs {
        let mut counts = [0u64; 4];
        for u in users {
            if let Some(c) = s.user_factor.get(u) {
                for f in 0..4 {
                    counts[f] += c[f];
                }
            }
        }
        let total: u64 = counts.iter().sum();
        column_mask.push(total > 0);
        for f in RelationshipKind::ALL {
            values[f.index()].push(if total > 0 {
                counts[f.index()] as f64 / total as f64
            } else {
                0.0
            });
        }
    }
    Ok(TrendMatrix {
        row_labels: RelationshipKind::ALL
            .iter()
            .map(|f| f.label().to_string())
            .collect(),
        epochs: epochs.iter().map(|&(e, _)| e).collect(),
        values,
        column_mask,
    })
}

/// Per-epoch factor mix within one topic: how much of the topic's uptake
/// came through each relationship.
pub fn topic_character(state: &ModelState, topic: TopicId) -> TrendMatrix {
    let epochs = archived_epochs(state);
    let mut values = vec![Vec::with_capacity(epochs.len()); 4];
    let mut column_mask = Vec::with_capacity(epochs.len());
    for (_, s) in &epochs {
        let counts = s.topic_factor.get(&topic).copied().unwrap_or([0; 4]);
        let total: u64 = counts.iter().sum();
        column_mask.push(total > 0);
        for f in RelationshipKind::ALL {
            values[f.index()].push(if total > 0 {
                counts[f.index()] as f64 / total as f64
            } else {
                0.0
            });
        }
    }
    TrendMatrix {
        row_labels: RelationshipKind::ALL
            .iter()
            .map(|f| f.label().to_string())
            .collect(),
        epochs: epochs.iter().map(|&(e, _)| e).collect(),
        values,
        column_mask,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajorEvent {
    pub topic: TopicId,
    pub epoch: u32,
    pub share: f64,
}

/// Epochs where a single topic dominates: its share is the epoch maximum,
/// at least `threshold`, and at least twice the runner-up's share.
pub fn detect_major_events(trends: &TrendMatrix, threshold: f64) -> Vec<MajorEvent> {
    let mut out = Vec::new();
    for (j, &epoch) in trends.epochs.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        let mut second = 0.0;
        for (i, row) in trends.values.iter().enumerate() {
            let v = row[j];
            match best {
                Some((_, b)) if v <= b => {
                    if v > second {
                        second = v;
                    }
                }
                _ => {
                    if let Some((_, b)) = best {
                        second = b;
                    }
                    best = Some((i, v));
                }
            }
        }
        if let Some((i, share)) = best {
            if share >= threshold && share >= 2.0 * second {
                let topic = trends.row_labels[i]
                    .strip_prefix("topic_")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(i as TopicId);
                out.push(MajorEvent {
                    topic,
                    epoch,
                    share,
                });
            }
        }
    }
    out
}

/// KL(p || q) in nats between two topic-word rows under beta smoothing.
pub fn topic_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// One labelled example for the posting/commenting prediction task:
/// a topic's word distribution, its day index, and an optional
/// interaction count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub phi: Vec<f64>,
    pub day: f64,
    pub interactions: Option<f64>,
    pub label: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.retain(|x| x.is_finite());
    if xs.is_empty() {
        return 1.0;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = xs.len() / 2;
    let m = if xs.len() % 2 == 0 {
        (xs[mid - 1] + xs[mid]) / 2.0
    } else {
        xs[mid]
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// k-nearest-neighbour vote over `training`. Distance is the sum of the
/// topic KL divergence, the day gap, and the interaction gap, each
/// divided by its training-set median so no feature dominates by scale.
/// Ties in the vote go to the smallest label.
pub fn knn_predict(query: &FeatureRecord, training: &[FeatureRecord], k: usize) -> Result<u64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if training.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let kls: Vec<f64> = training
        .iter()
        .map(|t| topic_kl(&query.phi, &t.phi))
        .collect();
    let days: Vec<f64> = training.iter().map(|t| (query.day - t.day).abs()).collect();
    let inter: Vec<f64> = training
        .iter()
        .map(|t| match (query.interactions, t.interactions) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => 0.0,
        })
        .collect();
    let (mk, md, mi) = (
        median(kls.clone()),
        median(days.clone()),
        median(inter.clone()),
    );
    let mut dist: Vec<(f64, u64)> = (0..training.len())
        .map(|i| {
            (
                kls[i] / mk + days[i] / md + inter[i] / mi,
                training[i].label,
            )
        })
        .collect();
    dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<u64, usize> = BTreeMap::new();
    for &(_, label) in dist.iter().take(k.min(dist.len())) {
        *votes.entry(label).or_insert(0) += 1;
    }
    // BTreeMap iteration is ascending, so on equal counts the smallest
    // label wins.
    let mut best = (0u64, 0usize);
    for (&label, &count) in &votes {
        if count > best.1 {
            best = (label, count);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn perfect_labelling_scores_one() {
        let labels = vec![0, 0, 1, 1, 2];
        let s = clustering_scores(&labels, &labels).unwrap();
        assert_relative_eq!(s.nmi, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.rand_index, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.pair_f1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn permuted_labels_score_one_nmi() {
        let gold = vec![0, 0, 1, 1, 2, 2];
        let pred = vec![5, 5, 9, 9, 1, 1];
        let s = clustering_scores(&pred, &gold).unwrap();
        assert_relative_eq!(s.nmi, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.rand_index, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rand_index_half_case() {
        // pred = {a,b},{c,d}; gold = {a,c},{b,d}: every pair disagrees on
        // one side, 2 of 6 pairs agree (the split ones), RI = 1/3... use
        // the standard 4-point example with RI = 1/3.
        let pred = vec![0, 0, 1, 1];
        let gold = vec![0, 1, 0, 1];
        let s = clustering_scores(&pred, &gold).unwrap();
        assert_relative_eq!(s.rand_index, 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(s.nmi, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_hand_value() {
        let p = vec![0.9, 0.1];
        let q = vec![0.5, 0.5];
        assert_relative_eq!(
            topic_kl(&p, &q),
            0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln(),
            epsilon = 1e-12
        );
        assert_relative_eq!(topic_kl(&p, &q), 0.368_064_2, epsilon = 1e-6);
        assert_relative_eq!(topic_kl(&p, &p), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rand_index_spec_example() {
        let pred = vec![1, 1, 1, 2];
        let gold = vec![1, 1, 2, 2];
        let s = clustering_scores(&pred, &gold).unwrap();
        // 1 pair same in both + 2 pairs different in both, out of 6.
        assert_relative_eq!(s.rand_index, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn knn_votes_and_ties() {
        let mk = |phi: Vec<f64>, day: f64, label: u64| FeatureRecord {
            phi,
            day,
            interactions: None,
            label,
        };
        let training = vec![
            mk(vec![0.9, 0.1], 0.0, 7),
            mk(vec![0.8, 0.2], 1.0, 7),
            mk(vec![0.1, 0.9], 50.0, 3),
        ];
        let query = mk(vec![0.85, 0.15], 0.5, 0);
        assert_eq!(knn_predict(&query, &training, 2).unwrap(), 7);
        // k=1 with the query in the training set returns its own label.
        let mut with_self = training.clone();
        with_self.push(mk(query.phi.clone(), query.day, 5));
        assert_eq!(knn_predict(&with_self[3], &with_self, 1).unwrap(), 5);
        // Tie between labels 3 and 7 over k=2 goes to the smaller label.
        let pair = vec![mk(vec![0.5, 0.5], 0.0, 7), mk(vec![0.5, 0.5], 0.0, 3)];
        assert_eq!(
            knn_predict(&mk(vec![0.5, 0.5], 0.0, 0), &pair, 2).unwrap(),
            3
        );
        assert!(knn_predict(&query, &[], 1).is_err());
        assert!(knn_predict(&query, &training, 0).is_err());
    }

    #[test]
    fn major_event_detection() {
        let trends = TrendMatrix {
            row_labels: vec!["topic_0".into(), "topic_1".into(), "topic_2".into()],
            epochs: vec![0, 1, 2],
            values: vec![
                vec![0.8, 0.34, 0.4],
                vec![0.1, 0.33, 0.35],
                vec![0.1, 0.33, 0.25],
            ],
            column_mask: vec![true, true, true],
        };
        let events = detect_major_events(&trends, 0.3);
        // Epoch 0: topic 0 at 0.8 >= 2*0.1. Epoch 1: max 0.34 < 2*0.33.
        // Epoch 2: max 0.4 < 2*0.35.
        assert_eq!(
            events,
            vec![MajorEvent {
                topic: 0,
                epoch: 0,
                share: 0.8
            }]
        );
    }

    #[test]
    fn csv_shape() {
        let trends = TrendMatrix {
            row_labels: vec!["a".into(), "b".into()],
            epochs: vec![0, 1],
            values: vec![vec![0.5, 0.25], vec![0.5, 0.75]],
            column_mask: vec![true, true],
        };
        let mut buf = Vec::new();
        trends.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "label,epoch_0,epoch_1\na,0.5,0.25\nb,0.5,0.75\n");
    }

    #[test]
    fn empty_labels_rejected() {
        assert!(clustering_scores(&[], &[]).is_err());
        assert!(clustering_scores(&[0], &[0]).is_err());
        assert!(clustering_scores(&[0], &[0, 1]).is_err());
    }
}

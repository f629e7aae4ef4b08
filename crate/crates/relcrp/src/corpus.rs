//! Data model and ingestion: posts, users, the followee graph, regions,
//! vocabulary, and neighbor semantics for every relationship kind.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type UserId = u32;
pub type RegionId = u32;
pub type VocabId = u32;
pub type PostId = u64;

/// Sentinel for held-out tokens outside the training vocabulary.
/// Such tokens score a uniform 1/V likelihood term during evaluation.
pub const OOV_TOKEN: VocabId = u32::MAX;

/// The relationship that is taken to have influenced a post.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum RelationshipKind {
    /// Complete relationship: everyone, including the user herself.
    World,
    /// Empty relationship: the user is her only neighbor.
    SelfPref,
    /// Followee edges of the user, excluding herself.
    Network,
    /// All users sharing the user's region, excluding herself.
    Geography,
}

impl RelationshipKind {
    pub const ALL: [RelationshipKind; 4] = [
        RelationshipKind::World,
        RelationshipKind::SelfPref,
        RelationshipKind::Network,
        RelationshipKind::Geography,
    ];

    pub fn index(self) -> usize {
        match self {
            RelationshipKind::World => 0,
            RelationshipKind::SelfPref => 1,
            RelationshipKind::Network => 2,
            RelationshipKind::Geography => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            RelationshipKind::World => "world",
            RelationshipKind::SelfPref => "self",
            RelationshipKind::Network => "network",
            RelationshipKind::Geography => "geography",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "world" | "w" => Some(RelationshipKind::World),
            "self" | "u" | "user" => Some(RelationshipKind::SelfPref),
            "network" | "n" => Some(RelationshipKind::Network),
            "geography" | "geo" | "g" => Some(RelationshipKind::Geography),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Post {
    pub id: PostId,
    pub user: UserId,
    pub epoch: u32,
    pub tokens: Vec<VocabId>,
    pub gold_topic: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub region: RegionId,
    /// Directed followee edges: the users this user follows.
    pub followees: Vec<UserId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    /// Posts sorted non-decreasing in epoch, arrival order preserved within.
    pub posts: Vec<Post>,
    /// Dense by UserId.
    pub users: Vec<User>,
    /// Original user identifiers, dense by UserId.
    pub user_labels: Vec<String>,
    /// Original region identifiers, dense by RegionId.
    pub region_labels: Vec<String>,
    /// Members of each region, dense by RegionId.
    pub region_members: Vec<Vec<UserId>>,
    /// Reverse followee edges: followers[u] = users that follow u.
    pub followers: Vec<Vec<UserId>>,
    /// Dense vocabulary in first-seen order.
    pub vocab: Vec<String>,
    pub epoch_count: u32,
    /// Posts dropped because every token was filtered out.
    pub dropped_posts: u64,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn user_by_label(&self, label: &str) -> Option<UserId> {
        self.user_labels
            .iter()
            .position(|l| l == label)
            .map(|i| i as UserId)
    }

    /// Neighbor set N(u, R) for a relationship kind. World includes the
    /// user herself; the other kinds exclude her.
    pub fn neighbors(&self, u: UserId, kind: RelationshipKind) -> Result<Vec<UserId>> {
        if u as usize >= self.users.len() {
            return Err(Error::UnknownUser(u.to_string()));
        }
        let set = match kind {
            RelationshipKind::World => (0..self.users.len() as UserId).collect(),
            RelationshipKind::SelfPref => vec![u],
            RelationshipKind::Network => {
                let mut v = self.users[u as usize].followees.clone();
                v.sort_unstable();
                v.dedup();
                v.retain(|&x| x != u);
                v
            }
            RelationshipKind::Geography => {
                let region = self.users[u as usize].region;
                let mut v = self.region_members[region as usize].clone();
                v.retain(|&x| x != u);
                v.sort_unstable();
                v
            }
        };
        Ok(set)
    }

    pub fn write_posts<W: Write>(&self, mut w: W, epoch_length: i64, origin: i64) -> Result<()> {
        for p in &self.posts {
            let ts = origin + p.epoch as i64 * epoch_length;
            let toks: Vec<&str> = p
                .tokens
                .iter()
                .map(|&t| self.vocab[t as usize].as_str())
                .collect();
            match p.gold_topic {
                Some(g) => writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    p.id,
                    self.user_labels[p.user as usize],
                    ts,
                    toks.join(" "),
                    g
                )?,
                None => writeln!(
                    w,
                    "{}\t{}\t{}\t{}",
                    p.id,
                    self.user_labels[p.user as usize],
                    ts,
                    toks.join(" ")
                )?,
            }
        }
        Ok(())
    }

    pub fn write_users<W: Write>(&self, mut w: W) -> Result<()> {
        for u in &self.users {
            let followees: Vec<&str> = u
                .followees
                .iter()
                .map(|&f| self.user_labels[f as usize].as_str())
                .collect();
            writeln!(
                w,
                "{}\t{}\t{}",
                self.user_labels[u.id as usize],
                self.region_labels[u.region as usize],
                followees.join(",")
            )?;
        }
        Ok(())
    }
}

/// Maps a timestamp to its epoch index: floor((ts - origin) / epoch_length).
pub fn epoch_of(timestamp: i64, epoch_length: i64, origin: i64) -> Result<u32> {
    if epoch_length <= 0 {
        return Err(Error::Config(format!(
            "epoch length must be positive, got {epoch_length}"
        )));
    }
    if timestamp < origin {
        return Err(Error::Config(format!(
            "timestamp {timestamp} precedes epoch origin {origin}"
        )));
    }
    Ok(((timestamp - origin) / epoch_length) as u32)
}

#[derive(Clone, Debug)]
pub struct IngestConfig {
    /// Epoch length in seconds.
    pub epoch_length: i64,
    /// Epoch origin timestamp; defaults to the minimum post timestamp.
    pub origin: Option<i64>,
    /// Tokens seen fewer times than this across the corpus are filtered.
    pub min_token_count: u64,
    /// Map filtered tokens to a shared OOV vocabulary entry instead of dropping them.
    pub rare_to_oov: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            epoch_length: 15 * 24 * 3600,
            origin: None,
            min_token_count: 1,
            rare_to_oov: false,
        }
    }
}

#[derive(Debug)]
struct RawPost {
    id: PostId,
    user: String,
    ts: i64,
    tokens: Vec<String>,
    gold: Option<u64>,
}

#[derive(Deserialize)]
struct JsonPost {
    id: PostId,
    user: String,
    ts: i64,
    tokens: JsonTokens,
    #[serde(default)]
    gold: Option<u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonTokens {
    List(Vec<String>),
    Joined(String),
}

#[derive(Deserialize)]
struct JsonUser {
    id: String,
    region: String,
    #[serde(default)]
    followees: Vec<String>,
}

fn parse_post_line(line: &str, lineno: usize) -> Result<RawPost> {
    let line = line.trim_end_matches(['\n', '\r']);
    if line.starts_with('{') {
        let jp: JsonPost = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad JSON post record: {e}"),
        })?;
        let tokens = match jp.tokens {
            JsonTokens::List(v) => v,
            JsonTokens::Joined(s) => s.split_whitespace().map(str::to_owned).collect(),
        };
        return Ok(RawPost {
            id: jp.id,
            user: jp.user,
            ts: jp.ts,
            tokens,
            gold: jp.gold,
        });
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 4 || fields.len() > 5 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 4 or 5 tab-separated fields, got {}", fields.len()),
        });
    }
    let id: PostId = fields[0].parse().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("bad post id `{}`", fields[0]),
    })?;
    let ts: i64 = fields[2].parse().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("bad timestamp `{}`", fields[2]),
    })?;
    let gold = match fields.get(4) {
        Some(g) => Some(g.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad gold label `{g}`"),
        })?),
        None => None,
    };
    Ok(RawPost {
        id,
        user: fields[1].to_owned(),
        ts,
        tokens: fields[3].split_whitespace().map(str::to_owned).collect(),
        gold,
    })
}

fn parse_user_line(line: &str, lineno: usize) -> Result<JsonUser> {
    let line = line.trim_end_matches(['\n', '\r']);
    if line.starts_with('{') {
        return serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad JSON user record: {e}"),
        });
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
        });
    }
    let followees = if fields[2].is_empty() {
        Vec::new()
    } else {
        fields[2].split(',').map(str::to_owned).collect()
    };
    Ok(JsonUser {
        id: fields[0].to_owned(),
        region: fields[1].to_owned(),
        followees,
    })
}

/// Ingests posts and users into a Corpus with a dense vocabulary built in
/// first-seen order. Posts whose every token is filtered are dropped and
/// counted, not treated as errors.
pub fn ingest_posts<P: BufRead, U: BufRead>(
    post_stream: P,
    user_stream: U,
    config: &IngestConfig,
) -> Result<Corpus> {
    ingest_impl(post_stream, user_stream, config, None)
}

/// Ingests a held-out corpus through a frozen training vocabulary. Unknown
/// tokens map to [`OOV_TOKEN`]. Users must come from the training corpus.
pub fn ingest_heldout<P: BufRead>(
    post_stream: P,
    train: &Corpus,
    config: &IngestConfig,
) -> Result<Corpus> {
    let mut raw = Vec::new();
    for (i, line) in post_stream.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        raw.push(parse_post_line(&line, i + 1)?);
    }
    if raw.is_empty() {
        return Err(Error::Empty("held-out post stream".into()));
    }
    let vocab_index: HashMap<&str, VocabId> = train
        .vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i as VocabId))
        .collect();
    let origin = config
        .origin
        .unwrap_or_else(|| raw.iter().map(|p| p.ts).min().unwrap());
    let mut posts = Vec::with_capacity(raw.len());
    for rp in &raw {
        let user = train
            .user_by_label(&rp.user)
            .ok_or_else(|| Error::UnknownUser(rp.user.clone()))?;
        let tokens: Vec<VocabId> = rp
            .tokens
            .iter()
            .map(|t| vocab_index.get(t.as_str()).copied().unwrap_or(OOV_TOKEN))
            .collect();
        if tokens.is_empty() {
            continue;
        }
        posts.push(Post {
            id: rp.id,
            user,
            epoch: epoch_of(rp.ts, config.epoch_length, origin)?,
            tokens,
            gold_topic: rp.gold,
        });
    }
    if posts.is_empty() {
        return Err(Error::Empty("held-out set has no scorable posts".into()));
    }
    posts.sort_by_key(|p| p.epoch);
    let epoch_count = posts.last().map(|p| p.epoch + 1).unwrap_or(0);
    let mut c = train.clone();
    c.posts = posts;
    c.epoch_count = epoch_count;
    c.dropped_posts = 0;
    Ok(c)
}

fn ingest_impl<P: BufRead, U: BufRead>(
    post_stream: P,
    user_stream: U,
    config: &IngestConfig,
    _marker: Option<()>,
) -> Result<Corpus> {
    let mut raw = Vec::new();
    for (i, line) in post_stream.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        raw.push(parse_post_line(&line, i + 1)?);
    }
    if raw.is_empty() {
        return Err(Error::Empty("post stream".into()));
    }

    let mut user_labels: Vec<String> = Vec::new();
    let mut user_index: HashMap<String, UserId> = HashMap::new();
    let mut raw_users = Vec::new();
    for (i, line) in user_stream.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ju = parse_user_line(&line, i + 1)?;
        if user_index.contains_key(&ju.id) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate user id `{}`", ju.id),
            });
        }
        user_index.insert(ju.id.clone(), user_labels.len() as UserId);
        user_labels.push(ju.id.clone());
        raw_users.push(ju);
    }

    let mut region_labels: Vec<String> = Vec::new();
    let mut region_index: HashMap<String, RegionId> = HashMap::new();
    let mut users = Vec::with_capacity(raw_users.len());
    for ju in &raw_users {
        let region = *region_index.entry(ju.region.clone()).or_insert_with(|| {
            region_labels.push(ju.region.clone());
            (region_labels.len() - 1) as RegionId
        });
        let id = user_index[&ju.id];
        let mut followees = Vec::with_capacity(ju.followees.len());
        for f in &ju.followees {
            let fid = *user_index
                .get(f)
                .ok_or_else(|| Error::UnknownUser(f.clone()))?;
            if fid != id {
                followees.push(fid);
            }
        }
        followees.sort_unstable();
        followees.dedup();
        users.push(User {
            id,
            region,
            followees,
        });
    }

    // Token frequency pass for min-count filtering.
    let mut token_counts: HashMap<&str, u64> = HashMap::new();
    for rp in &raw {
        for t in &rp.tokens {
            *token_counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }

    let mut vocab: Vec<String> = Vec::new();
    let mut vocab_index: HashMap<String, VocabId> = HashMap::new();
    let mut oov_id: Option<VocabId> = None;
    let origin = config
        .origin
        .unwrap_or_else(|| raw.iter().map(|p| p.ts).min().unwrap());

    let mut posts = Vec::with_capacity(raw.len());
    let mut dropped_posts = 0u64;
    for rp in &raw {
        let user = *user_index
            .get(&rp.user)
            .ok_or_else(|| Error::UnknownUser(rp.user.clone()))?;
        let mut tokens = Vec::with_capacity(rp.tokens.len());
        for t in &rp.tokens {
            if token_counts[t.as_str()] < config.min_token_count {
                if config.rare_to_oov {
                    let id = *oov_id.get_or_insert_with(|| {
                        vocab.push("<oov>".to_owned());
                        (vocab.len() - 1) as VocabId
                    });
                    tokens.push(id);
                }
                continue;
            }
            let id = match vocab_index.get(t) {
                Some(&id) => id,
                None => {
                    let id = vocab.len() as VocabId;
                    vocab.push(t.clone());
                    vocab_index.insert(t.clone(), id);
                    id
                }
            };
            tokens.push(id);
        }
        if tokens.is_empty() {
            dropped_posts += 1;
            continue;
        }
        posts.push(Post {
            id: rp.id,
            user,
            epoch: epoch_of(rp.ts, config.epoch_length, origin)?,
            tokens,
            gold_topic: rp.gold,
        });
    }
    if posts.is_empty() {
        return Err(Error::Empty("corpus has no posts after filtering".into()));
    }

    posts.sort_by_key(|p| p.epoch);
    let epoch_count = posts.last().map(|p| p.epoch + 1).unwrap_or(0);

    let mut region_members = vec![Vec::new(); region_labels.len()];
    for u in &users {
        region_members[u.region as usize].push(u.id);
    }
    let mut followers = vec![Vec::new(); users.len()];
    for u in &users {
        for &f in &u.followees {
            followers[f as usize].push(u.id);
        }
    }

    Ok(Corpus {
        posts,
        users,
        user_labels,
        region_labels,
        region_members,
        followers,
        vocab,
        epoch_count,
        dropped_posts,
    })
}

pub fn ingest_files(posts: &Path, users: &Path, config: &IngestConfig) -> Result<Corpus> {
    let pf = std::io::BufReader::new(std::fs::File::open(posts)?);
    let uf = std::io::BufReader::new(std::fs::File::open(users)?);
    ingest_posts(pf, uf, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn tiny() -> Corpus {
        let posts = "1\ta\t0\thello world\n2\tb\t100\tworld cup\n";
        let users = "a\tIN\tb\nb\tUS\t\n";
        ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn ingest_two_records() {
        let c = tiny();
        assert_eq!(c.posts.len(), 2);
        assert_eq!(c.vocab_size(), 3); // hello, world, cup
        assert_eq!(c.users.len(), 2);
        assert_eq!(c.epoch_count, 1);
    }

    #[test]
    fn unknown_user_named_in_error() {
        let posts = "1\tzz\t0\thello\n";
        let users = "a\tIN\t\n";
        let err = ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }

    #[test]
    fn fully_filtered_post_dropped_with_counter() {
        let posts = "1\ta\t0\trare\n2\ta\t0\tcommon common\n";
        let users = "a\tIN\t\n";
        let cfg = IngestConfig {
            min_token_count: 2,
            ..Default::default()
        };
        let c = ingest_posts(Cursor::new(posts), Cursor::new(users), &cfg).unwrap();
        assert_eq!(c.posts.len(), 1);
        assert_eq!(c.dropped_posts, 1);
    }

    #[test]
    fn malformed_record_reports_line() {
        let posts = "1\ta\t0\tok\nnot-a-record\n";
        let users = "a\tIN\t\n";
        let err = ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn neighbors_selfpref_singleton() {
        let c = tiny();
        assert_eq!(c.neighbors(0, RelationshipKind::SelfPref).unwrap(), vec![0]);
        assert_eq!(c.neighbors(1, RelationshipKind::SelfPref).unwrap(), vec![1]);
    }

    #[test]
    fn neighbors_world_is_everyone() {
        let c = tiny();
        assert_eq!(c.neighbors(0, RelationshipKind::World).unwrap(), vec![0, 1]);
    }

    #[test]
    fn neighbors_network_is_followees() {
        let c = tiny();
        assert_eq!(c.neighbors(0, RelationshipKind::Network).unwrap(), vec![1]);
        assert!(c
            .neighbors(1, RelationshipKind::Network)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn neighbors_geography_excludes_self() {
        let posts = "1\tu\t0\tx\n";
        let users = "u\tA\t\nv\tA\t\nw\tB\t\n";
        let c = ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap();
        assert_eq!(
            c.neighbors(0, RelationshipKind::Geography).unwrap(),
            vec![1]
        );
        assert!(c
            .neighbors(2, RelationshipKind::Geography)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn neighbors_unknown_user_errors() {
        let c = tiny();
        assert!(c.neighbors(99, RelationshipKind::World).is_err());
    }

    #[test]
    fn epoch_boundaries() {
        assert_eq!(epoch_of(100, 10, 100).unwrap(), 0);
        assert_eq!(epoch_of(120, 10, 100).unwrap(), 2);
        assert_eq!(epoch_of(109, 10, 100).unwrap(), 0);
        assert!(epoch_of(99, 10, 100).is_err());
    }

    #[test]
    fn jsonl_records_accepted() {
        let posts = r#"{"id":1,"user":"a","ts":0,"tokens":["hi","there"]}
{"id":2,"user":"b","ts":5,"tokens":"hi again","gold":3}
"#;
        let users = r#"{"id":"a","region":"IN","followees":["b"]}
{"id":"b","region":"US"}
"#;
        let c = ingest_posts(
            Cursor::new(posts),
            Cursor::new(users),
            &IngestConfig::default(),
        )
        .unwrap();
        assert_eq!(c.posts.len(), 2);
        assert_eq!(c.posts[1].gold_topic, Some(3));
        assert_eq!(c.users[0].followees, vec![1]);
    }

    #[test]
    fn roundtrip_through_files() {
        let c = tiny();
        let mut pbuf = Vec::new();
        let mut ubuf = Vec::new();
        c.write_posts(&mut pbuf, 3600, 0).unwrap();
        c.write_users(&mut ubuf).unwrap();
        let cfg = IngestConfig {
            epoch_length: 3600,
            origin: Some(0),
            ..Default::default()
        };
        let c2 = ingest_posts(Cursor::new(pbuf), Cursor::new(ubuf), &cfg).unwrap();
        assert_eq!(c2.posts.len(), c.posts.len());
        assert_eq!(c2.vocab, c.vocab);
        for (a, b) in c.posts.iter().zip(c2.posts.iter()) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.user, b.user);
        }
    }
}

//! Command-line front end: generate / fit / eval / trends / predict / bench.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use relcrp::corpus::{ingest_files, ingest_heldout, Corpus, IngestConfig, RelationshipKind};
use relcrp::error::Error;
use relcrp::eval::{
    clustering_scores, detect_major_events, knn_predict, perplexity, personality_trends,
    topic_character, topic_trends, FeatureRecord, TrendMatrix,
};
use relcrp::generator::{disjoint_seed_topics, generate, GenConfig};
use relcrp::model::Assignment;
use relcrp::sampler::FitOutcome;
use relcrp::stats::{load_checkpoint, save_checkpoint, Hyperparams};

#[derive(Parser)]
#[command(
    name = "relcrp",
    version,
    about = "Relational CRP topic models for social streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground truth.
    Generate(GenerateArgs),
    /// Fit a model to a post stream.
    Fit(FitArgs),
    /// Score a fitted model: held-out perplexity, optional clustering.
    Eval(EvalArgs),
    /// Export topic / personality / topic-character trend matrices.
    Trends(TrendsArgs),
    /// Topic prediction harness over a fitted model.
    Predict(PredictArgs),
    /// Per-post latency as the stream grows.
    Bench(BenchArgs),
}

/// Model hyperparameters, shared by every subcommand that builds a model.
/// Flags override values from `--config`; unset fields take the defaults
/// (all concentrations 0.1, λ=1, Δ=3, all factors, dynamic).
#[derive(Args, Serialize)]
struct HyperFlags {
    /// JSON file with a full hyperparameter block.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Concentration for the World factor slot.
    #[arg(long = "alpha-w")]
    alpha_w: Option<f64>,
    /// Concentration for the SelfPref factor slot.
    #[arg(long = "alpha-u")]
    alpha_u: Option<f64>,
    /// Concentration for the Network factor slot.
    #[arg(long = "alpha-n")]
    alpha_n: Option<f64>,
    /// Concentration for the Geography factor slot.
    #[arg(long = "alpha-g")]
    alpha_g: Option<f64>,
    /// New-topic mass in the topic conditional.
    #[arg(long = "alpha-new")]
    alpha_new: Option<f64>,
    /// Topic-word smoothing.
    #[arg(long)]
    beta: Option<f64>,
    /// Decay scale of historical counts.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of past epochs kept in the decay window.
    #[arg(long)]
    delta: Option<u32>,
    /// Comma-separated subset of world,selfpref,network,geography.
    #[arg(long)]
    factors: Option<String>,
    /// Disable epoch dynamics: one pooled model, no decay terms.
    #[arg(long = "static")]
    static_mode: bool,
}

impl HyperFlags {
    fn resolve(&self) -> Result<Hyperparams, Error> {
        let mut h = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str::<Hyperparams>(&text)?
            }
            None => Hyperparams::default(),
        };
        for (slot, val) in [
            (RelationshipKind::World, self.alpha_w),
            (RelationshipKind::SelfPref, self.alpha_u),
            (RelationshipKind::Network, self.alpha_n),
            (RelationshipKind::Geography, self.alpha_g),
        ] {
            if let Some(v) = val {
                h.alpha[slot.index()] = v;
            }
        }
        if let Some(v) = self.alpha_new {
            h.alpha_new = v;
        }
        if let Some(v) = self.beta {
            h.beta = v;
        }
        if let Some(v) = self.lambda {
            h.lambda = v;
        }
        if let Some(v) = self.delta {
            h.delta_max = v as usize;
        }
        if let Some(spec) = &self.factors {
            let mut factors = Vec::new();
            for part in spec.split(',').filter(|s| !s.trim().is_empty()) {
                factors.push(
                    RelationshipKind::parse(part.trim())
                        .ok_or_else(|| Error::Config(format!("unknown factor `{part}`")))?,
                );
            }
            h.enabled_factors = factors;
        }
        if self.static_mode {
            h.dynamic = false;
        }
        h.validate()?;
        Ok(h)
    }
}

#[derive(Args, Serialize)]
struct CorpusFlags {
    /// Post stream, TSV or JSONL (detected per line).
    #[arg(long)]
    posts: PathBuf,
    /// User table: user_id, region, comma-separated followees.
    #[arg(long = "users-file")]
    users_file: PathBuf,
    /// Epoch length in seconds.
    #[arg(long = "epoch-length", default_value_t = 15 * 24 * 3600)]
    epoch_length: i64,
    /// Epoch origin timestamp; defaults to the earliest post.
    #[arg(long)]
    origin: Option<i64>,
    /// Drop tokens seen fewer than this many times.
    #[arg(long = "min-token-count", default_value_t = 1)]
    min_token_count: u64,
}

impl CorpusFlags {
    fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            epoch_length: self.epoch_length,
            origin: self.origin,
            min_token_count: self.min_token_count,
            rare_to_oov: false,
        }
    }

    fn load(&self) -> Result<Corpus, Error> {
        ingest_files(&self.posts, &self.users_file, &self.ingest_config())
    }
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[arg(long, default_value_t = 50)]
    users: usize,
    #[arg(long, default_value_t = 5)]
    regions: usize,
    #[arg(long, default_value_t = 3)]
    epochs: u32,
    /// Posts generated per epoch.
    #[arg(long = "posts-per-epoch", default_value_t = 2000)]
    posts_per_epoch: usize,
    #[arg(long = "vocab", default_value_t = 500)]
    vocab: usize,
    /// Number of disjoint-vocabulary seed topics (0 = none).
    #[arg(long = "seed-topics", default_value_t = 10)]
    seed_topics: usize,
    /// Mean followee count in the random user graph.
    #[arg(long = "mean-degree", default_value_t = 4.0)]
    mean_degree: f64,
    #[arg(long = "tokens-min", default_value_t = 5)]
    tokens_min: usize,
    #[arg(long = "tokens-max", default_value_t = 15)]
    tokens_max: usize,
    /// Epoch length written into post timestamps, in seconds.
    #[arg(long = "epoch-length", default_value_t = 15 * 24 * 3600)]
    epoch_length: i64,
    #[command(flatten)]
    hyper: HyperFlags,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    corpus: CorpusFlags,
    #[command(flatten)]
    hyper: HyperFlags,
    /// sequential | parallel
    #[arg(long, default_value = "sequential")]
    mode: String,
    /// Mini-batch size.
    #[arg(long, default_value_t = 35000)]
    batch: usize,
    /// Gibbs sweeps per batch.
    #[arg(long, default_value_t = 100)]
    sweeps: usize,
    /// Worker threads for --mode parallel.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Fitted model checkpoint (model.json from `fit`).
    #[arg(long)]
    model: PathBuf,
    /// Training corpus posts (to rebuild the vocabulary and user graph).
    #[command(flatten)]
    corpus: CorpusFlags,
    /// Held-out post stream mapped through the training vocabulary.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Score fitted topic labels against gold labels in the post stream.
    #[arg(long)]
    gold: bool,
    /// Assignments file from `fit` (needed with --gold).
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrendsArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusFlags,
    /// Restrict to these user labels (comma-separated); default all.
    #[arg(long)]
    users: Option<String>,
    /// Also emit the factor-mix matrix for this topic id.
    #[arg(long)]
    topic: Option<u64>,
    /// Major-event share threshold.
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    /// csv | json
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusFlags,
    /// Assignments file from `fit`.
    #[arg(long)]
    assignments: PathBuf,
    /// Nearest neighbours considered.
    #[arg(long, default_value_t = 5)]
    knn: usize,
    /// Use gold labels instead of fitted assignments as targets.
    #[arg(long)]
    gold: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Total synthetic posts.
    #[arg(long, default_value_t = 100_000)]
    posts: usize,
    /// Measurement points along the stream.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Comma-separated worker counts to compare.
    #[arg(long, default_value = "1,4")]
    workers: String,
    #[arg(long, default_value_t = 2000)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    sweeps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Reproducibility record: resolved config, seed, input digests.
fn write_manifest<C: Serialize>(
    out: &Path,
    command: &str,
    config: &C,
    seed: Option<u64>,
    inputs: &[&Path],
) -> Result<(), Error> {
    let mut digests = BTreeMap::new();
    for path in inputs {
        digests.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = serde_json::json!({
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": digests,
    });
    let file = File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> Result<(), Error> {
    let hyper = args.hyper.resolve()?;
    let config = GenConfig {
        users: args.users,
        regions: args.regions,
        mean_degree: args.mean_degree,
        edges: None,
        seed_plan: None,
        seed_epochs: None,
        epochs: args.epochs,
        posts_per_epoch: args.posts_per_epoch,
        tokens_min: args.tokens_min,
        tokens_max: args.tokens_max,
        vocab_size: args.vocab,
        hyper,
        seed_topics: if args.seed_topics > 0 {
            Some(disjoint_seed_topics(args.seed_topics, args.vocab))
        } else {
            None
        },
        seed_boost: 1,
    };
    let (corpus, truth) = generate(&config, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let posts_path = args.out.join("posts.tsv");
    let users_path = args.out.join("users.tsv");
    corpus.write_posts(
        BufWriter::new(File::create(&posts_path)?),
        args.epoch_length,
        0,
    )?;
    corpus.write_users(BufWriter::new(File::create(&users_path)?))?;
    write_json(&args.out.join("truth.json"), &truth)?;
    write_json(&args.out.join("config.json"), &config)?;
    write_manifest(&args.out, "generate", &config, Some(args.seed), &[])?;
    log::info!(
        "generated {} posts over {} epochs into {}",
        corpus.posts.len(),
        args.epochs,
        args.out.display()
    );
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<(), Error> {
    let hyper = args.hyper.resolve()?;
    let corpus = args.corpus.load()?;
    let started = Instant::now();
    let outcome: FitOutcome = match args.mode.as_str() {
        "sequential" => relcrp::sampler::fit_sequential(
            &corpus,
            hyper.clone(),
            args.batch,
            args.sweeps,
            args.seed,
        )?,
        "parallel" => relcrp::parallel::fit_parallel(
            &corpus,
            hyper.clone(),
            args.workers,
            args.batch,
            args.sweeps,
            args.seed,
        )?
        .into(),
        other => return Err(Error::Config(format!("unknown mode `{other}`"))),
    };
    fs::create_dir_all(&args.out)?;
    save_checkpoint(&outcome.state, &args.out.join("model.json"))?;
    write_json(&args.out.join("assignments.json"), &outcome.assignments)?;
    let echo = serde_json::json!({
        "hyper": hyper,
        "mode": args.mode,
        "batch": args.batch,
        "sweeps": args.sweeps,
        "workers": if args.mode == "parallel" { Some(args.workers) } else { None },
        "epoch_length": args.corpus.epoch_length,
        "posts": corpus.posts.len(),
        "vocabulary": corpus.vocab.len(),
        "topics": outcome.state.topics.live_count(),
        "wall_ms": started.elapsed().as_millis() as u64,
    });
    write_json(&args.out.join("config.json"), &echo)?;
    write_manifest(
        &args.out,
        "fit",
        &echo,
        Some(args.seed),
        &[&args.corpus.posts, &args.corpus.users_file],
    )?;
    log::info!(
        "fit {} posts, {} live topics, {} ms",
        corpus.posts.len(),
        outcome.state.topics.live_count(),
        started.elapsed().as_millis()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), Error> {
    let corpus = args.corpus.load()?;
    let state = load_checkpoint(&args.model)?;
    fs::create_dir_all(&args.out)?;
    let mut inputs: Vec<&Path> = vec![&args.model, &args.corpus.posts, &args.corpus.users_file];

    if let Some(heldout_path) = &args.heldout {
        let heldout = ingest_heldout(
            std::io::BufReader::new(File::open(heldout_path)?),
            &corpus,
            &args.corpus.ingest_config(),
        )?;
        let report = perplexity(&state, &corpus, &heldout.posts)?;
        write_json(&args.out.join("perplexity.json"), &report)?;
        log::info!(
            "perplexity {:.2} over {} tokens",
            report.perplexity,
            report.tokens
        );
        inputs.push(heldout_path);
    }

    if args.gold {
        let assignments_path = args
            .assignments
            .as_ref()
            .ok_or_else(|| Error::Config("--gold needs --assignments".into()))?;
        let text = fs::read_to_string(assignments_path)?;
        let assignments: Vec<Assignment> = serde_json::from_str(&text)?;
        let gold: Vec<u64> = corpus
            .posts
            .iter()
            .map(|p| {
                p.gold_topic
                    .ok_or_else(|| Error::Config("post stream has no gold labels".into()))
            })
            .collect::<Result<_, _>>()?;
        if assignments.len() != gold.len() {
            return Err(Error::Config(
                "assignments do not match the post stream".into(),
            ));
        }
        let pred: Vec<u64> = assignments.iter().map(|a| a.z).collect();
        let scores = clustering_scores(&pred, &gold)?;
        write_json(&args.out.join("clustering.json"), &scores)?;
        log::info!(
            "nmi {:.3} rand {:.3} pair_f1 {:.3}",
            scores.nmi,
            scores.rand_index,
            scores.pair_f1
        );
        inputs.push(assignments_path);
    }
    write_manifest(&args.out, "eval", &args, None, &inputs)?;
    Ok(())
}

fn write_matrix(out: &Path, stem: &str, format: &str, m: &TrendMatrix) -> Result<(), Error> {
    match format {
        "csv" => {
            let file = File::create(out.join(format!("{stem}.csv")))?;
            m.write_csv(BufWriter::new(file))?;
        }
        "json" => write_json(&out.join(format!("{stem}.json")), m)?,
        other => return Err(Error::Config(format!("unknown format `{other}`"))),
    }
    Ok(())
}

fn run_trends(args: &TrendsArgs) -> Result<(), Error> {
    let corpus = args.corpus.load()?;
    let state = load_checkpoint(&args.model)?;
    let users: Vec<u32> = match &args.users {
        Some(spec) => spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|label| {
                corpus
                    .user_by_label(label.trim())
                    .ok_or_else(|| Error::UnknownUser(label.trim().to_string()))
            })
            .collect::<Result<_, _>>()?,
        None => corpus.users.iter().map(|u| u.id).collect(),
    };
    fs::create_dir_all(&args.out)?;
    let topics = topic_trends(&state, &users)?;
    write_matrix(&args.out, "topic_trends", &args.format, &topics)?;
    let personality = personality_trends(&state, &users)?;
    write_matrix(&args.out, "personality_trends", &args.format, &personality)?;
    if let Some(k) = args.topic {
        let character = topic_character(&state, k);
        write_matrix(
            &args.out,
            &format!("topic_{k}_character"),
            &args.format,
            &character,
        )?;
    }
    let events = detect_major_events(&topics, args.threshold);
    write_json(&args.out.join("events.json"), &events)?;
    write_manifest(
        &args.out,
        "trends",
        &args,
        None,
        &[&args.model, &args.corpus.posts, &args.corpus.users_file],
    )?;
    log::info!(
        "{} event flags at threshold {}",
        events.len(),
        args.threshold
    );
    Ok(())
}

/// Posting-prediction harness: each post becomes a feature record (its
/// smoothed token distribution, its epoch index, its topic label); posts
/// in the last epoch are queries against all earlier posts.
fn run_predict(args: &PredictArgs) -> Result<(), Error> {
    let corpus = args.corpus.load()?;
    let state = load_checkpoint(&args.model)?;
    let text = fs::read_to_string(&args.assignments)?;
    let assignments: Vec<Assignment> = serde_json::from_str(&text)?;
    if assignments.len() != corpus.posts.len() {
        return Err(Error::Config(
            "assignments do not match the post stream".into(),
        ));
    }
    let beta = state.hyper.beta;
    let v = corpus.vocab.len();
    let record = |i: usize| -> Result<FeatureRecord, Error> {
        let post = &corpus.posts[i];
        let label = if args.gold {
            post.gold_topic
                .ok_or_else(|| Error::Config("post stream has no gold labels".into()))?
        } else {
            assignments[i].z
        };
        let mut phi = vec![beta; v];
        for &t in &post.tokens {
            if (t as usize) < v {
                phi[t as usize] += 1.0;
            }
        }
        let total: f64 = phi.iter().sum();
        phi.iter_mut().for_each(|x| *x /= total);
        Ok(FeatureRecord {
            phi,
            day: post.epoch as f64,
            interactions: None,
            label,
        })
    };
    let last_epoch = corpus.posts.iter().map(|p| p.epoch).max().unwrap_or(0);
    let mut training = Vec::new();
    let mut queries = Vec::new();
    for i in 0..corpus.posts.len() {
        if corpus.posts[i].epoch == last_epoch {
            queries.push(record(i)?);
        } else {
            training.push(record(i)?);
        }
    }
    if training.is_empty() || queries.is_empty() {
        return Err(Error::Config(
            "need at least two epochs of posts to split".into(),
        ));
    }
    let mut correct = 0usize;
    for q in &queries {
        if knn_predict(q, &training, args.knn)? == q.label {
            correct += 1;
        }
    }
    let report = serde_json::json!({
        "queries": queries.len(),
        "training": training.len(),
        "k": args.knn,
        "correct": correct,
        "accuracy": correct as f64 / queries.len() as f64,
        "target": if args.gold { "gold" } else { "fitted" },
    });
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("prediction.json"), &report)?;
    write_manifest(
        &args.out,
        "predict",
        &args,
        None,
        &[
            &args.model,
            &args.corpus.posts,
            &args.corpus.users_file,
            &args.assignments,
        ],
    )?;
    log::info!(
        "prediction accuracy {:.3} over {} queries",
        correct as f64 / queries.len() as f64,
        queries.len()
    );
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<(), Error> {
    let worker_counts: Vec<usize> = args
        .workers
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad worker count `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if worker_counts.is_empty() || args.steps == 0 {
        return Err(Error::Config(
            "need at least one worker count and one step".into(),
        ));
    }
    let config = GenConfig {
        users: 200,
        regions: 10,
        epochs: 1,
        posts_per_epoch: args.posts,
        vocab_size: 1000,
        seed_topics: Some(disjoint_seed_topics(20, 1000)),
        ..Default::default()
    };
    let (corpus, _) = generate(&config, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let mut rows = Vec::new();
    for &workers in &worker_counts {
        for step in 1..=args.steps {
            let n = args.posts * step / args.steps;
            let mut prefix = corpus.clone();
            prefix.posts.truncate(n);
            let started = Instant::now();
            if workers == 1 {
                relcrp::sampler::fit_sequential(
                    &prefix,
                    config.hyper.clone(),
                    args.batch,
                    args.sweeps,
                    args.seed,
                )?;
            } else {
                relcrp::parallel::fit_parallel(
                    &prefix,
                    config.hyper.clone(),
                    workers,
                    args.batch,
                    args.sweeps,
                    args.seed,
                )?;
            }
            let elapsed = started.elapsed();
            let per_post_us = elapsed.as_micros() as f64 / n as f64;
            log::info!("workers {workers}, {n} posts: {per_post_us:.1} us/post");
            rows.push(serde_json::json!({
                "workers": workers,
                "posts": n,
                "wall_ms": elapsed.as_millis() as u64,
                "per_post_us": per_post_us,
            }));
        }
    }
    write_json(&args.out.join("bench.json"), &serde_json::json!(rows))?;
    let mut csv = BufWriter::new(File::create(args.out.join("bench.csv"))?);
    writeln!(csv, "workers,posts,wall_ms,per_post_us")?;
    for row in &rows {
        writeln!(
            csv,
            "{},{},{},{}",
            row["workers"], row["posts"], row["wall_ms"], row["per_post_us"]
        )?;
    }
    write_manifest(&args.out, "bench", &args, Some(args.seed), &[])?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELCRP_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => run_generate(args),
        Command::Fit(args) => run_fit(args),
        Command::Eval(args) => run_eval(args),
        Command::Trends(args) => run_trends(args),
        Command::Predict(args) => run_predict(args),
        Command::Bench(args) => run_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::UnknownUser(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

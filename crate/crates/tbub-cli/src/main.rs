//! `tbub`: train, score, sample, and analyze stream-forking language models.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tbub_core::analysis;
use tbub_core::checkpoint::{self, Checkpoint};
use tbub_core::data::{self, TokenStore, Tokenizer};
use tbub_core::forking::StreamMeta;
use tbub_core::infer::{self, BudgetMode, BudgetPolicy, Protocol, Sampler};
use tbub_core::model::{gradcheck, Model, ModelConfig, Variant};
use tbub_core::trace::TraceRecord;
use tbub_core::train::{self, Resume};

#[derive(Parser)]
#[command(name = "tbub", version, about = "Stream-forking language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a text file (or generate the synthetic lookup corpus) into a
    /// binary token store.
    Ingest(IngestArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Score a sequence: per-token log-probs, NLL, perplexity.
    Score(ScoreArgs),
    /// Sample tokens autoregressively from a checkpoint.
    Generate(GenerateArgs),
    /// Run a zero-shot evaluation protocol over a JSON-lines task file.
    Eval(EvalArgs),
    /// Produce analysis artifacts (CSV/SVG) from checkpoints or saved traces.
    Analyze(AnalyzeArgs),
    /// Verify model gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a reference-oracle comparison suite.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Input text file.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Document delimiter (kept in the stream; each document gets a bos).
    #[arg(long, default_value = "\n\n")]
    delim: String,
    /// Generate N synthetic lookup samples instead of reading a file.
    #[arg(long)]
    lookup: Option<usize>,
    /// Pairs per lookup sample.
    #[arg(long, default_value_t = 6)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write lookup span metadata (JSON lines).
    #[arg(long)]
    spans: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override any config key (repeatable): --set train.total_steps=100
    #[arg(long = "set", value_parser = parse_kv)]
    sets: Vec<(String, String)>,
    /// Master seed overriding model.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Text to score (bytes become tokens).
    #[arg(long)]
    text: Option<String>,
    /// Comma-separated token ids to score.
    #[arg(long)]
    tokens: Option<String>,
    #[arg(long, default_value = "dynamic")]
    budget: String,
    /// Write per-token log-probs as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the fork trace (JSON lines) here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    #[arg(long = "top-p", default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "dynamic")]
    budget: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    protocol: String,
    #[arg(long, default_value = "dynamic")]
    budget: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// entropy | attention | forkmap | overfork
    #[arg(long)]
    kind: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Saved trace to re-analyze instead of running the model.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Token store providing the corpus sample.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Baseline checkpoint supplying surrogate entropies.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
    /// Blocks of the corpus to trace.
    #[arg(long, default_value_t = 16)]
    blocks: usize,
    /// Lookup span metadata for the fork-location contrast.
    #[arg(long = "lookup-spans")]
    lookup_spans: Option<PathBuf>,
    /// Run configuration for the overfork ablation.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_parser = parse_kv)]
    sets: Vec<(String, String)>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run configuration; defaults to the reduced check topology
    /// (6 layers, forking before 2 and 4, d=8, L=4, kappa=8, vocab 11).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_parser = parse_kv)]
    sets: Vec<(String, String)>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Args)]
struct OracleArgs {
    /// topk | logsumexp | rope
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn main() -> ExitCode {
    let threads: usize = std::env::var("TBUB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn budget_of(s: &str, model: &Model) -> Result<BudgetPolicy> {
    let mode = match s {
        "fixed" => BudgetMode::Fixed,
        "dynamic" => BudgetMode::Dynamic,
        other => bail!("budget must be fixed|dynamic, got `{other}`"),
    };
    Ok(BudgetPolicy::new(mode, model))
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt))
}

fn text_to_tokens(text: &str) -> Vec<usize> {
    text.as_bytes().iter().map(|&b| b as usize).collect()
}

fn cmd_ingest(a: IngestArgs) -> Result<ExitCode> {
    if let Some(n) = a.lookup {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut ids: Vec<u32> = Vec::new();
        let mut spans = Vec::new();
        for _ in 0..n {
            let sample = data::gen_lookup_task(a.pairs, &mut rng);
            let offset = ids.len() + 1; // the sample's bytes start after bos
            ids.push(data::BOS as u32);
            ids.extend(sample.bytes.iter().map(|&b| b as u32));
            spans.push(serde_json::json!({
                "offset": offset,
                "query_start": offset + sample.query_span.0,
                "query_end": offset + sample.query_span.1,
                "answer_pos": offset + sample.answer_pos,
            }));
        }
        let store = TokenStore {
            vocab_size: data::VOCAB_SIZE as u32,
            ids,
        };
        store.save(&a.out)?;
        if let Some(spath) = &a.spans {
            let mut f = std::fs::File::create(spath)?;
            for s in &spans {
                writeln!(f, "{s}")?;
            }
        }
        println!(
            "lookup corpus: {} samples, {} tokens -> {}",
            n,
            store.count(),
            a.out.display()
        );
        return Ok(ExitCode::SUCCESS);
    }
    let input = a
        .input
        .ok_or_else(|| anyhow!("either --in or --lookup is required"))?;
    let delim = if a.delim.is_empty() {
        None
    } else {
        Some(a.delim.as_bytes())
    };
    let store = data::ingest(&input, &a.out, delim)?;
    println!("{} tokens -> {}", store.count(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn resolved_config(
    file: Option<&Path>,
    sets: &[(String, String)],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut rc = RunConfig::resolve(file, sets)?;
    if let Some(s) = seed {
        rc.set_seed(s);
    }
    Ok(rc)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut sets = a.sets.clone();
    if let Some(d) = &a.data {
        sets.push(("data.train".into(), d.display().to_string()));
    }
    if let Some(v) = &a.val {
        sets.push(("data.val".into(), v.display().to_string()));
    }
    if let Some(o) = &a.out {
        sets.push(("out.dir".into(), o.display().to_string()));
    }
    let rc = resolved_config(a.config.as_deref(), &sets, a.seed)?;
    print!("{}", rc.echo());
    let tcfg = rc.train_config()?;
    let train_path = rc.get("data.train");
    if train_path.is_empty() {
        bail!("data.train is required (token store path)");
    }
    let store = TokenStore::load(Path::new(train_path))?;
    let val = match rc.get("data.val") {
        "" => None,
        p => Some(TokenStore::load(Path::new(p))?),
    };
    let (mut model, resume) = match &a.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let model = ckpt.to_model()?;
            let opt = ckpt
                .opt
                .clone()
                .ok_or_else(|| anyhow!("checkpoint has no optimizer state to resume from"))?;
            println!("resuming from step {}", opt.step);
            (
                model,
                Some(Resume {
                    opt,
                    rng: ckpt.rng,
                }),
            )
        }
        None => (Model::init(rc.model_config()?)?, None),
    };
    let report = train::train(
        &mut model,
        &store,
        val.as_ref(),
        &tcfg,
        &rc.out_dir(),
        resume,
        &rc.values,
    )?;
    println!(
        "trained {} steps; final train loss {:?}; last checkpoint {}",
        report.steps_run,
        report.final_train_loss,
        report.last_checkpoint.display()
    );
    for (step, v) in &report.val_losses {
        println!("val step {step}: loss {v}");
    }
    Ok(ExitCode::SUCCESS)
}

fn score_tokens_arg(a: &ScoreArgs) -> Result<Vec<usize>> {
    match (&a.text, &a.tokens) {
        (Some(t), None) => Ok(text_to_tokens(t)),
        (None, Some(ids)) => ids
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| anyhow!("bad token id `{s}`: {e}"))
            })
            .collect(),
        _ => bail!("exactly one of --text or --tokens is required"),
    }
}

fn cmd_score(a: ScoreArgs) -> Result<ExitCode> {
    let (model, ckpt) = load_model(&a.ckpt)?;
    let policy = budget_of(&a.budget, &model)?;
    let tokens = score_tokens_arg(&a)?;
    let out = infer::score_sequence(&model, &tokens, &policy)?;
    if let Some(csv) = &a.csv {
        let f = std::fs::File::create(csv)?;
        infer::write_logprobs_csv(f, &tokens, &out.per_token)?;
    }
    if let Some(tpath) = &a.trace {
        let mut records = vec![TraceRecord::Header {
            run: ckpt.run.clone(),
        }];
        for (i, t) in out.traces.iter().enumerate() {
            records.push(TraceRecord::Block { index: i });
            for ev in &t.fork_events {
                records.push(TraceRecord::ForkEvent(ev.clone()));
            }
        }
        tbub_core::trace::write_records(std::fs::File::create(tpath)?, &records)?;
    }
    println!("tokens: {}", tokens.len());
    println!("total_nll: {}", out.total_nll);
    println!("perplexity: {}", out.perplexity);
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(a: GenerateArgs) -> Result<ExitCode> {
    let (model, _) = load_model(&a.ckpt)?;
    let policy = budget_of(&a.budget, &model)?;
    let mut prompt = vec![data::BOS];
    prompt.extend(text_to_tokens(&a.prompt));
    let sampler = Sampler {
        temperature: a.temp,
        top_p: a.top_p,
    };
    let out = infer::generate(&model, &prompt, a.n, &policy, &sampler, a.seed)?;
    let tok = data::ByteTokenizer;
    let bytes = tok.decode(&out.iter().map(|&t| t as u32).collect::<Vec<u32>>());
    println!("{}", String::from_utf8_lossy(&bytes));
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let (model, _) = load_model(&a.ckpt)?;
    let policy = budget_of(&a.budget, &model)?;
    let protocol: Protocol = a.protocol.parse()?;
    let out = infer::eval_protocols(&model, &a.task, protocol, &policy)?;
    for e in &out.errors {
        eprintln!("skipped: {e}");
    }
    println!(
        "total: {} correct: {} skipped: {} ties: {}",
        out.total, out.correct, out.skipped, out.ties
    );
    println!("accuracy: {}", out.accuracy());
    Ok(ExitCode::SUCCESS)
}

fn load_corpus_tokens(path: &Path, limit: usize) -> Result<Vec<usize>> {
    let store = TokenStore::load(path)?;
    Ok(store
        .ids
        .iter()
        .take(limit)
        .map(|&t| t as usize)
        .collect())
}

fn trace_records_for(
    a: &AnalyzeArgs,
    probe_attention: bool,
) -> Result<(Vec<TraceRecord>, Option<Model>)> {
    if let Some(tpath) = &a.trace {
        let f = std::fs::File::open(tpath)?;
        return Ok((
            tbub_core::trace::read_records(std::io::BufReader::new(f))?,
            None,
        ));
    }
    let ckpt = a
        .ckpt
        .as_ref()
        .ok_or_else(|| anyhow!("--ckpt or --trace is required"))?;
    let (model, _) = load_model(ckpt)?;
    let data_path = a
        .data
        .as_ref()
        .ok_or_else(|| anyhow!("--data (token store) is required to run the model"))?;
    let tokens = load_corpus_tokens(data_path, a.blocks * model.cfg.block_size)?;
    let records = analysis::run_corpus_trace(&model, &tokens, a.blocks, probe_attention)?;
    Ok((records, Some(model)))
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    std::fs::create_dir_all(&a.out)?;
    match a.kind.as_str() {
        "entropy" => {
            let (records, model) = trace_records_for(&a, false)?;
            let n_tokens = records
                .iter()
                .filter(|r| matches!(r, TraceRecord::Token { .. }))
                .count();
            if n_tokens < analysis::MIN_SAMPLE_TOKENS {
                bail!(
                    "entropy analysis needs at least {} tokens, got {n_tokens} \
                     (raise --blocks or supply a larger corpus)",
                    analysis::MIN_SAMPLE_TOKENS
                );
            }
            let surrogate_records = match (&a.surrogate, &model, &a.data) {
                (Some(spath), Some(m), Some(dpath)) => {
                    let (sm, _) = load_model(spath)?;
                    let tokens = load_corpus_tokens(dpath, a.blocks * m.cfg.block_size)?;
                    Some(analysis::run_corpus_trace(&sm, &tokens, a.blocks, false)?)
                }
                _ => None,
            };
            let curve = analysis::entropy_fork_curve(
                &records,
                surrogate_records.as_deref(),
                analysis::ENTROPY_WINDOW,
            )?;
            std::fs::write(a.out.join("entropy_trace.jsonl"), {
                let mut buf = Vec::new();
                tbub_core::trace::write_records(&mut buf, &records)?;
                buf
            })?;
            std::fs::write(a.out.join("entropy_curve.csv"), analysis::curve_csv(&curve))?;
            std::fs::write(
                a.out.join("entropy_curve.svg"),
                analysis::curve_svg(&curve, "final-layer forks vs posterior entropy"),
            )?;
            println!(
                "windows: {} buckets kept: {}",
                curve.points.len(),
                curve.buckets.len()
            );
        }
        "attention" => {
            let (records, _) = trace_records_for(&a, true)?;
            let cats = analysis::parent_child_attention(&records)?;
            std::fs::write(a.out.join("attention_categories.csv"), cats.csv())?;
            std::fs::write(a.out.join("attention_trace.jsonl"), {
                let mut buf = Vec::new();
                tbub_core::trace::write_records(&mut buf, &records)?;
                buf
            })?;
            for cat in analysis::ATTN_CATEGORIES {
                match cats.mean(cat) {
                    Some(m) => println!("{cat}: {m}"),
                    None => println!("{cat}: (no pairs)"),
                }
            }
        }
        "forkmap" => {
            let (records, model) = trace_records_for(&a, false)?;
            let (fork_layers, tokens) = match &model {
                Some(m) => (m.cfg.fork_layers.clone(), m.cfg.block_size),
                None => {
                    // infer the shape from the records
                    let mut layers = std::collections::BTreeSet::new();
                    let mut max_tok = 0usize;
                    for r in &records {
                        if let TraceRecord::ForkEvent(ev) = r {
                            layers.insert(ev.layer);
                            max_tok = max_tok.max(ev.token_index + 1);
                        }
                    }
                    (layers.into_iter().collect(), max_tok)
                }
            };
            let map = analysis::fork_location_map(&records, &fork_layers, tokens);
            std::fs::write(a.out.join("forkmap.csv"), map.csv())?;
            std::fs::write(
                a.out.join("forkmap.svg"),
                analysis::forkmap_svg(&map, "forks per layer and token"),
            )?;
            if let Some(spans_path) = &a.lookup_spans {
                let text = std::fs::read_to_string(spans_path)?;
                let mut span_positions = Vec::new();
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let v: serde_json::Value = serde_json::from_str(line)?;
                    let qs = v["query_start"].as_u64().unwrap_or(0) as usize;
                    let ap = v["answer_pos"].as_u64().unwrap_or(0) as usize;
                    for p in qs..=ap {
                        if p < tokens {
                            span_positions.push(p);
                        }
                    }
                }
                let (span_mean, filler_mean) = analysis::span_fork_contrast(&map, &span_positions);
                println!("query/answer span mean forks: {span_mean}");
                println!("filler span mean forks: {filler_mean}");
            }
            println!("fork map written for layers {fork_layers:?}");
        }
        "overfork" => {
            let rc = resolved_config(a.config.as_deref(), &a.sets, None)?;
            print!("{}", rc.echo());
            let base = rc.model_config()?;
            let tcfg = rc.train_config()?;
            let data_path = a
                .data
                .as_ref()
                .ok_or_else(|| anyhow!("--data (token store) required for overfork"))?;
            let store = TokenStore::load(data_path)?;
            let val_tokens: Vec<usize> = store
                .ids
                .iter()
                .take(4 * base.block_size)
                .map(|&t| t as usize)
                .collect();
            let report = analysis::overfork_ablation(&base, &tcfg, &store, &val_tokens, &a.out)?;
            println!(
                "early {:?}: val ppl {}",
                report.early_layers, report.early_val_ppl
            );
            println!(
                "extended {:?}: val ppl {}",
                report.extended_layers, report.extended_val_ppl
            );
            println!("early utilization: {:?}", report.early_utilization);
            println!("extended utilization: {:?}", report.extended_utilization);
        }
        other => bail!("unknown analysis kind `{other}`"),
    }
    Ok(ExitCode::SUCCESS)
}

/// The reduced topology used for gradient verification.
fn gradcheck_default_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 6,
        n_heads: 2,
        d_model: 8,
        block_size: 4,
        kappa: 8,
        fork_layers: vec![2, 4],
        variant: Variant::Ours,
        vocab_size: 11,
        theta_base: 10000.0,
        seed: 0,
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(path) => {
            let rc = resolved_config(Some(path), &a.sets, None)?;
            print!("{}", rc.echo());
            rc.model_config()?
        }
        None => gradcheck_default_cfg(),
    };
    let model = Model::init(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    use rand::Rng;
    let tokens: Vec<usize> = (0..cfg.block_size)
        .map(|_| rng.gen_range(0..cfg.vocab_size))
        .collect();
    let targets: Vec<usize> = (0..cfg.block_size)
        .map(|_| rng.gen_range(0..cfg.vocab_size))
        .collect();
    let report = gradcheck(&model, &tokens, &targets, a.eps)?;
    for (name, err) in &report.groups {
        println!("{name}: {err:e}");
    }
    println!("max_rel_err: {:e}", report.worst);
    if report.worst < 1e-4 {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: FAIL");
        Ok(ExitCode::from(1))
    }
}

fn cmd_oracle(a: OracleArgs) -> Result<ExitCode> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pass = match a.suite.as_str() {
        "topk" => {
            let mut mismatches = 0usize;
            for _ in 0..1000 {
                let n_tokens = rng.gen_range(1..=6);
                let mut meta = Vec::new();
                for t in 0..n_tokens {
                    for rank in (0..=rng.gen_range(0..=1)).rev() {
                        meta.push(StreamMeta {
                            origin: t,
                            fork_rank: rank,
                        });
                    }
                }
                let n = meta.len();
                let originals = meta.iter().filter(|m| m.is_original()).count();
                let tape = tbub_core::Tape::new();
                let log_cum: Vec<f64> = meta
                    .iter()
                    .map(|m| {
                        if m.is_original() {
                            0.0
                        } else {
                            -rng.gen_range(0.001..2.0)
                        }
                    })
                    .collect();
                let lf: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.001..2.0f64)).collect();
                let lk: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.001..2.0f64)).collect();
                let scores =
                    tbub_core::forking::ForkScores::synthetic(&tape, &log_cum, &lf, &lk, &meta);
                let kappa = rng.gen_range(originals..=(2 * n + 2).min(20));
                let got = tbub_core::forking::select_topk(&scores, kappa, &meta)?;
                let want = tbub_core::forking::bruteforce::select_topk(&scores, kappa, &meta)?;
                if got != want {
                    mismatches += 1;
                }
            }
            println!("topk: 1000 cases, {mismatches} mismatches");
            mismatches == 0
        }
        "logsumexp" => {
            let mut worst = 0.0f64;
            for _ in 0..1000 {
                let xs: Vec<f64> = (0..rng.gen_range(1..=16))
                    .map(|_| rng.gen_range(-8.0..8.0))
                    .collect();
                let stable = tbub_core::matrix::logsumexp(&xs)?;
                let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
                worst = worst.max((stable - naive).abs() / naive.abs().max(1e-300));
            }
            println!("logsumexp: max rel err {worst:e}");
            worst < 1e-12
        }
        "rope" => {
            let metas: Vec<StreamMeta> = vec![
                StreamMeta { origin: 0, fork_rank: 0 },
                StreamMeta { origin: 1, fork_rank: 2 },
                StreamMeta { origin: 1, fork_rank: 1 },
                StreamMeta { origin: 1, fork_rank: 0 },
            ];
            let pos = tbub_core::rope::fractional_positions(&metas);
            let direct = vec![0.0, 1.0 - 2.0 / 2.0, 1.0 - 1.0 / 2.0, 1.0];
            let angles_ok = pos == direct;
            // relative-position property under a +10 global shift
            let tape = tbub_core::Tape::new();
            let q = tape.leaf(tbub_core::Matrix::randn(4, 8, 1.0, &mut rng));
            let k = tape.leaf(tbub_core::Matrix::randn(4, 8, 1.0, &mut rng));
            let shift: Vec<f64> = pos.iter().map(|p| p + 10.0).collect();
            let l0 = q
                .rotate_pairs(&pos, 10000.0)
                .matmul(&k.rotate_pairs(&pos, 10000.0).t())?
                .value();
            let l1 = q
                .rotate_pairs(&shift, 10000.0)
                .matmul(&k.rotate_pairs(&shift, 10000.0).t())?
                .value();
            let diff = l0.max_abs_diff(&l1);
            println!("rope: fractional angles ok={angles_ok}, shift invariance diff {diff:e}");
            angles_ok && diff < 1e-9
        }
        other => bail!("unknown oracle suite `{other}`"),
    };
    if pass {
        println!("oracle: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("oracle: FAIL");
        Ok(ExitCode::from(1))
    }
}

//! Sequence scoring, autoregressive sampling under fixed or dynamic forking
//! budgets, and perplexity-based zero-shot evaluation protocols.
//!
//! There is no KV cache: fork decisions reshape the stream set mid-network,
//! so generation re-forwards the full context each step. With the dynamic
//! policy that is exactly a rolling top-k whose budget tracks input length.

use crate::data::{ByteTokenizer, Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, ForwardTrace, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMode {
    Fixed,
    Dynamic,
}

/// Inference-time stream budget rule derived from the training shape.
#[derive(Debug, Clone, Copy)]
pub struct BudgetPolicy {
    pub mode: BudgetMode,
    pub kappa_train: usize,
    pub block_train: usize,
}

impl BudgetPolicy {
    pub fn new(mode: BudgetMode, model: &Model) -> Self {
        BudgetPolicy {
            mode,
            kappa_train: model.cfg.kappa,
            block_train: model.cfg.block_size,
        }
    }

    /// Budget for an input of `len` tokens. Dynamic keeps the training ratio:
    /// ceil(kappa * len / L) in exact integer arithmetic, floored at len, so a
    /// full-length input reproduces the training budget exactly.
    pub fn kappa_for(&self, len: usize) -> usize {
        match self.mode {
            BudgetMode::Fixed => self.kappa_train,
            BudgetMode::Dynamic => {
                let scaled = (self.kappa_train * len).div_ceil(self.block_train);
                scaled.max(len)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    /// Log-probability the model assigned to each input token, in order.
    pub per_token: Vec<f64>,
    pub total_nll: f64,
    pub perplexity: f64,
    /// One trace per forwarded block.
    pub traces: Vec<ForwardTrace>,
}

/// Score a token sequence blockwise: the bos-prefixed stream is cut into
/// disjoint blocks of at most the training length; each block's final
/// position carries the prediction for the next block's first token.
pub fn score_sequence(
    model: &Model,
    tokens: &[usize],
    policy: &BudgetPolicy,
) -> Result<ScoreOutput> {
    if tokens.is_empty() {
        return Err(Error::Arg("cannot score an empty sequence".into()));
    }
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(BOS);
    ids.extend_from_slice(tokens);
    let block = model.cfg.block_size;
    let mut per_token = Vec::with_capacity(tokens.len());
    let mut traces = Vec::new();
    let mut start = 0;
    // a chunk whose first position is the final id scores nothing
    while start + 1 < ids.len() {
        let end = (start + block).min(ids.len());
        let chunk = &ids[start..end];
        let kappa = policy.kappa_for(chunk.len());
        let fw = model.forward(chunk, Some(kappa), ForwardOpts::default())?;
        let ld = fw.log_dists.value();
        for pos in 0..chunk.len() {
            let global = start + pos;
            if global + 1 < ids.len() {
                per_token.push(ld.at(pos, ids[global + 1]));
            }
        }
        traces.push(fw.trace);
        start = end;
    }
    debug_assert_eq!(per_token.len(), tokens.len());
    let total_nll: f64 = -per_token.iter().sum::<f64>();
    let perplexity = (total_nll / tokens.len() as f64).exp();
    Ok(ScoreOutput {
        per_token,
        total_nll,
        perplexity,
        traces,
    })
}

/// Export per-token log-probs as CSV (index, token_id, log_prob).
pub fn write_logprobs_csv<W: Write>(mut w: W, tokens: &[usize], per_token: &[f64]) -> Result<()> {
    writeln!(w, "index,token_id,log_prob")?;
    for (i, (&t, &lp)) in tokens.iter().zip(per_token).enumerate() {
        writeln!(w, "{i},{t},{lp}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct Sampler {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler {
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

/// Distribution over next tokens given a context, with the policy's budget
/// for the context length. Exposed so scoring-path and sampling-path numbers
/// can be compared directly.
pub fn step_dist(
    model: &Model,
    context: &[usize],
    policy: &BudgetPolicy,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let kappa = policy.kappa_for(context.len());
    let fw = model.forward(context, Some(kappa), ForwardOpts::default())?;
    let ld = fw.log_dists.value();
    let last = ld.rows - 1;
    Ok((ld.row_slice(last).to_vec(), fw.trace))
}

fn sample_from(logp: &[f64], sampler: &Sampler, rng: &mut ChaCha8Rng) -> usize {
    if sampler.temperature < 1e-8 {
        // greedy: first index attaining the max
        let mut best = 0;
        for (i, &v) in logp.iter().enumerate() {
            if v > logp[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logp.iter().map(|&l| l / sampler.temperature).collect();
    let lse = crate::matrix::logsumexp(&scaled).expect("non-empty distribution");
    let mut probs: Vec<(usize, f64)> = scaled
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, (l - lse).exp()))
        .collect();
    if sampler.top_p < 1.0 {
        probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut cum = 0.0;
        let mut cut = probs.len();
        for (i, (_, p)) in probs.iter().enumerate() {
            cum += p;
            if cum >= sampler.top_p {
                cut = i + 1;
                break;
            }
        }
        probs.truncate(cut);
        let z: f64 = probs.iter().map(|(_, p)| p).sum();
        for (_, p) in probs.iter_mut() {
            *p /= z;
        }
    }
    let draw: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, p) in &probs {
        cum += p;
        if draw < cum {
            return *i;
        }
    }
    probs.last().map(|(i, _)| *i).unwrap_or(0)
}

/// Autoregressive sampling by full re-forward each step. The context window
/// slides over the most recent block once it outgrows the training length.
pub fn generate(
    model: &Model,
    prompt: &[usize],
    n_tokens: usize,
    policy: &BudgetPolicy,
    sampler: &Sampler,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Arg("prompt must be non-empty".into()));
    }
    if prompt.len() > model.cfg.block_size {
        return Err(Error::Arg(format!(
            "prompt length {} exceeds block size {}",
            prompt.len(),
            model.cfg.block_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = prompt.to_vec();
    for _ in 0..n_tokens {
        let window_start = out.len().saturating_sub(model.cfg.block_size);
        let (logp, _) = step_dist(model, &out[window_start..], policy)?;
        out.push(sample_from(&logp, sampler, &mut rng));
    }
    Ok(out)
}

/// Score by step-by-step re-forwarding: token i's log-prob comes from a
/// forward over just the bos-prefixed preceding context, with the policy's
/// budget for that context length. This is the autoregression-side number of
/// the fixed-vs-dynamic comparison; blockwise scoring is [`score_sequence`].
pub fn score_autoregressive(
    model: &Model,
    tokens: &[usize],
    policy: &BudgetPolicy,
) -> Result<ScoreOutput> {
    if tokens.is_empty() {
        return Err(Error::Arg("cannot score an empty sequence".into()));
    }
    let block = model.cfg.block_size;
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(BOS);
    ids.extend_from_slice(tokens);
    let mut per_token = Vec::with_capacity(tokens.len());
    let mut traces = Vec::new();
    for i in 0..tokens.len() {
        let ctx_end = i + 1;
        let ctx_start = ctx_end.saturating_sub(block);
        let (logp, trace) = step_dist(model, &ids[ctx_start..ctx_end], policy)?;
        per_token.push(logp[tokens[i]]);
        traces.push(trace);
    }
    let total_nll: f64 = -per_token.iter().sum::<f64>();
    let perplexity = (total_nll / tokens.len() as f64).exp();
    Ok(ScoreOutput {
        per_token,
        total_nll,
        perplexity,
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Greedy-decode the final word; exact string match.
    FinalWord,
    /// Lowest perplexity among prompt+choice concatenations.
    MultiChoice,
    /// Correct when the good sequence scores lower perplexity than the bad.
    Pairwise,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_word" => Ok(Protocol::FinalWord),
            "multi_choice" => Ok(Protocol::MultiChoice),
            "pairwise" => Ok(Protocol::Pairwise),
            other => Err(Error::Arg(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Deserialize)]
struct FinalWordTask {
    context: String,
    target: String,
}

#[derive(Deserialize)]
struct MultiChoiceTask {
    prompt: String,
    choices: Vec<String>,
    answer_idx: usize,
}

#[derive(Deserialize)]
struct PairwiseTask {
    good: String,
    bad: String,
}

#[derive(Debug, Default)]
pub struct EvalOutcome {
    pub total: usize,
    pub correct: usize,
    pub skipped: usize,
    pub ties: usize,
    pub errors: Vec<String>,
}

impl EvalOutcome {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn text_tokens(text: &str) -> Vec<usize> {
    text.as_bytes().iter().map(|&b| b as usize).collect()
}

/// Crop to the most recent tokens that fit one block.
fn fit_block(model: &Model, mut toks: Vec<usize>) -> Vec<usize> {
    let block = model.cfg.block_size;
    if toks.len() > block {
        toks.drain(..toks.len() - block);
    }
    toks
}

fn final_word_correct(model: &Model, policy: &BudgetPolicy, t: &FinalWordTask) -> Result<bool> {
    let mut ctx = vec![BOS];
    ctx.extend(text_tokens(&t.context));
    let ctx = fit_block(model, ctx);
    let budget = t.target.len() + 8;
    let sampler = Sampler {
        temperature: 0.0,
        top_p: 1.0,
    };
    let full = generate(model, &ctx, budget, policy, &sampler, 0)?;
    let generated = &full[ctx.len()..];
    let tok = ByteTokenizer;
    let bytes = tok.decode(&generated.iter().map(|&t| t as u32).collect::<Vec<u32>>());
    let text = String::from_utf8_lossy(&bytes);
    let predicted = text
        .trim_start()
        .split_whitespace()
        .next()
        .unwrap_or("")
        .to_string();
    Ok(predicted == t.target.trim())
}

fn ppl_of(model: &Model, policy: &BudgetPolicy, text: &str) -> Result<f64> {
    let toks = text_tokens(text);
    if toks.is_empty() {
        return Err(Error::Arg("empty sequence in task".into()));
    }
    Ok(score_sequence(model, &toks, policy)?.perplexity)
}

/// Run one protocol over a JSON-lines task file. Malformed lines are
/// reported, skipped, and counted.
pub fn eval_protocols(
    model: &Model,
    task_path: &Path,
    protocol: Protocol,
    policy: &BudgetPolicy,
) -> Result<EvalOutcome> {
    let file = std::fs::File::open(task_path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = EvalOutcome::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let verdict: Result<(bool, bool)> = (|| {
            match protocol {
                Protocol::FinalWord => {
                    let t: FinalWordTask = serde_json::from_str(&line)
                        .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
                    Ok((final_word_correct(model, policy, &t)?, false))
                }
                Protocol::MultiChoice => {
                    let t: MultiChoiceTask = serde_json::from_str(&line)
                        .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
                    if t.choices.is_empty() || t.answer_idx >= t.choices.len() {
                        return Err(Error::Format(format!(
                            "line {}: bad answer index",
                            lineno + 1
                        )));
                    }
                    let mut ppls = Vec::new();
                    for c in &t.choices {
                        ppls.push(ppl_of(model, policy, &format!("{}{}", t.prompt, c))?);
                    }
                    // lowest perplexity wins; ties break to the first index
                    let mut best = 0;
                    for (i, &p) in ppls.iter().enumerate() {
                        if p < ppls[best] {
                            best = i;
                        }
                    }
                    let tie = ppls.iter().filter(|&&p| p == ppls[best]).count() > 1;
                    Ok((best == t.answer_idx, tie))
                }
                Protocol::Pairwise => {
                    let t: PairwiseTask = serde_json::from_str(&line)
                        .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
                    let pg = ppl_of(model, policy, &t.good)?;
                    let pb = ppl_of(model, policy, &t.bad)?;
                    Ok((pg < pb, pg == pb))
                }
            }
        })();
        match verdict {
            Ok((correct, tie)) => {
                out.total += 1;
                if correct {
                    out.correct += 1;
                }
                if tie {
                    out.ties += 1;
                }
            }
            Err(Error::Format(msg)) => {
                out.skipped += 1;
                out.errors.push(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

//! AdamW training loop: warmup + cosine decay, gradient accumulation,
//! periodic evaluation and checkpointing. Deterministic given a seed; resume
//! from any checkpoint continues the metric stream bit-identically.

use crate::checkpoint::{self, Checkpoint, OptState, RngState};
use crate::data::{sample_batch, TokenStore};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{lm_loss, BoundParams, ForwardOpts, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub total_steps: u64,
    pub eval_interval: u64,
    /// Validation batches per evaluation.
    pub eval_batches: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 2.5e-4,
            warmup_frac: 0.01,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            batch_size: 8,
            accum_steps: 1,
            total_steps: 1000,
            eval_interval: 200,
            eval_batches: 8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Arg("warmup_frac must lie in (0,1)".into()));
        }
        for (name, v) in [
            ("max_lr", self.max_lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ] {
            if v <= 0.0 {
                return Err(Error::Arg(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Arg("batch_size and accum_steps must be >= 1".into()));
        }
        if self.batch_size % self.accum_steps != 0 {
            return Err(Error::Arg(
                "accum_steps must divide batch_size".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to max_lr, then cosine decay to max_lr / 10.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps.max(1);
    let warmup = ((cfg.warmup_frac * total as f64).round() as u64).max(1);
    if step <= warmup {
        return cfg.max_lr * step as f64 / warmup as f64;
    }
    let min_lr = cfg.max_lr / 10.0;
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    min_lr + (cfg.max_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled weight decay applies to weight matrices only: biases, layernorm
/// gains/biases, and fork embeddings are excluded.
pub fn decays(name: &str) -> bool {
    name == "tok_embed"
        || name.ends_with(".wq")
        || name.ends_with(".wk")
        || name.ends_with(".wv")
        || name.ends_with(".wo")
        || name.ends_with(".w_up")
        || name.ends_with(".w_down")
        || name.ends_with(".weight")
}

/// Accumulated gradients in parameter visitation order.
pub struct GradBuffer {
    pub entries: Vec<(String, Matrix)>,
}

impl GradBuffer {
    pub fn zeros_like(model: &Model) -> Self {
        let mut entries = Vec::new();
        model
            .params
            .for_each(|name, m| entries.push((name.to_string(), Matrix::zeros(m.rows, m.cols))));
        GradBuffer { entries }
    }

    /// Pull gradients off a finished tape and add them in.
    pub fn accumulate(&mut self, bound: &BoundParams, scale: f64) {
        let mut grads = Vec::with_capacity(self.entries.len());
        bound.for_each(|_, node| grads.push(node.grad()));
        self.accumulate_vec(&grads, scale);
    }

    /// Add pre-extracted gradients (parameter visitation order).
    pub fn accumulate_vec(&mut self, grads: &[Matrix], scale: f64) {
        debug_assert_eq!(grads.len(), self.entries.len());
        for ((_, dst), g) in self.entries.iter_mut().zip(grads) {
            for (d, &s) in dst.data.iter_mut().zip(&g.data) {
                *d += s * scale;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, m)| m.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for (_, m) in &mut self.entries {
            m.scale_assign(c);
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled decay.
/// Aborts with the parameter name on any non-finite gradient.
pub fn adamw_step(
    model: &mut Model,
    grads: &GradBuffer,
    opt: &mut OptState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    opt.step += 1;
    let step = opt.step;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for ((name, g), (mname, mm)) in grads.entries.iter().zip(&mut opt.moments) {
        debug_assert_eq!(name, mname);
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad {
                name: name.clone(),
                step: step as usize,
            });
        }
        for ((m, v), &gv) in mm.m.data.iter_mut().zip(&mut mm.v.data).zip(&g.data) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
        }
    }
    let mut i = 0;
    let wd = cfg.weight_decay;
    model.params.for_each_mut(|name, p| {
        let mm = &opt.moments[i].1;
        let decay = if decays(name) { wd } else { 0.0 };
        for ((pv, &m), &v) in p.data.iter_mut().zip(&mm.m.data).zip(&mm.v.data) {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *pv -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *pv);
        }
        i += 1;
    });
    Ok(())
}

/// Loss, gradients, and per-layer fork counts for one batch of sequences,
/// accumulated in batch order (bit-reproducible regardless of parallelism).
pub fn batch_gradients(
    model: &Model,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
    grads: &mut GradBuffer,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    let scale = 1.0 / inputs.len() as f64;
    // tapes are thread-local; only plain gradient matrices leave the workers,
    // and the ordered collect keeps the accumulation sum deterministic
    let results: Vec<Result<(f64, Vec<Matrix>, BTreeMap<usize, usize>)>> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(toks, tgts)| {
            let fw = model.forward(toks, None, ForwardOpts::default())?;
            let loss = lm_loss(&fw.log_dists, tgts)?;
            fw.tape.backward(&loss);
            let mut seq_grads = Vec::new();
            fw.bound.for_each(|_, node| seq_grads.push(node.grad()));
            let mut forks: BTreeMap<usize, usize> = BTreeMap::new();
            for ev in &fw.trace.fork_events {
                if ev.action == crate::trace::Action::Fork {
                    *forks.entry(ev.layer).or_insert(0) += 1;
                }
            }
            Ok((loss.scalar(), seq_grads, forks))
        })
        .collect();
    let mut mean_loss = 0.0;
    let mut fork_totals: BTreeMap<usize, f64> = BTreeMap::new();
    for r in results {
        let (loss, seq_grads, forks) = r?;
        mean_loss += loss * scale;
        grads.accumulate_vec(&seq_grads, scale);
        for (layer, n) in forks {
            *fork_totals.entry(layer).or_insert(0.0) += n as f64 * scale;
        }
    }
    Ok((mean_loss, fork_totals))
}

/// Mean validation loss over a deterministic set of batches derived from
/// (seed, step), so evaluation is identical whether or not a run was resumed.
pub fn eval_loss(model: &Model, store: &TokenStore, cfg: &TrainConfig, step: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9_7F4A_7C15 ^ step));
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..cfg.eval_batches {
        let batch = sample_batch(store, cfg.batch_size, model.cfg.block_size, &mut rng)?;
        let losses: Vec<Result<f64>> = batch
            .inputs
            .par_iter()
            .zip(batch.targets.par_iter())
            .map(|(toks, tgts)| {
                let fw = model.forward(toks, None, ForwardOpts::default())?;
                Ok(lm_loss(&fw.log_dists, tgts)?.scalar())
            })
            .collect();
        for l in losses {
            total += l?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub struct Resume {
    pub opt: OptState,
    pub rng: RngState,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_train_loss: Option<f64>,
    pub val_losses: Vec<(u64, f64)>,
    pub metrics_path: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn metrics_header(fork_layers: &[usize]) -> String {
    let mut cols = vec!["step".into(), "lr".into(), "train_loss".into(), "val_loss".into()];
    for l in fork_layers {
        cols.push(format!("mean_forks_layer_{l}"));
    }
    cols.push("wall_ms".into());
    cols.join(",")
}

/// Run (or resume) an optimization loop. Writes `metrics.csv` (append-only)
/// and `ckpt-{step}.tbub` files under `out_dir`; a NaN loss aborts with the
/// last good checkpoint retained on disk.
pub fn train(
    model: &mut Model,
    train_store: &TokenStore,
    val_store: Option<&TokenStore>,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<Resume>,
    run_meta: &BTreeMap<String, String>,
) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let fresh = resume.is_none();
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if fresh {
        writeln!(metrics, "{}", metrics_header(&model.cfg.fork_layers))?;
    }

    let (mut opt, mut rng) = match resume {
        Some(r) => (r.opt, r.rng.restore()),
        None => (
            OptState::zeros_like(&model.params),
            ChaCha8Rng::seed_from_u64(cfg.seed),
        ),
    };
    let start_step = opt.step;

    let save_ckpt = |model: &Model, opt: &OptState, rng: &ChaCha8Rng, step: u64| -> Result<PathBuf> {
        let path = out_dir.join(format!("ckpt-{step:06}.tbub"));
        let ckpt = Checkpoint::from_model(
            model,
            run_meta.clone(),
            Some(opt.clone()),
            RngState::capture(cfg.seed, rng),
        );
        checkpoint::save(&ckpt, &path)?;
        Ok(path)
    };

    let mut last_ckpt = save_ckpt(model, &opt, &rng, start_step)?;
    let mut report = TrainReport {
        steps_run: 0,
        final_train_loss: None,
        val_losses: Vec::new(),
        metrics_path: metrics_path.clone(),
        last_checkpoint: last_ckpt.clone(),
    };

    for step in start_step..cfg.total_steps {
        let t0 = std::time::Instant::now();
        let lr = lr_at(step + 1, cfg);
        let batch = sample_batch(train_store, cfg.batch_size, model.cfg.block_size, &mut rng)?;
        let mut grads = GradBuffer::zeros_like(model);
        let micro = cfg.batch_size / cfg.accum_steps;
        let mut loss = 0.0;
        let mut fork_means: BTreeMap<usize, f64> = BTreeMap::new();
        for a in 0..cfg.accum_steps {
            let lo = a * micro;
            let hi = lo + micro;
            let (l, forks) = batch_gradients(
                model,
                &batch.inputs[lo..hi],
                &batch.targets[lo..hi],
                &mut grads,
            )?;
            // micro-batch gradients carry 1/micro weight; rescale to 1/batch
            loss += l * micro as f64 / cfg.batch_size as f64;
            for (layer, f) in forks {
                *fork_means.entry(layer).or_insert(0.0) += f * micro as f64 / cfg.batch_size as f64;
            }
        }
        grads.scale(micro as f64 / cfg.batch_size as f64);
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                step: step as usize,
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
        }
        adamw_step(model, &grads, &mut opt, lr, cfg)?;
        report.steps_run += 1;
        report.final_train_loss = Some(loss);

        let now = step + 1;
        let is_eval = cfg.eval_interval > 0
            && (now % cfg.eval_interval == 0 || now == cfg.total_steps);
        let val = if is_eval {
            match val_store {
                Some(vs) => {
                    let v = eval_loss(model, vs, cfg, now)?;
                    report.val_losses.push((now, v));
                    Some(v)
                }
                None => None,
            }
        } else {
            None
        };
        let wall_ms = t0.elapsed().as_millis();
        let mut row = format!("{now},{lr},{loss},");
        if let Some(v) = val {
            row.push_str(&v.to_string());
        }
        for l in &model.cfg.fork_layers {
            row.push(',');
            row.push_str(&fork_means.get(l).copied().unwrap_or(0.0).to_string());
        }
        row.push_str(&format!(",{wall_ms}"));
        writeln!(metrics, "{row}")?;
        metrics.flush()?;

        if is_eval {
            last_ckpt = save_ckpt(model, &opt, &rng, now)?;
        }
    }
    if report.steps_run > 0 && !last_ckpt.ends_with(format!("ckpt-{:06}.tbub", cfg.total_steps)) {
        last_ckpt = save_ckpt(model, &opt, &rng, cfg.total_steps)?;
    }
    report.last_checkpoint = last_ckpt;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VOCAB_SIZE;
    use crate::model::{ModelConfig, Variant};

    fn tiny_model(variant: Variant, fork_layers: Vec<usize>, kappa: usize, seed: u64) -> Model {
        Model::init(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            block_size: 8,
            kappa,
            fork_layers,
            variant,
            vocab_size: VOCAB_SIZE,
            theta_base: 10000.0,
            seed,
        })
        .unwrap()
    }

    fn repeating_store(len: usize, period: usize) -> TokenStore {
        TokenStore {
            vocab_size: VOCAB_SIZE as u32,
            ids: (0..len).map(|i| (i % period) as u32).collect(),
        }
    }

    fn scalar_model() -> (Model, OptState) {
        // a 1x1 "model" is overkill; drive adamw through a real tiny model but
        // inspect one scalar entry
        let m = tiny_model(Variant::Baseline, vec![], 8, 3);
        let opt = OptState::zeros_like(&m.params);
        (m, opt)
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let (mut m, mut opt) = scalar_model();
        let before = m.params.named();
        let grads = GradBuffer::zeros_like(&m);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut m, &grads, &mut opt, 1e-3, &cfg).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(m.params.named().iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_recurrence() {
        // unit gradient, step 1: bias correction makes the update exactly
        // -lr * 1/(1 + eps)
        let (mut m, mut opt) = scalar_model();
        let before = m.params.tok_embed.data[0];
        let mut grads = GradBuffer::zeros_like(&m);
        grads.entries[0].1.data[0] = 1.0;
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let lr = 1e-2;
        adamw_step(&mut m, &grads, &mut opt, lr, &cfg).unwrap();
        let want = before - lr * (1.0 / (1.0 + cfg.eps));
        let got = m.params.tok_embed.data[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn adamw_decay_only_shrinks_weights() {
        let (mut m, mut opt) = scalar_model();
        let before = m.params.blocks[0].wq.data[17];
        let before_bias = m.params.blocks[0].ln1.gain.data[2];
        let grads = GradBuffer::zeros_like(&m);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let lr = 1e-2;
        adamw_step(&mut m, &grads, &mut opt, lr, &cfg).unwrap();
        let got = m.params.blocks[0].wq.data[17];
        assert!((got - before * (1.0 - lr * 0.1)).abs() < 1e-15);
        // layernorm gains are excluded from decay
        assert_eq!(m.params.blocks[0].ln1.gain.data[2], before_bias);
    }

    #[test]
    fn adamw_aborts_on_non_finite_gradient() {
        let (mut m, mut opt) = scalar_model();
        let mut grads = GradBuffer::zeros_like(&m);
        grads.entries[3].1.data[0] = f64::NAN;
        let cfg = TrainConfig::default();
        let err = adamw_step(&mut m, &grads, &mut opt, 1e-3, &cfg).unwrap_err();
        match err {
            Error::NonFiniteGrad { name, step } => {
                assert_eq!(name, grads.entries[3].0);
                assert_eq!(step, 1);
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn decay_set_excludes_biases_norms_and_fork_embeddings() {
        assert!(decays("tok_embed"));
        assert!(decays("block3.wq"));
        assert!(decays("block0.w_up"));
        assert!(decays("fork1.weight"));
        assert!(!decays("block0.bq"));
        assert!(!decays("block0.ln1.gain"));
        assert!(!decays("fork1.embed"));
        assert!(!decays("final_ln.bias"));
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            max_lr: 3e-4,
            warmup_frac: 0.1,
            total_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(100, &cfg) - 3e-4).abs() < 1e-18, "warmup end is max");
        let end = lr_at(1000, &cfg);
        assert!((end - 3e-5).abs() < 1e-18, "cosine lands on max/10: {end}");
        // the schedule peaks at the warmup boundary and stays continuous
        assert!(lr_at(99, &cfg) < lr_at(100, &cfg));
        assert!(lr_at(101, &cfg) < lr_at(100, &cfg));
        assert!((lr_at(101, &cfg) - lr_at(100, &cfg)).abs() < 3e-4 * 0.01);
    }

    #[test]
    fn zero_steps_emits_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(Variant::Baseline, vec![], 8, 1);
        let store = repeating_store(200, 64);
        let cfg = TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        };
        let report = train(
            &mut m,
            &store,
            None,
            &cfg,
            dir.path(),
            None,
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(report.steps_run, 0);
        assert!(dir.path().join("ckpt-000000.tbub").exists());
        let ckpts: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tbub"))
            .collect();
        assert_eq!(ckpts.len(), 1);
    }

    #[test]
    fn learns_repeating_corpus_below_ln_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(Variant::Ours, vec![2], 16, 5);
        let store = repeating_store(4096, 64);
        let cfg = TrainConfig {
            total_steps: 200,
            batch_size: 4,
            eval_interval: 0,
            max_lr: 3e-3,
            ..TrainConfig::default()
        };
        let report = train(
            &mut m,
            &store,
            None,
            &cfg,
            dir.path(),
            None,
            &BTreeMap::new(),
        )
        .unwrap();
        let final_loss = report.final_train_loss.unwrap();
        assert!(
            final_loss < (VOCAB_SIZE as f64).ln(),
            "loss {final_loss} not below ln(V)"
        );
    }

    #[test]
    fn gradient_accumulation_matches_single_pass() {
        let m = tiny_model(Variant::Ours, vec![1], 16, 9);
        let store = repeating_store(512, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_batch(&store, 4, 8, &mut rng).unwrap();

        let mut one = GradBuffer::zeros_like(&m);
        batch_gradients(&m, &batch.inputs, &batch.targets, &mut one).unwrap();

        let mut accum = GradBuffer::zeros_like(&m);
        for chunk in 0..2 {
            let lo = chunk * 2;
            batch_gradients(
                &m,
                &batch.inputs[lo..lo + 2],
                &batch.targets[lo..lo + 2],
                &mut accum,
            )
            .unwrap();
        }
        accum.scale(0.5); // micro weight 1/2 -> full-batch weight 1/4
        for ((_, a), (_, b)) in one.entries.iter().zip(&accum.entries) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
                assert!(rel < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bitwise() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let store = repeating_store(1024, 48);
        let cfg6 = TrainConfig {
            total_steps: 6,
            batch_size: 2,
            eval_interval: 3,
            eval_batches: 1,
            ..TrainConfig::default()
        };

        let mut ma = tiny_model(Variant::Ours, vec![2], 16, 11);
        train(&mut ma, &store, Some(&store), &cfg6, dir_a.path(), None, &BTreeMap::new()).unwrap();

        // resume from the uninterrupted run's own mid checkpoint
        let ck = checkpoint::load(&dir_a.path().join("ckpt-000003.tbub")).unwrap();
        let mut mb = ck.to_model().unwrap();
        let resume = Resume {
            opt: ck.opt.clone().unwrap(),
            rng: ck.rng,
        };
        train(
            &mut mb,
            &store,
            Some(&store),
            &cfg6,
            dir_b.path(),
            Some(resume),
            &BTreeMap::new(),
        )
        .unwrap();

        let final_a = std::fs::read(dir_a.path().join("ckpt-000006.tbub")).unwrap();
        let final_b = std::fs::read(dir_b.path().join("ckpt-000006.tbub")).unwrap();
        assert_eq!(final_a, final_b, "resumed checkpoint differs");

        // the resumed metric rows match the tail of the uninterrupted run,
        // except the wall-clock column
        let strip = |p: &std::path::Path| -> Vec<String> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| {
                    let mut cols: Vec<&str> = l.split(',').collect();
                    cols.pop();
                    cols.join(",")
                })
                .collect()
        };
        let a_rows = strip(&dir_a.path().join("metrics.csv"));
        let b_rows = strip(&dir_b.path().join("metrics.csv"));
        assert_eq!(&a_rows[a_rows.len() - 3..], &b_rows[..]);
    }

    #[test]
    fn numeric_poison_aborts_with_initial_checkpoint_retained() {
        // NaN parameters contaminate whole rows, which the stability guards
        // surface as an error before a literal NaN loss can form; either way
        // training aborts and the last good checkpoint stays on disk.
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(Variant::Baseline, vec![], 8, 2);
        m.params.tok_embed.data[0] = f64::NAN;
        let store = repeating_store(256, 16);
        let cfg = TrainConfig {
            total_steps: 5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let err = train(
            &mut m,
            &store,
            None,
            &cfg,
            dir.path(),
            None,
            &BTreeMap::new(),
        );
        assert!(err.is_err());
        assert!(dir.path().join("ckpt-000000.tbub").exists());
    }
}

//! Flat key=value run configuration with section dots, resolved as
//! defaults < file < flags. The resolved map is echoed at startup and
//! persisted verbatim into checkpoints and trace headers.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tbub_core::model::{ModelConfig, Variant};
use tbub_core::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
}

fn defaults() -> BTreeMap<String, String> {
    let m = ModelConfig::toy();
    let t = TrainConfig::default();
    let mut v = BTreeMap::new();
    v.insert("model.n_layers".into(), m.n_layers.to_string());
    v.insert("model.n_heads".into(), m.n_heads.to_string());
    v.insert("model.d_model".into(), m.d_model.to_string());
    v.insert("model.block_size".into(), m.block_size.to_string());
    v.insert("model.kappa".into(), m.kappa.to_string());
    v.insert(
        "model.fork_layers".into(),
        m.fork_layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    v.insert("model.variant".into(), "ours".into());
    v.insert("model.vocab_size".into(), m.vocab_size.to_string());
    v.insert("model.theta_base".into(), m.theta_base.to_string());
    v.insert("model.seed".into(), m.seed.to_string());
    v.insert("train.max_lr".into(), t.max_lr.to_string());
    v.insert("train.warmup_frac".into(), t.warmup_frac.to_string());
    v.insert("train.weight_decay".into(), t.weight_decay.to_string());
    v.insert("train.beta1".into(), t.beta1.to_string());
    v.insert("train.beta2".into(), t.beta2.to_string());
    v.insert("train.eps".into(), t.eps.to_string());
    v.insert("train.batch_size".into(), t.batch_size.to_string());
    v.insert("train.accum_steps".into(), t.accum_steps.to_string());
    v.insert("train.total_steps".into(), t.total_steps.to_string());
    v.insert("train.eval_interval".into(), t.eval_interval.to_string());
    v.insert("train.eval_batches".into(), t.eval_batches.to_string());
    v.insert("train.grad_clip".into(), t.grad_clip.to_string());
    v.insert("train.seed".into(), t.seed.to_string());
    v.insert("budget.mode".into(), "dynamic".into());
    v.insert("data.train".into(), String::new());
    v.insert("data.val".into(), String::new());
    v.insert("out.dir".into(), "runs/default".into());
    v
}

impl RunConfig {
    /// defaults < file < overrides (from flags), in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut values = defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, val) = line
                    .split_once('=')
                    .with_context(|| format!("config line {}: expected key=value", lineno + 1))?;
                let key = k.trim().to_string();
                if !values.contains_key(&key) {
                    bail!("config line {}: unknown key `{key}`", lineno + 1);
                }
                values.insert(key, val.trim().to_string());
            }
        }
        for (k, val) in overrides {
            if !values.contains_key(k) {
                bail!("unknown config key `{k}`");
            }
            values.insert(k.clone(), val.clone());
        }
        Ok(RunConfig { values })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_default()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| anyhow::anyhow!("config {key}={}: {e}", self.get(key)))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let variant_raw = self.get("model.variant");
        let variant = match variant_raw {
            "ours" => Variant::Ours,
            "baseline" => Variant::Baseline,
            other => match other.strip_prefix("copy") {
                Some(k) => Variant::CopyK(
                    k.parse()
                        .map_err(|_| anyhow::anyhow!("bad copy-k variant `{other}`"))?,
                ),
                None => bail!("unknown variant `{other}`"),
            },
        };
        let fork_layers = {
            let raw = self.get("model.fork_layers");
            if raw.is_empty() {
                Vec::new()
            } else {
                raw.split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| anyhow::anyhow!("model.fork_layers: {e}"))?
            }
        };
        let block_size: usize = self.parse("model.block_size")?;
        let kappa: usize = match variant {
            Variant::Baseline => block_size,
            Variant::CopyK(k) => k * block_size,
            Variant::Ours => self.parse("model.kappa")?,
        };
        let cfg = ModelConfig {
            n_layers: self.parse("model.n_layers")?,
            n_heads: self.parse("model.n_heads")?,
            d_model: self.parse("model.d_model")?,
            block_size,
            kappa,
            fork_layers: if matches!(variant, Variant::Ours) {
                fork_layers
            } else {
                Vec::new()
            },
            variant,
            vocab_size: self.parse("model.vocab_size")?,
            theta_base: self.parse("model.theta_base")?,
            seed: self.parse("model.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            max_lr: self.parse("train.max_lr")?,
            warmup_frac: self.parse("train.warmup_frac")?,
            weight_decay: self.parse("train.weight_decay")?,
            beta1: self.parse("train.beta1")?,
            beta2: self.parse("train.beta2")?,
            eps: self.parse("train.eps")?,
            batch_size: self.parse("train.batch_size")?,
            accum_steps: self.parse("train.accum_steps")?,
            total_steps: self.parse("train.total_steps")?,
            eval_interval: self.parse("train.eval_interval")?,
            eval_batches: self.parse("train.eval_batches")?,
            grad_clip: self.parse("train.grad_clip")?,
            seed: self.parse("train.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out.dir"))
    }

    /// Pin every stream of randomness to one seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.values.insert("model.seed".into(), seed.to_string());
        self.values.insert("train.seed".into(), seed.to_string());
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

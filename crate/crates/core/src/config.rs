//! Training configuration and its flat `key = value` text form.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. The same text form is embedded in checkpoints as the config
//! snapshot, so `to_text` followed by `parse` reproduces the config exactly.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub t1_epochs: usize,
    pub t2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Prototype counts per level, finest first.
    pub level_sizes: Vec<usize>,
    pub n_neg: usize,
    pub eps_clamp: f64,
    pub seed: u64,
    pub temperature: f64,
    /// Std of the additive Gaussian noise used to make the two views.
    pub aug_sigma: f64,
    pub encoder: EncoderKind,
    pub encoder_hidden: usize,
    /// Representation dimension shared by z^0 and every z^l.
    pub rep_dim: usize,
    pub head_hidden: usize,
    /// Affine layers per projection head (2 by default, 5 allowed).
    pub head_layers: usize,
    pub use_norm: bool,
    /// When false, stage-2 steps optimize only the fine-grained objective.
    pub spd_enabled: bool,
    /// Cluster only this many samples per refresh; 0 uses the full set.
    pub refresh_subsample: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t1_epochs: 2,
            t2_epochs: 18,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            level_sizes: vec![24, 8, 4],
            n_neg: 16,
            eps_clamp: crate::spd::DEFAULT_EPS,
            seed: 0,
            temperature: 0.2,
            aug_sigma: 0.3,
            encoder: EncoderKind::Mlp,
            encoder_hidden: 64,
            rep_dim: 32,
            head_hidden: 64,
            head_layers: 2,
            use_norm: true,
            spd_enabled: true,
            refresh_subsample: 0,
            kmeans_max_iter: crate::hkmeans::DEFAULT_MAX_ITER,
            kmeans_tol: crate::hkmeans::DEFAULT_TOL,
            data: None,
            labels: None,
            checkpoint: None,
            log: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

pub fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.t1_epochs + self.t2_epochs
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "t1_epochs" => self.t1_epochs = parse_num(key, v)?,
            "t2_epochs" => self.t2_epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "level_sizes" => self.level_sizes = parse_usize_list(key, v)?,
            "n_neg" => self.n_neg = parse_num(key, v)?,
            "eps_clamp" => self.eps_clamp = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "aug_sigma" => self.aug_sigma = parse_num(key, v)?,
            "encoder" => {
                self.encoder = match v {
                    "mlp" => EncoderKind::Mlp,
                    "identity" => EncoderKind::Identity,
                    _ => return Err(Error::Config(format!("unknown encoder {v:?}"))),
                }
            }
            "encoder_hidden" => self.encoder_hidden = parse_num(key, v)?,
            "rep_dim" => self.rep_dim = parse_num(key, v)?,
            "head_hidden" => self.head_hidden = parse_num(key, v)?,
            "head_layers" => self.head_layers = parse_num(key, v)?,
            "use_norm" => self.use_norm = parse_bool(key, v)?,
            "spd_enabled" => self.spd_enabled = parse_bool(key, v)?,
            "refresh_subsample" => self.refresh_subsample = parse_num(key, v)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse_num(key, v)?,
            "kmeans_tol" => self.kmeans_tol = parse_num(key, v)?,
            "data" => self.data = opt_path(v),
            "labels" => self.labels = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "log" => self.log = opt_path(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", no + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let sizes: Vec<String> = self.level_sizes.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("t1_epochs", self.t1_epochs.to_string());
        kv("t2_epochs", self.t2_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("level_sizes", sizes.join(","));
        kv("n_neg", self.n_neg.to_string());
        kv("eps_clamp", self.eps_clamp.to_string());
        kv("seed", self.seed.to_string());
        kv("temperature", self.temperature.to_string());
        kv("aug_sigma", self.aug_sigma.to_string());
        kv(
            "encoder",
            match self.encoder {
                EncoderKind::Mlp => "mlp",
                EncoderKind::Identity => "identity",
            }
            .into(),
        );
        kv("encoder_hidden", self.encoder_hidden.to_string());
        kv("rep_dim", self.rep_dim.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("head_layers", self.head_layers.to_string());
        kv("use_norm", self.use_norm.to_string());
        kv("spd_enabled", self.spd_enabled.to_string());
        kv("refresh_subsample", self.refresh_subsample.to_string());
        kv("kmeans_max_iter", self.kmeans_max_iter.to_string());
        kv("kmeans_tol", self.kmeans_tol.to_string());
        kv("data", path(&self.data));
        kv("labels", path(&self.labels));
        kv("checkpoint", path(&self.checkpoint));
        kv("log", path(&self.log));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_epochs() == 0 {
            return fail("t1_epochs + t2_epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.n_neg == 0 {
            return fail("n_neg must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be >= 0".into());
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 0.5) {
            return fail("eps_clamp must lie in (0, 0.5)".into());
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be > 0".into());
        }
        if !(self.aug_sigma >= 0.0) {
            return fail("aug_sigma must be >= 0".into());
        }
        if self.rep_dim == 0 || self.head_hidden == 0 {
            return fail("rep_dim and head_hidden must be >= 1".into());
        }
        if self.encoder == EncoderKind::Mlp && self.encoder_hidden == 0 {
            return fail("encoder_hidden must be >= 1".into());
        }
        if self.head_layers < 2 {
            return fail("head_layers must be >= 2".into());
        }
        if self.t2_epochs > 0 {
            if self.level_sizes.is_empty() || self.level_sizes.contains(&0) {
                return fail("level_sizes must be non-empty and positive".into());
            }
            if self.level_sizes.windows(2).any(|w| w[1] >= w[0]) {
                return fail(format!(
                    "level_sizes must be strictly decreasing, got {:?}",
                    self.level_sizes
                ));
            }
            if self.spd_enabled && self.level_sizes[0] < 2 {
                return fail("M_1 must be >= 2 for negative paths".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.1 + 0.2;
        cfg.level_sizes = vec![30000, 10000, 1000];
        cfg.checkpoint = Some("out/ck.bin".into());
        cfg.encoder = EncoderKind::Identity;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_overrides_and_errors() {
        let cfg = TrainConfig::parse("# run\nseed = 9\n\nlevel_sizes=6, 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.level_sizes, vec![6, 3]);
        assert!(TrainConfig::parse("bogus=1").is_err());
        assert!(TrainConfig::parse("seed").is_err());
        assert!(TrainConfig::parse("seed=x").is_err());
    }

    #[test]
    fn default_schedule_is_one_to_ten() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.total_epochs(), 10 * cfg.t1_epochs);
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.t1_epochs = 0;
        cfg.t2_epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.level_sizes = vec![4, 4];
        assert!(cfg.validate().is_err());
        cfg.t2_epochs = 0;
        cfg.validate().unwrap();
    }
}

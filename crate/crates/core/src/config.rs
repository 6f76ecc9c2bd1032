//! Flat `key=value` run configuration shared by every pipeline command.
//! Unknown keys and malformed lines are rejected with the offending line
//! number; every key except the two directory paths has a default.

use std::path::{Path, PathBuf};

use crate::data::CLASS_COUNT;
use crate::diffusion::{SamplerMode, SigmaMode};
use crate::error::{Error, Result};
use crate::moco::LossMode;

/// Hyperparameters and paths for the full pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    /// Square image resolution.
    pub h: usize,
    /// Diffusion steps.
    pub t: usize,
    /// Linear noise-schedule endpoints.
    pub beta_start: f64,
    pub beta_end: f64,
    /// Initial learning rate of contrastive pretraining (cosine-annealed).
    pub lr0: f64,
    /// Initial learning rate of denoiser training (cosine-annealed Adam).
    pub ddpm_lr: f64,
    /// Optimizer steps per training command.
    pub total_steps: usize,
    /// Negative-queue capacity.
    pub k: usize,
    /// Key-encoder momentum.
    pub m: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Batch size for both training loops.
    pub batch: usize,
    pub loss_mode: LossMode,
    pub sampler_mode: SamplerMode,
    pub sigma_mode: SigmaMode,
    /// Images generated per class.
    pub counts: [usize; CLASS_COUNT],
    /// Fraction of each class assigned to the training split.
    pub train_frac: f64,
    /// Denoiser base channel width.
    pub width: usize,
    /// Encoder base channel width.
    pub encoder_width: usize,
    /// Dataset directory; no default.
    pub data_dir: Option<PathBuf>,
    /// Output directory for checkpoints, samples, logs, metrics; no default.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            h: 16,
            t: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr0: 0.03,
            ddpm_lr: 1e-3,
            total_steps: 2000,
            k: 512,
            m: 0.999,
            tau: 0.07,
            batch: 32,
            loss_mode: LossMode::Improved,
            sampler_mode: SamplerMode::Standard,
            sigma_mode: SigmaMode::Beta,
            counts: [400; CLASS_COUNT],
            train_frac: 0.8,
            width: 16,
            encoder_width: 16,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn config_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

impl RunConfig {
    /// Parses a config file. Blank lines and `#` comments are ignored;
    /// anything else must be `key=value` with a known key.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = crate::io::read_text(path)?;
        Self::parse_str(&text, path)
    }

    /// Parses config text, attributing errors to `path`.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(path, line_no, format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value)
                .map_err(|e| config_err(path, line_no, e.to_string()))?;
        }
        cfg.validate().map_err(|e| config_err(path, 0, e.to_string()))?;
        Ok(cfg)
    }

    /// Sets one known key from its text value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::param(format!("invalid value '{value}' for key '{key}'")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "h" => self.h = num(key, value)?,
            "t" => self.t = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "ddpm_lr" => self.ddpm_lr = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "loss_mode" => self.loss_mode = LossMode::parse(value)?,
            "sampler_mode" => self.sampler_mode = SamplerMode::parse(value)?,
            "sigma_mode" => self.sigma_mode = SigmaMode::parse(value)?,
            "counts" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                self.counts = match parts.len() {
                    1 => [num::<usize>(key, parts[0])?; CLASS_COUNT],
                    CLASS_COUNT => {
                        let mut out = [0usize; CLASS_COUNT];
                        for (slot, part) in out.iter_mut().zip(&parts) {
                            *slot = num(key, part)?;
                        }
                        out
                    }
                    n => {
                        return Err(Error::param(format!(
                            "counts takes 1 or {CLASS_COUNT} comma-separated numbers, got {n}"
                        )))
                    }
                };
            }
            "train_frac" => self.train_frac = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "encoder_width" => self.encoder_width = num(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::param(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Cross-field checks run after parsing.
    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32].contains(&self.h) {
            return Err(Error::param(format!("h must be one of 8, 16, 32, got {}", self.h)));
        }
        if self.t == 0 {
            return Err(Error::param("t must be ≥ 1"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < beta_start ≤ beta_end < 1, got {}..{}",
                self.beta_start, self.beta_end
            )));
        }
        for (name, lr) in [("lr0", self.lr0), ("ddpm_lr", self.ddpm_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::param(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.total_steps == 0 {
            return Err(Error::param("total_steps must be ≥ 1"));
        }
        if self.batch == 0 {
            return Err(Error::param("batch must be ≥ 1"));
        }
        if self.k == 0 || self.k % self.batch != 0 {
            return Err(Error::param(format!(
                "k ({}) must be a positive multiple of batch ({})",
                self.k, self.batch
            )));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::param(format!("m must lie in [0, 1), got {}", self.m)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::param(format!("tau must be positive, got {}", self.tau)));
        }
        if self.counts.iter().any(|&c| c == 0) {
            return Err(Error::param("every class count must be ≥ 1"));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::param(format!("train_frac must lie in (0, 1), got {}", self.train_frac)));
        }
        for (name, w) in [("width", self.width), ("encoder_width", self.encoder_width)] {
            if w < 4 || w % 4 != 0 {
                return Err(Error::param(format!("{name} must be a multiple of 4 and ≥ 4, got {w}")));
            }
        }
        Ok(())
    }

    /// The dataset directory, or a parameter error naming the missing key.
    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::param("no dataset directory: set data_dir in the config"))
    }

    /// The output directory, or a parameter error naming the missing key.
    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::param("no output directory: set out_dir in the config or pass --out"))
    }

    /// Serializes every key in parse order; `load` of the result is
    /// identical to `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        kv("seed", self.seed.to_string());
        kv("h", self.h.to_string());
        kv("t", self.t.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        kv("lr0", self.lr0.to_string());
        kv("ddpm_lr", self.ddpm_lr.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("k", self.k.to_string());
        kv("m", self.m.to_string());
        kv("tau", self.tau.to_string());
        kv("batch", self.batch.to_string());
        kv("loss_mode", self.loss_mode.token().to_string());
        kv("sampler_mode", self.sampler_mode.token().to_string());
        kv("sigma_mode", self.sigma_mode.token().to_string());
        kv(
            "counts",
            self.counts.map(|c| c.to_string()).join(","),
        );
        kv("train_frac", self.train_frac.to_string());
        kv("width", self.width.to_string());
        kv("encoder_width", self.encoder_width.to_string());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        if let Some(d) = &self.out_dir {
            kv("out_dir", d.display().to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse_str(text, Path::new("test.cfg"))
    }

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.counts, [400; 4]);
        assert_eq!(cfg.batch, 32);
        assert!(cfg.data_dir.is_none());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse("# a comment\n\n  seed = 7 \n#x=1\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let err = parse("seed=1\nfoo\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("foo"), "{msg}");
    }

    #[test]
    fn unknown_key_reports_its_number() {
        let err = parse("\n\nwumpus=3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("wumpus"), "{msg}");
    }

    #[test]
    fn bad_value_reports_its_number() {
        let err = parse("seed=banana\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        let err = parse("loss_mode=both\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn counts_accepts_scalar_or_full_list() {
        assert_eq!(parse("counts=12\n").unwrap().counts, [12; 4]);
        assert_eq!(parse("counts=1, 2,3 ,4\n").unwrap().counts, [1, 2, 3, 4]);
        assert!(parse("counts=1,2\n").is_err());
        assert!(parse("counts=0\n").is_err());
    }

    #[test]
    fn mode_tokens_round_trip_through_render() {
        let text = "sampler_mode=literal_eq3\nsigma_mode=zero\nloss_mode=original\ndata_dir=/tmp/d\nout_dir=/tmp/o\n";
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.sampler_mode, SamplerMode::Marginal);
        assert_eq!(cfg.sigma_mode, SigmaMode::Zero);
        assert_eq!(cfg.loss_mode, LossMode::Original);
        let reparsed = parse(&cfg.render()).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn cross_field_validation_rejects_bad_combinations() {
        assert!(parse("h=12\n").is_err());
        assert!(parse("t=0\n").is_err());
        assert!(parse("beta_start=0.5\nbeta_end=0.1\n").is_err());
        assert!(parse("k=100\nbatch=32\n").is_err()); // not a multiple
        assert!(parse("m=1.0\n").is_err());
        assert!(parse("tau=0\n").is_err());
        assert!(parse("train_frac=1.0\n").is_err());
        assert!(parse("width=10\n").is_err());
        assert!(parse("batch=0\n").is_err());
    }

    #[test]
    fn missing_paths_error_when_requested() {
        let cfg = parse("").unwrap();
        assert!(cfg.data_dir().is_err());
        assert!(cfg.out_dir().is_err());
        let cfg = parse("data_dir=a\nout_dir=b\n").unwrap();
        assert_eq!(cfg.data_dir().unwrap(), Path::new("a"));
        assert_eq!(cfg.out_dir().unwrap(), Path::new("b"));
    }
}

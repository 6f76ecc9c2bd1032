//! Diffusion noise schedule and cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::io::{self, DType};
use crate::tensor::Tensor;

/// Per-step noise variances β_t with the derived retention factors
/// a_t = 1 − β_t and their running products ā_t = ∏_{s≤t} a_s.
///
/// Steps are 1-based: `beta(1)` is the first step. By convention ā_0 = 1
/// (no noise applied yet), so `a_bar` holds `steps + 1` values.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    a: Vec<f64>,
    a_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances, validating
    /// 0 < β_t < 1 for every t.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(&bad) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::param(format!("variance {bad} outside (0, 1)")));
        }
        let a: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut a_bar = Vec::with_capacity(beta.len() + 1);
        a_bar.push(1.0);
        for &at in &a {
            a_bar.push(a_bar.last().unwrap() * at);
        }
        Ok(NoiseSchedule { beta, a, a_bar })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize, op: &'static str) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::param(format!("{op}: step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, "beta")?;
        Ok(self.beta[t - 1])
    }

    /// a_t = 1 − β_t for t in 1..=T.
    pub fn a(&self, t: usize) -> Result<f64> {
        self.check_step(t, "a")?;
        Ok(self.a[t - 1])
    }

    /// ā_t = ∏_{s≤t} a_s for t in 0..=T, with ā_0 = 1.
    pub fn a_bar(&self, t: usize) -> Result<f64> {
        if t > self.steps() {
            return Err(Error::param(format!("a_bar: step {t} outside 0..={}", self.steps())));
        }
        Ok(self.a_bar[t])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Saves the defining β values as a bare DFT1 tensor; everything else
    /// is recomputed deterministically on load.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let t = Tensor::new(&[self.beta.len()], self.beta.clone())?;
        io::save_tensor(path, &t, DType::F64)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let t = io::load_tensor(path)?;
        NoiseSchedule::from_betas(t.data().to_vec())
    }
}

/// Linear interpolation of β from `beta_start` to `beta_end` inclusive over
/// `steps` steps. With a single step the schedule is just `[beta_start]`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::param("steps must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

/// Cosine-annealed learning rate:
/// `lr0 · ½(1 + cos(π · current/total))`.
pub fn cosine_lr(current_steps: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::param("total_steps must be >= 1"));
    }
    if current_steps > total_steps {
        return Err(Error::param(format!(
            "current step {current_steps} exceeds total {total_steps}"
        )));
    }
    if !(lr0 > 0.0 && lr0.is_finite()) {
        return Err(Error::param(format!("lr0 must be positive, got {lr0}")));
    }
    let frac = current_steps as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Whether the annealing position is counted in optimizer steps or epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrGranularity {
    #[default]
    Step,
    Epoch,
}

/// Cosine learning-rate schedule bound to an initial rate and a horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_steps: usize,
    pub granularity: LrGranularity,
}

impl LrSchedule {
    pub fn new(lr0: f64, total_steps: usize) -> Result<Self> {
        Self::with_granularity(lr0, total_steps, LrGranularity::Step)
    }

    pub fn with_granularity(lr0: f64, total_steps: usize, granularity: LrGranularity) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::param("total_steps must be >= 1"));
        }
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return Err(Error::param(format!("lr0 must be positive, got {lr0}")));
        }
        Ok(LrSchedule { lr0, total_steps, granularity })
    }

    /// Rate at the given position (a step or epoch index, per the
    /// schedule's granularity).
    pub fn rate(&self, current: usize) -> Result<f64> {
        cosine_lr(current, self.total_steps, self.lr0)
    }
}

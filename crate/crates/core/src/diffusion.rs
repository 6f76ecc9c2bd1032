//! Forward (noising) and backward (denoising) diffusion processes, the
//! ε-prediction training loss, and the ancestral sampler.
//!
//! Pixel values live in [−1, 1]. Steps are 1-based against a
//! [`NoiseSchedule`]: `t = 0` is the clean image.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Anything that can predict the injected noise from a noisy batch inside a
/// graph. `x_t` is a `(b, c, h, w)` node; `ts` gives the diffusion step of
/// each batch element. The prediction must have the shape of `x_t`.
pub trait NoisePredictor {
    fn predict(&self, g: &mut Graph, x_t: NodeId, ts: &[usize]) -> Result<NodeId>;
}

/// Update rule used to walk one step backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerMode {
    /// Posterior-mean step: divides by the per-step retention √a_t with the
    /// matching noise coefficient (1−a_t)/√(1−ā_t).
    #[default]
    Standard,
    /// Inverts the closed-form marginal instead, treating the predicted
    /// noise as the total accumulated noise: divides by √ā_t with noise
    /// coefficient √(1−ā_t)/√ā_t. Kept for fidelity experiments; at `t = 1`
    /// the two modes coincide.
    Marginal,
}

impl SamplerMode {
    /// Parses an interface token; `literal_eq3` is the accepted spelling of
    /// the marginal-inversion mode in config files.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SamplerMode::Standard),
            "literal_eq3" | "marginal" => Ok(SamplerMode::Marginal),
            other => Err(Error::param(format!(
                "unknown sampler mode '{other}' (expected standard | literal_eq3)"
            ))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            SamplerMode::Standard => "standard",
            SamplerMode::Marginal => "literal_eq3",
        }
    }
}

/// Scale of the fresh noise added at each backward step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// σ_t = √β_t for t > 1, σ_1 = 0.
    #[default]
    Beta,
    /// σ_t = 0 everywhere: deterministic sampling.
    Zero,
}

impl SigmaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaMode::Beta),
            "zero" => Ok(SigmaMode::Zero),
            other => Err(Error::param(format!("unknown sigma mode '{other}' (expected beta | zero)"))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            SigmaMode::Beta => "beta",
            SigmaMode::Zero => "zero",
        }
    }
}

/// Sampler settings: update rule, noise scale, step count, and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub sigma_mode: SigmaMode,
    pub steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(mode: SamplerMode, sigma_mode: SigmaMode, steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("sampler needs at least one step"));
        }
        Ok(SamplerConfig { mode, sigma_mode, steps, seed })
    }
}

/// Applies the one-step noising recurrence
/// `x_s = √a_s·x_{s−1} + √(1−a_s)·ε_s` for `s = 1..=t`, with `noise(s)`
/// supplying each ε_s. Exposed so tests can inject exact noise values.
pub fn forward_iterative_with(
    x0: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    mut noise: impl FnMut(usize) -> Tensor,
) -> Result<Tensor> {
    if t == 0 || t > sched.steps() {
        return Err(Error::param(format!("step {t} outside 1..={}", sched.steps())));
    }
    let mut x = x0.data().to_vec();
    for s in 1..=t {
        let eps = noise(s);
        if eps.shape() != x0.shape() {
            return Err(Error::shape(
                "forward_iterative",
                format!("noise shape {:?} does not match data shape {:?}", eps.shape(), x0.shape()),
            ));
        }
        let a = sched.a(s)?;
        let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
        for (xi, &e) in x.iter_mut().zip(eps.data()) {
            *xi = ca * *xi + cb * e;
        }
    }
    Tensor::new(x0.shape(), x)
}

/// Step-by-step noising with i.i.d. standard-normal noise from `rng`.
pub fn forward_iterative(x0: &Tensor, t: usize, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape = x0.shape().to_vec();
    forward_iterative_with(x0, t, sched, |_| Tensor::randn(&shape, rng))
}

/// Single-jump noising via the closed-form marginal:
/// `x_t = √ā_t·x0 + √(1−ā_t)·eps`. Accepts `t = 0` (returns `x0` exactly).
pub fn forward_closed(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.steps() {
        return Err(Error::param(format!("step {t} outside 0..={}", sched.steps())));
    }
    if eps.shape() != x0.shape() {
        return Err(Error::shape(
            "forward_closed",
            format!("noise shape {:?} does not match data shape {:?}", eps.shape(), x0.shape()),
        ));
    }
    let a_bar = sched.a_bar(t)?;
    let (ca, cb) = (a_bar.sqrt(), (1.0 - a_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| ca * x + cb * e)
        .collect();
    Tensor::new(x0.shape(), data)
}

fn batch_extent(x0: &Tensor) -> Result<usize> {
    match x0.shape().first() {
        Some(&b) => Ok(b),
        None => Err(Error::shape("ddpm_loss", "batch tensor must have at least one axis")),
    }
}

/// Builds the ε-prediction loss in `g`:
/// mean over batch and pixels of `(ε − ε̂(x_t, t))²`, with `x_t` formed per
/// element from the closed-form marginal at that element's step `ts[i]`.
/// Gradients flow only into the predictor's parameters.
pub fn ddpm_loss_graph(
    g: &mut Graph,
    predictor: &impl NoisePredictor,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let b = batch_extent(x0)?;
    if b == 0 {
        return Err(Error::shape("ddpm_loss", "empty batch"));
    }
    if eps.shape() != x0.shape() {
        return Err(Error::shape(
            "ddpm_loss",
            format!("noise shape {:?} does not match data shape {:?}", eps.shape(), x0.shape()),
        ));
    }
    if ts.len() != b {
        return Err(Error::shape("ddpm_loss", format!("{} steps for batch of {b}", ts.len())));
    }
    let chunk = x0.numel() / b;
    let mut xt = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        if t == 0 || t > sched.steps() {
            return Err(Error::param(format!("step {t} outside 1..={}", sched.steps())));
        }
        let a_bar = sched.a_bar(t)?;
        let (ca, cb) = (a_bar.sqrt(), (1.0 - a_bar).sqrt());
        let (x0d, epsd) = (&x0.data()[i * chunk..(i + 1) * chunk], &eps.data()[i * chunk..(i + 1) * chunk]);
        xt.extend(x0d.iter().zip(epsd).map(|(&x, &e)| ca * x + cb * e));
    }
    let xt = g.constant(Tensor::new(x0.shape(), xt)?);
    let pred = predictor.predict(g, xt, ts)?;
    let target = g.constant(eps.clone());
    let se = g.squared_error(target, pred)?;
    g.mean_all(se)
}

/// Value of the ε-prediction loss (no gradients).
pub fn ddpm_loss(
    predictor: &impl NoisePredictor,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = ddpm_loss_graph(&mut g, predictor, x0, ts, eps, sched)?;
    g.value(loss).item()
}

/// Runs the predictor on a plain tensor batch outside any training graph.
fn predict_value(predictor: &impl NoisePredictor, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let node = g.constant(x_t.clone());
    let pred = predictor.predict(&mut g, node, ts)?;
    Ok(g.value(pred).clone())
}

/// One backward step from `x_t` to `x_{t−1}`.
///
/// A fresh-noise tensor `z` is drawn from `rng` at every step regardless of
/// the σ scale, so different modes consume identical random streams.
pub fn sample_step(
    x_t: &Tensor,
    t: usize,
    predictor: &impl NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if t == 0 || t > sched.steps() {
        return Err(Error::param(format!("step {t} outside 1..={}", sched.steps())));
    }
    let b = batch_extent(x_t)?;
    let eps_hat = predict_value(predictor, x_t, &vec![t; b])?;
    if eps_hat.shape() != x_t.shape() {
        return Err(Error::shape(
            "sample_step",
            format!("prediction shape {:?} does not match {:?}", eps_hat.shape(), x_t.shape()),
        ));
    }
    let (scale, noise_coef) = match cfg.mode {
        SamplerMode::Standard => {
            let a = sched.a(t)?;
            let a_bar = sched.a_bar(t)?;
            (1.0 / a.sqrt(), (1.0 - a) / (1.0 - a_bar).sqrt())
        }
        SamplerMode::Marginal => {
            let a_bar = sched.a_bar(t)?;
            (1.0 / a_bar.sqrt(), (1.0 - a_bar).sqrt())
        }
    };
    let sigma = match cfg.sigma_mode {
        SigmaMode::Beta if t > 1 => sched.beta(t)?.sqrt(),
        _ => 0.0,
    };
    let z = Tensor::randn(x_t.shape(), rng);
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &zi)| scale * (x - noise_coef * e) + sigma * zi)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Full ancestral sampling: starts from `x_T ~ N(0, 1)` of shape
/// `(n, 1, h, w)`, applies [`sample_step`] for `t = T..=1`, and clamps the
/// result to [−1, 1] at the end only.
pub fn sample(
    predictor: &impl NoisePredictor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if cfg.steps != sched.steps() {
        return Err(Error::param(format!(
            "sampler configured for {} steps but schedule has {}",
            cfg.steps,
            sched.steps()
        )));
    }
    if n == 0 {
        return Ok(Tensor::zeros(&[0, 1, h, w]));
    }
    let mut x = Tensor::randn(&[n, 1, h, w], rng);
    for t in (1..=sched.steps()).rev() {
        x = sample_step(&x, t, predictor, sched, cfg, rng)?;
    }
    x.map(|v| v.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;
    use rand::SeedableRng;

    /// Predicts a fixed tensor regardless of input.
    struct FixedPredictor(Tensor);

    impl NoisePredictor for FixedPredictor {
        fn predict(&self, g: &mut Graph, _x_t: NodeId, _ts: &[usize]) -> Result<NodeId> {
            Ok(g.constant(self.0.clone()))
        }
    }

    /// Predicts c · x_t.
    struct ScalePredictor(f64);

    impl NoisePredictor for ScalePredictor {
        fn predict(&self, g: &mut Graph, x_t: NodeId, _ts: &[usize]) -> Result<NodeId> {
            g.scale(x_t, self.0)
        }
    }

    fn t1(v: f64) -> Tensor {
        Tensor::scalar(v).unwrap()
    }

    #[test]
    fn zero_data_zero_noise_stays_zero() {
        let sched = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let x0 = Tensor::zeros(&[2, 3]);
        let out = forward_iterative_with(&x0, 7, &sched, |_| Tensor::zeros(&[2, 3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_step_matches_hand_substitution() {
        // a_1 = 0.81 → x_1 = 0.9·1 + √0.19·1.
        let sched = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let out = forward_iterative_with(&t1(1.0), 1, &sched, |_| t1(1.0)).unwrap();
        let expected = 0.9 + 0.19_f64.sqrt();
        assert!((out.item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.335_889_894_354_067_4).abs() < 1e-12);
    }

    #[test]
    fn closed_form_with_zero_noise_scales_by_sqrt_abar() {
        // ā_1 = 0.25 via β = 0.75.
        let sched = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x0 = Tensor::new(&[4], vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let eps = Tensor::zeros(&[4]);
        let out = forward_closed(&x0, 1, &eps, &sched).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - 0.5 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_matches_hand_substitution() {
        let sched = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let out = forward_closed(&t1(1.0), 1, &t1(1.0), &sched).unwrap();
        let expected = 0.5 + 0.75_f64.sqrt();
        assert!((out.item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.366_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn closed_form_step_zero_returns_input_exactly() {
        let sched = make_linear_schedule(5, 0.1, 0.2).unwrap();
        let x0 = Tensor::new(&[3], vec![0.3, -0.7, 0.9]).unwrap();
        let eps = Tensor::new(&[3], vec![5.0, -5.0, 5.0]).unwrap();
        let out = forward_closed(&x0, 0, &eps, &sched).unwrap();
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let sched = make_linear_schedule(5, 0.1, 0.2).unwrap();
        let x0 = Tensor::zeros(&[2, 2]);
        let eps = Tensor::zeros(&[4]);
        assert!(forward_closed(&x0, 1, &eps, &sched).is_err());
        assert!(forward_closed(&x0, 6, &Tensor::zeros(&[2, 2]), &sched).is_err());
        assert!(forward_iterative_with(&x0, 0, &sched, |_| Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let sched = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let eps = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let predictor = FixedPredictor(eps.clone());
        let loss = ddpm_loss(&predictor, &x0, &[3, 7], &eps, &sched).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn constant_offset_prediction_gives_unit_loss() {
        let sched = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let eps = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let off = eps.map(|v| v + 1.0).unwrap();
        let predictor = FixedPredictor(off);
        let loss = ddpm_loss(&predictor, &x0, &[1, 10], &eps, &sched).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_independent_plain_loop_evaluation() {
        let sched = make_linear_schedule(10, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let eps = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let ts = [4usize, 9];
        let c = 0.37;
        let loss = ddpm_loss(&ScalePredictor(c), &x0, &ts, &eps, &sched).unwrap();

        // Independent evaluation with plain loops.
        let chunk = 16;
        let mut acc = 0.0;
        for i in 0..2 {
            let a_bar = sched.a_bar(ts[i]).unwrap();
            for j in 0..chunk {
                let xt = a_bar.sqrt() * x0.data()[i * chunk + j] + (1.0 - a_bar).sqrt() * eps.data()[i * chunk + j];
                let d = eps.data()[i * chunk + j] - c * xt;
                acc += d * d;
            }
        }
        let expected = acc / 32.0;
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_exact_match() {
        let sched = make_linear_schedule(5, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::randn(&[1, 1, 2, 2], &mut rng);
        let eps = Tensor::randn(&[1, 1, 2, 2], &mut rng);
        let exact = ddpm_loss(&FixedPredictor(eps.clone()), &x0, &[2], &eps, &sched).unwrap();
        assert_eq!(exact, 0.0);
        let off = eps.map(|v| v + 1e-3).unwrap();
        let near = ddpm_loss(&FixedPredictor(off), &x0, &[2], &eps, &sched).unwrap();
        assert!(near > 0.0);
    }

    #[test]
    fn single_step_inversion_recovers_the_clean_image() {
        let sched = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::randn(&[1, 1, 4, 4], &mut rng).map(|v| 0.5 * v).unwrap();
        let eps = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let x1 = forward_closed(&x0, 1, &eps, &sched).unwrap();
        let cfg = SamplerConfig::new(SamplerMode::Standard, SigmaMode::Zero, 1, 0).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        let rec = sample_step(&x1, 1, &FixedPredictor(eps), &sched, &cfg, &mut rng2).unwrap();
        assert!(rec.max_abs_diff(&x0).unwrap() < 1e-5);
    }

    #[test]
    fn marginal_mode_with_zero_prediction_rescales_input() {
        let sched = make_linear_schedule(4, 0.1, 0.4).unwrap();
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.5, -0.25]).unwrap();
        let cfg = SamplerConfig::new(SamplerMode::Marginal, SigmaMode::Zero, 4, 0).unwrap();
        let zero = FixedPredictor(Tensor::zeros(&[1, 1, 1, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = sample_step(&x, 3, &zero, &sched, &cfg, &mut rng).unwrap();
        let scale = 1.0 / sched.a_bar(3).unwrap().sqrt();
        for (o, xi) in out.data().iter().zip(x.data()) {
            assert!((o - scale * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn modes_coincide_at_the_first_step() {
        let sched = make_linear_schedule(6, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 1, 2, 2], &mut rng);
        let fixed = FixedPredictor(Tensor::randn(&[2, 1, 2, 2], &mut rng));
        let run = |mode| {
            let cfg = SamplerConfig::new(mode, SigmaMode::Zero, 6, 0).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(9);
            sample_step(&x, 1, &fixed, &sched, &cfg, &mut r).unwrap()
        };
        let a = run(SamplerMode::Standard);
        let b = run(SamplerMode::Marginal);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_and_stays_in_range() {
        let sched = make_linear_schedule(8, 0.01, 0.2).unwrap();
        let cfg = SamplerConfig::new(SamplerMode::Standard, SigmaMode::Beta, 8, 42).unwrap();
        let predictor = ScalePredictor(0.2);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample(&predictor, &sched, &cfg, 3, 4, 4, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), &[3, 1, 4, 4]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_batch_yields_empty_tensor() {
        let sched = make_linear_schedule(4, 0.01, 0.2).unwrap();
        let cfg = SamplerConfig::new(SamplerMode::Standard, SigmaMode::Zero, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample(&ScalePredictor(0.1), &sched, &cfg, 0, 4, 4, &mut rng).unwrap();
        assert_eq!(out.shape(), &[0, 1, 4, 4]);
        assert_eq!(out.numel(), 0);
    }

    #[test]
    fn sampler_step_count_must_match_schedule() {
        let sched = make_linear_schedule(4, 0.01, 0.2).unwrap();
        let cfg = SamplerConfig::new(SamplerMode::Standard, SigmaMode::Zero, 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample(&ScalePredictor(0.1), &sched, &cfg, 1, 4, 4, &mut rng).is_err());
    }

    #[test]
    fn sample_step_rejects_step_zero() {
        let sched = make_linear_schedule(4, 0.01, 0.2).unwrap();
        let cfg = SamplerConfig::new(SamplerMode::Standard, SigmaMode::Zero, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let zero = FixedPredictor(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(sample_step(&x, 0, &zero, &sched, &cfg, &mut rng).is_err());
    }

    #[test]
    fn mode_tokens_round_trip() {
        assert_eq!(SamplerMode::parse("standard").unwrap(), SamplerMode::Standard);
        assert_eq!(SamplerMode::parse("literal_eq3").unwrap(), SamplerMode::Marginal);
        assert_eq!(SamplerMode::parse(SamplerMode::Marginal.token()).unwrap(), SamplerMode::Marginal);
        assert!(SamplerMode::parse("posterior").is_err());
        assert_eq!(SigmaMode::parse("beta").unwrap(), SigmaMode::Beta);
        assert_eq!(SigmaMode::parse("zero").unwrap(), SigmaMode::Zero);
        assert!(SigmaMode::parse("unit").is_err());
    }
}

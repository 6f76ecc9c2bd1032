//! End-to-end pipeline stages behind the command-line front end: dataset
//! generation, per-class denoiser training, sampling, momentum-contrast
//! pretraining, linear-probe fitting, and metric evaluation. Every stage is
//! deterministic given (config, seed): training steps derive their own
//! random streams from the master seed and the step index, so an
//! interrupted run resumed from its checkpoint retraces the exact steps an
//! uninterrupted run would have taken.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{self, mix64, DefectClass, LabeledDataset, CLASS_COUNT};
use crate::denoiser::Denoiser;
use crate::diffusion::{ddpm_loss_graph, sample, SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::eval::{
    extract_features, frechet_distance, inception_style_score, mean_ap, per_class_csv, pr_curve,
    precision_recall, summary_text, train_probe, FeatureGaussian, LinearProbe,
};
use crate::io::{self, DType};
use crate::moco::{ContrastConfig, Encoder, KeyQueue, MocoState};
use crate::params::{Adam, SgdMomentum};
use crate::schedule::{cosine_lr, make_linear_schedule};
use crate::tensor::Tensor;

/// Linear-probe training epochs used by the probe stage.
pub const PROBE_EPOCHS: usize = 30;
/// Initial probe learning rate (cosine-annealed).
pub const PROBE_LR: f64 = 0.5;
/// Probe minibatch size.
pub const PROBE_BATCH: usize = 64;

// Stage tags feeding per-step stream derivation.
const TAG_DDPM: u64 = 0xDD90;
const TAG_MOCO_WARMUP: u64 = 0x30C1;
const TAG_MOCO: u64 = 0x30C2;
const TAG_PROBE: u64 = 0x9806;

/// Independent random stream for one optimizer step of one stage.
fn stage_rng(seed: u64, stage: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ mix64(stage)) ^ step))
}

/// Rows `idx` of an `(n, c, h, w)` batch, with repetition allowed.
fn gather_rows(images: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::shape("gather_rows", format!("expected a rank-4 batch, got {shape:?}")));
    }
    let n = shape[0];
    let plane: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * plane);
    for &i in idx {
        if i >= n {
            return Err(Error::contract(format!("row {i} out of range for batch of {n}")));
        }
        data.extend_from_slice(&images.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(&[idx.len(), shape[1], shape[2], shape[3]], data)
}

fn load_dataset_checked(cfg: &RunConfig, data_dir: &Path) -> Result<LabeledDataset> {
    let ds = data::load_dataset(data_dir)?;
    if ds.resolution() != cfg.h {
        return Err(Error::param(format!(
            "dataset at {} holds {}×{} images but the config says h={}",
            data_dir.display(),
            ds.resolution(),
            ds.resolution(),
            cfg.h
        )));
    }
    Ok(ds)
}

/// Training-stage outcome: the per-step losses of this invocation and the
/// artifact paths.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Step index this invocation started from (> 0 on resume).
    pub start_step: usize,
    /// Losses of the steps run in this invocation.
    pub losses: Vec<f64>,
}

struct StepLog {
    path: PathBuf,
    lines: Vec<String>,
}

impl StepLog {
    /// Starts a `step,loss,lr` log, keeping existing lines when resuming.
    fn open(path: PathBuf, resuming: bool) -> Result<Self> {
        let lines = if resuming && path.exists() {
            io::read_text(&path)?.lines().map(str::to_string).collect()
        } else {
            vec!["step,loss,lr".to_string()]
        };
        println!("step,loss,lr");
        Ok(StepLog { path, lines })
    }

    fn record(&mut self, step: usize, loss: f64, lr: f64) {
        let line = format!("{step},{loss:.6},{lr:.6}");
        println!("{line}");
        self.lines.push(line);
    }

    fn finish(&self) -> Result<()> {
        io::write_text(&self.path, &(self.lines.join("\n") + "\n"))
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

/// Builds the synthetic labeled dataset and writes it (PGM files, label and
/// split CSVs, consolidated tensor file) to `dir`. Prints per-class counts.
pub fn run_gen_data(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let ds = data::build_dataset(&cfg.counts, cfg.h, cfg.seed, cfg.train_frac)?;
    data::save_dataset(dir, &ds)?;
    for class in DefectClass::ALL {
        let count = ds.labels.iter().filter(|&&l| l == class.code()).count();
        println!("count_{}={count}", class.name());
    }
    println!("total={}", ds.len());
    println!("train={}", ds.train_idx.len());
    println!("test={}", ds.test_idx.len());
    Ok(dir.to_path_buf())
}

// ── train-ddpm ───────────────────────────────────────────────────────

/// Checkpoint path of the denoiser for `class` under `out_dir`.
pub fn ddpm_checkpoint_path(out_dir: &Path, class: DefectClass) -> PathBuf {
    out_dir.join(format!("ddpm_{}.dft", class.name()))
}

/// Trains (or resumes) the unconditional denoiser for one class on the
/// dataset's training split, annealing Adam's learning rate by cosine over
/// the full `total_steps` horizon, and writes a checkpoint containing
/// model and optimizer state. `steps_this_run` caps how many steps this
/// invocation performs (`None` runs to the horizon); a capped run saves a
/// mid-training checkpoint that a later invocation continues bit-exactly.
pub fn run_train_ddpm(
    cfg: &RunConfig,
    class: DefectClass,
    data_dir: &Path,
    out_dir: &Path,
    steps_this_run: Option<usize>,
) -> Result<TrainReport> {
    let ds = load_dataset_checked(cfg, data_dir)?;
    let class_train: Vec<usize> = ds
        .train_idx
        .iter()
        .copied()
        .filter(|&i| ds.labels[i] == class.code())
        .collect();
    if class_train.is_empty() {
        return Err(Error::param(format!("no training images of class '{}'", class.name())));
    }
    let (images, _) = ds.gather(&class_train)?;
    let n = images.shape()[0];
    let sched = make_linear_schedule(cfg.t, cfg.beta_start, cfg.beta_end)?;

    io::ensure_dir(out_dir)?;
    let ckpt = ddpm_checkpoint_path(out_dir, class);
    let log_path = out_dir.join(format!("ddpm_{}_log.csv", class.name()));
    let stage = TAG_DDPM + class.code() as u64;

    let (mut model, mut opt, start) = if ckpt.exists() {
        let model = Denoiser::load(&ckpt)?;
        if model.width() != cfg.width || model.max_t() != cfg.t {
            return Err(Error::param(format!(
                "checkpoint is a width-{} model over {} steps; config says width={} t={}",
                model.width(),
                model.max_t(),
                cfg.width,
                cfg.t
            )));
        }
        let sections = io::load_checkpoint(&ckpt)?;
        let mut opt = Adam::with_defaults();
        let entries: Vec<(String, Tensor)> = sections
            .iter()
            .filter_map(|(name, t)| {
                name.strip_prefix("opt.")
                    .filter(|rest| rest.starts_with("adam"))
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect();
        opt.import_state(&entries)?;
        let start = io::section(&sections, "opt.step")?.item()? as usize;
        (model, opt, start)
    } else {
        let init_seed = mix64(cfg.seed ^ mix64(stage));
        (Denoiser::init(init_seed, cfg.width, cfg.t)?, Adam::with_defaults(), 0)
    };
    if start > cfg.total_steps {
        return Err(Error::param(format!(
            "checkpoint already trained {start} steps, beyond the configured total {}",
            cfg.total_steps
        )));
    }
    let end = match steps_this_run {
        Some(cap) => (start + cap).min(cfg.total_steps),
        None => cfg.total_steps,
    };

    let mut log = StepLog::open(log_path.clone(), start > 0)?;
    let mut losses = Vec::with_capacity(end - start);
    for s in start..end {
        let mut rng = stage_rng(cfg.seed, stage, s as u64);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..n)).collect();
        let x0 = gather_rows(&images, &idx)?;
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(1..=cfg.t)).collect();
        let eps = Tensor::randn(&[cfg.batch, 1, cfg.h, cfg.h], &mut rng);

        let mut g = Graph::new();
        let loss_node = ddpm_loss_graph(&mut g, &model, &x0, &ts, &eps, &sched)?;
        let loss = g.value(loss_node).item()?;
        let grads = g.backward(loss_node)?;
        let lr = cosine_lr(s, cfg.total_steps, cfg.ddpm_lr)?;
        opt.step(model.store_mut(), &grads, lr)?;

        log.record(s, loss, lr);
        losses.push(loss);
    }

    let mut extras = vec![("opt.step".to_string(), Tensor::new(&[1], vec![end as f64])?)];
    for (name, t) in opt.export_state() {
        extras.push((format!("opt.{name}"), t));
    }
    model.save_with_extras(&ckpt, &extras)?;
    log.finish()?;
    Ok(TrainReport { checkpoint: ckpt, log_path, start_step: start, losses })
}

// ── sample ───────────────────────────────────────────────────────────

/// Sampling-stage outcome.
#[derive(Debug, Clone)]
pub struct SampleReport {
    /// The written PGM files, in index order.
    pub pgm_files: Vec<PathBuf>,
    /// Consolidated tensor file holding all samples.
    pub dft_path: PathBuf,
    /// Mean absolute pixel difference against the other update rule run
    /// from the same noise.
    pub divergence: f64,
}

/// Draws `n` images from a trained denoiser with the configured update
/// rule, then repeats the run under the alternate rule from the same
/// initial noise and reports the mean absolute divergence.
pub fn run_sample(cfg: &RunConfig, checkpoint: &Path, n: usize, out_dir: &Path) -> Result<SampleReport> {
    if n == 0 {
        return Err(Error::param("sample count must be ≥ 1"));
    }
    let model = Denoiser::load(checkpoint)?;
    if model.max_t() != cfg.t {
        return Err(Error::param(format!(
            "checkpoint was trained over {} steps; config says t={}",
            model.max_t(),
            cfg.t
        )));
    }
    let sched = make_linear_schedule(cfg.t, cfg.beta_start, cfg.beta_end)?;

    let draw = |mode: SamplerMode| -> Result<Tensor> {
        let sampler_cfg = SamplerConfig::new(mode, cfg.sigma_mode, cfg.t, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample(&model, &sched, &sampler_cfg, n, cfg.h, cfg.h, &mut rng)
    };
    let x = draw(cfg.sampler_mode)?;
    let alternate = match cfg.sampler_mode {
        SamplerMode::Standard => SamplerMode::Marginal,
        SamplerMode::Marginal => SamplerMode::Standard,
    };
    let y = draw(alternate)?;
    let divergence = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f64>()
        / x.numel() as f64;

    let samples_dir = out_dir.join("samples");
    io::ensure_dir(&samples_dir)?;
    let plane = cfg.h * cfg.h;
    let mut pgm_files = Vec::with_capacity(n);
    for i in 0..n {
        let img = Tensor::new(&[1, cfg.h, cfg.h], x.data()[i * plane..(i + 1) * plane].to_vec())?;
        let path = samples_dir.join(format!("sample_{i:03}.pgm"));
        io::save_pgm(&path, &img)?;
        pgm_files.push(path);
    }
    let dft_path = samples_dir.join("samples.dft");
    io::save_dft(&dft_path, &[("samples".to_string(), x)], DType::F32)?;

    println!("samples={n}");
    println!("sampler_mode={}", cfg.sampler_mode.token());
    println!("alternate_mode={}", alternate.token());
    println!("sampler_divergence={divergence:.6}");
    Ok(SampleReport { pgm_files, dft_path, divergence })
}

// ── train-moco ───────────────────────────────────────────────────────

/// Checkpoint path of the contrastive encoder pair under `out_dir`.
pub fn moco_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("moco.dft")
}

fn save_moco_checkpoint(path: &Path, cfg: &RunConfig, state: &MocoState, next_step: usize) -> Result<()> {
    let width = state.query.width();
    let mut sections = vec![("meta".to_string(), Tensor::new(&[1], vec![width as f64])?)];
    for (name, t) in state.query.store().iter() {
        sections.push((name.to_string(), t.clone()));
    }
    sections.push(("key./meta".to_string(), Tensor::new(&[1], vec![width as f64])?));
    for (name, t) in state.key.store().iter() {
        sections.push((format!("key./{name}"), t.clone()));
    }
    sections.extend(state.queue.export_sections()?);
    sections.push(("opt.step".to_string(), Tensor::new(&[1], vec![next_step as f64])?));
    for (name, t) in state.optimizer.export_state() {
        sections.push((format!("opt.{name}"), t));
    }
    let manifest = vec![
        ("kind".to_string(), "moco".to_string()),
        ("width".to_string(), width.to_string()),
        ("loss_mode".to_string(), cfg.loss_mode.token().to_string()),
        ("k".to_string(), cfg.k.to_string()),
        ("tau".to_string(), cfg.tau.to_string()),
        ("m".to_string(), cfg.m.to_string()),
        ("batch".to_string(), cfg.batch.to_string()),
    ];
    io::save_checkpoint(path, &sections, &manifest)
}

fn load_moco_checkpoint(path: &Path, cfg: &RunConfig) -> Result<(MocoState, usize)> {
    let sections = io::load_checkpoint(path)?;
    let query = Encoder::from_sections(&sections)?;
    let key = Encoder::from_prefixed_sections(&sections, "key./")?;
    let queue = KeyQueue::from_sections(&sections)?;
    if queue.capacity() != cfg.k || queue.width() != query.embed_dim() {
        return Err(Error::param(format!(
            "checkpoint queue is {}×{}; config wants {}×{}",
            queue.capacity(),
            queue.width(),
            cfg.k,
            query.embed_dim()
        )));
    }
    let mut optimizer = SgdMomentum::new(0.9, 1e-4)?;
    let entries: Vec<(String, Tensor)> = sections
        .iter()
        .filter_map(|(name, t)| {
            name.strip_prefix("opt.")
                .filter(|rest| rest.starts_with("velocity/"))
                .map(|rest| (rest.to_string(), t.clone()))
        })
        .collect();
    optimizer.import_state(&entries)?;
    let start = io::section(&sections, "opt.step")?.item()? as usize;
    Ok((MocoState { query, key, queue, optimizer }, start))
}

/// Trains (or resumes) momentum-contrast pretraining on the dataset's
/// training split. Warmup steps that fill the negative queue run before
/// step 0 and are excluded from the loss log. `steps_this_run` caps how
/// many logged steps this invocation performs (`None` runs to the
/// `total_steps` horizon); a capped run saves a mid-training checkpoint
/// that a later invocation continues bit-exactly.
pub fn run_train_moco(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    steps_this_run: Option<usize>,
) -> Result<TrainReport> {
    let ds = load_dataset_checked(cfg, data_dir)?;
    let (images, _) = ds.gather(&ds.train_idx)?;
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::param("dataset has no training split"));
    }
    let ccfg = ContrastConfig::new(cfg.tau, cfg.m, cfg.k, cfg.batch, cfg.loss_mode)?;

    io::ensure_dir(out_dir)?;
    let ckpt = moco_checkpoint_path(out_dir);
    let log_path = out_dir.join("moco_log.csv");

    let (mut state, start) = if ckpt.exists() {
        let (state, start) = load_moco_checkpoint(&ckpt, cfg)?;
        if state.query.width() != cfg.encoder_width {
            return Err(Error::param(format!(
                "checkpoint is a width-{} encoder; config says encoder_width={}",
                state.query.width(),
                cfg.encoder_width
            )));
        }
        (state, start)
    } else {
        let init_seed = mix64(cfg.seed ^ mix64(TAG_MOCO));
        (MocoState::init(init_seed, cfg.encoder_width, &ccfg)?, 0)
    };
    if start > cfg.total_steps {
        return Err(Error::param(format!(
            "checkpoint already trained {start} steps, beyond the configured total {}",
            cfg.total_steps
        )));
    }
    let end = match steps_this_run {
        Some(cap) => (start + cap).min(cfg.total_steps),
        None => cfg.total_steps,
    };

    let draw_batch = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..n)).collect();
        gather_rows(&images, &idx)
    };

    // Queue warmup: excluded from the reported loss trace.
    while !state.queue.is_full() {
        let w = state.queue.len() / cfg.batch;
        let mut rng = stage_rng(cfg.seed, TAG_MOCO_WARMUP, w as u64);
        let batch = draw_batch(&mut rng)?;
        state.step_allow_partial(&batch, &ccfg, cfg.lr0, &mut rng)?;
    }

    let mut log = StepLog::open(log_path.clone(), start > 0)?;
    let mut losses = Vec::with_capacity(end - start);
    for s in start..end {
        let mut rng = stage_rng(cfg.seed, TAG_MOCO, s as u64);
        let batch = draw_batch(&mut rng)?;
        let lr = cosine_lr(s, cfg.total_steps, cfg.lr0)?;
        let loss = crate::moco::moco_step(&mut state, &batch, &ccfg, lr, &mut rng)?;
        log.record(s, loss, lr);
        losses.push(loss);
    }

    save_moco_checkpoint(&ckpt, cfg, &state, end)?;
    log.finish()?;
    Ok(TrainReport { checkpoint: ckpt, log_path, start_step: start, losses })
}

// ── probe ────────────────────────────────────────────────────────────

/// Probe-stage outcome.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub probe_path: PathBuf,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Probe checkpoint path under `out_dir`.
pub fn probe_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("probe.dft")
}

/// Loads the query encoder from `encoder_ckpt`, trains a linear probe on
/// its pooled features over the training split, and writes the probe plus
/// accuracy metrics.
pub fn run_probe(cfg: &RunConfig, encoder_ckpt: &Path, data_dir: &Path, out_dir: &Path) -> Result<ProbeReport> {
    let sections = io::load_checkpoint(encoder_ckpt)?;
    let encoder = Encoder::from_sections(&sections)?;
    let ds = load_dataset_checked(cfg, data_dir)?;
    if ds.test_idx.is_empty() {
        return Err(Error::param("dataset has no held-out split"));
    }

    let probe_seed = mix64(cfg.seed ^ mix64(TAG_PROBE));
    let probe = train_probe(&encoder, &ds, PROBE_EPOCHS, PROBE_LR, PROBE_BATCH, probe_seed)?;

    let (train_f, train_y) = extract_features(&encoder, &ds, &ds.train_idx)?;
    let (test_f, test_y) = extract_features(&encoder, &ds, &ds.test_idx)?;
    let train_accuracy = probe.accuracy(&train_f, &train_y)?;
    let test_accuracy = probe.accuracy(&test_f, &test_y)?;

    io::ensure_dir(out_dir)?;
    let probe_path = probe_checkpoint_path(out_dir);
    let sections = vec![
        ("w".to_string(), probe.weights().clone()),
        ("b".to_string(), probe.bias().clone()),
    ];
    let manifest = vec![
        ("kind".to_string(), "probe".to_string()),
        ("input_dim".to_string(), probe.input_dim().to_string()),
    ];
    io::save_checkpoint(&probe_path, &sections, &manifest)?;

    let metrics = format!("probe_train_accuracy={train_accuracy:.6}\nprobe_test_accuracy={test_accuracy:.6}\n");
    print!("{metrics}");
    io::write_text(out_dir.join("probe_metrics.txt"), &metrics)?;
    Ok(ProbeReport { probe_path, train_accuracy, test_accuracy })
}

// ── eval ─────────────────────────────────────────────────────────────

/// Evaluation outcome: headline metrics plus the written report files.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub map: f64,
    pub per_class_ap: [f64; CLASS_COUNT],
    pub fid: f64,
    pub inception_style: f64,
    pub accuracy: f64,
    /// The four PR-curve CSVs, in class-code order.
    pub pr_files: Vec<PathBuf>,
    pub metrics_csv: PathBuf,
    pub summary_path: PathBuf,
}

/// Loads an encoder, probe, and sample batch; scores the held-out split
/// (precision/recall/AP/mAP), computes the encoder-feature Fréchet
/// distance between samples and real held-out images and the
/// inception-style score of the probe's posteriors on the samples; writes
/// four PR-curve CSVs, a per-class metrics CSV, and a flat summary.
pub fn run_eval(
    cfg: &RunConfig,
    encoder_ckpt: &Path,
    probe_ckpt: &Path,
    samples_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    let encoder = Encoder::from_sections(&io::load_checkpoint(encoder_ckpt)?)?;
    let probe_sections = io::load_checkpoint(probe_ckpt)?;
    let w = io::section(&probe_sections, "w")?.clone();
    let b = io::section(&probe_sections, "b")?.clone();
    let probe = LinearProbe::from_parts(w, b)?;
    if probe.input_dim() != encoder.feature_dim() {
        return Err(Error::param(format!(
            "probe expects {}-dimensional features; encoder produces {}",
            probe.input_dim(),
            encoder.feature_dim()
        )));
    }
    let ds = load_dataset_checked(cfg, data_dir)?;
    if ds.test_idx.is_empty() {
        return Err(Error::param("dataset has no held-out split"));
    }

    let samples = {
        let sections = io::load_dft(samples_path)?;
        let t = io::section(&sections, "samples")?.clone();
        let shape = t.shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.h || shape[3] != cfg.h {
            return Err(Error::param(format!(
                "sample batch must be (n, 1, {}, {}), got {shape:?}",
                cfg.h, cfg.h
            )));
        }
        if shape[0] < 2 {
            return Err(Error::param("need at least 2 samples for a feature Gaussian"));
        }
        t
    };

    // Held-out classification metrics. Ranking metrics (AP, PR curves) use
    // the probe's softmax posteriors rather than raw logits: posteriors are
    // comparable across samples, while logit offsets are not, and a class
    // column of logits can rank poorly even when every argmax is correct.
    let (test_f, test_y) = extract_features(&encoder, &ds, &ds.test_idx)?;
    let posteriors = probe.probabilities(&test_f)?;
    let preds = probe.classify(&test_f)?;
    let accuracy = probe.accuracy(&test_f, &test_y)?;
    let (map, per_class_ap) = mean_ap(&posteriors, &test_y)?;

    let metrics_dir = out_dir.join("metrics");
    io::ensure_dir(&metrics_dir)?;
    let mut pr_files = Vec::with_capacity(CLASS_COUNT);
    let mut rows = Vec::with_capacity(CLASS_COUNT);
    for class in DefectClass::ALL {
        let c = class.code();
        let (precision, recall) = precision_recall(&preds, &test_y, c)?;
        let column: Vec<f64> =
            (0..test_y.len()).map(|i| posteriors.data()[i * CLASS_COUNT + c]).collect();
        let positives: Vec<bool> = test_y.iter().map(|&l| l == c).collect();
        let curve = pr_curve(&column, &positives)?;
        let path = metrics_dir.join(format!("pr_{}.csv", class.name()));
        io::write_text(&path, &curve.to_csv())?;
        pr_files.push(path);
        rows.push((class.name().to_string(), precision, recall, per_class_ap[c]));
    }
    let metrics_csv = metrics_dir.join("metrics.csv");
    io::write_text(&metrics_csv, &per_class_csv(&rows))?;

    // Generative metrics on the sample batch.
    let sample_features = encoder.pooled_value(&samples)?;
    let real_gaussian = FeatureGaussian::fit(&test_f)?;
    let sample_gaussian = FeatureGaussian::fit(&sample_features)?;
    let fid = frechet_distance(&sample_gaussian, &real_gaussian)?;
    let sample_probs = probe.probabilities(&sample_features)?;
    let inception_style = inception_style_score(&sample_probs)?;

    let summary = summary_text(map, fid, inception_style, accuracy);
    let summary_path = metrics_dir.join("summary.txt");
    io::write_text(&summary_path, &summary)?;
    print!("{summary}");

    Ok(EvalReport {
        map,
        per_class_ap,
        fid,
        inception_style,
        accuracy,
        pr_files,
        metrics_csv,
        summary_path,
    })
}

//! Linear-probe classification on frozen encoder features and the reported
//! metrics: per-class precision/recall, PR curves with step-interpolated
//! average precision, mean AP, a Fréchet distance between feature
//! Gaussians, and an inception-style posterior diversity score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{LabeledDataset, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::moco::Encoder;
use crate::schedule::cosine_lr;
use crate::tensor::Tensor;

/// Largest feature dimension the eigensolver accepts.
pub const MAX_FEATURE_DIM: usize = 64;

// ── Linear probe ─────────────────────────────────────────────────────

/// Softmax classifier over frozen features: a `(d, 4)` weight matrix and a
/// 4-vector bias.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    w: Tensor,
    b: Tensor,
}

impl LinearProbe {
    /// Zero-initialized probe for `d`-dimensional features.
    pub fn zeros(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::param("feature dimension must be ≥ 1"));
        }
        Ok(LinearProbe {
            w: Tensor::zeros(&[d, CLASS_COUNT]),
            b: Tensor::zeros(&[CLASS_COUNT]),
        })
    }

    pub fn from_parts(w: Tensor, b: Tensor) -> Result<Self> {
        if w.shape().len() != 2 || w.shape()[1] != CLASS_COUNT || b.shape() != [CLASS_COUNT] {
            return Err(Error::param(format!(
                "probe parts must be (d, {CLASS_COUNT}) and ({CLASS_COUNT},), got {:?} and {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(LinearProbe { w, b })
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn bias(&self) -> &Tensor {
        &self.b
    }

    fn check_features(&self, features: &Tensor) -> Result<usize> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape(
                "probe",
                format!("features must be (n, {}), got {shape:?}", self.input_dim()),
            ));
        }
        Ok(shape[0])
    }

    /// Raw class scores: `features · W + b`, shape `(n, 4)`.
    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        let n = self.check_features(features)?;
        let d = self.input_dim();
        let mut out = vec![0.0; n * CLASS_COUNT];
        for i in 0..n {
            let row = &features.data()[i * d..(i + 1) * d];
            for c in 0..CLASS_COUNT {
                let mut acc = self.b.data()[c];
                for (j, &x) in row.iter().enumerate() {
                    acc += x * self.w.data()[j * CLASS_COUNT + c];
                }
                out[i * CLASS_COUNT + c] = acc;
            }
        }
        Tensor::new(&[n, CLASS_COUNT], out)
    }

    /// Row-wise softmax of the scores: class posteriors, rows summing to 1.
    pub fn probabilities(&self, features: &Tensor) -> Result<Tensor> {
        let scores = self.scores(features)?;
        let n = scores.shape()[0];
        let mut out = scores.data().to_vec();
        for row in out.chunks_exact_mut(CLASS_COUNT) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::new(&[n, CLASS_COUNT], out)
    }

    /// Predicted class per row: the argmax score, earliest class on ties.
    pub fn classify(&self, features: &Tensor) -> Result<Vec<usize>> {
        let scores = self.scores(features)?;
        Ok(scores
            .data()
            .chunks_exact(CLASS_COUNT)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of rows whose predicted class matches the label.
    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let preds = self.classify(features)?;
        if preds.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} predictions vs {} labels",
                preds.len(),
                labels.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::param("accuracy of an empty batch is undefined"));
        }
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / preds.len() as f64)
    }
}

/// Fits a linear softmax classifier on cached features by minibatch SGD
/// with cosine-annealed learning rate. The probe starts at zero, so zero
/// epochs return the zero probe unchanged.
pub fn fit_linear_softmax(
    features: &Tensor,
    labels: &[usize],
    epochs: usize,
    lr0: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LinearProbe> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("probe", format!("features must be a non-empty (n, d) matrix, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::contract(format!("{n} feature rows vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= CLASS_COUNT) {
        return Err(Error::param(format!("label {bad} outside the {CLASS_COUNT} classes")));
    }
    if batch == 0 {
        return Err(Error::param("batch size must be ≥ 1"));
    }
    if !(lr0 > 0.0) || !lr0.is_finite() {
        return Err(Error::param(format!("initial learning rate must be positive, got {lr0}")));
    }

    let mut probe = LinearProbe::zeros(d)?;
    if epochs == 0 {
        return Ok(probe);
    }
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = epochs * steps_per_epoch;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            let mut yb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
                yb.push(labels[i]);
            }
            let xb = Tensor::new(&[chunk.len(), d], xb)?;

            let mut g = Graph::new();
            let w = g.param("w", probe.w.clone());
            let b = g.param("b", probe.b.clone());
            let x = g.constant(xb);
            let logits = g.matmul(x, w)?;
            let logits = g.add(logits, b)?;
            let loss = g.softmax_cross_entropy(logits, &yb)?;
            let grads = g.backward(loss)?;

            let lr = cosine_lr(step, total_steps, lr0)?;
            let gw = grads.get("w").ok_or_else(|| Error::state("missing weight gradient"))?;
            let gb = grads.get("b").ok_or_else(|| Error::state("missing bias gradient"))?;
            let new_w: Vec<f64> = probe.w.data().iter().zip(gw.data()).map(|(&p, &g)| p - lr * g).collect();
            let new_b: Vec<f64> = probe.b.data().iter().zip(gb.data()).map(|(&p, &g)| p - lr * g).collect();
            probe.w = Tensor::new(&[d, CLASS_COUNT], new_w)?;
            probe.b = Tensor::new(&[CLASS_COUNT], new_b)?;
            step += 1;
        }
    }
    Ok(probe)
}

/// Pooled trunk features for every listed dataset index.
pub fn extract_features(encoder: &Encoder, dataset: &LabeledDataset, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::param("cannot extract features for an empty index list"));
    }
    let (images, labels) = dataset.gather(indices)?;
    let features = encoder.pooled_value(&images)?;
    Ok((features, labels))
}

/// Trains a linear probe on the frozen encoder's pooled features over the
/// dataset's training split. The encoder is never modified.
pub fn train_probe(
    encoder: &Encoder,
    dataset: &LabeledDataset,
    epochs: usize,
    lr0: f64,
    batch: usize,
    seed: u64,
) -> Result<LinearProbe> {
    if dataset.train_idx.is_empty() {
        return Err(Error::param("dataset has no training split"));
    }
    let (features, labels) = extract_features(encoder, dataset, &dataset.train_idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fit_linear_softmax(&features, &labels, epochs, lr0, batch, &mut rng)
}

// ── Precision / recall / AP ──────────────────────────────────────────

/// One-vs-rest precision and recall of hard predictions for one class.
/// Precision is 0 when the class is never predicted; recall is 0 when the
/// class never occurs.
pub fn precision_recall(preds: &[usize], labels: &[usize], class: usize) -> Result<(f64, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::param("precision/recall of an empty batch is undefined"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok((precision, recall))
}

/// Ranked precision/recall sweep of one score column against binary
/// relevance, with its step-interpolated area.
#[derive(Debug, Clone)]
pub struct PrCurve {
    /// Score at each rank, descending (ties keep input order).
    pub thresholds: Vec<f64>,
    /// Precision after each rank.
    pub precision: Vec<f64>,
    /// Recall after each rank; non-decreasing.
    pub recall: Vec<f64>,
    /// Σ_k (R_k − R_{k−1}) · P_k over the sweep.
    pub ap: f64,
}

impl PrCurve {
    /// CSV rendering with a `threshold,precision,recall` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for ((t, p), r) in self.thresholds.iter().zip(&self.precision).zip(&self.recall) {
            out.push_str(&format!("{t:.6},{p:.6},{r:.6}\n"));
        }
        out
    }
}

/// Full PR sweep of `scores` against `positives`. Requires at least one
/// positive; ranking is by descending score with ties broken by original
/// index, so the result is deterministic.
pub fn pr_curve(scores: &[f64], positives: &[bool]) -> Result<PrCurve> {
    if scores.len() != positives.len() {
        return Err(Error::contract(format!(
            "{} scores vs {} relevance flags",
            scores.len(),
            positives.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::param("average precision of an empty ranking is undefined"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::numeric("average_precision", format!("non-finite score {bad}")));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::param("no positive labels: average precision is undefined"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut thresholds = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
        }
        let p = tp as f64 / (k + 1) as f64;
        let r = tp as f64 / total_pos as f64;
        ap += (r - prev_recall) * p;
        prev_recall = r;
        thresholds.push(scores[i]);
        precision.push(p);
        recall.push(r);
    }
    Ok(PrCurve { thresholds, precision, recall, ap })
}

/// Step-interpolated area under the PR sweep.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    Ok(pr_curve(scores, positives)?.ap)
}

/// Unweighted mean of the four one-vs-rest APs of a `(n, 4)` score matrix.
/// Every class must occur in `labels`.
pub fn mean_ap(scores: &Tensor, labels: &[usize]) -> Result<(f64, [f64; CLASS_COUNT])> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[1] != CLASS_COUNT {
        return Err(Error::shape("mean_ap", format!("scores must be (n, {CLASS_COUNT}), got {shape:?}")));
    }
    if labels.len() != shape[0] {
        return Err(Error::contract(format!("{} score rows vs {} labels", shape[0], labels.len())));
    }
    let mut per_class = [0.0; CLASS_COUNT];
    for class in 0..CLASS_COUNT {
        if !labels.iter().any(|&l| l == class) {
            return Err(Error::param(format!("class {class} absent from labels: its AP is undefined")));
        }
        let column: Vec<f64> = (0..shape[0]).map(|i| scores.data()[i * CLASS_COUNT + class]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        per_class[class] = average_precision(&column, &positives)?;
    }
    let map = per_class.iter().sum::<f64>() / CLASS_COUNT as f64;
    Ok((map, per_class))
}

// ── Feature Gaussians and Fréchet distance ───────────────────────────

/// Mean and unbiased covariance of a feature cloud.
#[derive(Debug, Clone)]
pub struct FeatureGaussian {
    mu: Tensor,
    sigma: Tensor,
}

impl FeatureGaussian {
    /// Fits mean and `(m−1)`-normalized covariance to `(m, d)` features;
    /// needs m ≥ 2 and d ≤ 64.
    pub fn fit(features: &Tensor) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(Error::shape("feature_gaussian", format!("features must be (m, d), got {shape:?}")));
        }
        let (m, d) = (shape[0], shape[1]);
        if m < 2 {
            return Err(Error::param(format!("need at least 2 samples for a covariance, got {m}")));
        }
        if d == 0 || d > MAX_FEATURE_DIM {
            return Err(Error::param(format!("feature dimension must be in 1..={MAX_FEATURE_DIM}, got {d}")));
        }
        let mut mu = vec![0.0; d];
        for row in features.data().chunks_exact(d) {
            for (acc, &v) in mu.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in mu.iter_mut() {
            *v /= m as f64;
        }
        let mut sigma = vec![0.0; d * d];
        for row in features.data().chunks_exact(d) {
            let centered: Vec<f64> = row.iter().zip(&mu).map(|(&x, &c)| x - c).collect();
            for i in 0..d {
                for j in 0..d {
                    sigma[i * d + j] += centered[i] * centered[j];
                }
            }
        }
        for v in sigma.iter_mut() {
            *v /= (m - 1) as f64;
        }
        Ok(FeatureGaussian {
            mu: Tensor::new(&[d], mu)?,
            sigma: Tensor::new(&[d, d], sigma)?,
        })
    }

    /// Builds from explicit moments; `sigma` must be square, matching `mu`,
    /// and symmetric to 1e-9.
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        let d = mu.numel();
        if mu.shape().len() != 1 || d == 0 || d > MAX_FEATURE_DIM {
            return Err(Error::param(format!(
                "mean must be a vector of dimension 1..={MAX_FEATURE_DIM}, got {:?}",
                mu.shape()
            )));
        }
        if sigma.shape() != [d, d] {
            return Err(Error::shape(
                "feature_gaussian",
                format!("covariance must be ({d}, {d}), got {:?}", sigma.shape()),
            ));
        }
        for i in 0..d {
            for j in (i + 1)..d {
                let a = sigma.data()[i * d + j];
                let b = sigma.data()[j * d + i];
                if (a - b).abs() > 1e-9 {
                    return Err(Error::contract(format!(
                        "covariance is asymmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(FeatureGaussian { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric `d×d` matrix given
/// row-major; returns (eigenvalues, eigenvectors as row-major `d×d` with
/// eigenvector k in column k), satisfying A = V Λ Vᵀ.
fn jacobi_eigh(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-14 * scale;
    let mut converged = false;
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol / (d * d) as f64 {
                    continue;
                }
                let tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = if tau == 0.0 {
                    1.0
                } else {
                    tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::numeric("jacobi", "eigendecomposition did not converge in 100 sweeps"));
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    Ok((eigenvalues, v))
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues below
/// −1e-6 are a numeric error; within [−1e-6, 0] they clamp to 0.
fn sqrt_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    let (mut lambda, v) = jacobi_eigh(m, d)?;
    for l in lambda.iter_mut() {
        if *l < -1e-6 {
            return Err(Error::numeric("frechet", format!("matrix has negative eigenvalue {l}")));
        }
        *l = l.max(0.0).sqrt();
    }
    // V diag(√λ) Vᵀ
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += v[i * d + k] * lambda[k] * v[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Squared Fréchet distance between two feature Gaussians:
/// ‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}).
pub fn frechet_distance(g1: &FeatureGaussian, g2: &FeatureGaussian) -> Result<f64> {
    let d = g1.dim();
    if g2.dim() != d {
        return Err(Error::contract(format!(
            "feature dimensions differ: {d} vs {}",
            g2.dim()
        )));
    }
    let mean_term: f64 = g1
        .mu
        .data()
        .iter()
        .zip(g2.mu.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();

    let s1 = g1.sigma.data();
    let s2 = g2.sigma.data();
    let s1h = sqrt_psd(s1, d)?;
    let mut inner = matmul_sq(&matmul_sq(&s1h, s2, d), &s1h, d);
    // Mathematically symmetric; remove floating-point asymmetry before the
    // symmetric eigensolver sees it.
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let cross = sqrt_psd(&inner, d)?;
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let value = mean_term + trace(s1) + trace(s2) - 2.0 * trace(&cross);
    if value < -1e-6 {
        return Err(Error::numeric("frechet", format!("distance collapsed to {value}")));
    }
    Ok(value.max(0.0))
}

// ── Inception-style score ────────────────────────────────────────────

/// exp of the mean KL divergence between each posterior row and the mean
/// posterior. Rows must be distributions over the 4 classes (sum 1 ± 1e-6,
/// entries ≥ 0). Bounded by the class count.
pub fn inception_style_score(probs: &Tensor) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[1] != CLASS_COUNT || shape[0] == 0 {
        return Err(Error::shape(
            "inception_style_score",
            format!("posteriors must be non-empty (m, {CLASS_COUNT}), got {shape:?}"),
        ));
    }
    let m = shape[0];
    for (i, row) in probs.data().chunks_exact(CLASS_COUNT).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("posterior row {i} sums to {sum}, expected 1 ± 1e-6")));
        }
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::contract(format!("posterior row {i} has a negative entry")));
        }
    }
    let mut mean = [0.0; CLASS_COUNT];
    for row in probs.data().chunks_exact(CLASS_COUNT) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut total_kl = 0.0;
    for row in probs.data().chunks_exact(CLASS_COUNT) {
        for (&p, &q) in row.iter().zip(&mean) {
            if p > 0.0 {
                total_kl += p * (p / q).ln();
            }
        }
    }
    Ok((total_kl / m as f64).exp())
}

// ── Report formatting ────────────────────────────────────────────────

/// `class,precision,recall,ap` CSV over the four classes.
pub fn per_class_csv(rows: &[(String, f64, f64, f64)]) -> String {
    let mut out = String::from("class,precision,recall,ap\n");
    for (name, p, r, ap) in rows {
        out.push_str(&format!("{name},{p:.6},{r:.6},{ap:.6}\n"));
    }
    out
}

/// Flat `key=value` summary lines.
pub fn summary_text(map: f64, fid: f64, is: f64, accuracy: f64) -> String {
    format!("map={map:.6}\nfid={fid:.6}\nis={is:.6}\naccuracy={accuracy:.6}\n")
}

//! Momentum-contrast pretraining: a small convolutional encoder in query
//! and key copies, a FIFO dictionary of past key embeddings serving as
//! negatives, the (K+1)-way softmax contrastive loss, its batch-level
//! variant that scores every query against every positive key in the batch,
//! and the exponential-moving-average key update.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::data;
use crate::error::{Error, Result};
use crate::io;
use crate::params::{ParamStore, SgdMomentum};
use crate::tensor::Tensor;

/// Map from parameter name to its bound node in some graph.
pub type BoundParams = BTreeMap<String, NodeId>;

/// Square input resolutions the 3-level encoder accepts.
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [8, 16, 32];

// ── Encoder ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    HeConv,
    HeLinear,
    One,
    Zero,
}

type Entry = (String, Vec<usize>, Init);

/// Parameter shapes of the 3-block trunk plus the 2-layer projection head,
/// in initialization order.
fn catalog(width: usize) -> Vec<Entry> {
    let (w1, w2, w4) = (width, 2 * width, 4 * width);
    let mut v: Vec<Entry> = Vec::new();
    let mut block = |name: &str, cout: usize, cin: usize| {
        v.push((format!("{name}.conv.w"), vec![cout, cin, 3, 3], Init::HeConv));
        v.push((format!("{name}.conv.b"), vec![cout], Init::Zero));
        v.push((format!("{name}.gn.g"), vec![cout], Init::One));
        v.push((format!("{name}.gn.b"), vec![cout], Init::Zero));
    };
    block("b1", w1, 1);
    block("b2", w2, w1);
    block("b3", w4, w2);
    v.push(("head.fc1.w".into(), vec![w4, w4], Init::HeLinear));
    v.push(("head.fc1.b".into(), vec![w4], Init::Zero));
    v.push(("head.fc2.w".into(), vec![w4, w4], Init::HeLinear));
    v.push(("head.fc2.b".into(), vec![w4], Init::Zero));
    v
}

/// Convolutional encoder: three conv → norm → SiLU → 2× pool blocks
/// (1 → w → 2w → 4w channels), global average pooling to a `4w` feature
/// vector, and a two-layer projection head whose output is L2-normalized.
#[derive(Debug, Clone)]
pub struct Encoder {
    width: usize,
    store: ParamStore,
}

impl Encoder {
    /// He-initialized encoder; `width` must be a positive multiple of 4.
    pub fn init(seed: u64, width: usize) -> Result<Self> {
        if width < 4 || width % 4 != 0 {
            return Err(Error::param(format!("base width must be a multiple of 4 and ≥ 4, got {width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in catalog(width) {
            let value = match init {
                Init::HeConv => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    Tensor::randn(&shape, &mut rng).map(|v| v * (2.0 / fan_in).sqrt())?
                }
                Init::HeLinear => {
                    let fan_in = shape[0] as f64;
                    Tensor::randn(&shape, &mut rng).map(|v| v * (2.0 / fan_in).sqrt())?
                }
                Init::One => Tensor::full(&shape, 1.0)?,
                Init::Zero => Tensor::zeros(&shape),
            };
            store.insert(&name, value)?;
        }
        Ok(Encoder { width, store })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Width of the pooled trunk feature vector (and of the embedding).
    pub fn feature_dim(&self) -> usize {
        4 * self.width
    }

    /// Width of the normalized contrast embedding.
    pub fn embed_dim(&self) -> usize {
        4 * self.width
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Binds every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundParams> {
        let mut bound = BoundParams::new();
        for name in self.store.names() {
            bound.insert(name.to_string(), self.store.bind(g, name)?);
        }
        Ok(bound)
    }

    /// Binds every parameter as a constant: values flow, gradients do not.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<BoundParams> {
        let mut bound = BoundParams::new();
        for name in self.store.names() {
            bound.insert(name.to_string(), self.store.bind_frozen(g, name)?);
        }
        Ok(bound)
    }

    fn node(&self, bound: &BoundParams, name: &str) -> Result<NodeId> {
        bound
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter '{name}' is not bound into the graph")))
    }

    /// Trunk + global average pool: `(n, 1, r, r)` → `(n, 4w)` features.
    pub fn pooled(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape("encoder", format!("input must be (n, 1, r, r), got {shape:?}")));
        }
        if shape[2] != shape[3] || !SUPPORTED_RESOLUTIONS.contains(&shape[2]) {
            return Err(Error::param(format!(
                "unsupported resolution {}×{} (square {:?} required)",
                shape[2], shape[3], SUPPORTED_RESOLUTIONS
            )));
        }
        if shape[0] == 0 {
            return Err(Error::shape("encoder", "empty batch"));
        }
        let mut h = x;
        for name in ["b1", "b2", "b3"] {
            let w = self.node(bound, &format!("{name}.conv.w"))?;
            let b = self.node(bound, &format!("{name}.conv.b"))?;
            h = g.conv2d(h, w, Some(b), 1, 1)?;
            let gamma = self.node(bound, &format!("{name}.gn.g"))?;
            let beta = self.node(bound, &format!("{name}.gn.b"))?;
            h = g.group_norm(h, gamma, beta)?;
            h = g.silu(h)?;
            h = g.avg_pool2x2(h)?;
        }
        g.global_avg_pool(h)
    }

    /// Full contrast embedding: pooled features through the projection head,
    /// L2-normalized rows. `(n, 1, r, r)` → `(n, 4w)` with unit rows.
    pub fn embed(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        let f = self.pooled(g, bound, x)?;
        let w1 = self.node(bound, "head.fc1.w")?;
        let b1 = self.node(bound, "head.fc1.b")?;
        let h = g.matmul(f, w1)?;
        let h = g.add(h, b1)?;
        let h = g.silu(h)?;
        let w2 = self.node(bound, "head.fc2.w")?;
        let b2 = self.node(bound, "head.fc2.b")?;
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        g.l2_normalize(h)
    }

    /// Embedding values for a plain image batch, outside any training graph.
    pub fn embed_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let node = g.constant(x.clone());
        let bound = self.bind_frozen(&mut g)?;
        let out = self.embed(&mut g, &bound, node)?;
        Ok(g.value(out).clone())
    }

    /// Pooled-feature values for a plain image batch.
    pub fn pooled_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let node = g.constant(x.clone());
        let bound = self.bind_frozen(&mut g)?;
        let out = self.pooled(&mut g, &bound, node)?;
        Ok(g.value(out).clone())
    }

    /// Writes parameters plus a `meta` section (width).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut sections = vec![("meta".to_string(), Tensor::new(&[1], vec![self.width as f64])?)];
        for (name, value) in self.store.iter() {
            sections.push((name.to_string(), value.clone()));
        }
        let cfg = vec![
            ("kind".to_string(), "encoder".to_string()),
            ("width".to_string(), self.width.to_string()),
        ];
        io::save_checkpoint(path, &sections, &cfg)
    }

    /// Rebuilds an encoder from [`Encoder::save`] output; sections prefixed
    /// `opt.`, `queue/`, or `key./` are ignored (training-state siblings).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let sections = io::load_checkpoint(&path)?;
        Self::from_sections(&sections)
    }

    /// Extracts an encoder from checkpoint sections, optionally under a
    /// name prefix (e.g. `key./`): used by the paired query/key checkpoint.
    pub fn from_prefixed_sections(sections: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let stripped: Vec<(String, Tensor)> = sections
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect();
        Self::from_sections(&stripped)
    }

    /// Extracts an encoder from top-level checkpoint sections, ignoring
    /// optimizer, queue, and key-encoder entries.
    pub fn from_sections(sections: &[(String, Tensor)]) -> Result<Self> {
        let meta = sections
            .iter()
            .find(|(name, _)| name == "meta")
            .ok_or_else(|| Error::state("checkpoint has no meta section"))?;
        if meta.1.numel() != 1 {
            return Err(Error::state("encoder meta section must hold (width)"));
        }
        let width = meta.1.data()[0] as usize;
        let expected = catalog(width);
        let mut store = ParamStore::new();
        for (name, value) in sections {
            if name == "meta" || name.starts_with("opt.") || name.starts_with("queue/") || name.starts_with("key./") {
                continue;
            }
            store.insert(name, value.clone())?;
        }
        if store.len() != expected.len() {
            return Err(Error::state(format!(
                "checkpoint holds {} parameter sections, architecture declares {}",
                store.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            let got = store.get(name)?;
            if got.shape() != &shape[..] {
                return Err(Error::state(format!(
                    "checkpoint section '{name}' has shape {:?}, architecture declares {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(Encoder { width, store })
    }
}

// ── Momentum update ──────────────────────────────────────────────────

/// Exponential-moving-average update of the key parameters toward the
/// query parameters: every tensor becomes `m·θ_k + (1−m)·θ_q`. The two
/// stores must declare identical names and shapes.
pub fn momentum_update(theta_k: &mut ParamStore, theta_q: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::param(format!("momentum must lie in [0, 1), got {m}")));
    }
    if theta_k.len() != theta_q.len() {
        return Err(Error::contract(format!(
            "key store has {} tensors, query store {}",
            theta_k.len(),
            theta_q.len()
        )));
    }
    let names: Vec<String> = theta_k.names().map(str::to_string).collect();
    for name in names {
        let q = theta_q
            .get(&name)
            .map_err(|_| Error::contract(format!("query store is missing '{name}'")))?;
        let k = theta_k.get(&name)?;
        if q.shape() != k.shape() {
            return Err(Error::contract(format!(
                "'{name}' shapes differ: key {:?}, query {:?}",
                k.shape(),
                q.shape()
            )));
        }
        let blended: Vec<f64> = k
            .data()
            .iter()
            .zip(q.data())
            .map(|(&kv, &qv)| m * kv + (1.0 - m) * qv)
            .collect();
        let shape = k.shape().to_vec();
        theta_k.set(&name, Tensor::new(&shape, blended)?)?;
    }
    Ok(())
}

// ── Key queue ────────────────────────────────────────────────────────

/// FIFO ring of past key embeddings. Enqueuing a batch of n unit-norm rows
/// overwrites the n oldest once the ring is full.
#[derive(Debug, Clone)]
pub struct KeyQueue {
    capacity: usize,
    width: usize,
    storage: Vec<f64>,
    head: usize,
    filled: usize,
}

impl KeyQueue {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::param(format!("queue needs positive capacity and width, got {capacity}×{width}")));
        }
        Ok(KeyQueue {
            capacity,
            width,
            storage: vec![0.0; capacity * width],
            head: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity
    }

    /// Writes the rows of `keys` (shape `(n, width)`, n ≤ capacity, rows
    /// unit-norm ± 1e-6) at the head, advancing it modulo the capacity.
    pub fn push(&mut self, keys: &Tensor) -> Result<()> {
        let shape = keys.shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::contract(format!(
                "queue of width {} cannot accept keys of shape {shape:?}",
                self.width
            )));
        }
        let n = shape[0];
        if n > self.capacity {
            return Err(Error::contract(format!("batch of {n} exceeds queue capacity {}", self.capacity)));
        }
        for (i, row) in keys.data().chunks_exact(self.width).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("key row {i} has norm {norm}, expected 1 ± 1e-6")));
            }
        }
        for row in keys.data().chunks_exact(self.width) {
            self.storage[self.head * self.width..(self.head + 1) * self.width].copy_from_slice(row);
            self.head = (self.head + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// All stored rows as a `(filled, width)` tensor, in storage order.
    pub fn rows(&self) -> Result<Tensor> {
        Tensor::new(&[self.filled, self.width], self.storage[..self.filled * self.width].to_vec())
    }

    /// Checkpoint sections: `queue/storage` and `queue/head` (head, filled).
    pub fn export_sections(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(vec![
            (
                "queue/storage".to_string(),
                Tensor::new(&[self.capacity, self.width], self.storage.clone())?,
            ),
            (
                "queue/head".to_string(),
                Tensor::new(&[2], vec![self.head as f64, self.filled as f64])?,
            ),
        ])
    }

    pub fn from_sections(sections: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::state(format!("checkpoint is missing the '{name}' section")))
        };
        let storage = find("queue/storage")?;
        let meta = find("queue/head")?;
        if storage.shape().len() != 2 || meta.numel() != 2 {
            return Err(Error::state("malformed queue sections"));
        }
        let (capacity, width) = (storage.shape()[0], storage.shape()[1]);
        let head = meta.data()[0] as usize;
        let filled = meta.data()[1] as usize;
        if head >= capacity.max(1) || filled > capacity {
            return Err(Error::state(format!("queue head {head}/filled {filled} outside capacity {capacity}")));
        }
        Ok(KeyQueue {
            capacity,
            width,
            storage: storage.data().to_vec(),
            head,
            filled,
        })
    }
}

// ── Contrastive losses ───────────────────────────────────────────────

/// Which contrastive objective a training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// One positive per query: the (K+1)-way softmax loss.
    Original,
    /// Every query scored against every positive key in the batch.
    #[default]
    Improved,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(LossMode::Original),
            "improved" => Ok(LossMode::Improved),
            other => Err(Error::param(format!("unknown loss mode '{other}' (expected original | improved)"))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            LossMode::Original => "original",
            LossMode::Improved => "improved",
        }
    }
}

/// Contrast hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub batch: usize,
    pub loss_mode: LossMode,
}

impl ContrastConfig {
    pub fn new(tau: f64, momentum: f64, queue_size: usize, batch: usize, loss_mode: LossMode) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::param(format!("temperature must be positive, got {tau}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::param(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if batch == 0 {
            return Err(Error::param("batch size must be ≥ 1"));
        }
        if queue_size == 0 || queue_size % batch != 0 {
            return Err(Error::param(format!(
                "queue size {queue_size} must be a positive multiple of the batch size {batch}"
            )));
        }
        Ok(ContrastConfig { tau, momentum, queue_size, batch, loss_mode })
    }
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::shape("contrastive", format!("{what} must be a row matrix, got {shape:?}")));
    }
    let c = shape[1];
    for (i, row) in t.data().chunks_exact(c).enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::contract(format!("{what} row {i} has norm {norm}, expected 1 ± 1e-3")));
        }
    }
    Ok(())
}

fn check_loss_inputs(g: &Graph, q: NodeId, k: NodeId, negatives: NodeId, tau: f64) -> Result<(usize, usize)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    check_unit_rows(g.value(q), "query")?;
    check_unit_rows(g.value(k), "positive key")?;
    check_unit_rows(g.value(negatives), "negative")?;
    let (qs, ks, ns) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(negatives).to_vec());
    if qs != ks {
        return Err(Error::shape("contrastive", format!("query {qs:?} and key {ks:?} shapes differ")));
    }
    if ns[1] != qs[1] {
        return Err(Error::shape(
            "contrastive",
            format!("negatives have width {}, queries {}", ns[1], qs[1]),
        ));
    }
    if qs[0] == 0 {
        return Err(Error::shape("contrastive", "empty query batch"));
    }
    Ok((qs[0], ns[0]))
}

/// One-positive contrastive loss inside `g`:
/// mean over the batch of −log( e^{q·k⁺/τ} / (e^{q·k⁺/τ} + Σᵢ e^{q·nᵢ/τ}) ).
/// `q`, `k_pos` are `(n, c)`; `negatives` is `(K, c)`; all rows unit-norm.
pub fn info_nce_graph(g: &mut Graph, q: NodeId, k_pos: NodeId, negatives: NodeId, tau: f64) -> Result<NodeId> {
    let (n, _k) = check_loss_inputs(g, q, k_pos, negatives, tau)?;
    let prod = g.mul(q, k_pos)?;
    let l_pos = g.sum_last(prod)?; // (n, 1)
    let l_pos = g.scale(l_pos, 1.0 / tau)?;
    let neg_t = g.transpose(negatives, &[1, 0])?;
    let l_neg = g.matmul(q, neg_t)?; // (n, K)
    let l_neg = g.scale(l_neg, 1.0 / tau)?;
    let logits = g.concat(&[l_pos, l_neg], 1)?; // (n, K+1)
    let lse = g.logsumexp(logits)?; // (n, 1)
    let per_query = g.sub(lse, l_pos)?;
    debug_assert_eq!(g.shape(per_query), &[n, 1]);
    g.mean_all(per_query)
}

/// Batch-level contrastive loss inside `g`: every query is scored against
/// every positive key in the batch, each (query, key) pair forming its own
/// (K+1)-way softmax against the shared negatives; the result averages over
/// all n² pairs.
pub fn batch_contrastive_graph(g: &mut Graph, q: NodeId, k: NodeId, negatives: NodeId, tau: f64) -> Result<NodeId> {
    let (n, kn) = check_loss_inputs(g, q, k, negatives, tau)?;
    let k_t = g.transpose(k, &[1, 0])?;
    let pos = g.matmul(q, k_t)?; // (n, n): pos[b][j] = q_b · k_j
    let pos = g.scale(pos, 1.0 / tau)?;
    let pos3 = g.reshape(pos, &[n, n, 1])?;
    let neg_t = g.transpose(negatives, &[1, 0])?;
    let negs = g.matmul(q, neg_t)?; // (n, K)
    let negs = g.scale(negs, 1.0 / tau)?;
    let negs3 = g.reshape(negs, &[n, 1, kn])?;
    // Broadcast the per-query negative row across all n positives.
    let zeros = g.constant(Tensor::zeros(&[n, n, 1]));
    let negs3 = g.add(negs3, zeros)?; // (n, n, K)
    let logits = g.concat(&[pos3, negs3], 2)?; // (n, n, K+1)
    let lse = g.logsumexp(logits)?; // (n, n, 1)
    let per_pair = g.sub(lse, pos3)?;
    g.mean_all(per_pair)
}

/// Value of the one-positive loss on plain tensors.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (qn, kn, nn) = (g.constant(q.clone()), g.constant(k_pos.clone()), g.constant(negatives.clone()));
    let loss = info_nce_graph(&mut g, qn, kn, nn, tau)?;
    g.value(loss).item()
}

/// Value of the batch-level loss on plain tensors.
pub fn batch_contrastive(q: &Tensor, k: &Tensor, negatives: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (qn, kn, nn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(negatives.clone()));
    let loss = batch_contrastive_graph(&mut g, qn, kn, nn, tau)?;
    g.value(loss).item()
}

// ── Training step ────────────────────────────────────────────────────

/// Mutable training state for momentum contrast: query/key encoders, the
/// negative queue, and the query optimizer.
#[derive(Debug, Clone)]
pub struct MocoState {
    pub query: Encoder,
    pub key: Encoder,
    pub queue: KeyQueue,
    pub optimizer: SgdMomentum,
}

impl MocoState {
    /// Fresh state: the key encoder starts as an exact copy of the query
    /// encoder, the queue empty.
    pub fn init(seed: u64, width: usize, cfg: &ContrastConfig) -> Result<Self> {
        let query = Encoder::init(seed, width)?;
        let key = query.clone();
        let queue = KeyQueue::new(cfg.queue_size, query.embed_dim())?;
        Ok(MocoState {
            query,
            key,
            queue,
            optimizer: SgdMomentum::new(0.9, 1e-4)?,
        })
    }

    /// Warmup step allowed while the queue is still filling; reported
    /// metrics should exclude these. See [`moco_step`].
    pub fn step_allow_partial(
        &mut self,
        batch: &Tensor,
        cfg: &ContrastConfig,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        moco_step_inner(self, batch, cfg, lr, rng)
    }
}

/// One momentum-contrast training step:
/// two augmented views per image; query embeddings from the query encoder
/// (with gradient), key embeddings from the key encoder (without); the
/// configured loss against the queue negatives; SGD-momentum update of the
/// query parameters at `lr`; EMA update of the key parameters; enqueue of
/// the new keys. Requires a filled queue (run warmup steps first).
pub fn moco_step(
    state: &mut MocoState,
    batch: &Tensor,
    cfg: &ContrastConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !state.queue.is_full() {
        return Err(Error::state(format!(
            "queue holds {}/{} keys; complete warmup before stepping",
            state.queue.len(),
            state.queue.capacity()
        )));
    }
    moco_step_inner(state, batch, cfg, lr, rng)
}

fn moco_step_inner(
    state: &mut MocoState,
    batch: &Tensor,
    cfg: &ContrastConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(Error::shape("moco_step", format!("batch must be (n, 1, r, r), got {shape:?}")));
    }
    let n = shape[0];
    let plane = shape[1] * shape[2] * shape[3];

    // Two independent views per image, drawn in a fixed order.
    let mut view_q = Vec::with_capacity(batch.numel());
    let mut view_k = Vec::with_capacity(batch.numel());
    for i in 0..n {
        let img = Tensor::new(
            &[shape[1], shape[2], shape[3]],
            batch.data()[i * plane..(i + 1) * plane].to_vec(),
        )?;
        view_q.extend_from_slice(data::augment_random(&img, rng)?.data());
        view_k.extend_from_slice(data::augment_random(&img, rng)?.data());
    }
    let view_q = Tensor::new(shape, view_q)?;
    let view_k = Tensor::new(shape, view_k)?;

    // Keys: value-only pass through the key encoder.
    let k = state.key.embed_value(&view_k)?;

    // Query graph: loss against the snapshot keys and current negatives.
    let mut g = Graph::new();
    let bound = state.query.bind(&mut g)?;
    let xq = g.constant(view_q);
    let q = state.query.embed(&mut g, &bound, xq)?;
    let k_node = g.constant(k.clone());
    let negatives = g.constant(state.queue.rows()?);
    let loss = match cfg.loss_mode {
        LossMode::Original => info_nce_graph(&mut g, q, k_node, negatives, cfg.tau)?,
        LossMode::Improved => batch_contrastive_graph(&mut g, q, k_node, negatives, cfg.tau)?,
    };
    let loss_value = g.value(loss).item()?;
    let grads = g.backward(loss)?;

    state.optimizer.step(state.query.store_mut(), &grads, lr)?;
    momentum_update(state.key.store_mut(), state.query.store(), cfg.momentum)?;
    state.queue.push(&k)?;
    Ok(loss_value)
}

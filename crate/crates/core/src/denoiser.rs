//! Scaled-down U-Net noise estimator: sinusoidal time embeddings fed through
//! a two-layer MLP, two downsampling stages with skip connections, a
//! bottleneck with linear attention, and two upsampling stages.
//!
//! Channel plan for base width `w`: input conv lifts 1 → w; down blocks run
//! at w and 2w (skips taken before each 2× pool); the bottleneck runs at 2w;
//! up blocks consume the concatenated skips (4w → 2w, then 3w → w); the
//! output conv maps w → 1. Each conv block receives the shared time
//! embedding as a learned per-channel bias.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::io;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Head count of the bottleneck attention.
pub const ATTENTION_HEADS: usize = 4;
/// Square input resolutions the two-level architecture accepts.
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [8, 16, 32];

/// Map from parameter name to the node it is bound to in some graph.
pub type BoundParams = BTreeMap<String, NodeId>;

// ── Time embeddings ──────────────────────────────────────────────────

/// Sinusoidal step embedding: component 2i is sin(t / 10000^(2i/dim)) and
/// component 2i+1 the matching cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEmbedding {
    dim: usize,
    max_t: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize, max_t: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::param(format!("embedding dim must be even and ≥ 2, got {dim}")));
        }
        if max_t == 0 {
            return Err(Error::param("embedding needs max_t ≥ 1"));
        }
        Ok(TimeEmbedding { dim, max_t })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_t(&self) -> usize {
        self.max_t
    }

    /// Embedding of one step as a `(dim,)` tensor. Steps are 1-based.
    pub fn embed(&self, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.max_t {
            return Err(Error::param(format!("step {t} outside 1..={}", self.max_t)));
        }
        let mut data = Vec::with_capacity(self.dim);
        for i in 0..self.dim / 2 {
            let freq = 10_000f64.powf(-(2.0 * i as f64) / self.dim as f64);
            let arg = t as f64 * freq;
            data.push(arg.sin());
            data.push(arg.cos());
        }
        Tensor::new(&[self.dim], data)
    }

    /// Embeddings of a batch of steps, stacked into `(n, dim)`.
    pub fn embed_batch(&self, ts: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ts.len() * self.dim);
        for &t in ts {
            data.extend_from_slice(self.embed(t)?.data());
        }
        Tensor::new(&[ts.len(), self.dim], data)
    }
}

// ── Parameter catalog ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// N(0, 2/fan_in) with fan_in = cin·k·k.
    HeConv,
    /// N(0, 2/fan_in) with fan_in = input width.
    HeLinear,
    One,
    Zero,
}

type Entry = (String, Vec<usize>, Init);

fn push_conv(v: &mut Vec<Entry>, name: &str, cout: usize, cin: usize) {
    v.push((format!("{name}.w"), vec![cout, cin, 3, 3], Init::HeConv));
    v.push((format!("{name}.b"), vec![cout], Init::Zero));
}

fn push_gn(v: &mut Vec<Entry>, name: &str, c: usize) {
    v.push((format!("{name}.g"), vec![c], Init::One));
    v.push((format!("{name}.b"), vec![c], Init::Zero));
}

fn push_linear(v: &mut Vec<Entry>, name: &str, fin: usize, fout: usize) {
    v.push((format!("{name}.w"), vec![fin, fout], Init::HeLinear));
    v.push((format!("{name}.b"), vec![fout], Init::Zero));
}

fn push_block(v: &mut Vec<Entry>, prefix: &str, cin: usize, cout: usize, temb: usize) {
    push_conv(v, &format!("{prefix}.conv1"), cout, cin);
    push_gn(v, &format!("{prefix}.gn1"), cout);
    push_linear(v, &format!("{prefix}.tproj"), temb, cout);
    push_conv(v, &format!("{prefix}.conv2"), cout, cout);
    push_gn(v, &format!("{prefix}.gn2"), cout);
}

/// Every parameter the architecture declares, with shape and init rule, in
/// a fixed order (the order initialization consumes random draws in).
fn catalog(width: usize) -> Vec<Entry> {
    let (w, w2, temb) = (width, 2 * width, 4 * width);
    let mut v = Vec::new();
    push_conv(&mut v, "in_conv", w, 1);
    push_block(&mut v, "down1", w, w, temb);
    push_block(&mut v, "down2", w, w2, temb);
    push_block(&mut v, "mid1", w2, w2, temb);
    push_gn(&mut v, "attn.gn", w2);
    v.push(("attn.wq".into(), vec![w2, w2], Init::HeLinear));
    v.push(("attn.wk".into(), vec![w2, w2], Init::HeLinear));
    v.push(("attn.wv".into(), vec![w2, w2], Init::HeLinear));
    v.push(("attn.wo".into(), vec![w2, w2], Init::HeLinear));
    v.push(("attn.wo.b".into(), vec![w2], Init::Zero));
    push_block(&mut v, "mid2", w2, w2, temb);
    push_block(&mut v, "up1", 2 * w2, w2, temb);
    push_block(&mut v, "up2", w + w2, w, temb);
    push_conv(&mut v, "out_conv", 1, w);
    push_linear(&mut v, "time.fc1", w, temb);
    push_linear(&mut v, "time.fc2", temb, temb);
    v
}

// ── The model ────────────────────────────────────────────────────────

/// U-Net noise estimator: owns its parameters, base width, and the time
/// embedding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    width: usize,
    time: TimeEmbedding,
    store: ParamStore,
}

impl Denoiser {
    /// Freshly initialized model: conv and linear weights ~ N(0, 2/fan_in),
    /// norm scales 1, biases 0. `width` must be a positive multiple of 4
    /// (group norms use 4 groups); `max_t` bounds the step index.
    pub fn init(seed: u64, width: usize, max_t: usize) -> Result<Self> {
        if width < 4 || width % 4 != 0 {
            return Err(Error::param(format!("base width must be a multiple of 4 and ≥ 4, got {width}")));
        }
        let time = TimeEmbedding::new(width, max_t)?;
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
        Ok(Denoiser { width, time, store })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_t(&self) -> usize {
        self.time.max_t()
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

    /// Binds every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundParams> {
        let mut bound = BoundParams::new();
        for name in self.store.names() {
            bound.insert(name.to_string(), self.store.bind(g, name)?);
        }
        Ok(bound)
    }

    /// Forward pass through an externally supplied binding (lets callers
    /// decide which parameters are trainable). `x_t` must be `(n, 1, r, r)`
    /// with r a supported resolution; `ts` gives each element's step.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x_t: NodeId, ts: &[usize]) -> Result<NodeId> {
        let shape = g.shape(x_t).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape(
                "denoiser",
                format!("input must be (n, 1, r, r), got {shape:?}"),
            ));
        }
        let (n, r) = (shape[0], shape[2]);
        if shape[3] != r || !SUPPORTED_RESOLUTIONS.contains(&r) {
            return Err(Error::param(format!(
                "unsupported resolution {}×{} (square {:?} required)",
                shape[2], shape[3], SUPPORTED_RESOLUTIONS
            )));
        }
        if n == 0 {
            return Err(Error::shape("denoiser", "empty batch"));
        }
        if ts.len() != n {
            return Err(Error::shape("denoiser", format!("{} steps for batch of {n}", ts.len())));
        }

        let emb = g.constant(self.time.embed_batch(ts)?);
        let e = self.linear(g, bound, "time.fc1", emb)?;
        let e = g.silu(e)?;
        let e = self.linear(g, bound, "time.fc2", e)?;
        let temb = g.silu(e)?;

        let h0 = self.conv(g, bound, "in_conv", x_t)?;
        let d1 = self.conv_block(g, bound, "down1", h0, temb, n)?;
        let p1 = g.avg_pool2x2(d1)?;
        let d2 = self.conv_block(g, bound, "down2", p1, temb, n)?;
        let p2 = g.avg_pool2x2(d2)?;

        let m1 = self.conv_block(g, bound, "mid1", p2, temb, n)?;
        let at = self.attention(g, bound, m1)?;
        let m2 = self.conv_block(g, bound, "mid2", at, temb, n)?;

        let u1 = g.upsample2x(m2)?;
        let u1 = g.concat_channels(&[u1, d2])?;
        let u1 = self.conv_block(g, bound, "up1", u1, temb, n)?;
        let u2 = g.upsample2x(u1)?;
        let u2 = g.concat_channels(&[u2, d1])?;
        let u2 = self.conv_block(g, bound, "up2", u2, temb, n)?;

        self.conv(g, bound, "out_conv", u2)
    }

    fn node(&self, bound: &BoundParams, name: &str) -> Result<NodeId> {
        bound
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter '{name}' is not bound into the graph")))
    }

    fn conv(&self, g: &mut Graph, bound: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = self.node(bound, &format!("{prefix}.w"))?;
        let b = self.node(bound, &format!("{prefix}.b"))?;
        g.conv2d(x, w, Some(b), 1, 1)
    }

    fn linear(&self, g: &mut Graph, bound: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = self.node(bound, &format!("{prefix}.w"))?;
        let b = self.node(bound, &format!("{prefix}.b"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn group_norm(&self, g: &mut Graph, bound: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.node(bound, &format!("{prefix}.g"))?;
        let beta = self.node(bound, &format!("{prefix}.b"))?;
        g.group_norm(x, gamma, beta)
    }

    /// conv → norm → SiLU → +time bias → conv → norm → SiLU.
    fn conv_block(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        prefix: &str,
        x: NodeId,
        temb: NodeId,
        n: usize,
    ) -> Result<NodeId> {
        let h = self.conv(g, bound, &format!("{prefix}.conv1"), x)?;
        let h = self.group_norm(g, bound, &format!("{prefix}.gn1"), h)?;
        let h = g.silu(h)?;
        let tb = self.linear(g, bound, &format!("{prefix}.tproj"), temb)?;
        let cout = g.shape(tb)[1];
        let tb = g.reshape(tb, &[n, cout, 1, 1])?;
        let h = g.add(h, tb)?;
        let h = self.conv(g, bound, &format!("{prefix}.conv2"), h)?;
        let h = self.group_norm(g, bound, &format!("{prefix}.gn2"), h)?;
        g.silu(h)
    }

    /// Pre-normalized linear-attention sublayer with a residual connection:
    /// 1×1 q/k/v projections split into heads, the linear aggregation of
    /// [`attention_aggregate`], then a 1×1 output projection.
    fn attention(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let (n, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let l = hh * ww;
        let d = c / ATTENTION_HEADS;

        let xg = self.group_norm(g, bound, "attn.gn", x)?;
        let xf = g.reshape(xg, &[n, c, l])?;
        let xf = g.transpose(xf, &[0, 2, 1])?;
        let xf = g.reshape(xf, &[n * l, c])?;

        let heads = |g: &mut Graph, name: &str| -> Result<NodeId> {
            let w = self.node(bound, name)?;
            let y = g.matmul(xf, w)?;
            let y = g.reshape(y, &[n, l, ATTENTION_HEADS, d])?;
            g.transpose(y, &[0, 2, 1, 3])
        };
        let q = heads(g, "attn.wq")?;
        let k = heads(g, "attn.wk")?;
        let v = heads(g, "attn.wv")?;

        let out = attention_aggregate(g, q, k, v)?;
        let out = g.transpose(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n * l, c])?;
        let wo = self.node(bound, "attn.wo")?;
        let ob = self.node(bound, "attn.wo.b")?;
        let o = g.matmul(out, wo)?;
        let o = g.add(o, ob)?;
        let o = g.reshape(o, &[n, l, c])?;
        let o = g.transpose(o, &[0, 2, 1])?;
        let o = g.reshape(o, &[n, c, hh, ww])?;
        g.add(x, o)
    }

    /// Writes all parameters plus a `meta` section (width, max_t) as a
    /// multi-section tensor file with a sibling manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with_extras(path, &[])
    }

    /// Like [`Denoiser::save`], with training-state sections appended.
    /// Extras must use the reserved `opt.` prefix so [`Denoiser::load`]
    /// skips them.
    pub fn save_with_extras(&self, path: impl AsRef<Path>, extras: &[(String, Tensor)]) -> Result<()> {
        if let Some((name, _)) = extras.iter().find(|(n, _)| !n.starts_with("opt.")) {
            return Err(Error::contract(format!(
                "extra checkpoint section '{name}' must use the 'opt.' prefix"
            )));
        }
        let mut sections = vec![(
            "meta".to_string(),
            Tensor::new(&[2], vec![self.width as f64, self.max_t() as f64])?,
        )];
        for (name, value) in self.store.iter() {
            sections.push((name.to_string(), value.clone()));
        }
        sections.extend(extras.iter().cloned());
        let cfg = vec![
            ("kind".to_string(), "denoiser".to_string()),
            ("width".to_string(), self.width.to_string()),
            ("max_t".to_string(), self.max_t().to_string()),
        ];
        io::save_checkpoint(path, &sections, &cfg)
    }

    /// Rebuilds a model from [`Denoiser::save`] output, validating the
    /// section list against the architecture. Sections prefixed `opt.` are
    /// ignored (optimizer state saved alongside for resumption).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let sections = io::load_checkpoint(&path)?;
        let meta = sections
            .iter()
            .find(|(name, _)| name == "meta")
            .ok_or_else(|| Error::state("checkpoint has no meta section"))?;
        if meta.1.numel() != 2 {
            return Err(Error::state("meta section must hold (width, max_t)"));
        }
        let width = meta.1.data()[0] as usize;
        let max_t = meta.1.data()[1] as usize;
        let mut store = ParamStore::new();
        for (name, value) in sections {
            if name == "meta" || name.starts_with("opt.") {
                continue;
            }
            store.insert(&name, value)?;
        }
        let expected = catalog(width);
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
        Ok(Denoiser {
            width,
            time: TimeEmbedding::new(width, max_t)?,
            store,
        })
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, g: &mut Graph, x_t: NodeId, ts: &[usize]) -> Result<NodeId> {
        let bound = self.bind(g)?;
        self.forward(g, &bound, x_t, ts)
    }
}

/// Linear attention over token sets: for `(n, heads, tokens, d)` inputs,
/// queries are scaled by d^(−1/2) and softmaxed over the feature axis, keys
/// are softmaxed over the token axis, and aggregation is
/// `softmax_d(q) · (softmax_tokens(k)ᵀ · v)` — O(tokens) memory.
pub fn attention_aggregate(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 {
        return Err(Error::shape("attention", format!("need (n, heads, tokens, d), got {qs:?}")));
    }
    if g.shape(k) != &qs[..] || g.shape(v) != &qs[..] {
        return Err(Error::shape(
            "attention",
            format!(
                "query/key/value shapes differ: {qs:?}, {:?}, {:?}",
                g.shape(k),
                g.shape(v)
            ),
        ));
    }
    let d = qs[3];
    if d == 0 {
        return Err(Error::shape("attention", "zero head width"));
    }
    let q = g.scale(q, 1.0 / (d as f64).sqrt())?;
    let q = g.softmax(q)?;
    let kt = g.transpose(k, &[0, 1, 3, 2])?;
    let kn = g.softmax(kt)?;
    let ctx = g.matmul(kn, v)?;
    g.matmul(q, ctx)
}

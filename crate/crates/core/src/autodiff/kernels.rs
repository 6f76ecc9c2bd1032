//! Raw array math behind the graph ops: forward kernels and their
//! vector-Jacobian products. Everything is plain `f64` slices; shape
//! validation happens one level up in the graph builder.

/// Broadcast-compatible output shape, NumPy style (right-aligned, size-1
/// extents stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides, with stride 0 for extents that broadcast against
/// `out_shape` (the shape is first right-aligned against `out_shape`).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Elementwise binary op with broadcasting.
pub fn bcast_binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let ndim = out_shape.len();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; ndim];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        // odometer increment
        for d in (0..ndim).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sums `grad` (shaped `grad_shape`) down to `target_shape`, undoing a
/// broadcast.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let st = broadcast_strides(target_shape, grad_shape);
    let ndim = grad_shape.len();
    let mut coords = vec![0usize; ndim];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..ndim).rev() {
            coords[d] += 1;
            it += st[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            it -= st[d] * grad_shape[d];
        }
    }
    out
}

// ── matmul ───────────────────────────────────────────────────────────

/// Batched matmul on the trailing two axes: `(..., m, k) x (..., k, n)`.
/// Leading extents must already be validated equal.
pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = bi * m * k;
        let bb = bi * k * n;
        let ob = bi * m * n;
        for i in 0..m {
            let orow = ob + i * n;
            for p in 0..k {
                let av = a[ab + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = bb + p * n;
                for j in 0..n {
                    out[orow + j] += av * b[brow + j];
                }
            }
        }
    }
    out
}

pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dy: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; batch * m * k];
    let mut db = vec![0.0; batch * k * n];
    for bi in 0..batch {
        let ab = bi * m * k;
        let bb = bi * k * n;
        let ob = bi * m * n;
        // dA = dY · Bᵀ
        for i in 0..m {
            let drow = ob + i * n;
            for p in 0..k {
                let brow = bb + p * n;
                let mut acc = 0.0;
                for j in 0..n {
                    acc += dy[drow + j] * b[brow + j];
                }
                da[ab + i * k + p] = acc;
            }
        }
        // dB = Aᵀ · dY
        for i in 0..m {
            let drow = ob + i * n;
            for p in 0..k {
                let av = a[ab + i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = bb + p * n;
                for j in 0..n {
                    db[brow + j] += av * dy[drow + j];
                }
            }
        }
    }
    (da, db)
}

// ── 2-D convolution ──────────────────────────────────────────────────

/// Valid output range `[lo, hi)` for one kernel offset along one axis.
fn conv_span(in_extent: usize, out_extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let s = stride as isize;
    let shift = pad as isize - k as isize;
    // o*s - shift in [0, in_extent)
    let lo = if shift <= 0 { 0 } else { (shift + s - 1) / s };
    let hi_num = in_extent as isize - 1 + shift;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_extent as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub fn conv2d_out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_extent + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Zero-padded 2-D convolution. `x` is `(bs, cin, h, w)`, `weight` is
/// `(cout, cin, kh, kw)`, `bias` is `(cout)` when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    bs: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv2d_out_extent(h, kh, stride, pad).unwrap();
    let wo = conv2d_out_extent(w, kw, stride, pad).unwrap();
    let mut out = vec![0.0; bs * cout * ho * wo];
    if let Some(bias) = bias {
        for b in 0..bs {
            for co in 0..cout {
                let base = (b * cout + co) * ho * wo;
                let bv = bias[co];
                for v in &mut out[base..base + ho * wo] {
                    *v = bv;
                }
            }
        }
    }
    for b in 0..bs {
        for co in 0..cout {
            let obase = (b * cout + co) * ho * wo;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_span(h, ho, stride, pad, ky);
                    for kx in 0..kw {
                        let wv = weight[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = conv_span(w, wo, stride, pad, kx);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = obase + oy * wo;
                            let xrow = xbase + iy * w;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                out[orow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv2d w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    bs: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    want_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let ho = conv2d_out_extent(h, kh, stride, pad).unwrap();
    let wo = conv2d_out_extent(w, kw, stride, pad).unwrap();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = if want_bias { Some(vec![0.0; cout]) } else { None };
    for b in 0..bs {
        for co in 0..cout {
            let obase = (b * cout + co) * ho * wo;
            if let Some(db) = db.as_mut() {
                let mut acc = 0.0;
                for v in &dy[obase..obase + ho * wo] {
                    acc += v;
                }
                db[co] += acc;
            }
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let wbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_span(h, ho, stride, pad, ky);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = conv_span(w, wo, stride, pad, kx);
                        let wv = weight[wbase + ky * kw + kx];
                        let mut wacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = obase + oy * wo;
                            let xrow = xbase + iy * w;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                let g = dy[orow + ox];
                                dx[xrow + ix] += wv * g;
                                wacc += x[xrow + ix] * g;
                            }
                        }
                        dw[wbase + ky * kw + kx] += wacc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ── resampling ───────────────────────────────────────────────────────

pub fn upsample2x(x: &[f64], bs: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; bs * c * 4 * h * w];
    let (ho, wo) = (2 * h, 2 * w);
    for bc in 0..bs * c {
        let ibase = bc * h * w;
        let obase = bc * ho * wo;
        for y in 0..h {
            for x_ in 0..w {
                let v = x[ibase + y * w + x_];
                let o = obase + 2 * y * wo + 2 * x_;
                out[o] = v;
                out[o + 1] = v;
                out[o + wo] = v;
                out[o + wo + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &[f64], bs: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dx = vec![0.0; bs * c * h * w];
    let (ho, wo) = (2 * h, 2 * w);
    let _ = ho;
    for bc in 0..bs * c {
        let ibase = bc * h * w;
        let obase = bc * 2 * h * wo;
        for y in 0..h {
            for x_ in 0..w {
                let o = obase + 2 * y * wo + 2 * x_;
                dx[ibase + y * w + x_] = dy[o] + dy[o + 1] + dy[o + wo] + dy[o + wo + 1];
            }
        }
    }
    dx
}

pub fn avgpool2x2(x: &[f64], bs: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; bs * c * ho * wo];
    for bc in 0..bs * c {
        let ibase = bc * h * w;
        let obase = bc * ho * wo;
        for y in 0..ho {
            for x_ in 0..wo {
                let i = ibase + 2 * y * w + 2 * x_;
                out[obase + y * wo + x_] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2x2_backward(dy: &[f64], bs: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; bs * c * h * w];
    for bc in 0..bs * c {
        let ibase = bc * h * w;
        let obase = bc * ho * wo;
        for y in 0..ho {
            for x_ in 0..wo {
                let g = 0.25 * dy[obase + y * wo + x_];
                let i = ibase + 2 * y * w + 2 * x_;
                dx[i] = g;
                dx[i + 1] = g;
                dx[i + w] = g;
                dx[i + w + 1] = g;
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &[f64], bs: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; bs * c];
    for bc in 0..bs * c {
        let base = bc * hw;
        let mut acc = 0.0;
        for v in &x[base..base + hw] {
            acc += v;
        }
        out[bc] = acc / hw as f64;
    }
    out
}

// ── normalization ────────────────────────────────────────────────────

/// Group normalization over `(bs, c, h, w)` with `c % groups == 0`.
/// Returns `(y, mean, inv_std)` with per-(batch, group) statistics.
#[allow(clippy::too_many_arguments)]
pub fn group_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    bs: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = cg * hw;
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; bs * groups];
    let mut inv_stds = vec![0.0; bs * groups];
    for b in 0..bs {
        for g in 0..groups {
            let base = (b * c + g * cg) * hw;
            let chunk = &x[base..base + m];
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[b * groups + g] = mean;
            inv_stds[b * groups + g] = inv_std;
            for cc in 0..cg {
                let ch = g * cg + cc;
                let (ga, be) = (gamma[ch], beta[ch]);
                let row = base + cc * hw;
                for i in 0..hw {
                    y[row + i] = ga * (x[row + i] - mean) * inv_std + be;
                }
            }
        }
    }
    (y, means, inv_stds)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f64],
    gamma: &[f64],
    means: &[f64],
    inv_stds: &[f64],
    dy: &[f64],
    bs: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * hw) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..bs {
        for g in 0..groups {
            let base = (b * c + g * cg) * hw;
            let mean = means[b * groups + g];
            let inv_std = inv_stds[b * groups + g];
            let mut sum1 = 0.0; // Σ dxhat
            let mut sum2 = 0.0; // Σ dxhat · xhat
            for cc in 0..cg {
                let ch = g * cg + cc;
                let row = base + cc * hw;
                for i in 0..hw {
                    let xhat = (x[row + i] - mean) * inv_std;
                    let dyi = dy[row + i];
                    let dxhat = dyi * gamma[ch];
                    sum1 += dxhat;
                    sum2 += dxhat * xhat;
                    dgamma[ch] += dyi * xhat;
                    dbeta[ch] += dyi;
                }
            }
            for cc in 0..cg {
                let ch = g * cg + cc;
                let row = base + cc * hw;
                for i in 0..hw {
                    let xhat = (x[row + i] - mean) * inv_std;
                    let dxhat = dy[row + i] * gamma[ch];
                    dx[row + i] = inv_std * (dxhat - sum1 / m - xhat * sum2 / m);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ── row-wise ops on the last axis ────────────────────────────────────

pub fn softmax_last(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row_in, row_out) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in row_out.iter_mut() {
            *o /= z;
        }
    }
    out
}

pub fn softmax_last_backward(y: &[f64], dy: &[f64], k: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(k)
        .zip(dy.chunks_exact(k))
        .zip(dx.chunks_exact_mut(k))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for i in 0..k {
            dxr[i] = yr[i] * (dyr[i] - dot);
        }
    }
    dx
}

/// Log-sum-exp over the last axis, keeping a trailing axis of extent 1.
pub fn logsumexp_last(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks_exact(k)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            max + z.ln()
        })
        .collect()
}

pub fn logsumexp_last_backward(x: &[f64], y: &[f64], dy: &[f64], k: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (r, (xr, dxr)) in x.chunks_exact(k).zip(dx.chunks_exact_mut(k)).enumerate() {
        let (lse, g) = (y[r], dy[r]);
        for i in 0..k {
            dxr[i] = g * (xr[i] - lse).exp();
        }
    }
    dx
}

pub fn l2_normalize_last(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row_in, row_out) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let norm = row_in.iter().map(|&v| v * v).sum::<f64>().sqrt();
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = v / norm;
        }
    }
    out
}

pub fn l2_normalize_last_backward(x: &[f64], y: &[f64], dy: &[f64], k: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((xr, (yr, dyr)), dxr) in x
        .chunks_exact(k)
        .zip(y.chunks_exact(k).zip(dy.chunks_exact(k)))
        .zip(dx.chunks_exact_mut(k))
    {
        let norm = xr.iter().map(|&v| v * v).sum::<f64>().sqrt();
        let dot: f64 = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for i in 0..k {
            dxr[i] = (dyr[i] - yr[i] * dot) / norm;
        }
    }
    dx
}

// ── permutation ──────────────────────────────────────────────────────

pub fn transpose(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let ndim = shape.len();
    let mut in_strides = vec![1usize; ndim];
    for i in (0..ndim.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = x.len();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(x[src]);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

/// Inverse permutation: `transpose(transpose(x, p), invert(p)) == x`.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ── losses ───────────────────────────────────────────────────────────

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` shaped `(n, k)`.
pub fn softmax_cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let lse = logsumexp_last(logits, k);
    let mut acc = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        acc += lse[i] - logits[i * k + label];
    }
    acc / n as f64
}

pub fn softmax_cross_entropy_backward(logits: &[f64], k: usize, labels: &[usize], g: f64) -> Vec<f64> {
    let n = labels.len();
    let mut dx = softmax_last(logits, k);
    for (i, &label) in labels.iter().enumerate() {
        dx[i * k + label] -= 1.0;
    }
    let scale = g / n as f64;
    for v in &mut dx {
        *v *= scale;
    }
    dx
}

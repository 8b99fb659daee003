use super::ctx::OpCtx;
use super::math::{det_exp, det_ln};
use super::tensor::{transpose2d, Shape, Tensor};
use super::OpError;

fn mismatch(op: &'static str, detail: String) -> OpError {
    OpError::ShapeMismatch { op, detail }
}

/// [M,K] x [K,N] -> [M,N]. For each output element the K reduction runs in
/// ascending order from a +0.0 accumulator; the i-k-j loop below performs
/// the same additions in the same per-element order as the textbook i-j-k
/// loop while staying cache-friendly. Workers split output rows.
pub fn matmul(ctx: OpCtx, a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    let (ad, bd) = (a.shape().dims(), b.shape().dims());
    if ad.len() != 2 || bd.len() != 2 {
        return Err(mismatch("matmul", format!("rank 2 required, got {} and {}", a.shape(), b.shape())));
    }
    if ad[1] != bd[0] {
        return Err(mismatch("matmul", format!("{} x {}", a.shape(), b.shape())));
    }
    let (m, kk, n) = (ad[0], ad[1], bd[1]);
    let av = a.values();
    let bv = b.values();
    let mut out = vec![0.0f32; m * n];
    ctx.run_partitioned(m, n, &mut out, |first_row, chunk| {
        for (r, row) in chunk.chunks_mut(n).enumerate() {
            let i = first_row + r;
            for k in 0..kk {
                let aik = av[i * kk + k];
                let brow = &bv[k * n..(k + 1) * n];
                for j in 0..n {
                    row[j] += aik * brow[j];
                }
            }
        }
    });
    Tensor::new(Shape::new(vec![m, n])?, out)
}

/// Gradients of `c = a x b`: (grad_c x b^T, a^T x grad_c). The transposes
/// are materialized row-major copies so both products run the standard
/// fixed-order kernel.
pub fn matmul_backward(
    ctx: OpCtx,
    a: &Tensor,
    b: &Tensor,
    grad_c: &Tensor,
) -> Result<(Tensor, Tensor), OpError> {
    let (ad, bd, gd) = (a.shape().dims(), b.shape().dims(), grad_c.shape().dims());
    if ad.len() != 2 || bd.len() != 2 || gd.len() != 2 || ad[1] != bd[0] || gd[0] != ad[0] || gd[1] != bd[1] {
        return Err(mismatch(
            "matmul_backward",
            format!("a {} b {} grad {}", a.shape(), b.shape(), grad_c.shape()),
        ));
    }
    let grad_a = matmul(ctx, grad_c, &transpose2d(b)?)?;
    let grad_b = matmul(ctx, &transpose2d(a)?, grad_c)?;
    Ok((grad_a, grad_b))
}

/// Sum over one axis; the reduced axis is folded serially in ascending
/// index order per output element. Removing the last axis of a rank-1
/// tensor yields a scalar.
pub fn reduce_sum(ctx: OpCtx, a: &Tensor, axis: usize) -> Result<Tensor, OpError> {
    let dims = a.shape().dims();
    if axis >= dims.len() {
        return Err(OpError::AxisOutOfRange { axis, rank: dims.len() });
    }
    let outer: usize = dims[..axis].iter().product();
    let alen = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out_dims = dims.to_vec();
    out_dims.remove(axis);
    let out_shape = if out_dims.is_empty() { Shape::scalar() } else { Shape::new(out_dims)? };
    let av = a.values();
    let mut out = vec![0.0f32; outer * inner];
    ctx.run_partitioned(outer, inner, &mut out, |first, chunk| {
        for (r, block) in chunk.chunks_mut(inner).enumerate() {
            let o = first + r;
            for t in 0..alen {
                let base = (o * alen + t) * inner;
                for i in 0..inner {
                    block[i] += av[base + i];
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

// Elementwise binary op over equal shapes, or broadcasting a rank-1 `b`
// along the last axis of `a` (bias add). Purely elementwise, so workers
// split elements/rows freely.
fn binary_elementwise(
    ctx: OpCtx,
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32 + Sync,
) -> Result<Tensor, OpError> {
    let av = a.values();
    let bv = b.values();
    if a.shape() == b.shape() {
        let mut out = vec![0.0f32; av.len()];
        ctx.run_partitioned(av.len(), 1, &mut out, |first, chunk| {
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = first + k;
                *o = f(av[i], bv[i]);
            }
        });
        return Tensor::new(a.shape().clone(), out);
    }
    let last = *a.shape().dims().last().unwrap_or(&0);
    if b.shape().rank() == 1 && b.shape().dims()[0] == last && a.shape().rank() >= 1 {
        let rows = av.len() / last;
        let mut out = vec![0.0f32; av.len()];
        ctx.run_partitioned(rows, last, &mut out, |first_row, chunk| {
            for (r, row) in chunk.chunks_mut(last).enumerate() {
                let base = (first_row + r) * last;
                for j in 0..last {
                    row[j] = f(av[base + j], bv[j]);
                }
            }
        });
        return Tensor::new(a.shape().clone(), out);
    }
    Err(mismatch(op, format!("{} vs {}", a.shape(), b.shape())))
}

pub fn add(ctx: OpCtx, a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    binary_elementwise(ctx, "add", a, b, |x, y| x + y)
}

pub fn sub(ctx: OpCtx, a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    binary_elementwise(ctx, "sub", a, b, |x, y| x - y)
}

pub fn mul(ctx: OpCtx, a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    binary_elementwise(ctx, "mul", a, b, |x, y| x * y)
}

/// max(x, 0) with NaN passed through unchanged.
pub fn relu(ctx: OpCtx, a: &Tensor) -> Result<Tensor, OpError> {
    let av = a.values();
    let mut out = vec![0.0f32; av.len()];
    ctx.run_partitioned(av.len(), 1, &mut out, |first, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let x = av[first + k];
            *o = if x.is_nan() || x > 0.0 { x } else { 0.0 };
        }
    });
    Tensor::new(a.shape().clone(), out)
}

/// Passes gradients where the forward input was strictly positive; the
/// subgradient at 0 (and anything non-positive or NaN) is 0.
pub fn relu_backward(ctx: OpCtx, a: &Tensor, grad_out: &Tensor) -> Result<Tensor, OpError> {
    if a.shape() != grad_out.shape() {
        return Err(mismatch(
            "relu_backward",
            format!("{} vs {}", a.shape(), grad_out.shape()),
        ));
    }
    let av = a.values();
    let gv = grad_out.values();
    let mut out = vec![0.0f32; av.len()];
    ctx.run_partitioned(av.len(), 1, &mut out, |first, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = first + k;
            *o = if av[i] > 0.0 { gv[i] } else { 0.0 };
        }
    });
    Tensor::new(a.shape().clone(), out)
}

// Splits dims around `axis` into (outer, axis len, inner). A "lane" is one
// run along the axis; lanes are independent, so workers split outer blocks
// while each lane's max/sum folds stay serial.
fn lane_split(dims: &[usize], axis: usize) -> Result<(usize, usize, usize), OpError> {
    if axis >= dims.len() {
        return Err(OpError::AxisOutOfRange { axis, rank: dims.len() });
    }
    let outer: usize = dims[..axis].iter().product();
    let alen = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    Ok((outer, alen, inner))
}

/// Numerically-stable softmax along `axis`: per lane, subtract the serial
/// max, exponentiate with `det_exp`, normalize by the serial sum.
pub fn softmax(ctx: OpCtx, a: &Tensor, axis: usize) -> Result<Tensor, OpError> {
    let dims = a.shape().dims();
    let (outer, alen, inner) = lane_split(dims, axis)?;
    let av = a.values();
    let mut out = vec![0.0f32; av.len()];
    let block = alen * inner;
    ctx.run_partitioned(outer, block, &mut out, |first, chunk| {
        for (r, ob) in chunk.chunks_mut(block).enumerate() {
            let base = (first + r) * block;
            for i in 0..inner {
                let mut m = f32::NEG_INFINITY;
                for t in 0..alen {
                    let v = av[base + t * inner + i];
                    if v > m {
                        m = v;
                    }
                }
                let mut s = 0.0f32;
                for t in 0..alen {
                    let e = det_exp(av[base + t * inner + i] - m);
                    ob[t * inner + i] = e;
                    s += e;
                }
                for t in 0..alen {
                    ob[t * inner + i] /= s;
                }
            }
        }
    });
    Tensor::new(a.shape().clone(), out)
}

/// Gradient through softmax given its output `y`: y * (g - dot(g, y)) per
/// lane, with the dot product folded serially.
pub fn softmax_backward(ctx: OpCtx, y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor, OpError> {
    if y.shape() != grad_out.shape() {
        return Err(mismatch(
            "softmax_backward",
            format!("{} vs {}", y.shape(), grad_out.shape()),
        ));
    }
    let dims = y.shape().dims();
    let (outer, alen, inner) = lane_split(dims, axis)?;
    let yv = y.values();
    let gv = grad_out.values();
    let mut out = vec![0.0f32; yv.len()];
    let block = alen * inner;
    ctx.run_partitioned(outer, block, &mut out, |first, chunk| {
        for (r, ob) in chunk.chunks_mut(block).enumerate() {
            let base = (first + r) * block;
            for i in 0..inner {
                let mut dot = 0.0f32;
                for t in 0..alen {
                    let idx = base + t * inner + i;
                    dot += gv[idx] * yv[idx];
                }
                for t in 0..alen {
                    let idx = base + t * inner + i;
                    ob[t * inner + i] = yv[idx] * (gv[idx] - dot);
                }
            }
        }
    });
    Tensor::new(y.shape().clone(), out)
}

fn check_labels(logits: &Tensor, labels: &Tensor) -> Result<(usize, usize), OpError> {
    let ld = logits.shape().dims();
    if ld.len() != 2 {
        return Err(mismatch("cross_entropy", format!("logits must be rank 2, got {}", logits.shape())));
    }
    let (b, c) = (ld[0], ld[1]);
    if labels.shape().rank() != 1 || labels.shape().dims()[0] != b {
        return Err(mismatch(
            "cross_entropy",
            format!("labels {} vs batch {b}", labels.shape()),
        ));
    }
    for (row, &lv) in labels.values().iter().enumerate() {
        let li = lv as i64;
        if lv != li as f32 || li < 0 || li >= c as i64 {
            return Err(OpError::LabelOutOfRange { row, label: li, classes: c });
        }
    }
    Ok((b, c))
}

// Per-row log-sum-exp pieces: (max, sum of exp(x - max)), both serial.
fn row_lse(row: &[f32]) -> (f32, f32) {
    let mut m = f32::NEG_INFINITY;
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut s = 0.0f32;
    for &v in row {
        s += det_exp(v - m);
    }
    (m, s)
}

/// Mean cross-entropy between logits [B,C] and integer labels [B], as a
/// scalar tensor. Per-row losses may be computed in parallel; the batch
/// mean folds the rows serially in ascending order, then divides once.
pub fn cross_entropy(ctx: OpCtx, logits: &Tensor, labels: &Tensor) -> Result<Tensor, OpError> {
    let (b, c) = check_labels(logits, labels)?;
    let lv = logits.values();
    let lab = labels.values();
    let mut rows = vec![0.0f32; b];
    ctx.run_partitioned(b, 1, &mut rows, |first, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let bi = first + k;
            let row = &lv[bi * c..(bi + 1) * c];
            let (m, s) = row_lse(row);
            let target = row[lab[bi] as usize];
            *o = det_ln(s) - (target - m);
        }
    });
    let mut total = 0.0f32;
    for &r in &rows {
        total += r;
    }
    Ok(Tensor::scalar(total / b as f32))
}

/// Gradient of mean cross-entropy wrt logits: (softmax(row) - onehot) / B.
pub fn cross_entropy_backward(ctx: OpCtx, logits: &Tensor, labels: &Tensor) -> Result<Tensor, OpError> {
    let (b, c) = check_labels(logits, labels)?;
    let lv = logits.values();
    let lab = labels.values();
    let bf = b as f32;
    let mut out = vec![0.0f32; b * c];
    ctx.run_partitioned(b, c, &mut out, |first, chunk| {
        for (k, orow) in chunk.chunks_mut(c).enumerate() {
            let bi = first + k;
            let row = &lv[bi * c..(bi + 1) * c];
            let (m, s) = row_lse(row);
            let target = lab[bi] as usize;
            for j in 0..c {
                let p = det_exp(row[j] - m) / s;
                let ind = if j == target { 1.0 } else { 0.0 };
                orow[j] = (p - ind) / bf;
            }
        }
    });
    Tensor::new(Shape::new(vec![b, c])?, out)
}

//! Operator set for the DST model: elementwise math, linear algebra,
//! shape surgery, normalization, masked softmax/cross-entropy, 3D and
//! depthwise 1D convolution, and masked multi-head attention.
//!
//! Every op computes its forward result eagerly and registers an exact
//! analytic backward rule.

use super::{strides, AttentionMask, Tensor};
use crate::error::{Error, Result};

fn vals(t: &Tensor) -> std::cell::Ref<'_, Vec<f64>> {
    t.inner.values.borrow()
}

// ---------------------------------------------------------------- elementwise

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let out: Vec<f64> = vals(a).iter().zip(vals(b).iter()).map(|(x, y)| x + y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            ac.accum_grad(g);
            bc.accum_grad(g);
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    let out: Vec<f64> = vals(a).iter().zip(vals(b).iter()).map(|(x, y)| x - y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            ac.accum_grad(g);
            if bc.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                bc.accum_grad(&neg);
            }
        }),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let out: Vec<f64> = vals(a).iter().zip(vals(b).iter()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if ac.requires_grad() {
                let da: Vec<f64> = g.iter().zip(vals(&bc).iter()).map(|(g, y)| g * y).collect();
                ac.accum_grad(&da);
            }
            if bc.requires_grad() {
                let db: Vec<f64> = g.iter().zip(vals(&ac).iter()).map(|(g, x)| g * x).collect();
                bc.accum_grad(&db);
            }
        }),
    )
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = vals(a).iter().map(|x| x * c).collect();
    let ac = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let da: Vec<f64> = g.iter().map(|g| g * c).collect();
            ac.accum_grad(&da);
        }),
    )
}

pub fn gelu(a: &Tensor) -> Tensor {
    // tanh approximation of GELU
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let out: Vec<f64> = vals(a)
        .iter()
        .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
        .collect();
    let ac = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let xs = vals(&ac);
            let da: Vec<f64> = g
                .iter()
                .zip(xs.iter())
                .map(|(&g, &x)| {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            drop(xs);
            ac.accum_grad(&da);
        }),
    )
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = vals(a).iter().sum();
    let ac = a.clone();
    let n = a.len();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |g| {
            ac.accum_grad(&vec![g[0]; n]);
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

// ---------------------------------------------------------------- shape ops

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    assert_eq!(
        shape.iter().product::<usize>(),
        a.len(),
        "reshape element count mismatch"
    );
    let ac = a.clone();
    Tensor::from_op(
        shape.to_vec(),
        a.values(),
        vec![a.clone()],
        Box::new(move |g| {
            ac.accum_grad(g);
        }),
    )
}

pub fn permute(a: &Tensor, axes: &[usize]) -> Tensor {
    let ndim = a.shape().len();
    assert_eq!(axes.len(), ndim, "permute axes length mismatch");
    let in_shape = a.shape().to_vec();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let in_strides = strides(&in_shape);
    let out_strides = strides(&out_shape);
    let av = vals(a);
    let mut out = vec![0.0; a.len()];
    let mut idx = vec![0usize; ndim];
    for (o, slot) in out.iter_mut().enumerate() {
        // decompose output flat index, map through axes
        let mut rem = o;
        for k in 0..ndim {
            idx[k] = rem / out_strides[k];
            rem %= out_strides[k];
        }
        let mut flat = 0;
        for k in 0..ndim {
            flat += idx[k] * in_strides[axes[k]];
        }
        *slot = av[flat];
    }
    drop(av);
    let ac = a.clone();
    let axes_v = axes.to_vec();
    let in_strides_b = in_strides.clone();
    let out_strides_b = out_strides.clone();
    Tensor::from_op(
        out_shape,
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let ndim = axes_v.len();
            let mut da = vec![0.0; g.len()];
            let mut idx = vec![0usize; ndim];
            for (o, &gv) in g.iter().enumerate() {
                let mut rem = o;
                for k in 0..ndim {
                    idx[k] = rem / out_strides_b[k];
                    rem %= out_strides_b[k];
                }
                let mut flat = 0;
                for k in 0..ndim {
                    flat += idx[k] * in_strides_b[axes_v[k]];
                }
                da[flat] += gv;
            }
            ac.accum_grad(&da);
        }),
    )
}

pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = a.shape().to_vec();
    assert!(start + len <= shape[axis], "narrow out of range");
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let av = vals(a);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = (o * shape[axis] + start + l) * inner;
            let dst = (o * len + l) * inner;
            out[dst..dst + inner].copy_from_slice(&av[src..src + inner]);
        }
    }
    drop(av);
    let ac = a.clone();
    let full = a.len();
    let ax_len = shape[axis];
    Tensor::from_op(
        out_shape,
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut da = vec![0.0; full];
            for o in 0..outer {
                for l in 0..len {
                    let dst = (o * ax_len + start + l) * inner;
                    let src = (o * len + l) * inner;
                    da[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                }
            }
            ac.accum_grad(&da);
        }),
    )
}

pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let base = parts[0].shape().to_vec();
    for p in parts {
        assert_eq!(p.shape().len(), base.len(), "concat rank mismatch");
        for (k, (&a, &b)) in p.shape().iter().zip(base.iter()).enumerate() {
            if k != axis {
                assert_eq!(a, b, "concat shape mismatch off-axis");
            }
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let ax_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total_ax: usize = ax_lens.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total_ax;
    let mut out = vec![0.0; outer * total_ax * inner];
    let mut offset = 0;
    for (p, &al) in parts.iter().zip(ax_lens.iter()) {
        let pv = vals(p);
        for o in 0..outer {
            let src = o * al * inner;
            let dst = (o * total_ax + offset) * inner;
            out[dst..dst + al * inner].copy_from_slice(&pv[src..src + al * inner]);
        }
        offset += al;
    }
    let handles: Vec<Tensor> = parts.to_vec();
    Tensor::from_op(
        out_shape,
        out,
        parts.to_vec(),
        Box::new(move |g| {
            let mut offset = 0;
            for (p, &al) in handles.iter().zip(ax_lens.iter()) {
                if p.requires_grad() {
                    let mut da = vec![0.0; outer * al * inner];
                    for o in 0..outer {
                        let src = (o * total_ax + offset) * inner;
                        let dst = o * al * inner;
                        da[dst..dst + al * inner].copy_from_slice(&g[src..src + al * inner]);
                    }
                    p.accum_grad(&da);
                }
                offset += al;
            }
        }),
    )
}

/// Repeats `a` along a new leading batch axis; backward sums over it.
pub fn broadcast_leading(a: &Tensor, batch: usize) -> Tensor {
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(a.shape());
    let av = vals(a);
    let mut out = Vec::with_capacity(batch * av.len());
    for _ in 0..batch {
        out.extend_from_slice(&av);
    }
    drop(av);
    let ac = a.clone();
    let n = a.len();
    Tensor::from_op(
        out_shape,
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut da = vec![0.0; n];
            for b in 0..batch {
                for i in 0..n {
                    da[i] += g[b * n + i];
                }
            }
            ac.accum_grad(&da);
        }),
    )
}

// ---------------------------------------------------------------- linear algebra

/// Batched matmul: [.., M, K] x [.., K, N] -> [.., M, N] with equal
/// leading batch dims.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let ash = a.shape().to_vec();
    let bsh = b.shape().to_vec();
    let nd = ash.len();
    assert!(nd >= 2 && bsh.len() == nd, "matmul rank mismatch");
    assert_eq!(&ash[..nd - 2], &bsh[..nd - 2], "matmul batch mismatch");
    let (m, k) = (ash[nd - 2], ash[nd - 1]);
    let (k2, n) = (bsh[nd - 2], bsh[nd - 1]);
    assert_eq!(k, k2, "matmul inner dim mismatch");
    let batch: usize = ash[..nd - 2].iter().product();
    let av = vals(a);
    let bv = vals(b);
    let mut out = vec![0.0; batch * m * n];
    for bt in 0..batch {
        let ao = bt * m * k;
        let bo = bt * k * n;
        let co = bt * m * n;
        for i in 0..m {
            for p in 0..k {
                let x = av[ao + i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = bo + p * n;
                let crow = co + i * n;
                for j in 0..n {
                    out[crow + j] += x * bv[brow + j];
                }
            }
        }
    }
    drop(av);
    drop(bv);
    let mut out_shape = ash[..nd - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            // dA = g @ B^T, dB = A^T @ g
            if ac.requires_grad() {
                let bv = vals(&bc);
                let mut da = vec![0.0; batch * m * k];
                for bt in 0..batch {
                    let bo = bt * k * n;
                    let go = bt * m * n;
                    let ao = bt * m * k;
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[go + i * n + j] * bv[bo + p * n + j];
                            }
                            da[ao + i * k + p] = acc;
                        }
                    }
                }
                drop(bv);
                ac.accum_grad(&da);
            }
            if bc.requires_grad() {
                let av = vals(&ac);
                let mut db = vec![0.0; batch * k * n];
                for bt in 0..batch {
                    let ao = bt * m * k;
                    let go = bt * m * n;
                    let bo = bt * k * n;
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[ao + i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[bo + p * n + j] += x * g[go + i * n + j];
                            }
                        }
                    }
                }
                drop(av);
                bc.accum_grad(&db);
            }
        }),
    )
}

/// Affine map over the last axis: x [.., fin], w [fout, fin], b [fout].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let xsh = x.shape().to_vec();
    let fin = *xsh.last().expect("linear on 0-rank tensor");
    let (fout, fin2) = (w.shape()[0], w.shape()[1]);
    assert_eq!(fin, fin2, "linear weight shape mismatch");
    assert_eq!(b.shape(), &[fout], "linear bias shape mismatch");
    let rows = x.len() / fin;
    let xv = vals(x);
    let wv = vals(w);
    let bv = vals(b);
    let mut out = vec![0.0; rows * fout];
    for r in 0..rows {
        let xo = r * fin;
        let oo = r * fout;
        out[oo..oo + fout].copy_from_slice(&bv);
        for i in 0..fin {
            let xi = xv[xo + i];
            if xi == 0.0 {
                continue;
            }
            for o in 0..fout {
                out[oo + o] += wv[o * fin + i] * xi;
            }
        }
    }
    drop(xv);
    drop(wv);
    drop(bv);
    let mut out_shape = xsh.clone();
    *out_shape.last_mut().unwrap() = fout;
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    Tensor::from_op(
        out_shape,
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g| {
            if xc.requires_grad() {
                let wv = vals(&wc);
                let mut dx = vec![0.0; rows * fin];
                for r in 0..rows {
                    for o in 0..fout {
                        let gv = g[r * fout + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for i in 0..fin {
                            dx[r * fin + i] += gv * wv[o * fin + i];
                        }
                    }
                }
                drop(wv);
                xc.accum_grad(&dx);
            }
            if wc.requires_grad() {
                let xv = vals(&xc);
                let mut dw = vec![0.0; fout * fin];
                for r in 0..rows {
                    for o in 0..fout {
                        let gv = g[r * fout + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for i in 0..fin {
                            dw[o * fin + i] += gv * xv[r * fin + i];
                        }
                    }
                }
                drop(xv);
                wc.accum_grad(&dw);
            }
            if bc.requires_grad() {
                let mut db = vec![0.0; fout];
                for r in 0..rows {
                    for o in 0..fout {
                        db[o] += g[r * fout + o];
                    }
                }
                bc.accum_grad(&db);
            }
        }),
    )
}

// ---------------------------------------------------------------- normalization

/// Layer norm over the last axis with affine parameters gamma/beta.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let c = *x.shape().last().expect("layer_norm on 0-rank tensor");
    assert_eq!(gamma.shape(), &[c], "gamma shape mismatch");
    assert_eq!(beta.shape(), &[c], "beta shape mismatch");
    let rows = x.len() / c;
    let xv = vals(x);
    let gv = vals(gamma);
    let bv = vals(beta);
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xv[r * c..(r + 1) * c];
        let mu: f64 = row.iter().sum::<f64>() / c as f64;
        let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for i in 0..c {
            let xh = (row[i] - mu) * istd;
            xhat[r * c + i] = xh;
            out[r * c + i] = gv[i] * xh + bv[i];
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gamma_v = vals(&gc);
            if xc.requires_grad() {
                let mut dx = vec![0.0; rows * c];
                for r in 0..rows {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i in 0..c {
                        let dxh = g[r * c + i] * gamma_v[i];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[r * c + i];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for i in 0..c {
                        let dxh = g[r * c + i] * gamma_v[i];
                        dx[r * c + i] =
                            inv_std[r] * (dxh - mean_dxhat - xhat[r * c + i] * mean_dxhat_xhat);
                    }
                }
                xc.accum_grad(&dx);
            }
            drop(gamma_v);
            if gc.requires_grad() {
                let mut dg = vec![0.0; c];
                for r in 0..rows {
                    for i in 0..c {
                        dg[i] += g[r * c + i] * xhat[r * c + i];
                    }
                }
                gc.accum_grad(&dg);
            }
            if bc.requires_grad() {
                let mut db = vec![0.0; c];
                for r in 0..rows {
                    for i in 0..c {
                        db[i] += g[r * c + i];
                    }
                }
                bc.accum_grad(&db);
            }
        }),
    )
}

// ---------------------------------------------------------------- masked softmax / CE

/// Softmax over the last axis restricted to `valid` entries; invalid
/// entries get probability exactly 0. `valid` must match the element
/// count of `x`. Errors on any all-invalid row.
pub fn masked_softmax(x: &Tensor, valid: &[bool]) -> Result<Tensor> {
    assert_eq!(valid.len(), x.len(), "mask length mismatch");
    let l = *x.shape().last().expect("softmax on 0-rank tensor");
    let rows = x.len() / l;
    let xv = vals(x);
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let o = r * l;
        let mut mx = f64::NEG_INFINITY;
        for i in 0..l {
            if valid[o + i] && xv[o + i] > mx {
                mx = xv[o + i];
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(Error::Argument(format!("all-invalid softmax row {r}")));
        }
        let mut sum = 0.0;
        for i in 0..l {
            if valid[o + i] {
                let e = (xv[o + i] - mx).exp();
                out[o + i] = e;
                sum += e;
            }
        }
        for i in 0..l {
            out[o + i] /= sum;
        }
    }
    drop(xv);
    let xc = x.clone();
    let probs = out.clone();
    let valid_b = valid.to_vec();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![0.0; probs.len()];
            for r in 0..rows {
                let o = r * l;
                let mut dot = 0.0;
                for i in 0..l {
                    dot += g[o + i] * probs[o + i];
                }
                for i in 0..l {
                    if valid_b[o + i] {
                        dx[o + i] = probs[o + i] * (g[o + i] - dot);
                    }
                }
            }
            xc.accum_grad(&dx);
        }),
    ))
}

/// Sum over rows of -log(masked_softmax(logits)[target]).
///
/// logits is treated as [rows, L] over its last axis; `targets[r]` must be
/// a valid position of row r.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[usize], valid: &[bool]) -> Result<Tensor> {
    assert_eq!(valid.len(), logits.len(), "mask length mismatch");
    let l = *logits.shape().last().expect("cross_entropy on 0-rank tensor");
    let rows = logits.len() / l;
    assert_eq!(targets.len(), rows, "targets length mismatch");
    let xv = vals(logits);
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for r in 0..rows {
        let o = r * l;
        let t = targets[r];
        if t >= l {
            return Err(Error::Argument(format!("target {t} out of range {l}")));
        }
        if !valid[o + t] {
            return Err(Error::Argument(format!("target {t} at masked position, row {r}")));
        }
        let mut mx = f64::NEG_INFINITY;
        for i in 0..l {
            if valid[o + i] && xv[o + i] > mx {
                mx = xv[o + i];
            }
        }
        let mut sum = 0.0;
        for i in 0..l {
            if valid[o + i] {
                let e = (xv[o + i] - mx).exp();
                probs[o + i] = e;
                sum += e;
            }
        }
        for i in 0..l {
            probs[o + i] /= sum;
        }
        loss -= probs[o + t].ln();
    }
    drop(xv);
    let xc = logits.clone();
    let targets_b = targets.to_vec();
    let valid_b = valid.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g| {
            let gs = g[0];
            let mut dx = vec![0.0; probs.len()];
            for r in 0..rows {
                let o = r * l;
                for i in 0..l {
                    if valid_b[o + i] {
                        let onehot = if i == targets_b[r] { 1.0 } else { 0.0 };
                        dx[o + i] = gs * (probs[o + i] - onehot);
                    }
                }
            }
            xc.accum_grad(&dx);
        }),
    ))
}

// ---------------------------------------------------------------- convolution

/// 3D cross-correlation. x [B,Ci,H,W,D], w [Co,Ci,kh,kw,kd], bias [Co].
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Tensor> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::Shape(format!("conv3d ranks {:?} {:?}", xs, ws)));
    }
    let (b, ci, h, wd, d) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, ci2, kh, kw, kd) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    if ci != ci2 {
        return Err(Error::Shape(format!("conv3d channels {ci} vs {ci2}")));
    }
    if bias.shape() != [co] {
        return Err(Error::Shape("conv3d bias shape".into()));
    }
    let (sh, sw, sd) = stride;
    if sh < 1 || sw < 1 || sd < 1 {
        return Err(Error::Argument("conv3d stride must be >= 1".into()));
    }
    let (ph, pw, pd) = padding;
    if h + 2 * ph < kh || wd + 2 * pw < kw || d + 2 * pd < kd {
        return Err(Error::Shape("conv3d kernel does not fit padded input".into()));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (wd + 2 * pw - kw) / sw + 1;
    let od = (d + 2 * pd - kd) / sd + 1;
    let xv = vals(x);
    let wv = vals(w);
    let bv = vals(bias);
    let mut out = vec![0.0; b * co * oh * ow * od];
    for bi in 0..b {
        for c in 0..co {
            let base_o = ((bi * co) + c) * oh * ow * od;
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..od {
                        let mut acc = bv[c];
                        for cc in 0..ci {
                            let base_x = ((bi * ci) + cc) * h * wd * d;
                            let base_w = ((c * ci) + cc) * kh * kw * kd;
                            for a in 0..kh {
                                let ih = (i * sh + a) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for bb in 0..kw {
                                    let iw = (j * sw + bb) as isize - pw as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    let xrow = base_x + (ih as usize * wd + iw as usize) * d;
                                    let wrow = base_w + (a * kw + bb) * kd;
                                    for cd in 0..kd {
                                        let id = (k * sd + cd) as isize - pd as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        acc += xv[xrow + id as usize] * wv[wrow + cd];
                                    }
                                }
                            }
                        }
                        out[base_o + (i * ow + j) * od + k] = acc;
                    }
                }
            }
        }
    }
    drop(xv);
    drop(wv);
    drop(bv);
    let (xc, wc, bc) = (x.clone(), w.clone(), bias.clone());
    Ok(Tensor::from_op(
        vec![b, co, oh, ow, od],
        out,
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |g| {
            let xv = vals(&xc);
            let wv = vals(&wc);
            let need_dx = xc.requires_grad();
            let need_dw = wc.requires_grad();
            let mut dx = if need_dx { vec![0.0; xv.len()] } else { Vec::new() };
            let mut dw = if need_dw { vec![0.0; wv.len()] } else { Vec::new() };
            let mut db = vec![0.0; co];
            for bi in 0..b {
                for c in 0..co {
                    let base_o = ((bi * co) + c) * oh * ow * od;
                    for i in 0..oh {
                        for j in 0..ow {
                            for k in 0..od {
                                let gv = g[base_o + (i * ow + j) * od + k];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[c] += gv;
                                for cc in 0..ci {
                                    let base_x = ((bi * ci) + cc) * h * wd * d;
                                    let base_w = ((c * ci) + cc) * kh * kw * kd;
                                    for a in 0..kh {
                                        let ih = (i * sh + a) as isize - ph as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for bb in 0..kw {
                                            let iw = (j * sw + bb) as isize - pw as isize;
                                            if iw < 0 || iw >= wd as isize {
                                                continue;
                                            }
                                            let xrow =
                                                base_x + (ih as usize * wd + iw as usize) * d;
                                            let wrow = base_w + (a * kw + bb) * kd;
                                            for cd in 0..kd {
                                                let id = (k * sd + cd) as isize - pd as isize;
                                                if id < 0 || id >= d as isize {
                                                    continue;
                                                }
                                                if need_dx {
                                                    dx[xrow + id as usize] += gv * wv[wrow + cd];
                                                }
                                                if need_dw {
                                                    dw[wrow + cd] += gv * xv[xrow + id as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            drop(xv);
            drop(wv);
            if need_dx {
                xc.accum_grad(&dx);
            }
            if need_dw {
                wc.accum_grad(&dw);
            }
            bc.accum_grad(&db);
        }),
    ))
}

/// Per-channel 1D cross-correlation with same-length zero padding.
/// x [B,C,L], w [C,k] with odd k.
pub fn conv1d_depthwise(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if xs.len() != 3 || ws.len() != 2 {
        return Err(Error::Shape(format!("conv1d ranks {:?} {:?}", xs, ws)));
    }
    let (b, c, l) = (xs[0], xs[1], xs[2]);
    let (c2, k) = (ws[0], ws[1]);
    if c != c2 {
        return Err(Error::Shape(format!("conv1d channels {c} vs {c2}")));
    }
    if k % 2 == 0 {
        return Err(Error::Argument(format!("conv1d kernel size {k} must be odd")));
    }
    let pad = k / 2;
    let xv = vals(x);
    let wv = vals(w);
    let mut out = vec![0.0; b * c * l];
    for bi in 0..b {
        for cc in 0..c {
            let xo = (bi * c + cc) * l;
            let wo = cc * k;
            for t in 0..l {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < l {
                        acc += xv[xo + src as usize] * wv[wo + j];
                    }
                }
                out[xo + t] = acc;
            }
        }
    }
    drop(xv);
    drop(wv);
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        vec![b, c, l],
        out,
        vec![x.clone(), w.clone()],
        Box::new(move |g| {
            let xv = vals(&xc);
            let wv = vals(&wc);
            let need_dx = xc.requires_grad();
            let need_dw = wc.requires_grad();
            let mut dx = if need_dx { vec![0.0; xv.len()] } else { Vec::new() };
            let mut dw = if need_dw { vec![0.0; wv.len()] } else { Vec::new() };
            for bi in 0..b {
                for cc in 0..c {
                    let xo = (bi * c + cc) * l;
                    let wo = cc * k;
                    for t in 0..l {
                        let gv = g[xo + t];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let src = t as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < l {
                                if need_dx {
                                    dx[xo + src as usize] += gv * wv[wo + j];
                                }
                                if need_dw {
                                    dw[wo + j] += gv * xv[xo + src as usize];
                                }
                            }
                        }
                    }
                }
            }
            drop(xv);
            drop(wv);
            if need_dx {
                xc.accum_grad(&dx);
            }
            if need_dw {
                wc.accum_grad(&dw);
            }
        }),
    ))
}

/// Mean over the in-plane axes: x [B,C,H,W,D] -> [B,C,D].
pub fn mean_pool_hw(x: &Tensor) -> Tensor {
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 5, "mean_pool_hw expects [B,C,H,W,D]");
    let (b, c, h, w, d) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let xv = vals(x);
    let mut out = vec![0.0; b * c * d];
    let inv = 1.0 / (h * w) as f64;
    for bi in 0..b {
        for cc in 0..c {
            let xo = (bi * c + cc) * h * w * d;
            let oo = (bi * c + cc) * d;
            for i in 0..h * w {
                for k in 0..d {
                    out[oo + k] += xv[xo + i * d + k];
                }
            }
            for k in 0..d {
                out[oo + k] *= inv;
            }
        }
    }
    drop(xv);
    let xc = x.clone();
    Tensor::from_op(
        vec![b, c, d],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![0.0; b * c * h * w * d];
            for bi in 0..b {
                for cc in 0..c {
                    let xo = (bi * c + cc) * h * w * d;
                    let oo = (bi * c + cc) * d;
                    for i in 0..h * w {
                        for k in 0..d {
                            dx[xo + i * d + k] = g[oo + k] * inv;
                        }
                    }
                }
            }
            xc.accum_grad(&dx);
        }),
    )
}

// ---------------------------------------------------------------- attention

/// Projection parameters of one attention sublayer.
#[derive(Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    pub fn tensors(&self) -> Vec<Tensor> {
        vec![
            self.wq.clone(),
            self.bq.clone(),
            self.wk.clone(),
            self.bk.clone(),
            self.wv.clone(),
            self.bv.clone(),
            self.wo.clone(),
            self.bo.clone(),
        ]
    }
}

/// Scaled dot-product multi-head self-attention over x [B,L,C].
///
/// Masked positions are excluded as keys and their output rows are zero.
pub fn multihead_attention(
    x: &Tensor,
    mask: &AttentionMask,
    heads: usize,
    p: &AttentionParams,
) -> Result<Tensor> {
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 3, "attention expects [B,L,C]");
    let (b, l, c) = (xs[0], xs[1], xs[2]);
    assert_eq!(mask.batch(), b, "mask batch mismatch");
    assert_eq!(mask.len(), l, "mask length mismatch");
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "d_model {c} not divisible by n_heads {heads}"
        )));
    }
    let dk = c / heads;
    let q = linear(x, &p.wq, &p.bq);
    let k = linear(x, &p.wk, &p.bk);
    let v = linear(x, &p.wv, &p.bv);
    // [B,L,C] -> [B,H,L,dk]
    let to_heads = |t: &Tensor| permute(&reshape(t, &[b, l, heads, dk]), &[0, 2, 1, 3]);
    let qh = to_heads(&q);
    let kh = to_heads(&k);
    let vh = to_heads(&v);
    let kt = permute(&kh, &[0, 1, 3, 2]); // [B,H,dk,L]
    let scores = scale(&matmul(&qh, &kt), 1.0 / (dk as f64).sqrt()); // [B,H,L,L]
    // key-validity mask expanded over heads and query positions; exact
    // zeros at invalid keys come from the masked softmax
    let mut key_valid = vec![false; b * heads * l * l];
    for bi in 0..b {
        for h in 0..heads {
            for qi in 0..l {
                let o = ((bi * heads + h) * l + qi) * l;
                for ki in 0..l {
                    key_valid[o + ki] = mask.valid[bi][ki];
                }
            }
        }
    }
    let probs = masked_softmax(&scores, &key_valid)?;
    let ctx = matmul(&probs, &vh); // [B,H,L,dk]
    let merged = reshape(&permute(&ctx, &[0, 2, 1, 3]), &[b, l, c]);
    let projected = linear(&merged, &p.wo, &p.bo);
    // zero out masked query rows
    let mut row_mask = vec![0.0; b * l * c];
    for bi in 0..b {
        for t in 0..l {
            if mask.valid[bi][t] {
                let o = (bi * l + t) * c;
                row_mask[o..o + c].iter_mut().for_each(|m| *m = 1.0);
            }
        }
    }
    Ok(mul(&projected, &Tensor::constant(&[b, l, c], row_mask)))
}

//! Raw f32 compute kernels shared by the tape ops and the tape-free
//! inference path. All loops have fixed iteration order; nothing here
//! allocates threads, so results are bit-reproducible.

use super::ConvSpec;
use crate::{Error, Result};

pub fn ensure_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

/// out += a × b, a: [m,k], b: [k,n].
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a × bᵀ, a: [m,k], b: [n,k].
pub fn matmul_nt_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out += aᵀ × b, a: [k,m], b: [k,n].
pub fn matmul_tn_acc(a: &[f32], b: &[f32], k: usize, m: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ── convolution ─────────────────────────────────────────────────────────

/// Unfold one sample's channel slice into [c·kh·kw, oh·ow] columns.
/// Out-of-bounds taps write exact zeros (zero padding).
pub fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    cols: &mut [f32],
) {
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let opos = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * opos;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize
                        - spec.padding as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize
                            - spec.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back into one sample's channel slice.
pub fn col2im_acc(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    dx: &mut [f32],
) {
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let opos = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * opos;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize
                        - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(
    xs: &[usize],
    ws: &[usize],
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape("conv2d", format!("want 4-d input/weight, got {xs:?} / {ws:?}")));
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::arg("conv2d", format!("groups {} must divide cin {cin} and cout {cout}", spec.groups)));
    }
    if cpg != cin / spec.groups {
        return Err(Error::shape(
            "conv2d",
            format!("weight channels {cpg} != cin {cin} / groups {}", spec.groups),
        ));
    }
    let eff_h = spec.dilation * (kh - 1) + 1;
    let eff_w = spec.dilation * (kw - 1) + 1;
    if h + 2 * spec.padding < eff_h || w + 2 * spec.padding < eff_w {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} (dilation {}) exceeds padded input {h}x{w}", spec.dilation),
        ));
    }
    Ok((n, cin, h, w, cout, cpg, kh, kw))
}

/// x: [n,cin,h,w], weight: [cout, cin/groups, kh, kw] → [n, cout, oh, ow].
pub fn conv2d(x: &[f32], xs: &[usize], weight: &[f32], ws: &[usize], spec: &ConvSpec) -> Result<(Vec<f32>, Vec<usize>)> {
    let (n, cin, h, w, cout, cpg, kh, kw) = conv_dims(xs, ws, spec)?;
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let opos = oh * ow;
    let copg = cout / spec.groups;
    let rows = cpg * kh * kw;
    let mut out = vec![0.0f32; n * cout * opos];
    let mut cols = vec![0.0f32; rows * opos];
    for s in 0..n {
        for g in 0..spec.groups {
            let xg = &x[(s * cin + g * cpg) * h * w..(s * cin + (g + 1) * cpg) * h * w];
            im2col(xg, cpg, h, w, kh, kw, spec, &mut cols);
            let wg = &weight[g * copg * rows..(g + 1) * copg * rows];
            let og = &mut out[(s * cout + g * copg) * opos..(s * cout + (g + 1) * copg) * opos];
            matmul_acc(wg, &cols, copg, rows, opos, og);
        }
    }
    Ok((out, vec![n, cout, oh, ow]))
}

/// Gradients of `conv2d` w.r.t. input and weight. Columns are recomputed
/// per sample rather than cached; the weight gradient accumulates in fixed
/// sample order.
pub fn conv2d_backward(
    x: &[f32],
    xs: &[usize],
    weight: &[f32],
    ws: &[usize],
    spec: &ConvSpec,
    dout: &[f32],
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (n, cin, h, w, cout, cpg, kh, kw) = conv_dims(xs, ws, spec)?;
    let oh = spec.out_size(h, kh);
    let ow = spec.out_size(w, kw);
    let opos = oh * ow;
    let copg = cout / spec.groups;
    let rows = cpg * kh * kw;
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; weight.len()];
    let mut cols = vec![0.0f32; rows * opos];
    let mut dcols = vec![0.0f32; rows * opos];
    for s in 0..n {
        for g in 0..spec.groups {
            let xg = &x[(s * cin + g * cpg) * h * w..(s * cin + (g + 1) * cpg) * h * w];
            im2col(xg, cpg, h, w, kh, kw, spec, &mut cols);
            let wg = &weight[g * copg * rows..(g + 1) * copg * rows];
            let dog = &dout[(s * cout + g * copg) * opos..(s * cout + (g + 1) * copg) * opos];
            // dW_g += dOut_g × colsᵀ
            matmul_nt_acc(dog, &cols, copg, opos, rows, &mut dw[g * copg * rows..(g + 1) * copg * rows]);
            // dcols = W_gᵀ × dOut_g, then scatter back to dx
            dcols.fill(0.0);
            matmul_tn_acc(wg, dog, copg, rows, opos, &mut dcols);
            let dxg = &mut dx[(s * cin + g * cpg) * h * w..(s * cin + (g + 1) * cpg) * h * w];
            col2im_acc(&dcols, cpg, h, w, kh, kw, spec, dxg);
        }
    }
    Ok((dx, dw))
}

// ── pooling (3×3, padding 1) ────────────────────────────────────────────

/// Max pool; padding is excluded from the window (equivalent to −∞ pads).
/// Returns output and per-output argmax as flat h·w plane indices.
pub fn maxpool3(x: &[f32], xs: &[usize], stride: usize) -> Result<(Vec<f32>, Vec<usize>, Vec<u32>)> {
    pool_dims(xs, stride)?;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let obase = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut besti = 0u32;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            besti = idx as u32;
                        }
                    }
                }
                out[obase + oy * ow + ox] = best;
                arg[obase + oy * ow + ox] = besti;
            }
        }
    }
    Ok((out, vec![n, c, oh, ow], arg))
}

pub fn maxpool3_backward(arg: &[u32], dout: &[f32], xs: &[usize], stride: usize) -> Vec<f32> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let mut dx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let obase = p * oh * ow;
        let dplane = &mut dx[p * h * w..(p + 1) * h * w];
        for o in 0..oh * ow {
            dplane[arg[obase + o] as usize] += dout[obase + o];
        }
    }
    dx
}

/// Average pool over valid taps only (padding excluded from the divisor),
/// so a constant input stays constant at the borders.
pub fn avgpool3(x: &[f32], xs: &[usize], stride: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    pool_dims(xs, stride)?;
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let obase = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f32;
                let mut cnt = 0u32;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        s += plane[iy as usize * w + ix as usize];
                        cnt += 1;
                    }
                }
                out[obase + oy * ow + ox] = s / cnt as f32;
            }
        }
    }
    Ok((out, vec![n, c, oh, ow]))
}

pub fn avgpool3_backward(dout: &[f32], xs: &[usize], stride: usize) -> Vec<f32> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;
    let mut dx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let obase = p * oh * ow;
        let dplane = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut taps: [usize; 9] = [0; 9];
                let mut cnt = 0usize;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        taps[cnt] = iy as usize * w + ix as usize;
                        cnt += 1;
                    }
                }
                let g = dout[obase + oy * ow + ox] / cnt as f32;
                for &t in &taps[..cnt] {
                    dplane[t] += g;
                }
            }
        }
    }
    dx
}

fn pool_dims(xs: &[usize], stride: usize) -> Result<()> {
    if xs.len() != 4 {
        return Err(Error::shape("pool3", format!("want 4-d input, got {xs:?}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::arg("pool3", format!("stride must be 1 or 2, got {stride}")));
    }
    if xs[2] < 2 || xs[3] < 2 {
        return Err(Error::shape("pool3", format!("spatial dims too small: {xs:?}")));
    }
    Ok(())
}

// ── batchnorm helpers ───────────────────────────────────────────────────

/// Per-channel mean and biased variance over (N, H, W).
pub fn bn_stats(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (n * hw) as f32;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for s in 0..n {
        for ci in 0..c {
            let plane = &x[(s * c + ci) * hw..(s * c + ci + 1) * hw];
            let mut acc = 0.0f32;
            for &v in plane {
                acc += v;
            }
            mean[ci] += acc;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for s in 0..n {
        for ci in 0..c {
            let plane = &x[(s * c + ci) * hw..(s * c + ci + 1) * hw];
            let mu = mean[ci];
            let mut acc = 0.0f32;
            for &v in plane {
                let d = v - mu;
                acc += d * d;
            }
            var[ci] += acc;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

/// out = gamma · (x − mean) · invstd + beta, broadcast per channel.
pub fn bn_apply(
    x: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f32],
    invstd: &[f32],
    gamma: Option<&[f32]>,
    beta: Option<&[f32]>,
) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for s in 0..n {
        for ci in 0..c {
            let g = gamma.map_or(1.0, |g| g[ci]);
            let b = beta.map_or(0.0, |b| b[ci]);
            let scale = g * invstd[ci];
            let shift = b - mean[ci] * scale;
            let src = &x[(s * c + ci) * hw..(s * c + ci + 1) * hw];
            let dst = &mut out[(s * c + ci) * hw..(s * c + ci + 1) * hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * scale + shift;
            }
        }
    }
    out
}

// ── softmax family ──────────────────────────────────────────────────────

/// Row-wise softmax of an [r, c] matrix.
pub fn softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0f32;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in dst.iter_mut() {
            *o /= z;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for &v in row {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct triple-loop convolution used as the oracle for the im2col path.
    fn conv_naive(
        x: &[f32],
        xs: &[usize],
        w: &[f32],
        ws: &[usize],
        spec: &ConvSpec,
    ) -> (Vec<f32>, Vec<usize>) {
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(wd, kw);
        let copg = cout / spec.groups;
        let mut out = vec![0.0f32; n * cout * oh * ow];
        for s in 0..n {
            for co in 0..cout {
                let g = co / copg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ci in 0..cpg {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((s * cin + g * cpg + ci) * h + iy as usize) * wd
                                        + ix as usize;
                                    let wi = ((co * cpg + ci) * kh + ky) * kw + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((s * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, vec![n, cout, oh, ow])
    }

    fn lcg(seed: &mut u64) -> f32 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 33) as f32 / (1u64 << 31) as f32) - 0.5
    }

    #[test]
    fn conv_matches_naive_reference() {
        let cases = [
            (ConvSpec { stride: 1, dilation: 1, padding: 1, groups: 1 }, [2, 3, 8, 8], [4, 3, 3, 3]),
            (ConvSpec { stride: 2, dilation: 1, padding: 2, groups: 1 }, [1, 2, 9, 9], [3, 2, 5, 5]),
            (ConvSpec { stride: 1, dilation: 2, padding: 2, groups: 1 }, [1, 2, 8, 8], [2, 2, 3, 3]),
            (ConvSpec { stride: 2, dilation: 2, padding: 4, groups: 1 }, [1, 1, 8, 8], [2, 1, 5, 5]),
            (ConvSpec { stride: 1, dilation: 1, padding: 1, groups: 2 }, [2, 4, 6, 6], [6, 2, 3, 3]),
            (ConvSpec { stride: 1, dilation: 1, padding: 0, groups: 4 }, [1, 4, 5, 5], [4, 1, 3, 3]),
        ];
        let mut seed = 7u64;
        for (spec, xs, ws) in cases {
            let x: Vec<f32> = (0..xs.iter().product()).map(|_| lcg(&mut seed)).collect();
            let w: Vec<f32> = (0..ws.iter().product()).map(|_| lcg(&mut seed)).collect();
            let (got, gs) = conv2d(&x, &xs, &w, &ws, &spec).unwrap();
            let (want, wsh) = conv_naive(&x, &xs, &w, &ws, &spec);
            assert_eq!(gs, wsh);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} for {spec:?}");
            }
        }
    }

    #[test]
    fn conv_all_ones_3x3_sums_to_nine() {
        let x = vec![1.0f32; 9];
        let w = vec![1.0f32; 9];
        let spec = ConvSpec::plain(1, 0);
        let (out, shape) = conv2d(&x, &[1, 1, 3, 3], &w, &[1, 1, 3, 3], &spec).unwrap();
        assert_eq!(shape, vec![1, 1, 1, 1]);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn maxpool_constant_is_identity_at_stride_one() {
        let x = vec![3.5f32; 2 * 4 * 4];
        let (out, shape, _) = maxpool3(&x, &[1, 2, 4, 4], 1).unwrap();
        assert_eq!(shape, vec![1, 2, 4, 4]);
        assert!(out.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn avgpool_constant_stays_constant_with_uncounted_padding() {
        let x = vec![-1.25f32; 6 * 6];
        let (out, shape) = avgpool3(&x, &[1, 1, 6, 6], 2).unwrap();
        assert_eq!(shape, vec![1, 1, 3, 3]);
        for &v in &out {
            assert!((v - -1.25).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_gradients_scatter_back() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let (_, shape, arg) = maxpool3(&x, &[1, 1, 4, 4], 2).unwrap();
        let dout = vec![1.0f32; shape.iter().product()];
        let dx = maxpool3_backward(&arg, &dout, &[1, 1, 4, 4], 2);
        assert_eq!(dx.iter().sum::<f32>(), dout.iter().sum::<f32>());
        // max of the whole 4x4 sits at 15 and is hit by the last window only
        assert_eq!(dx[15], 1.0);

        let davg = avgpool3_backward(&dout, &[1, 1, 4, 4], 2);
        assert!((davg.iter().sum::<f32>() - dout.iter().sum::<f32>()).abs() < 1e-5);
    }

    #[test]
    fn softmax_uniform_logits() {
        let p = softmax_rows(&[0.0, 0.0, 0.0], 1, 3);
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn finite_check_catches_nan_and_inf() {
        assert!(ensure_finite("t", &[1.0, 2.0]).is_ok());
        assert!(ensure_finite("t", &[1.0, f32::NAN]).is_err());
        assert!(ensure_finite("t", &[f32::INFINITY]).is_err());
    }
}

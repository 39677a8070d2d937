//! Raw numeric kernels behind the graph operations.
//!
//! Every function here is pure: outputs depend only on the explicit inputs,
//! which is what makes graph replay and finite-difference checking possible.
//! Convolution goes through an im2col buffer so the inner loops run over
//! contiguous rows.

use super::Element;

/// Output spatial extent of a convolution/pool window, floor division.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Fills `col` (k*k*cin rows by hout*wout columns) with the patch matrix of
/// one sample. Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
    col: &mut [E],
) {
    let patch = hout * wout;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * patch..][..patch];
                let mut p = 0;
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for _ in 0..wout {
                            row[p] = E::zero();
                            p += 1;
                        }
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        row[p] = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            xrow[ix as usize]
                        };
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch matrix back onto one sample's input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Element>(
    col: &[E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
    dx: &mut [E],
) {
    let patch = hout * wout;
    for ci in 0..cin {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * patch..][..patch];
                let mut p = 0;
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        p += wout;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dxc[base + ix as usize] = dxc[base + ix as usize] + row[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

/// One sample of the forward convolution; `out` covers exactly this sample.
#[allow(clippy::too_many_arguments)]
fn conv2d_forward_sample<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[E],
    cout: usize,
    k: usize,
    bias: &[E],
    stride: usize,
    pad: usize,
    col: &mut [E],
    out: &mut [E],
) {
    let hout = conv_out_extent(h, k, stride, pad);
    let wout = conv_out_extent(w, k, stride, pad);
    let patch = hout * wout;
    let krows = cin * k * k;
    im2col(x, cin, h, w, k, stride, pad, hout, wout, col);
    for co in 0..cout {
        let wrow = &wgt[co * krows..(co + 1) * krows];
        let orow = &mut out[co * patch..(co + 1) * patch];
        let b = bias[co];
        for v in orow.iter_mut() {
            *v = b;
        }
        for (kk, &wv) in wrow.iter().enumerate() {
            let crow = &col[kk * patch..(kk + 1) * patch];
            for (o, &c) in orow.iter_mut().zip(crow.iter()) {
                *o = *o + wv * c;
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
/// x: [n,cin,h,w], wgt: [cout,cin,k,k], bias: [cout] -> [n,cout,hout,wout].
///
/// Batch samples are independent; large batches split across two threads.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<E: Element>(
    x: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[E],
    cout: usize,
    k: usize,
    bias: &[E],
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let hout = conv_out_extent(h, k, stride, pad);
    let wout = conv_out_extent(w, k, stride, pad);
    let patch = hout * wout;
    let krows = cin * k * k;
    let mut out = vec![E::zero(); n * cout * patch];
    let run = |samples: &mut dyn Iterator<Item = (usize, &mut [E])>| {
        let mut col = vec![E::zero(); krows * patch];
        for (ni, orow) in samples {
            conv2d_forward_sample(
                &x[ni * cin * h * w..],
                cin,
                h,
                w,
                wgt,
                cout,
                k,
                bias,
                stride,
                pad,
                &mut col,
                orow,
            );
        }
    };
    if n >= 2 && n * cout * krows * patch >= PAR_THRESHOLD {
        let mid = n / 2;
        let (lo, hi) = out.split_at_mut(mid * cout * patch);
        std::thread::scope(|scope| {
            scope.spawn(|| run(&mut lo.chunks_mut(cout * patch).enumerate()));
            run(&mut hi
                .chunks_mut(cout * patch)
                .enumerate()
                .map(|(i, c)| (i + mid, c)));
        });
    } else {
        run(&mut out.chunks_mut(cout * patch).enumerate());
    }
    out
}

/// Below this many multiply-accumulates a conv runs single-threaded.
const PAR_THRESHOLD: usize = 1 << 20;

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
///
/// Batch samples split across two threads like the forward pass; each thread
/// accumulates private dW/db buffers merged in a fixed order, so results stay
/// deterministic.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Element>(
    x: &[E],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[E],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dout: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let hout = conv_out_extent(h, k, stride, pad);
    let wout = conv_out_extent(w, k, stride, pad);
    let patch = hout * wout;
    let krows = cin * k * k;
    let mut dx = vec![E::zero(); n * cin * h * w];

    let run = |samples: &mut dyn Iterator<Item = (usize, &mut [E])>| -> (Vec<E>, Vec<E>) {
        let mut dw = vec![E::zero(); cout * krows];
        let mut db = vec![E::zero(); cout];
        let mut col = vec![E::zero(); krows * patch];
        let mut dcol = vec![E::zero(); krows * patch];
        for (ni, dxrow) in samples {
            im2col(
                &x[ni * cin * h * w..],
                cin,
                h,
                w,
                k,
                stride,
                pad,
                hout,
                wout,
                &mut col,
            );
            for v in dcol.iter_mut() {
                *v = E::zero();
            }
            for co in 0..cout {
                let grow = &dout[(ni * cout + co) * patch..][..patch];
                db[co] = db[co] + grow.iter().copied().sum();
                let wrow = &wgt[co * krows..(co + 1) * krows];
                let dwrow = &mut dw[co * krows..(co + 1) * krows];
                for kk in 0..krows {
                    let crow = &col[kk * patch..(kk + 1) * patch];
                    let mut acc = E::zero();
                    for (&g, &c) in grow.iter().zip(crow.iter()) {
                        acc = acc + g * c;
                    }
                    dwrow[kk] = dwrow[kk] + acc;
                    let wv = wrow[kk];
                    let drow = &mut dcol[kk * patch..(kk + 1) * patch];
                    for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                        *d = *d + wv * g;
                    }
                }
            }
            col2im_add(&dcol, cin, h, w, k, stride, pad, hout, wout, dxrow);
        }
        (dw, db)
    };

    let (dw, db) = if n >= 2 && n * cout * krows * patch >= PAR_THRESHOLD {
        let mid = n / 2;
        let (lo, hi) = dx.split_at_mut(mid * cin * h * w);
        let ((dw_lo, db_lo), (dw_hi, db_hi)) = std::thread::scope(|scope| {
            let handle = scope.spawn(|| run(&mut lo.chunks_mut(cin * h * w).enumerate()));
            let hi_acc = run(&mut hi
                .chunks_mut(cin * h * w)
                .enumerate()
                .map(|(i, c)| (i + mid, c)));
            (handle.join().expect("conv worker"), hi_acc)
        });
        let dw = dw_lo
            .into_iter()
            .zip(dw_hi)
            .map(|(a, b)| a + b)
            .collect();
        let db = db_lo
            .into_iter()
            .zip(db_hi)
            .map(|(a, b)| a + b)
            .collect();
        (dw, db)
    } else {
        run(&mut dx.chunks_mut(cin * h * w).enumerate())
    };
    (dx, dw, db)
}

pub fn relu_forward<E: Element>(x: &[E]) -> Vec<E> {
    x.iter()
        .map(|&v| if v > E::zero() { v } else { E::zero() })
        .collect()
}

pub fn relu_backward<E: Element>(x: &[E], dout: &[E]) -> Vec<E> {
    x.iter()
        .zip(dout)
        .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
        .collect()
}

pub fn sigmoid_forward<E: Element>(x: &[E]) -> Vec<E> {
    // Split on sign so exp never overflows.
    x.iter()
        .map(|&v| {
            if v >= E::zero() {
                E::one() / (E::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (E::one() + e)
            }
        })
        .collect()
}

pub fn sigmoid_backward<E: Element>(y: &[E], dout: &[E]) -> Vec<E> {
    y.iter()
        .zip(dout)
        .map(|(&y, &g)| g * y * (E::one() - y))
        .collect()
}

/// Per-channel mean and 1/sqrt(var + eps) over (n, h, w).
pub fn batch_stats<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    eps: E,
) -> (Vec<E>, Vec<E>) {
    let m = E::of_f64((n * hw) as f64);
    let mut mean = vec![E::zero(); c];
    let mut inv_std = vec![E::zero(); c];
    for ci in 0..c {
        let mut s = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for &v in &x[base..base + hw] {
                s = s + v;
            }
        }
        let mu = s / m;
        let mut var = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for &v in &x[base..base + hw] {
                let d = v - mu;
                var = var + d * d;
            }
        }
        mean[ci] = mu;
        inv_std[ci] = E::one() / (var / m + eps).sqrt();
    }
    (mean, inv_std)
}

/// y = gamma * (x - mean) * inv_std + beta, channel-wise.
pub fn batchnorm_normalize<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    beta: &[E],
) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, inv, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            for (o, &v) in out[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                *o = g * (v - mu) * inv + b;
            }
        }
    }
    out
}

/// Gradients of batchnorm in train mode (stats computed from this batch).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_train<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    dout: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let m = E::of_f64((n * hw) as f64);
    let mut dx = vec![E::zero(); x.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ci in 0..c {
        let (mu, inv) = (mean[ci], inv_std[ci]);
        let mut s1 = E::zero(); // sum dout
        let mut s2 = E::zero(); // sum dout * xhat
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for (&g, &v) in dout[base..base + hw].iter().zip(&x[base..base + hw]) {
                s1 = s1 + g;
                s2 = s2 + g * (v - mu) * inv;
            }
        }
        dgamma[ci] = s2;
        dbeta[ci] = s1;
        let ga = gamma[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for ((d, &g), &v) in dx[base..base + hw]
                .iter_mut()
                .zip(&dout[base..base + hw])
                .zip(&x[base..base + hw])
            {
                let xhat = (v - mu) * inv;
                *d = ga * inv * (g - s1 / m - xhat * s2 / m);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Gradients of batchnorm in eval mode (fixed running stats).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_eval<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[E],
    inv_std: &[E],
    gamma: &[E],
    dout: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let mut dx = vec![E::zero(); x.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for ci in 0..c {
        let (mu, inv, ga) = (mean[ci], inv_std[ci], gamma[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for p in 0..hw {
                let g = dout[base + p];
                dx[base + p] = g * ga * inv;
                dgamma[ci] = dgamma[ci] + g * (x[base + p] - mu) * inv;
                dbeta[ci] = dbeta[ci] + g;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Inverted dropout: survivors scaled by 1/(1-p) so eval needs no rescale.
pub fn dropout_forward<E: Element>(x: &[E], keep: &[bool], p: f64) -> Vec<E> {
    let scale = E::of_f64(1.0 / (1.0 - p));
    x.iter()
        .zip(keep)
        .map(|(&v, &k)| if k { v * scale } else { E::zero() })
        .collect()
}

pub fn dropout_backward<E: Element>(dout: &[E], keep: &[bool], p: f64) -> Vec<E> {
    let scale = E::of_f64(1.0 / (1.0 - p));
    dout.iter()
        .zip(keep)
        .map(|(&g, &k)| if k { g * scale } else { E::zero() })
        .collect()
}

/// Each element replicated into a 2x2 block.
pub fn upsample2x_forward<E: Element>(x: &[E], n: usize, c: usize, h: usize, w: usize) -> Vec<E> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![E::zero(); n * c * h2 * w2];
    for nc in 0..n * c {
        let xp = &x[nc * h * w..];
        let op = &mut out[nc * h2 * w2..];
        for y in 0..h {
            for xx in 0..w {
                let v = xp[y * w + xx];
                let o = 2 * y * w2 + 2 * xx;
                op[o] = v;
                op[o + 1] = v;
                op[o + w2] = v;
                op[o + w2 + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward<E: Element>(
    dout: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<E> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![E::zero(); n * c * h * w];
    for nc in 0..n * c {
        let gp = &dout[nc * h2 * w2..];
        let dp = &mut dx[nc * h * w..];
        for y in 0..h {
            for xx in 0..w {
                let o = 2 * y * w2 + 2 * xx;
                dp[y * w + xx] = gp[o] + gp[o + 1] + gp[o + w2] + gp[o + w2 + 1];
            }
        }
    }
    dx
}

/// 2x2 average pooling, stride 2. Extents must be even.
pub fn avgpool2x2_forward<E: Element>(x: &[E], n: usize, c: usize, h: usize, w: usize) -> Vec<E> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = E::of_f64(0.25);
    let mut out = vec![E::zero(); n * c * h2 * w2];
    for nc in 0..n * c {
        let xp = &x[nc * h * w..];
        let op = &mut out[nc * h2 * w2..];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * w + 2 * xx;
                op[y * w2 + xx] = (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avgpool2x2_backward<E: Element>(
    dout: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<E> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = E::of_f64(0.25);
    let mut dx = vec![E::zero(); n * c * h * w];
    for nc in 0..n * c {
        let gp = &dout[nc * h2 * w2..];
        let dp = &mut dx[nc * h * w..];
        for y in 0..h2 {
            for xx in 0..w2 {
                let g = gp[y * w2 + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                dp[i] = g;
                dp[i + 1] = g;
                dp[i + w] = g;
                dp[i + w + 1] = g;
            }
        }
    }
    dx
}

/// 2x2 max pooling, stride 2; returns (values, argmax in 0..4 per output).
pub fn maxpool2x2_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<E>, Vec<u8>) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![E::zero(); n * c * h2 * w2];
    let mut arg = vec![0u8; n * c * h2 * w2];
    for nc in 0..n * c {
        let xp = &x[nc * h * w..];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * w + 2 * xx;
                let cand = [xp[i], xp[i + 1], xp[i + w], xp[i + w + 1]];
                let mut best = 0usize;
                for j in 1..4 {
                    if cand[j] > cand[best] {
                        best = j;
                    }
                }
                let o = nc * h2 * w2 + y * w2 + xx;
                out[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2x2_backward<E: Element>(
    dout: &[E],
    arg: &[u8],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<E> {
    let (h2, w2) = (h / 2, w / 2);
    let mut dx = vec![E::zero(); n * c * h * w];
    for nc in 0..n * c {
        let dp = &mut dx[nc * h * w..];
        for y in 0..h2 {
            for xx in 0..w2 {
                let o = nc * h2 * w2 + y * w2 + xx;
                let i = 2 * y * w + 2 * xx;
                let target = match arg[o] {
                    0 => i,
                    1 => i + 1,
                    2 => i + w,
                    _ => i + w + 1,
                };
                dp[target] = dp[target] + dout[o];
            }
        }
    }
    dx
}

/// [n,c,h,w] -> [n,c]: mean over every spatial location of each channel.
pub fn global_avg_pool_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<E> {
    let m = E::of_f64(hw as f64);
    let mut out = vec![E::zero(); n * c];
    for nc in 0..n * c {
        let mut s = E::zero();
        for &v in &x[nc * hw..(nc + 1) * hw] {
            s = s + v;
        }
        out[nc] = s / m;
    }
    out
}

pub fn global_avg_pool_backward<E: Element>(
    dout: &[E],
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<E> {
    let m = E::of_f64(hw as f64);
    let mut dx = vec![E::zero(); n * c * hw];
    for nc in 0..n * c {
        let g = dout[nc] / m;
        for d in &mut dx[nc * hw..(nc + 1) * hw] {
            *d = g;
        }
    }
    dx
}

/// [n,c,h,w] -> [n,h,w]: mean over channels at each spatial location.
pub fn channel_mean_forward<E: Element>(x: &[E], n: usize, c: usize, hw: usize) -> Vec<E> {
    let m = E::of_f64(c as f64);
    let mut out = vec![E::zero(); n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for (o, &v) in out[ni * hw..(ni + 1) * hw]
                .iter_mut()
                .zip(&x[base..base + hw])
            {
                *o = *o + v;
            }
        }
        for o in &mut out[ni * hw..(ni + 1) * hw] {
            *o = *o / m;
        }
    }
    out
}

pub fn channel_mean_backward<E: Element>(dout: &[E], n: usize, c: usize, hw: usize) -> Vec<E> {
    let m = E::of_f64(c as f64);
    let mut dx = vec![E::zero(); n * c * hw];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for (d, &g) in dx[base..base + hw]
                .iter_mut()
                .zip(&dout[ni * hw..(ni + 1) * hw])
            {
                *d = g / m;
            }
        }
    }
    dx
}

/// x: [n,din], w: [din,dout], b: [dout] -> x*w + b.
pub fn linear_forward<E: Element>(
    x: &[E],
    n: usize,
    din: usize,
    w: &[E],
    dout_dim: usize,
    b: &[E],
) -> Vec<E> {
    let mut out = vec![E::zero(); n * dout_dim];
    for ni in 0..n {
        let orow = &mut out[ni * dout_dim..(ni + 1) * dout_dim];
        orow.copy_from_slice(b);
        let xrow = &x[ni * din..(ni + 1) * din];
        for (d, &xv) in xrow.iter().enumerate() {
            let wrow = &w[d * dout_dim..(d + 1) * dout_dim];
            for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                *o = *o + xv * wv;
            }
        }
    }
    out
}

pub fn linear_backward<E: Element>(
    x: &[E],
    n: usize,
    din: usize,
    w: &[E],
    dout_dim: usize,
    dout: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let mut dx = vec![E::zero(); n * din];
    let mut dw = vec![E::zero(); din * dout_dim];
    let mut db = vec![E::zero(); dout_dim];
    for ni in 0..n {
        let grow = &dout[ni * dout_dim..(ni + 1) * dout_dim];
        for (o, &g) in grow.iter().enumerate() {
            db[o] = db[o] + g;
        }
        let xrow = &x[ni * din..(ni + 1) * din];
        for d in 0..din {
            let wrow = &w[d * dout_dim..(d + 1) * dout_dim];
            let mut acc = E::zero();
            for (&g, &wv) in grow.iter().zip(wrow.iter()) {
                acc = acc + g * wv;
            }
            dx[ni * din + d] = acc;
            let xv = xrow[d];
            let dwrow = &mut dw[d * dout_dim..(d + 1) * dout_dim];
            for (dw, &g) in dwrow.iter_mut().zip(grow.iter()) {
                *dw = *dw + xv * g;
            }
        }
    }
    (dx, dw, db)
}

/// Numerically stabilized two-class softmax cross entropy, mean over pixels.
/// logits: [n,2,h,w], labels: n*h*w values in {0,1}.
/// Returns (loss, softmax probabilities laid out like the logits).
pub fn softmax_ce_forward<E: Element>(
    logits: &[E],
    n: usize,
    hw: usize,
    labels: &[u8],
) -> (E, Vec<E>) {
    let mut probs = vec![E::zero(); logits.len()];
    let count = E::of_f64((n * hw) as f64);
    let mut loss = E::zero();
    for ni in 0..n {
        let base0 = ni * 2 * hw;
        let base1 = base0 + hw;
        for p in 0..hw {
            let (l0, l1) = (logits[base0 + p], logits[base1 + p]);
            let m = if l0 > l1 { l0 } else { l1 };
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            probs[base0 + p] = p0;
            probs[base1 + p] = p1;
            let lt = if labels[ni * hw + p] == 0 { l0 } else { l1 };
            // -log softmax[t] = log(z) - (l_t - m)
            loss = loss + z.ln() - (lt - m);
        }
    }
    (loss / count, probs)
}

pub fn softmax_ce_backward<E: Element>(
    probs: &[E],
    n: usize,
    hw: usize,
    labels: &[u8],
    dloss: E,
) -> Vec<E> {
    let count = E::of_f64((n * hw) as f64);
    let g = dloss / count;
    let mut dlogits = probs.iter().map(|&p| p * g).collect::<Vec<_>>();
    for ni in 0..n {
        for p in 0..hw {
            let t = labels[ni * hw + p] as usize;
            let idx = (ni * 2 + t) * hw + p;
            dlogits[idx] = dlogits[idx] - g;
        }
    }
    dlogits
}

/// Resolves two shapes for broadcast multiplication.
///
/// Rules, in order:
/// 1. identical shapes multiply elementwise;
/// 2. `[n,c]` against `[n,c,h,w]` expands over the spatial axes;
/// 3. `[n,h,w]` against `[n,c,h,w]` expands over the channel axis;
/// 4. `[n,c]` against `[n,h,w]` expands both into `[n,c,h,w]`;
/// 5. otherwise shapes are right-aligned and size-1 axes broadcast.
///
/// Returns (out_shape, padded_a_shape, padded_b_shape), all the same rank.
pub fn broadcast_spec(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if a == b {
        return Some((a.to_vec(), a.to_vec(), b.to_vec()));
    }
    // Channel-vector against feature map: [n,c] x [n,c,h,w].
    if a.len() == 2 && b.len() == 4 && a[0] == b[0] && a[1] == b[1] {
        return Some((b.to_vec(), vec![a[0], a[1], 1, 1], b.to_vec()));
    }
    if b.len() == 2 && a.len() == 4 && b[0] == a[0] && b[1] == a[1] {
        return Some((a.to_vec(), a.to_vec(), vec![b[0], b[1], 1, 1]));
    }
    // Spatial map against feature map: [n,h,w] x [n,c,h,w].
    if a.len() == 3 && b.len() == 4 && a[0] == b[0] && a[1] == b[2] && a[2] == b[3] {
        return Some((b.to_vec(), vec![a[0], 1, a[1], a[2]], b.to_vec()));
    }
    if b.len() == 3 && a.len() == 4 && b[0] == a[0] && b[1] == a[2] && b[2] == a[3] {
        return Some((a.to_vec(), a.to_vec(), vec![b[0], 1, b[1], b[2]]));
    }
    // Channel-vector against spatial map: [n,c] x [n,h,w] -> [n,c,h,w].
    if a.len() == 2 && b.len() == 3 && a[0] == b[0] {
        let out = vec![a[0], a[1], b[1], b[2]];
        return Some((out, vec![a[0], a[1], 1, 1], vec![b[0], 1, b[1], b[2]]));
    }
    if b.len() == 2 && a.len() == 3 && b[0] == a[0] {
        let out = vec![b[0], b[1], a[1], a[2]];
        return Some((out, vec![a[0], 1, a[1], a[2]], vec![b[0], b[1], 1, 1]));
    }
    // General trailing alignment.
    let rank = a.len().max(b.len());
    let mut pa = vec![1usize; rank];
    let mut pb = vec![1usize; rank];
    pa[rank - a.len()..].copy_from_slice(a);
    pb[rank - b.len()..].copy_from_slice(b);
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        out[i] = match (pa[i], pb[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some((out, pa, pb))
}

fn broadcast_strides(padded: &[usize]) -> Vec<usize> {
    // Row-major strides with 0 on broadcast (size-1) axes.
    let mut strides = vec![0usize; padded.len()];
    let mut acc = 1usize;
    for i in (0..padded.len()).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    strides
}

/// Walks the broadcast output in row-major order, handing the callback the
/// flat output index and the two source offsets.
pub fn broadcast_zip(
    out_shape: &[usize],
    pa: &[usize],
    pb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let sa = broadcast_strides(pa);
    let sb = broadcast_strides(pb);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..numel {
        f(o, oa, ob);
        // Odometer increment with incremental offset updates.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_mul_forward<E: Element>(
    a: &[E],
    b: &[E],
    out_shape: &[usize],
    pa: &[usize],
    pb: &[usize],
) -> Vec<E> {
    let mut out = vec![E::zero(); out_shape.iter().product()];
    broadcast_zip(out_shape, pa, pb, |o, oa, ob| {
        out[o] = a[oa] * b[ob];
    });
    out
}

/// Gradients reduce-sum over the broadcast axes of each operand.
pub fn broadcast_mul_backward<E: Element>(
    a: &[E],
    b: &[E],
    out_shape: &[usize],
    pa: &[usize],
    pb: &[usize],
    dout: &[E],
) -> (Vec<E>, Vec<E>) {
    let mut da = vec![E::zero(); a.len()];
    let mut db = vec![E::zero(); b.len()];
    broadcast_zip(out_shape, pa, pb, |o, oa, ob| {
        let g = dout[o];
        da[oa] = da[oa] + g * b[ob];
        db[ob] = db[ob] + g * a[oa];
    });
    (da, db)
}

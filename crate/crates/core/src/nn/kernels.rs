//! Forward and backward kernels operating on raw per-sample slices.

use super::Tensor;

pub(super) const NORM_EPS: f32 = 1e-5;

/// `c = alpha * a · b + beta * c` for row-major operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above spell out the bounds; every call
    // site passes buffers sized exactly for these shapes and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3×3, zero-padded neighbourhoods: `cols[(ci*9 + ky*3 + kx), y*w + x]`.
fn im2col3(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`], accumulating into `dx`.
fn col2im3(cols: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let (d, s) = match kx {
                        0 => (&mut dst[..w - 1], &src[1..]),
                        1 => (&mut dst[..], src),
                        _ => (&mut dst[1..], &src[..w - 1]),
                    };
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 convolution with a `k × k` kernel (k ∈ {1, 3}).
pub(super) fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, wc_in, k, _] = w.shape();
    assert_eq!(c_in, wc_in, "conv input channels {c_in} vs weight {wc_in}");
    let hw = h * wd;
    let kk = c_in * k * k;
    let mut out = Tensor::zeros([n, c_out, h, wd]);
    let mut cols = if k == 3 {
        vec![0.0; kk * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let xs = x.sample(s);
        let b: &[f32] = if k == 3 {
            im2col3(xs, c_in, h, wd, &mut cols);
            &cols
        } else {
            xs
        };
        let os = out.sample_mut(s);
        gemm(c_out, kk, hw, w.data(), (kk, 1), b, (hw, 1), 0.0, os);
        if let Some(bias) = bias {
            for (o, plane) in os.chunks_exact_mut(hw).enumerate() {
                let bv = bias.data()[o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates weight, bias and (optionally) input gradients of [`conv_forward`].
pub(super) fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    dw: &mut Tensor,
    mut dbias: Option<&mut Tensor>,
    mut dx: Option<&mut Tensor>,
) {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, _, k, _] = w.shape();
    let hw = h * wd;
    let kk = c_in * k * k;
    let mut cols = if k == 3 {
        vec![0.0; kk * hw]
    } else {
        Vec::new()
    };
    let mut dcols = if k == 3 && dx.is_some() {
        vec![0.0; kk * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let xs = x.sample(s);
        let ds = dout.sample(s);
        let b: &[f32] = if k == 3 {
            im2col3(xs, c_in, h, wd, &mut cols);
            &cols
        } else {
            xs
        };
        // dW[o, j] += Σ_p dout[o, p] · cols[j, p]
        gemm(c_out, hw, kk, ds, (hw, 1), b, (1, hw), 1.0, dw.data_mut());
        if let Some(db) = dbias.as_deref_mut() {
            for (o, plane) in ds.chunks_exact(hw).enumerate() {
                db.data_mut()[o] += plane.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = dx.sample_mut(s);
            if k == 3 {
                // dcols[j, p] = Σ_o W[o, j] · dout[o, p]
                gemm(
                    kk,
                    c_out,
                    hw,
                    w.data(),
                    (1, kk),
                    ds,
                    (hw, 1),
                    0.0,
                    &mut dcols,
                );
                col2im3(&dcols, c_in, h, wd, dxs);
            } else {
                gemm(kk, c_out, hw, w.data(), (1, kk), ds, (hw, 1), 1.0, dxs);
            }
        }
    }
}

/// Instance norm forward. Returns (normalized x̂, 1/σ per (n, c) plane, y).
pub(super) fn instance_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Vec<f32>, Tensor) {
    let [n, c, _, _] = x.shape();
    let mut xhat = x.clone();
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let plane = xhat.plane_mut(s, ch);
            let m = plane.len() as f32;
            let mean = plane.iter().sum::<f32>() / m;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / m;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            let src = xhat.plane(s, ch);
            for (o, v) in y.plane_mut(s, ch).iter_mut().zip(src) {
                *o = g * v + b;
            }
        }
    }
    (xhat, inv_std, y)
}

pub(super) fn instance_norm_backward(
    xhat: &Tensor,
    inv_std: &[f32],
    gamma: &Tensor,
    dy: &Tensor,
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
    dx: Option<&mut Tensor>,
) {
    let [n, c, _, _] = xhat.shape();
    let mut dx = dx;
    for s in 0..n {
        for ch in 0..c {
            let xh = xhat.plane(s, ch);
            let g = dy.plane(s, ch);
            let m = xh.len() as f32;
            let sum_g: f32 = g.iter().sum();
            let sum_gx: f32 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            dgamma.data_mut()[ch] += sum_gx;
            dbeta.data_mut()[ch] += sum_g;
            if let Some(dx) = dx.as_deref_mut() {
                let scale = gamma.data()[ch] * inv_std[s * c + ch] / m;
                for ((d, gi), xi) in dx.plane_mut(s, ch).iter_mut().zip(g).zip(xh) {
                    *d += scale * (m * gi - sum_g - xi * sum_gx);
                }
            }
        }
    }
}

/// 2×2 max pooling with stride 2. Returns output and flat argmax per output.
pub(super) fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub(super) fn maxpool2_backward(dout: &Tensor, arg: &[u32], dx: &mut Tensor) {
    let [n, c, _, _] = dout.shape();
    let mut i = 0;
    for s in 0..n {
        for ch in 0..c {
            let g = dout.plane(s, ch);
            let d = dx.plane_mut(s, ch);
            for gv in g {
                d[arg[i] as usize] += gv;
                i += 1;
            }
        }
    }
}

/// Per-axis source taps for ×2 bilinear upsampling (half-pixel centres).
fn upsample_taps(len: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub(super) fn upsample2_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * 2 * w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

pub(super) fn upsample2_backward(dout: &Tensor, dx: &mut Tensor) {
    let [n, c, h, w] = dx.shape();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    for s in 0..n {
        for ch in 0..c {
            let g = dout.plane(s, ch);
            let d = dx.plane_mut(s, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = g[oy * 2 * w + ox];
                    let (gt, gb) = (gv * (1.0 - fy), gv * fy);
                    d[y0 * w + x0] += gt * (1.0 - fx);
                    d[y0 * w + x1] += gt * fx;
                    d[y1 * w + x0] += gb * (1.0 - fx);
                    d[y1 * w + x1] += gb * fx;
                }
            }
        }
    }
}

/// Softmax over the channel axis at every pixel.
pub(super) fn softmax_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let os = out.sample_mut(s);
        for p in 0..hw {
            let max = (0..c)
                .map(|ch| xs[ch * hw + p])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (xs[ch * hw + p] - max).exp();
                os[ch * hw + p] = e;
                sum += e;
            }
            for ch in 0..c {
                os[ch * hw + p] /= sum;
            }
        }
    }
    out
}

pub(super) fn softmax_backward(y: &Tensor, dy: &Tensor, dx: &mut Tensor) {
    let [n, c, h, w] = y.shape();
    let hw = h * w;
    for s in 0..n {
        let ys = y.sample(s);
        let gs = dy.sample(s);
        let ds = dx.sample_mut(s);
        for p in 0..hw {
            let dot: f32 = (0..c).map(|ch| ys[ch * hw + p] * gs[ch * hw + p]).sum();
            for ch in 0..c {
                let i = ch * hw + p;
                ds[i] += ys[i] * (gs[i] - dot);
            }
        }
    }
}
